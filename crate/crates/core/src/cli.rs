//! Command-line front end. `run` parses arguments, executes one subcommand
//! and maps failures to exit codes with a one-line JSON error on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_dataset, colorize, diff_amplitude_file, load_base_dir, load_tsm, render_scalar, save_png,
    save_tsm, wrapped_phase_file, AugmentSpec, Colormap, DatasetManifest, DatasetSpec, RenderSpec,
};
use crate::demod::{process, BandpassSpec};
use crate::error::{Error, Result};
use crate::harness::{
    embed_stage, evaluate, export_embedding, export_run, export_runs, load_labeled, repeated_runs,
    save_report, single_run, confusion_plot, LabeledSet, PlotConfig, Stage, TrainConfig, TsneConfig,
};
use crate::model::{is_extractor_param, load_weights, Model, ModelConfig};
use crate::nn::Params;
use crate::sim::{build_scatterers, synthesize, EventLabel, SimConfig};
use crate::util::{read_json, write_json};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_FILE: i32 = 3;
pub const EXIT_INVALID_CONFIG: i32 = 4;

pub const THREADS_ENV: &str = "DAS_FORGE_THREADS";

const WEIGHTS_FILE: &str = "weights.wgt";
const MODEL_CONFIG_FILE: &str = "model.json";
const SPLIT_FILE: &str = "split.json";

pub fn raw_file(class_index: usize) -> String {
    format!("class_{class_index:02}_raw.tsm")
}

#[derive(Debug, Parser)]
#[command(name = "das-forge", version, about = "Phase-sensitive OTDR simulation, demodulation and vibration classification")]
pub struct Cli {
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible output. Falls back to DAS_FORGE_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON config with optional sections: seed, sim, dataset, model, train, tsne, plot.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// -v for info, -vv for debug logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one raw recording per class.
    Simulate(SimulateArgs),
    /// Demodulate raw recordings into differential amplitude and wrapped phase.
    Demod(DemodArgs),
    /// Dataset operations.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train one model on a seeded split of a dataset.
    Train(TrainArgs),
    /// Evaluate a trained model.
    Eval(EvalArgs),
    /// Repeated seeded trainings and their accuracy distribution.
    Runs(RunsArgs),
    /// t-SNE embedding of stage-1 or stage-2 representations.
    Embed(EmbedArgs),
    /// Render a TSM matrix as a PNG image.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Additive noise level in dB; omitted means the config value.
    #[arg(long)]
    pub snr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DemodArgs {
    /// Raw TSM file.
    #[arg(long = "in", conflicts_with = "in_dir", required_unless_present = "in_dir", requires_all = ["out_amp", "out_phase"])]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out_amp: Option<PathBuf>,
    #[arg(long)]
    pub out_phase: Option<PathBuf>,
    /// Directory of class_XX_raw.tsm files from `simulate`.
    #[arg(long, requires = "out_dir")]
    pub in_dir: Option<PathBuf>,
    /// Receives class_XX_damp.tsm and class_XX_wphase.tsm.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub band_center: Option<f64>,
    #[arg(long)]
    pub band_width: Option<f64>,
    #[arg(long)]
    pub sample_rate: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Augment, render and index demodulated base recordings.
    Build(DatasetBuildArgs),
}

#[derive(Debug, Args)]
pub struct DatasetBuildArgs {
    #[arg(long)]
    pub base_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub offsets: Option<usize>,
    #[arg(long, overrides_with = "no_flip")]
    pub flip: bool,
    #[arg(long, overrides_with = "flip")]
    pub no_flip: bool,
    #[arg(long)]
    pub img_size: Option<usize>,
    #[arg(long, value_enum)]
    pub colormap: Option<ColormapArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ColormapArg {
    Grayscale3,
    Lut256,
}

impl From<ColormapArg> for Colormap {
    fn from(c: ColormapArg) -> Self {
        match c {
            ColormapArg::Grayscale3 => Colormap::Grayscale3,
            ColormapArg::Lut256 => Colormap::Lut256,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Feature-extractor variant (vgg_s, plain_s, depthwise_s).
    #[arg(long)]
    pub extractor: Option<String>,
    /// Keep the extractor weights fixed.
    #[arg(long)]
    pub freeze: bool,
    /// WGT1 file whose extractor tensors replace the initial ones.
    #[arg(long)]
    pub import: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which derived split/initialization/shuffle seeds to use.
    #[arg(long, default_value_t = 0)]
    pub run_index: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory of `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluate every sample instead of the held-out split.
    #[arg(long)]
    pub all: bool,
    /// Defaults to the model directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, value_enum)]
    pub colormap: Option<ColormapArg>,
}

/// Contents of the `--config` document. Every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for dataset relocation and t-SNE.
    pub seed: u64,
    pub sim: Option<SimConfig>,
    /// When absent the event window is scaled to the base matrix width.
    pub dataset: Option<DatasetSpec>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tsne: TsneConfig,
    pub plot: PlotConfig,
}

impl PipelineConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => read_json(p).map_err(|e| match e {
                Error::Json { path, source } => Error::config(format!("{}: {source}", path.display())),
                other => other,
            }),
        }
    }

    fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.train.seed = s;
            if let Some(sim) = self.sim.as_mut() {
                sim.seed = s;
            }
        }
        self
    }

    fn sim_config(&self, preset: Option<&str>, seed: Option<u64>) -> Result<SimConfig> {
        let mut cfg = match (&self.sim, preset) {
            (Some(c), _) => c.clone(),
            (None, Some(p)) => SimConfig::preset(p)?,
            (None, None) => SimConfig::desk(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

/// Process exit code for a library error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingFile(_) => EXIT_MISSING_FILE,
        Error::InvalidConfig(_) => EXIT_INVALID_CONFIG,
        _ => EXIT_OTHER,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::MissingFile(_) => "missing_file",
        Error::InvalidConfig(_) => "invalid_config",
        Error::Shape(_) => "shape",
        Error::Format { .. } => "format",
        Error::NonFinite { .. } => "non_finite",
        Error::Io { .. } => "io",
        Error::Json { .. } => "json",
        Error::Image { .. } => "image",
    }
}

fn report_error(kind: &str, code: i32, message: &str) {
    let line = serde_json::json!({ "error": kind, "code": code, "message": message });
    eprintln!("{line}");
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            report_error("usage", EXIT_USAGE, first);
            return EXIT_USAGE;
        }
    };
    init_logging(cli.verbose);
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            report_error(error_kind(&e), code, &e.to_string());
            code
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::config(format!("{THREADS_ENV}={v} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Error::config("--threads must be at least 1"));
    }
    Ok(n)
}

fn execute(cli: Cli) -> Result<()> {
    let threads = thread_count(cli.threads)?;
    if let Some(p) = &cli.config {
        require(p)?;
    }
    let config = PipelineConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    let work = move || dispatch(cli.command, &config, cli.seed);
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("cannot start {n} threads: {e}")))?
            .install(work),
        None => work(),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dispatch(command: Command, config: &PipelineConfig, seed: Option<u64>) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(&a, config, seed),
        Command::Demod(a) => demod(&a, config),
        Command::Dataset(DatasetCommand::Build(a)) => dataset_build(&a, config),
        Command::Train(a) => train_cmd(&a, config),
        Command::Eval(a) => eval_cmd(&a),
        Command::Runs(a) => runs_cmd(&a, config),
        Command::Embed(a) => embed_cmd(&a, config),
        Command::Render(a) => render_cmd(&a, config),
    }
}

fn simulate(a: &SimulateArgs, config: &PipelineConfig, seed: Option<u64>) -> Result<()> {
    let mut sim = config.sim_config(Some(&a.preset), seed)?;
    if a.snr.is_some() {
        sim.snr_db = a.snr;
    }
    sim.validate()?;
    create_dir(&a.out)?;
    let field = build_scatterers(&sim)?;
    for label in EventLabel::all() {
        let raw = synthesize(&sim, &field, Some(label))?;
        let path = a.out.join(raw_file(label.class_index()));
        save_tsm(&path, &raw.data)?;
        info!("wrote {}", path.display());
    }
    write_json(&a.out.join("sim_config.json"), &sim)
}

fn demod(a: &DemodArgs, config: &PipelineConfig) -> Result<()> {
    let mut spec = BandpassSpec::for_config(&config.sim_config(None, None)?);
    if let Some(v) = a.band_center {
        spec.center_hz = v;
    }
    if let Some(v) = a.band_width {
        spec.bandwidth_hz = v;
    }
    if let Some(v) = a.sample_rate {
        spec.sample_rate_hz = v;
    }
    spec.validate()?;
    let one = |input: &Path, amp: &Path, phase: &Path| -> Result<()> {
        let ts = process(&load_tsm(input)?, &spec)?;
        save_tsm(amp, &ts.diff_amplitude)?;
        save_tsm(phase, &ts.wrapped_phase)
    };
    match (&a.input, &a.in_dir) {
        (Some(input), _) => {
            require(input)?;
            let (Some(amp), Some(phase)) = (&a.out_amp, &a.out_phase) else {
                return Err(Error::config("--in needs --out-amp and --out-phase"));
            };
            one(input, amp, phase)
        }
        (None, Some(dir)) => {
            let out = a.out_dir.as_deref().ok_or_else(|| Error::config("--in-dir needs --out-dir"))?;
            let inputs: Vec<PathBuf> = EventLabel::all().map(|l| dir.join(raw_file(l.class_index()))).collect();
            inputs.iter().try_for_each(|p| require(p))?;
            create_dir(out)?;
            for (label, input) in EventLabel::all().zip(&inputs) {
                let c = label.class_index();
                one(input, &out.join(diff_amplitude_file(c)), &out.join(wrapped_phase_file(c)))?;
                info!("demodulated {}", input.display());
            }
            Ok(())
        }
        (None, None) => Err(Error::config("demod needs --in or --in-dir")),
    }
}

fn dataset_build(a: &DatasetBuildArgs, config: &PipelineConfig) -> Result<()> {
    require(&a.base_dir)?;
    let bases = load_base_dir(&a.base_dir)?;
    let mut spec = config.dataset.unwrap_or_else(|| DatasetSpec {
        augment: AugmentSpec::for_columns(bases[0].diff_amplitude.cols()),
        ..DatasetSpec::default()
    });
    if let Some(n) = a.offsets {
        spec.augment.offsets = n;
    }
    if a.flip {
        spec.augment.flip = true;
    }
    if a.no_flip {
        spec.augment.flip = false;
    }
    if let Some(s) = a.img_size {
        spec.render.out_height = s;
        spec.render.out_width = s;
    }
    if let Some(c) = a.colormap {
        spec.render.colormap = c.into();
    }
    let m = build_dataset(&bases, &spec, &a.out_dir, config.seed)?;
    info!("built {} samples in {}", m.len(), a.out_dir.display());
    Ok(())
}

fn model_config(config: &PipelineConfig, args: &ModelArgs) -> ModelConfig {
    let mut mc = config.model.clone();
    if let Some(v) = &args.extractor {
        mc.extractor.variant = v.clone();
    }
    if args.freeze {
        mc.freeze_extractor = true;
    }
    mc
}

fn train_config(config: &PipelineConfig, args: &ModelArgs) -> TrainConfig {
    let mut tc = config.train.clone();
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    tc
}

fn pretrained(args: &ModelArgs) -> Result<Option<Params>> {
    let Some(path) = &args.import else {
        return Ok(None);
    };
    require(path)?;
    let mut out = Params::new();
    for (name, t) in load_weights(path)?.iter().filter(|(n, _)| is_extractor_param(n)) {
        out.insert(name, t.clone());
    }
    if out.is_empty() {
        return Err(Error::config(format!("{} holds no extractor tensors", path.display())));
    }
    Ok(Some(out))
}

fn load_dataset(dir: &Path) -> Result<(DatasetManifest, LabeledSet)> {
    require(dir)?;
    let m = DatasetManifest::load(dir)?;
    let data = load_labeled(&m)?;
    Ok((m, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitRecord {
    train: Vec<String>,
    test: Vec<String>,
}

fn train_cmd(a: &TrainArgs, config: &PipelineConfig) -> Result<()> {
    let mc = model_config(config, &a.model);
    let tc = train_config(config, &a.model);
    mc.validate(&Default::default())?;
    tc.validate()?;
    let pre = pretrained(&a.model)?;
    let (m, data) = load_dataset(&a.dataset)?;
    let run = single_run(&m, &data, &mc, &tc, a.run_index, pre.as_ref())?;
    create_dir(&a.out)?;
    run.model.save(&a.out.join(WEIGHTS_FILE))?;
    write_json(&a.out.join(MODEL_CONFIG_FILE), run.model.config())?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| m.samples[i].id.clone()).collect();
    write_json(
        &a.out.join(SPLIT_FILE),
        &SplitRecord {
            train: ids(&run.train_indices),
            test: ids(&run.test_indices),
        },
    )?;
    export_run(&a.out, "run", &run.report, &config.plot)?;
    info!("training took {:.1} s", run.report.wall_time_s);
    Ok(())
}

fn load_trained(dir: &Path) -> Result<Model> {
    let weights = dir.join(WEIGHTS_FILE);
    let cfg = dir.join(MODEL_CONFIG_FILE);
    require(&weights)?;
    require(&cfg)?;
    let mc: ModelConfig = read_json(&cfg)?;
    Model::load(mc, &weights)
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    require(&a.model)?;
    let model = load_trained(&a.model)?;
    let (m, data) = load_dataset(&a.dataset)?;
    let set = if a.all {
        data
    } else {
        let split_path = a.model.join(SPLIT_FILE);
        require(&split_path)?;
        let split: SplitRecord = read_json(&split_path)?;
        let idx = split
            .test
            .iter()
            .map(|id| {
                m.samples
                    .iter()
                    .position(|s| &s.id == id)
                    .ok_or_else(|| Error::config(format!("sample {id} of the split is not in the dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        data.subset(&idx)
    };
    let eval = evaluate(&model, &set)?;
    let out = a.out.as_deref().unwrap_or(&a.model);
    create_dir(out)?;
    save_report(&out.join("eval.json"), "eval", &eval)?;
    save_png(&out.join("eval_confusion.png"), &confusion_plot(&eval.confusion, &PlotConfig::default()))?;
    println!("accuracy {:.4} on {} samples", eval.accuracy, eval.confusion.total());
    Ok(())
}

fn runs_cmd(a: &RunsArgs, config: &PipelineConfig) -> Result<()> {
    let mc = model_config(config, &a.model);
    let mut tc = train_config(config, &a.model);
    if let Some(n) = a.n {
        tc.n_runs = n;
    }
    mc.validate(&Default::default())?;
    tc.validate()?;
    let pre = pretrained(&a.model)?;
    let (m, data) = load_dataset(&a.dataset)?;
    let summary = repeated_runs(&m, &data, &mc, &tc, pre.as_ref())?;
    export_runs(&a.out, &summary, &config.plot)?;
    for (i, r) in summary.runs.iter().enumerate() {
        export_run(&a.out, &format!("run_{i:02}"), r, &config.plot)?;
    }
    let s = summary.stats;
    println!(
        "accuracy min {:.4} q1 {:.4} median {:.4} q3 {:.4} max {:.4} mean {:.4}",
        s.min, s.q1, s.median, s.q3, s.max, s.mean
    );
    Ok(())
}

fn embed_cmd(a: &EmbedArgs, config: &PipelineConfig) -> Result<()> {
    let stage = Stage::from_number(a.stage)?;
    require(&a.model)?;
    let model = load_trained(&a.model)?;
    let (_, data) = load_dataset(&a.dataset)?;
    let tsne: TsneConfig = config.tsne;
    let set = embed_stage(&model, &data, stage, &tsne, config.seed)?;
    export_embedding(&a.out, &set, &config.plot)?;
    println!("stage {} nearest-neighbour agreement {:.4}", a.stage, set.nn_agreement);
    Ok(())
}

fn render_cmd(a: &RenderArgs, config: &PipelineConfig) -> Result<()> {
    require(&a.input)?;
    let mut spec = config.dataset.map(|d| d.render).unwrap_or_else(RenderSpec::default);
    if let Some(s) = a.size {
        spec.out_height = s;
        spec.out_width = s;
    }
    if let Some(c) = a.colormap {
        spec.colormap = c.into();
    }
    spec.validate()?;
    let m = load_tsm(&a.input)?;
    let img = colorize(&render_scalar(&m, &spec)?, spec.colormap);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_png(&a.out, &img).inspect_err(|_| warn!("could not write {}", a.out.display()))
}
