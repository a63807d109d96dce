//! Two-branch classifier: a convolutional extractor per image branch, batch
//! normalization, row-band sequence reshape, stacked Bi-LSTMs and a softmax
//! head.

mod extractor;
mod weights;

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use extractor::{
    DepthwiseS, ExtractorCache, ExtractorPlan, ExtractorRegistry, FeatureExtractor,
    FeatureExtractorSpec, Layer, PlainS, VggS,
};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights};

use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_infer, batchnorm_train, bilstm, bilstm_backward, dense,
    dense_backward, softmax, softmax_xent_class, BiLstmCache, LstmWeights, Params, Tensor,
};
use crate::sim::N_CLASSES;
use crate::util::derive_seed;

/// Parameter-name prefixes of the two image branches.
pub const AMP: &str = "amp";
pub const PHASE: &str = "phase";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConcatOrder {
    #[default]
    AmplitudeFirst,
    PhaseFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor: FeatureExtractorSpec,
    pub freeze_extractor: bool,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Sequence length fed to the first Bi-LSTM; `None` uses the extractor
    /// output height so each step is one row band.
    pub seq_steps: Option<usize>,
    pub n_classes: usize,
    pub concat_order: ConcatOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            extractor: FeatureExtractorSpec::default(),
            freeze_extractor: false,
            lstm_hidden: 64,
            lstm_layers: 2,
            seq_steps: None,
            n_classes: N_CLASSES,
            concat_order: ConcatOrder::AmplitudeFirst,
        }
    }
}

/// One sample: amplitude and phase images as `H x W x C` tensors in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub amp: Tensor,
    pub phase: Tensor,
}

/// Flattened extractor outputs of both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub amp: Vec<f64>,
    pub phase: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub correct: usize,
    /// Gradients of `loss` for every trainable tensor.
    pub grads: Params,
}

/// Per-sample representations before and after the temporal stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// Normalized, concatenated extractor features.
    pub stage1: Vec<f64>,
    /// Final Bi-LSTM state.
    pub stage2: Vec<f64>,
}

/// Partition of parameter names into optimizer-updated and fixed tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableMask {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

pub fn is_extractor_param(name: &str) -> bool {
    name.starts_with("amp.") || name.starts_with("phase.")
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn lstm_name(layer: usize, dir: &str, part: &str) -> String {
    format!("lstm{layer}.{dir}.{part}")
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn uniform_tensor(seed: u64, name: &str, dims: &[usize], bound: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name_stream(name)));
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
        .expect("dims match data")
}

struct HeadPass {
    probs: Vec<f64>,
    loss: f64,
    grads: Params,
    d_amp: Vec<f64>,
    d_phase: Vec<f64>,
}

struct TemporalOut {
    final_state: Vec<f64>,
    caches: Vec<(Tensor, BiLstmCache)>,
    last: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    plan: ExtractorPlan,
    params: Params,
    steps: usize,
}

impl ModelConfig {
    pub fn validate(&self, registry: &ExtractorRegistry) -> Result<ExtractorPlan> {
        let plan = ExtractorPlan::new(&self.extractor, registry)?;
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(Error::config("lstm_hidden and lstm_layers must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes must be at least 2"));
        }
        let steps = self.seq_steps.unwrap_or(plan.output_dims()[0]);
        if steps == 0 || plan.feature_len() % steps != 0 {
            return Err(Error::config(format!(
                "seq_steps {steps} does not divide the branch feature length {}",
                plan.feature_len()
            )));
        }
        Ok(plan)
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_registry(config, &ExtractorRegistry::default(), seed)
    }

    pub fn with_registry(config: ModelConfig, registry: &ExtractorRegistry, seed: u64) -> Result<Self> {
        let plan = config.validate(registry)?;
        let steps = config.seq_steps.unwrap_or(plan.output_dims()[0]);
        let mut model = Self {
            config,
            plan,
            params: Params::new(),
            steps,
        };
        for (name, dims) in model.expected_shapes() {
            let t = model.init_tensor(seed, &name, &dims);
            model.params.insert(name, t);
        }
        Ok(model)
    }

    /// Builds a model from a complete parameter set, checking every shape.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected = model.expected_shapes();
        for name in params.names() {
            if !expected.contains_key(name) {
                return Err(Error::shape(format!("unknown tensor `{name}`")));
            }
        }
        for (name, dims) in &expected {
            let t = params
                .get(name)
                .map_err(|_| Error::shape(format!("missing tensor `{name}`")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::shape(format!(
                    "tensor `{name}` has dims {:?}, config expects {dims:?}",
                    t.dims()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        Self::from_params(config, load_weights(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(path, &self.params)
    }

    /// Overwrites the tensors found in a WGT1 file (for example a pretrained
    /// extractor); tensors not in the file keep their values. Returns the
    /// imported names.
    pub fn import(&mut self, path: &Path) -> Result<Vec<String>> {
        self.import_params(load_weights(path)?)
    }

    pub fn import_params(&mut self, incoming: Params) -> Result<Vec<String>> {
        let expected = self.expected_shapes();
        for (name, t) in incoming.iter() {
            match expected.get(name) {
                None => return Err(Error::shape(format!("unknown tensor `{name}`"))),
                Some(dims) if dims.as_slice() != t.dims() => {
                    return Err(Error::shape(format!(
                        "tensor `{name}` has dims {:?}, config expects {dims:?}",
                        t.dims()
                    )))
                }
                Some(_) => {}
            }
        }
        let names: Vec<String> = incoming.names().map(str::to_string).collect();
        for (name, t) in incoming.iter() {
            self.params.insert(name, t.clone());
        }
        Ok(names)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &ExtractorPlan {
        &self.plan
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn seq_steps(&self) -> usize {
        self.steps
    }

    fn step_width(&self) -> usize {
        self.plan.feature_len() / self.steps
    }

    /// Name and dims of every tensor the configuration calls for.
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        for branch in [AMP, PHASE] {
            for (name, dims, _) in self.plan.parameter_shapes() {
                out.insert(format!("{branch}.{name}"), dims);
            }
            let l = self.plan.feature_len();
            for part in ["gamma", "beta", "running_mean", "running_var"] {
                out.insert(format!("bn_{branch}.{part}"), vec![l]);
            }
        }
        let h = self.config.lstm_hidden;
        for layer in 1..=self.config.lstm_layers {
            let d = if layer == 1 { 2 * self.step_width() } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                out.insert(lstm_name(layer, dir, "w"), vec![4 * h, d]);
                out.insert(lstm_name(layer, dir, "u"), vec![4 * h, h]);
                out.insert(lstm_name(layer, dir, "b"), vec![4 * h]);
            }
        }
        out.insert("head.w".into(), vec![2 * h, self.config.n_classes]);
        out.insert("head.b".into(), vec![self.config.n_classes]);
        out
    }

    fn init_tensor(&self, seed: u64, name: &str, dims: &[usize]) -> Tensor {
        let h = self.config.lstm_hidden;
        if let Some(rest) = name.strip_prefix("amp.").or_else(|| name.strip_prefix("phase.")) {
            if rest.ends_with(".bias") {
                return Tensor::zeros(dims);
            }
            let fan_in = self
                .plan
                .parameter_shapes()
                .into_iter()
                .find(|(n, _, _)| n == rest)
                .map_or(1, |(_, _, f)| f);
            return uniform_tensor(seed, name, dims, (6.0 / fan_in as f64).sqrt());
        }
        if name.ends_with(".gamma") || name.ends_with(".running_var") {
            return Tensor::filled(dims, 1.0);
        }
        if name.ends_with(".beta") || name.ends_with(".running_mean") || name == "head.b" {
            return Tensor::zeros(dims);
        }
        if name == "head.w" {
            return uniform_tensor(seed, name, dims, (6.0 / (2 * h) as f64).sqrt());
        }
        if name.ends_with(".b") {
            let mut b = Tensor::zeros(dims);
            b.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
            return b;
        }
        uniform_tensor(seed, name, dims, 1.0 / (h as f64).sqrt())
    }

    pub fn trainable_mask(&self) -> TrainableMask {
        let (trainable, frozen) = self.params.names().map(str::to_string).partition(|n| {
            !is_running_stat(n) && !(self.config.freeze_extractor && is_extractor_param(n))
        });
        TrainableMask { trainable, frozen }
    }

    pub fn set_freeze_extractor(&mut self, freeze: bool) {
        self.config.freeze_extractor = freeze;
    }

    fn check_pair(&self, pair: &ImagePair) -> Result<()> {
        let d = self.plan.input_dims();
        pair.amp.expect_dims("amplitude image", &d)?;
        pair.phase.expect_dims("phase image", &d)
    }

    /// Flattened extractor output of both branches (inference only; the
    /// extractor has no batch-dependent state).
    pub fn extract(&self, pair: &ImagePair) -> Result<Features> {
        self.check_pair(pair)?;
        Ok(Features {
            amp: self.plan.forward(&self.params, AMP, &pair.amp)?.into_data(),
            phase: self.plan.forward(&self.params, PHASE, &pair.phase)?.into_data(),
        })
    }

    pub fn extract_all(&self, pairs: &[&ImagePair]) -> Result<Vec<Features>> {
        pairs.par_iter().map(|p| self.extract(p)).collect()
    }

    /// Class probabilities for each pair, using running batch-norm statistics.
    pub fn predict(&self, pairs: &[&ImagePair]) -> Result<Vec<Vec<f64>>> {
        pairs
            .par_iter()
            .map(|p| self.predict_features(&self.extract(p)?))
            .collect()
    }

    pub fn predict_features(&self, features: &Features) -> Result<Vec<f64>> {
        let (a, p) = self.normalize_infer(features)?;
        let out = self.temporal_forward(&self.sequence(&a, &p)?)?;
        let logits = dense(
            &Tensor::from_vec(out.final_state),
            self.params.get("head.w")?,
            self.params.get("head.b")?,
        )?;
        Ok(softmax(logits.data()))
    }

    pub fn embed_features(&self, features: &Features) -> Result<Embedding> {
        let (a, p) = self.normalize_infer(features)?;
        let seq = self.sequence(&a, &p)?;
        let out = self.temporal_forward(&seq)?;
        Ok(Embedding {
            stage1: seq.into_data(),
            stage2: out.final_state,
        })
    }

    /// Replaces the batch-norm running statistics with the mean and (biased)
    /// variance of `feats`, the population the model was trained on.
    pub fn recalibrate_batchnorm(&mut self, feats: &[Features]) -> Result<()> {
        let l = self.plan.feature_len();
        if feats.is_empty() {
            return Err(Error::config("cannot recalibrate batch norm on no samples"));
        }
        for branch in [AMP, PHASE] {
            let mut mean = vec![0.0; l];
            for f in feats {
                let v = if branch == AMP { &f.amp } else { &f.phase };
                if v.len() != l {
                    return Err(Error::shape(format!("feature vector of length {}, expected {l}", v.len())));
                }
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
            }
            let n = feats.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; l];
            for f in feats {
                let v = if branch == AMP { &f.amp } else { &f.phase };
                for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                    *s += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n);
            self.params.insert(format!("bn_{branch}.running_mean"), Tensor::from_vec(mean));
            self.params.insert(format!("bn_{branch}.running_var"), Tensor::from_vec(var));
        }
        Ok(())
    }

    fn normalize_infer(&self, f: &Features) -> Result<(Vec<f64>, Vec<f64>)> {
        let l = self.plan.feature_len();
        let run = |branch: &str, v: &[f64]| -> Result<Vec<f64>> {
            let x = Tensor::new(vec![1, l], v.to_vec())?;
            let y = batchnorm_infer(
                &x,
                self.params.get(&format!("bn_{branch}.gamma"))?,
                self.params.get(&format!("bn_{branch}.beta"))?,
                self.params.get(&format!("bn_{branch}.running_mean"))?,
                self.params.get(&format!("bn_{branch}.running_var"))?,
            )?;
            Ok(y.into_data())
        };
        Ok((run(AMP, &f.amp)?, run(PHASE, &f.phase)?))
    }

    /// `T x 2c` sequence whose step `t` is the `t`-th chunk of each branch,
    /// in concat order.
    fn sequence(&self, a: &[f64], p: &[f64]) -> Result<Tensor> {
        let c = self.step_width();
        let (first, second) = match self.config.concat_order {
            ConcatOrder::AmplitudeFirst => (a, p),
            ConcatOrder::PhaseFirst => (p, a),
        };
        let mut data = Vec::with_capacity(2 * a.len());
        for t in 0..self.steps {
            data.extend_from_slice(&first[t * c..(t + 1) * c]);
            data.extend_from_slice(&second[t * c..(t + 1) * c]);
        }
        Tensor::new(vec![self.steps, 2 * c], data)
    }

    /// Inverse of [`Self::sequence`] for gradients: returns `(d_amp, d_phase)`.
    fn split_sequence(&self, d_seq: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let c = self.step_width();
        let mut first = Vec::with_capacity(self.steps * c);
        let mut second = Vec::with_capacity(self.steps * c);
        for row in d_seq.data().chunks_exact(2 * c) {
            first.extend_from_slice(&row[..c]);
            second.extend_from_slice(&row[c..]);
        }
        match self.config.concat_order {
            ConcatOrder::AmplitudeFirst => (first, second),
            ConcatOrder::PhaseFirst => (second, first),
        }
    }

    fn lstm_weights(&self, layer: usize, dir: &str) -> Result<LstmWeights<'_>> {
        LstmWeights::new(
            self.params.get(&lstm_name(layer, dir, "w"))?,
            self.params.get(&lstm_name(layer, dir, "u"))?,
            self.params.get(&lstm_name(layer, dir, "b"))?,
        )
    }

    fn temporal_forward(&self, seq: &Tensor) -> Result<TemporalOut> {
        let h = self.config.lstm_hidden;
        let mut x = seq.clone();
        let mut caches = Vec::with_capacity(self.config.lstm_layers);
        for layer in 1..=self.config.lstm_layers {
            let (y, cache) = bilstm(&x, &self.lstm_weights(layer, "fwd")?, &self.lstm_weights(layer, "bwd")?)?;
            caches.push((x, cache));
            x = y;
        }
        let t = self.steps;
        let mut final_state = x.data()[(t - 1) * 2 * h..(t - 1) * 2 * h + h].to_vec();
        final_state.extend_from_slice(&x.data()[h..2 * h]);
        Ok(TemporalOut {
            final_state,
            caches,
            last: x,
        })
    }

    /// Forward and backward of everything after batch normalization for one
    /// sample; gradients are scaled by `scale` (1/N for a batch mean).
    fn head_sample(&self, a: &[f64], p: &[f64], label: usize, scale: f64) -> Result<HeadPass> {
        let h = self.config.lstm_hidden;
        let seq = self.sequence(a, p)?;
        let out = self.temporal_forward(&seq)?;
        let state = Tensor::from_vec(out.final_state);
        let head_w = self.params.get("head.w")?;
        let logits = dense(&state, head_w, self.params.get("head.b")?)?;
        let (probs, loss) = softmax_xent_class(logits.data(), label)?;
        let mut dlogits: Vec<f64> = probs.iter().map(|v| v * scale).collect();
        dlogits[label] -= scale;
        let dg = dense_backward(&state, head_w, &Tensor::from_vec(dlogits))?;
        let mut grads = Params::new();
        grads.insert("head.w", dg.weight);
        grads.insert("head.b", dg.bias);

        let t = self.steps;
        let mut d_out = Tensor::zeros(out.last.dims());
        let ds = dg.input.data();
        d_out.data_mut()[(t - 1) * 2 * h..(t - 1) * 2 * h + h].copy_from_slice(&ds[..h]);
        d_out.data_mut()[h..2 * h].copy_from_slice(&ds[h..]);
        for (layer, (_, cache)) in out.caches.iter().enumerate().rev() {
            let layer = layer + 1;
            let (dx, gf, gb) = bilstm_backward(
                cache,
                &self.lstm_weights(layer, "fwd")?,
                &self.lstm_weights(layer, "bwd")?,
                &d_out,
            )?;
            for (dir, g) in [("fwd", gf), ("bwd", gb)] {
                grads.insert(lstm_name(layer, dir, "w"), g.w);
                grads.insert(lstm_name(layer, dir, "u"), g.u);
                grads.insert(lstm_name(layer, dir, "b"), g.b);
            }
            d_out = dx;
        }
        let (d_amp, d_phase) = self.split_sequence(&d_out);
        Ok(HeadPass {
            probs,
            loss,
            grads,
            d_amp,
            d_phase,
        })
    }

    /// One training-mode pass over a batch of images: updates batch-norm
    /// running statistics and returns the mean loss and its gradients.
    pub fn train_batch(&mut self, pairs: &[&ImagePair], labels: &[usize]) -> Result<BatchResult> {
        for p in pairs {
            self.check_pair(p)?;
        }
        if self.config.freeze_extractor {
            let feats = self.extract_all(pairs)?;
            let refs: Vec<&Features> = feats.iter().collect();
            return self.train_features(&refs, labels);
        }
        let this = &*self;
        let forward: Vec<(Features, ExtractorCache, ExtractorCache)> = pairs
            .par_iter()
            .map(|pair| {
                let (a, ca) = this.plan.forward_cached(&this.params, AMP, &pair.amp)?;
                let (p, cp) = this.plan.forward_cached(&this.params, PHASE, &pair.phase)?;
                Ok((
                    Features {
                        amp: a.into_data(),
                        phase: p.into_data(),
                    },
                    ca,
                    cp,
                ))
            })
            .collect::<Result<_>>()?;
        let feats: Vec<&Features> = forward.iter().map(|(f, _, _)| f).collect();
        let (mut result, d_feats) = self.train_head(&feats, labels)?;
        let this = &*self;
        let dims = this.plan.output_dims();
        let ext_grads: Vec<Params> = forward
            .par_iter()
            .zip(d_feats.par_iter())
            .map(|((_, ca, cp), d)| {
                let mut g = this.plan.backward(
                    &this.params,
                    AMP,
                    ca,
                    &Tensor::new(dims.to_vec(), d.amp.clone())?,
                )?;
                let gp = this.plan.backward(
                    &this.params,
                    PHASE,
                    cp,
                    &Tensor::new(dims.to_vec(), d.phase.clone())?,
                )?;
                g.accumulate_all(&gp)?;
                Ok(g)
            })
            .collect::<Result<_>>()?;
        for g in &ext_grads {
            result.grads.accumulate_all(g)?;
        }
        Ok(result)
    }

    /// Training-mode pass starting from precomputed extractor features; the
    /// returned gradients never include extractor tensors.
    pub fn train_features(&mut self, feats: &[&Features], labels: &[usize]) -> Result<BatchResult> {
        self.train_head(feats, labels).map(|(r, _)| r)
    }

    fn train_head(&mut self, feats: &[&Features], labels: &[usize]) -> Result<(BatchResult, Vec<Features>)> {
        let n = feats.len();
        if n < 2 || labels.len() != n {
            return Err(Error::shape(format!(
                "training batch needs at least 2 samples with one label each (got {n} samples, {} labels)",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(Error::config(format!("label {bad} out of range")));
        }
        let l = self.plan.feature_len();
        let mut normalized = Vec::new();
        let mut bn_caches = Vec::new();
        for branch in [AMP, PHASE] {
            let mut x = Vec::with_capacity(n * l);
            for f in feats {
                let v = if branch == AMP { &f.amp } else { &f.phase };
                if v.len() != l {
                    return Err(Error::shape(format!("feature vector of length {}, expected {l}", v.len())));
                }
                x.extend_from_slice(v);
            }
            let x = Tensor::new(vec![n, l], x)?;
            let gamma = self.params.get(&format!("bn_{branch}.gamma"))?.clone();
            let beta = self.params.get(&format!("bn_{branch}.beta"))?.clone();
            let mut rm = self.params.get(&format!("bn_{branch}.running_mean"))?.clone();
            let mut rv = self.params.get(&format!("bn_{branch}.running_var"))?.clone();
            let (y, cache) = batchnorm_train(&x, &gamma, &beta, &mut rm, &mut rv)?;
            self.params.insert(format!("bn_{branch}.running_mean"), rm);
            self.params.insert(format!("bn_{branch}.running_var"), rv);
            normalized.push(y);
            bn_caches.push(cache);
        }
        let this = &*self;
        let scale = 1.0 / n as f64;
        let passes: Vec<HeadPass> = (0..n)
            .into_par_iter()
            .map(|i| {
                let a = &normalized[0].data()[i * l..(i + 1) * l];
                let p = &normalized[1].data()[i * l..(i + 1) * l];
                this.head_sample(a, p, labels[i], scale)
            })
            .collect::<Result<_>>()?;
        let mut grads = Params::new();
        let mut loss = 0.0;
        let mut correct = 0;
        let mut d_amp = Vec::with_capacity(n * l);
        let mut d_phase = Vec::with_capacity(n * l);
        for (pass, &label) in passes.iter().zip(labels) {
            grads.accumulate_all(&pass.grads)?;
            loss += pass.loss;
            if argmax(&pass.probs) == label {
                correct += 1;
            }
            d_amp.extend_from_slice(&pass.d_amp);
            d_phase.extend_from_slice(&pass.d_phase);
        }
        let mut d_feats: Vec<Features> = Vec::with_capacity(n);
        let mut d_branch = Vec::new();
        for (k, (branch, d)) in [(AMP, d_amp), (PHASE, d_phase)].into_iter().enumerate() {
            let bg = batchnorm_backward(&bn_caches[k], &Tensor::new(vec![n, l], d)?)?;
            grads.insert(format!("bn_{branch}.gamma"), bg.gamma);
            grads.insert(format!("bn_{branch}.beta"), bg.beta);
            d_branch.push(bg.input.into_data());
        }
        for i in 0..n {
            d_feats.push(Features {
                amp: d_branch[0][i * l..(i + 1) * l].to_vec(),
                phase: d_branch[1][i * l..(i + 1) * l].to_vec(),
            });
        }
        Ok((
            BatchResult {
                loss: loss / n as f64,
                correct,
                grads,
            },
            d_feats,
        ))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{max_relative_error, numeric_gradient, EPSILON};
    use crate::nn::testutil::random_tensor;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            extractor: FeatureExtractorSpec {
                variant: "vgg_s".into(),
                input_height: 8,
                input_width: 8,
                input_channels: 3,
                blocks: Some(vec![vec![2], vec![3]]),
            },
            lstm_hidden: 3,
            n_classes: 4,
            ..ModelConfig::default()
        }
    }

    fn toy_pair(seed: u64) -> ImagePair {
        ImagePair {
            amp: random_tensor(&[8, 8, 3], seed),
            phase: random_tensor(&[8, 8, 3], seed + 1000),
        }
    }

    #[test]
    fn default_shapes() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        assert_eq!(m.plan().output_dims(), [8, 8, 16]);
        assert_eq!(m.seq_steps(), 8);
        let s = m.expected_shapes();
        assert_eq!(s["lstm1.fwd.w"], vec![256, 256]);
        assert_eq!(s["lstm2.bwd.w"], vec![256, 128]);
        assert_eq!(s["head.w"], vec![128, 15]);
        assert_eq!(s["bn_amp.gamma"], vec![1024]);
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_features() {
        let m = Model::new(toy_config(), 2).unwrap();
        let pair = ImagePair {
            amp: Tensor::zeros(&[8, 8, 3]),
            phase: Tensor::zeros(&[8, 8, 3]),
        };
        let f = m.extract(&pair).unwrap();
        assert!(f.amp.iter().chain(&f.phase).all(|&v| v == 0.0));
        let again = m.extract(&pair).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = Model::new(toy_config(), 3).unwrap();
        let pairs = [toy_pair(1), toy_pair(2)];
        for p in m.predict(&pairs.iter().collect::<Vec<_>>()).unwrap() {
            assert_eq!(p.len(), 4);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_temporal_weights_give_uniform_output() {
        let mut m = Model::new(toy_config(), 4).unwrap();
        let names: Vec<String> = m
            .params()
            .names()
            .filter(|n| n.starts_with("lstm") || n.starts_with("head"))
            .map(str::to_string)
            .collect();
        for n in names {
            m.params_mut().get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let p = m.predict(&[&toy_pair(5)]).unwrap();
        for v in &p[0] {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::new(toy_config(), 9).unwrap();
        let b = Model::new(toy_config(), 9).unwrap();
        let c = Model::new(toy_config(), 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let fb = a.params().get("lstm1.fwd.b").unwrap().data();
        assert_eq!(&fb[3..6], &[1.0, 1.0, 1.0]);
        assert!(fb[..3].iter().chain(&fb[6..]).all(|&v| v == 0.0));
    }

    #[test]
    fn mask_partitions_parameters() {
        let mut m = Model::new(toy_config(), 1).unwrap();
        for freeze in [false, true] {
            m.set_freeze_extractor(freeze);
            let mask = m.trainable_mask();
            assert_eq!(mask.trainable.len() + mask.frozen.len(), m.params().len());
            assert!(mask.trainable.iter().all(|n| !mask.frozen.contains(n)));
            assert_eq!(mask.trainable.iter().any(|n| is_extractor_param(n)), !freeze);
            assert!(mask.trainable.contains(&"bn_amp.gamma".to_string()));
            assert!(mask.frozen.contains(&"bn_amp.running_var".to_string()));
        }
    }

    #[test]
    fn gradients_cover_exactly_the_trainable_tensors() {
        let pairs = [toy_pair(1), toy_pair(2), toy_pair(3)];
        let refs: Vec<&ImagePair> = pairs.iter().collect();
        for freeze in [false, true] {
            let mut m = Model::new(ModelConfig {
                freeze_extractor: freeze,
                ..toy_config()
            }, 1)
            .unwrap();
            let r = m.train_batch(&refs, &[0, 1, 3]).unwrap();
            let got: Vec<String> = r.grads.names().map(str::to_string).collect();
            assert_eq!(got, m.trainable_mask().trainable);
        }
    }

    fn extractor_changed(a: &Model, b: &Model) -> bool {
        a.params()
            .iter()
            .filter(|(n, _)| is_extractor_param(n))
            .any(|(n, t)| t.data().iter().zip(b.params().get(n).unwrap().data()).any(|(x, y)| x.to_bits() != y.to_bits()))
    }

    #[test]
    fn adam_steps_respect_freezing() {
        let pairs = [toy_pair(4), toy_pair(5), toy_pair(6)];
        let refs: Vec<&ImagePair> = pairs.iter().collect();
        for (freeze, steps) in [(true, 10), (false, 1)] {
            let start = Model::new(ModelConfig { freeze_extractor: freeze, ..toy_config() }, 2).unwrap();
            let mut m = start.clone();
            let mut adam = crate::nn::Adam::new(Default::default());
            for _ in 0..steps {
                let grads = m.train_batch(&refs, &[1, 2, 0]).unwrap().grads;
                adam.step(m.params_mut(), &grads).unwrap();
            }
            assert_eq!(extractor_changed(&start, &m), !freeze);
            assert_ne!(start.params().get("head.w").unwrap(), m.params().get("head.w").unwrap());
        }
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let pairs = [toy_pair(11), toy_pair(12), toy_pair(13)];
        let refs: Vec<&ImagePair> = pairs.iter().collect();
        let labels = [2, 0, 3];
        let base = Model::new(toy_config(), 7).unwrap();
        let analytic = base.clone().train_batch(&refs, &labels).unwrap().grads;
        let mut worst = 0.0f64;
        for (name, g) in analytic.iter() {
            let x = base.params().get(name).unwrap().data().to_vec();
            let numeric = numeric_gradient(
                |v| {
                    let mut m = base.clone();
                    m.params_mut().get_mut(name).unwrap().data_mut().copy_from_slice(v);
                    m.train_batch(&refs, &labels).unwrap().loss
                },
                &x,
                EPSILON,
            );
            let err = max_relative_error(g.data(), &numeric);
            assert!(err < 1e-4, "{name}: {err}");
            worst = worst.max(err);
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn swapping_concat_order_with_permuted_weights_is_equivalent() {
        let cfg = toy_config();
        let a = Model::new(cfg.clone(), 5).unwrap();
        let mut b_params = a.params().clone();
        let c = a.plan().feature_len() / a.seq_steps();
        for dir in ["fwd", "bwd"] {
            let w = b_params.get_mut(&lstm_name(1, dir, "w")).unwrap();
            let cols = 2 * c;
            for row in w.data_mut().chunks_exact_mut(cols) {
                let (x, y) = row.split_at_mut(c);
                x.swap_with_slice(y);
            }
        }
        let b = Model::from_params(
            ModelConfig {
                concat_order: ConcatOrder::PhaseFirst,
                ..cfg
            },
            b_params,
        )
        .unwrap();
        let pair = toy_pair(21);
        let pa = a.predict(&[&pair]).unwrap();
        let pb = b.predict(&[&pair]).unwrap();
        for (x, y) in pa[0].iter().zip(&pb[0]) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn weights_round_trip_and_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wgt");
        let m = Model::new(toy_config(), 8).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(toy_config(), &path).unwrap();
        assert_eq!(back.params(), m.params());
        let pair = toy_pair(3);
        assert_eq!(m.predict(&[&pair]).unwrap(), back.predict(&[&pair]).unwrap());

        let mut ext = Params::new();
        for (n, t) in m.params().iter().filter(|(n, _)| is_extractor_param(n)) {
            ext.insert(n, t.clone());
        }
        let ext_path = dir.path().join("ext.wgt");
        save_weights(&ext_path, &ext).unwrap();
        let mut fresh = Model::new(toy_config(), 99).unwrap();
        let before = fresh.params().clone();
        let names = fresh.import(&ext_path).unwrap();
        assert_eq!(names.len(), ext.len());
        for (n, t) in fresh.params().iter() {
            let expected = if is_extractor_param(n) { m.params().get(n) } else { before.get(n) };
            assert_eq!(t, expected.unwrap(), "{n}");
        }
    }

    #[test]
    fn mismatched_weights_rejected_with_name() {
        let m = Model::new(toy_config(), 8).unwrap();
        let mut p = m.params().clone();
        p.insert("head.b", Tensor::zeros(&[5]));
        let msg = Model::from_params(toy_config(), p).unwrap_err().to_string();
        assert!(msg.contains("head.b"), "{msg}");
        let mut p = m.params().clone();
        p.insert("mystery", Tensor::zeros(&[1]));
        assert!(Model::from_params(toy_config(), p).unwrap_err().to_string().contains("mystery"));
        let mut p = m.params().clone();
        p.remove("lstm2.fwd.u");
        assert!(Model::from_params(toy_config(), p).unwrap_err().to_string().contains("lstm2.fwd.u"));
    }

    #[test]
    fn recalibrated_statistics_reproduce_batch_normalization() {
        let mut m = Model::new(toy_config(), 6).unwrap();
        let pairs: Vec<ImagePair> = (0..5).map(|s| toy_pair(40 + s)).collect();
        let feats = m.extract_all(&pairs.iter().collect::<Vec<_>>()).unwrap();
        m.recalibrate_batchnorm(&feats).unwrap();
        let l = m.plan().feature_len();
        let x = Tensor::new(vec![5, l], feats.iter().flat_map(|f| f.amp.clone()).collect()).unwrap();
        let p = m.params();
        let (g, b) = (p.get("bn_amp.gamma").unwrap(), p.get("bn_amp.beta").unwrap());
        let (mut rm, mut rv) = (Tensor::zeros(&[l]), Tensor::zeros(&[l]));
        let (train_mode, _) = batchnorm_train(&x, g, b, &mut rm, &mut rv).unwrap();
        let infer = batchnorm_infer(
            &x,
            g,
            b,
            p.get("bn_amp.running_mean").unwrap(),
            p.get("bn_amp.running_var").unwrap(),
        )
        .unwrap();
        for (a, e) in train_mode.data().iter().zip(infer.data()) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(m.recalibrate_batchnorm(&[]).is_err());
    }

    #[test]
    fn batch_of_one_rejected_in_training() {
        let mut m = Model::new(toy_config(), 1).unwrap();
        assert!(m.train_batch(&[&toy_pair(1)], &[0]).is_err());
        assert!(m.train_batch(&[&toy_pair(1), &toy_pair(2)], &[0, 9]).is_err());
    }

    #[test]
    fn seq_steps_must_divide_features() {
        let cfg = ModelConfig {
            seq_steps: Some(5),
            ..toy_config()
        };
        assert!(Model::new(cfg, 1).is_err());
        let cfg = ModelConfig {
            seq_steps: Some(6),
            ..toy_config()
        };
        assert_eq!(Model::new(cfg, 1).unwrap().seq_steps(), 6);
    }
}
