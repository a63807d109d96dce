use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use super::{ideal_phase_waveform, EventLabel, PulseShape, ScattererField, SimConfig, Vibration};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::util::derive_seed;

const NOISE_STREAM: u64 = 2;
const DRIFT_STREAM: u64 = 3;
/// Gaussian pulse envelopes are truncated at this many standard deviations.
const GAUSS_SUPPORT_SIGMAS: f64 = 4.0;

/// Simulated photodetector samples: one row per pulse, one column per fast-time sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTraceMatrix {
    pub data: Matrix,
    pub config: SimConfig,
    pub label: Option<EventLabel>,
}

/// Pulse weight as a function of `x = z_sample - z_scatterer`.
#[derive(Debug, Clone, Copy)]
enum Envelope {
    Rect { length: f64 },
    Gaussian { center: f64, sigma: f64 },
}

impl Envelope {
    fn new(config: &SimConfig) -> Self {
        let length = config.pulse_length_m();
        match config.pulse_shape {
            PulseShape::Rect => Envelope::Rect { length },
            PulseShape::Gaussian => Envelope::Gaussian {
                center: length / 2.0,
                sigma: length / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt()),
            },
        }
    }

    /// Closed interval of `x` outside of which the weight is zero.
    fn support(self) -> (f64, f64) {
        match self {
            Envelope::Rect { length } => (0.0, length),
            Envelope::Gaussian { center, sigma } => (
                center - GAUSS_SUPPORT_SIGMAS * sigma,
                center + GAUSS_SUPPORT_SIGMAS * sigma,
            ),
        }
    }

    fn weight(self, x: f64) -> f64 {
        match self {
            // scatterer counts when z_i - W < z_k <= z_i
            Envelope::Rect { length } => {
                if x >= 0.0 && x < length {
                    1.0
                } else {
                    0.0
                }
            }
            Envelope::Gaussian { center, sigma } => {
                let d = x - center;
                if d.abs() > GAUSS_SUPPORT_SIGMAS * sigma {
                    0.0
                } else {
                    (-0.5 * (d / sigma).powi(2)).exp()
                }
            }
        }
    }
}

/// Weights of one scatterer onto a contiguous run of samples.
struct Footprint {
    first_sample: usize,
    weights: Vec<f64>,
}

fn footprint(z: f64, envelope: Envelope, spacing: f64, n_samples: usize) -> Footprint {
    let (lo, hi) = envelope.support();
    let first = ((z + lo) / spacing).floor().max(0.0) as usize;
    let last = (((z + hi) / spacing).ceil().max(0.0) as usize).min(n_samples.saturating_sub(1));
    let mut weights = Vec::new();
    let mut first_sample = first;
    let mut started = false;
    for i in first..=last {
        let w = envelope.weight(i as f64 * spacing - z);
        if !started {
            if w == 0.0 {
                continue;
            }
            started = true;
            first_sample = i;
        }
        weights.push(w);
    }
    while weights.last() == Some(&0.0) {
        weights.pop();
    }
    Footprint {
        first_sample,
        weights,
    }
}

fn ramp(z: f64, config: &SimConfig) -> f64 {
    ((z - config.pzt_start_m) / (config.pzt_end_m - config.pzt_start_m)).clamp(0.0, 1.0)
}

fn check_field(config: &SimConfig, field: &ScattererField) -> Result<()> {
    if field.n_cells() != config.n_samples()
        || field.per_cell() != config.scatterers_per_cell
        || field.cell_length_m() != config.sample_spacing_m
    {
        return Err(Error::config(format!(
            "scatterer field ({} cells x {} @ {} m) does not match config ({} cells x {} @ {} m)",
            field.n_cells(),
            field.per_cell(),
            field.cell_length_m(),
            config.n_samples(),
            config.scatterers_per_cell,
            config.sample_spacing_m
        )));
    }
    Ok(())
}

/// Synthesizes a recording for one of the labelled vibration classes, or a
/// quiet fiber when `label` is `None`.
pub fn synthesize(
    config: &SimConfig,
    field: &ScattererField,
    label: Option<EventLabel>,
) -> Result<RawTraceMatrix> {
    let stream = label.map_or(0, |l| l.class_index() as u64 + 1);
    let data = synthesize_vibration(config, field, label.map(EventLabel::vibration), stream)?;
    Ok(RawTraceMatrix {
        data,
        config: config.clone(),
        label,
    })
}

/// Synthesizes the beat-signal matrix for an arbitrary sinusoidal drive.
/// `noise_stream` separates the noise and laser-drift draws of recordings that
/// share one config seed.
pub fn synthesize_vibration(
    config: &SimConfig,
    field: &ScattererField,
    event: Option<Vibration>,
    noise_stream: u64,
) -> Result<Matrix> {
    config.validate()?;
    check_field(config, field)?;
    if let Some(ev) = event {
        if !(ev.frequency_hz.is_finite() && ev.frequency_hz.abs() < config.prf_hz / 2.0) {
            return Err(Error::config(format!(
                "event frequency {} Hz aliases at PRF {} Hz (slow-time Nyquist {} Hz)",
                ev.frequency_hz,
                config.prf_hz,
                config.prf_hz / 2.0
            )));
        }
    }

    let n = config.n_samples();
    let spacing = config.sample_spacing_m;
    let envelope = Envelope::new(config);
    let wavenumber = 4.0 * std::f64::consts::PI * config.group_index / config.wavelength_m;

    // Static (pre-PZT) and fully strained (post-PZT) scatterers collapse into
    // two fixed fields; only scatterers inside the PZT section need per-trace work.
    let mut field_static = vec![Complex64::new(0.0, 0.0); n];
    let mut field_strained = vec![Complex64::new(0.0, 0.0); n];
    let mut ramped: Vec<(Complex64, f64, Footprint)> = Vec::new();
    for (k, s) in field.scatterers().iter().enumerate() {
        let z = field.position_m(k);
        let round_trip = (wavenumber * z).rem_euclid(std::f64::consts::TAU);
        let base = Complex64::from_polar(s.reflectivity, s.intrinsic_phase + round_trip);
        let fp = footprint(z, envelope, spacing, n);
        let r = ramp(z, config);
        if r == 0.0 || r == 1.0 {
            let target = if r == 0.0 {
                &mut field_static
            } else {
                &mut field_strained
            };
            for (j, &w) in fp.weights.iter().enumerate() {
                target[fp.first_sample + j] += base * w;
            }
        } else {
            ramped.push((base, r, fp));
        }
    }

    let carrier: Vec<Complex64> = (0..n)
        .map(|i| {
            let cycles = (config.f_aom_hz * i as f64 / config.fast_rate_hz).fract();
            Complex64::from_polar(1.0, std::f64::consts::TAU * cycles)
        })
        .collect();
    let event_phase = match event {
        Some(ev) => ideal_phase_waveform(ev, config),
        None => vec![0.0; config.n_traces],
    };
    let drift_seed = derive_seed(derive_seed(config.seed, DRIFT_STREAM), noise_stream);
    let laser_offset = |m: usize| -> f64 {
        if config.laser_phase_drift {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(drift_seed, m as u64));
            rng.random::<f64>() * std::f64::consts::TAU
        } else {
            0.0
        }
    };

    let rows: Vec<Vec<f64>> = (0..config.n_traces)
        .into_par_iter()
        .map(|m| {
            let delta = event_phase[m];
            let rot = Complex64::from_polar(1.0, delta);
            let mut e: Vec<Complex64> = field_static
                .iter()
                .zip(&field_strained)
                .map(|(a, b)| a + b * rot)
                .collect();
            for (base, r, fp) in &ramped {
                let c = base * Complex64::from_polar(1.0, delta * r);
                for (j, &w) in fp.weights.iter().enumerate() {
                    e[fp.first_sample + j] += c * w;
                }
            }
            let lo = Complex64::from_polar(1.0, laser_offset(m));
            e.iter()
                .zip(&carrier)
                .map(|(field, carrier)| (field * carrier * lo).re)
                .collect()
        })
        .collect();
    let mut data = Matrix::from_rows(rows)?;

    if let Some(snr_db) = config.snr_db.filter(|s| s.is_finite()) {
        let power = data.data().iter().map(|v| v * v).sum::<f64>() / data.data().len() as f64;
        let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        let noise_seed = derive_seed(derive_seed(config.seed, NOISE_STREAM), noise_stream);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
        let cols = data.cols();
        data.data_mut()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(m, row)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, m as u64));
                for v in row {
                    *v += normal.sample(&mut rng);
                }
            });
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::build_scatterers;
    use crate::util::dft_magnitude;

    fn short_config() -> SimConfig {
        SimConfig {
            fiber_length_m: 60.0,
            pzt_start_m: 20.0,
            pzt_end_m: 24.0,
            n_traces: 16,
            seed: 3,
            ..SimConfig::desk()
        }
    }

    #[test]
    fn quiet_fiber_rows_identical() {
        for shape in [PulseShape::Gaussian, PulseShape::Rect] {
            let cfg = SimConfig {
                pulse_shape: shape,
                ..short_config()
            };
            let field = build_scatterers(&cfg).unwrap();
            let raw = synthesize(&cfg, &field, None).unwrap();
            assert_eq!(raw.data.shape(), (16, 600));
            let first = raw.data.row(0).to_vec();
            for m in 1..raw.data.rows() {
                assert_eq!(raw.data.row(m), &first[..]);
            }
            assert!(raw.data.is_finite());
        }
    }

    #[test]
    fn deterministic_for_same_seed() {
        let cfg = SimConfig {
            snr_db: Some(20.0),
            laser_phase_drift: true,
            ..short_config()
        };
        let field = build_scatterers(&cfg).unwrap();
        let label = EventLabel::new(2.0, 500.0).unwrap();
        let a = synthesize(&cfg, &field, Some(label)).unwrap();
        let b = synthesize(&cfg, &field, Some(label)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aliasing_event_rejected() {
        let cfg = SimConfig {
            prf_hz: 1500.0,
            ..short_config()
        };
        let field = build_scatterers(&cfg).unwrap();
        let label = EventLabel::new(1.0, 1000.0).unwrap();
        assert!(synthesize(&cfg, &field, Some(label)).is_err());
    }

    #[test]
    fn mismatched_field_rejected() {
        let cfg = short_config();
        let field = build_scatterers(&cfg).unwrap();
        let other = SimConfig {
            fiber_length_m: 50.0,
            ..cfg
        };
        assert!(synthesize(&other, &field, None).is_err());
    }

    #[test]
    fn rect_window_matches_direct_sum() {
        // Direct evaluation of the windowed scatterer sum for a quiet fiber.
        let cfg = SimConfig {
            pulse_shape: PulseShape::Rect,
            n_traces: 2,
            ..short_config()
        };
        let field = build_scatterers(&cfg).unwrap();
        let raw = synthesize(&cfg, &field, None).unwrap();
        let w = cfg.pulse_length_m();
        let kz = 4.0 * std::f64::consts::PI * cfg.group_index / cfg.wavelength_m;
        for i in [0usize, 57, 101, 333, 599] {
            let zi = i as f64 * cfg.sample_spacing_m;
            let mut e = Complex64::new(0.0, 0.0);
            for (k, s) in field.scatterers().iter().enumerate() {
                let zk = field.position_m(k);
                if zi - w < zk && zk <= zi {
                    e += Complex64::from_polar(s.reflectivity, s.intrinsic_phase + kz * zk);
                }
            }
            let t = i as f64 / cfg.fast_rate_hz;
            let expected = (e * Complex64::from_polar(1.0, std::f64::consts::TAU * cfg.f_aom_hz * t)).re;
            let got = raw.data.get(0, i);
            assert!((got - expected).abs() < 1e-6 * (1.0 + expected.abs()), "{i}: {got} vs {expected}");
        }
    }

    #[test]
    fn carrier_band_holds_most_energy() {
        let cfg = SimConfig {
            n_traces: 2,
            fiber_length_m: 200.0,
            pzt_start_m: 100.0,
            pzt_end_m: 104.0,
            ..SimConfig::desk()
        };
        let field = build_scatterers(&cfg).unwrap();
        let raw = synthesize(&cfg, &field, None).unwrap();
        let row = raw.data.row(0);
        let mag = dft_magnitude(row);
        let n = row.len();
        let bw = 2.0 / cfg.pulse_width_s;
        let (lo, hi) = (cfg.f_aom_hz - bw / 2.0, cfg.f_aom_hz + bw / 2.0);
        let mut inside = 0.0;
        let mut total = 0.0;
        for (k, m) in mag.iter().enumerate() {
            let f = if k <= n / 2 { k } else { n - k } as f64 * cfg.fast_rate_hz / n as f64;
            total += m * m;
            if f >= lo && f <= hi {
                inside += m * m;
            }
        }
        assert!(inside / total >= 0.99, "{}", inside / total);
    }

    #[test]
    fn snr_sets_noise_power() {
        let clean_cfg = short_config();
        let noisy_cfg = SimConfig {
            snr_db: Some(10.0),
            ..short_config()
        };
        let field = build_scatterers(&clean_cfg).unwrap();
        let clean = synthesize(&clean_cfg, &field, None).unwrap();
        let noisy = synthesize(&noisy_cfg, &field, None).unwrap();
        let p_sig = clean.data.data().iter().map(|v| v * v).sum::<f64>();
        let p_noise = clean
            .data
            .data()
            .iter()
            .zip(noisy.data.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
        let snr = 10.0 * (p_sig / p_noise).log10();
        assert!((snr - 10.0).abs() < 0.3, "{snr}");
    }
}
