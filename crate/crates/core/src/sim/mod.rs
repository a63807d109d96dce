//! Coherent-detection Φ-OTDR recording synthesis.
//!
//! A fiber is modelled as a dense set of discrete Rayleigh scatterers. Each
//! probe pulse returns the coherent sum of the scatterers it illuminates; a
//! piezo-wound fiber section adds a sinusoidal phase that is fully carried by
//! every scatterer beyond it. The photodetector sees that field beating
//! against the local oscillator at the modulator frequency.

mod scatter;
mod synth;

pub use scatter::{build_scatterers, Scatterer, ScattererField};
pub use synth::{synthesize, synthesize_vibration, RawTraceMatrix};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub const AMPLITUDES_V: [f64; 3] = [1.0, 2.0, 3.0];
pub const FREQUENCIES_HZ: [f64; 5] = [50.0, 100.0, 200.0, 500.0, 1000.0];
pub const N_CLASSES: usize = AMPLITUDES_V.len() * FREQUENCIES_HZ.len();

/// Temporal envelope of the probe pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PulseShape {
    /// Gaussian envelope whose FWHM equals the pulse width.
    #[default]
    Gaussian,
    /// Ideal rectangular pulse.
    Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub fiber_length_m: f64,
    pub sample_spacing_m: f64,
    pub fast_rate_hz: f64,
    pub prf_hz: f64,
    pub n_traces: usize,
    pub pulse_width_s: f64,
    pub pulse_shape: PulseShape,
    pub f_aom_hz: f64,
    pub wavelength_m: f64,
    pub group_index: f64,
    pub pzt_start_m: f64,
    pub pzt_end_m: f64,
    pub k_pzt_rad_per_volt: f64,
    /// `None` disables the additive noise term.
    pub snr_db: Option<f64>,
    pub laser_phase_drift: bool,
    pub scatterers_per_cell: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SimConfig {
    /// 1/10-scale geometry: 470 m fiber, PZT at 232-236 m, 256 traces.
    pub fn desk() -> Self {
        Self {
            fiber_length_m: 470.0,
            sample_spacing_m: 0.1,
            fast_rate_hz: 1e9,
            prf_hz: 2e4,
            n_traces: 256,
            pulse_width_s: 100e-9,
            pulse_shape: PulseShape::Gaussian,
            f_aom_hz: 160e6,
            wavelength_m: 1552.51e-9,
            group_index: 1.468,
            pzt_start_m: 232.0,
            pzt_end_m: 236.0,
            k_pzt_rad_per_volt: 2.0,
            snr_db: None,
            laser_phase_drift: false,
            scatterers_per_cell: 10,
            seed: 0,
        }
    }

    /// Laboratory geometry: 4.7 km fiber, PZT on 2320-2360 m, 30 ms window.
    pub fn full() -> Self {
        Self {
            fiber_length_m: 4700.0,
            n_traces: 600,
            pzt_start_m: 2320.0,
            pzt_end_m: 2360.0,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected desk or full)"
            ))),
        }
    }

    pub fn n_samples(&self) -> usize {
        let n = (self.fiber_length_m / self.sample_spacing_m).round();
        if n.is_finite() && n > 0.0 {
            n as usize
        } else {
            0
        }
    }

    /// One-way length of fiber covered by the pulse (pulse_width * c_fiber / 2).
    pub fn pulse_length_m(&self) -> f64 {
        self.pulse_width_s * SPEED_OF_LIGHT / self.group_index / 2.0
    }

    pub fn column_of(&self, position_m: f64) -> usize {
        (position_m / self.sample_spacing_m).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fiber_length_m", self.fiber_length_m),
            ("sample_spacing_m", self.sample_spacing_m),
            ("fast_rate_hz", self.fast_rate_hz),
            ("prf_hz", self.prf_hz),
            ("pulse_width_s", self.pulse_width_s),
            ("f_aom_hz", self.f_aom_hz),
            ("wavelength_m", self.wavelength_m),
            ("group_index", self.group_index),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(0.0 <= self.pzt_start_m
            && self.pzt_start_m < self.pzt_end_m
            && self.pzt_end_m <= self.fiber_length_m)
        {
            return Err(Error::config(format!(
                "need 0 <= pzt_start_m < pzt_end_m <= fiber_length_m, got {} / {} / {}",
                self.pzt_start_m, self.pzt_end_m, self.fiber_length_m
            )));
        }
        if self.n_samples() == 0 {
            return Err(Error::config("fiber_length_m / sample_spacing_m rounds to zero samples"));
        }
        if self.n_traces < 2 {
            return Err(Error::config(format!("n_traces must be >= 2, got {}", self.n_traces)));
        }
        if self.f_aom_hz >= self.fast_rate_hz / 2.0 {
            return Err(Error::config(format!(
                "carrier {} Hz is not below the fast-time Nyquist {} Hz",
                self.f_aom_hz,
                self.fast_rate_hz / 2.0
            )));
        }
        if self.scatterers_per_cell == 0 {
            return Err(Error::config("scatterers_per_cell must be >= 1"));
        }
        if !self.k_pzt_rad_per_volt.is_finite() {
            return Err(Error::config("k_pzt_rad_per_volt must be finite"));
        }
        if let Some(snr) = self.snr_db {
            if snr.is_nan() {
                return Err(Error::config("snr_db is NaN"));
            }
        }
        Ok(())
    }
}

/// A sinusoidal drive applied to the PZT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vibration {
    pub amplitude_v: f64,
    pub frequency_hz: f64,
}

/// One of the fifteen (amplitude, frequency) vibration classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "LabelRepr", into = "LabelRepr")]
pub struct EventLabel {
    class_index: usize,
}

#[derive(Serialize, Deserialize)]
struct LabelRepr {
    class_index: usize,
    amplitude_v: f64,
    frequency_hz: f64,
}

impl TryFrom<LabelRepr> for EventLabel {
    type Error = Error;

    fn try_from(r: LabelRepr) -> Result<Self> {
        let label = EventLabel::from_class(r.class_index)?;
        if label.amplitude_v() != r.amplitude_v || label.frequency_hz() != r.frequency_hz {
            return Err(Error::config(format!(
                "class {} is ({} V, {} Hz), not ({} V, {} Hz)",
                r.class_index,
                label.amplitude_v(),
                label.frequency_hz(),
                r.amplitude_v,
                r.frequency_hz
            )));
        }
        Ok(label)
    }
}

impl From<EventLabel> for LabelRepr {
    fn from(l: EventLabel) -> Self {
        LabelRepr {
            class_index: l.class_index,
            amplitude_v: l.amplitude_v(),
            frequency_hz: l.frequency_hz(),
        }
    }
}

impl EventLabel {
    pub fn from_class(class_index: usize) -> Result<Self> {
        if class_index < N_CLASSES {
            Ok(Self { class_index })
        } else {
            Err(Error::config(format!("class index {class_index} outside 0..{N_CLASSES}")))
        }
    }

    pub fn new(amplitude_v: f64, frequency_hz: f64) -> Result<Self> {
        let a = AMPLITUDES_V.iter().position(|&v| v == amplitude_v);
        let f = FREQUENCIES_HZ.iter().position(|&v| v == frequency_hz);
        match (a, f) {
            (Some(a), Some(f)) => Ok(Self {
                class_index: a * FREQUENCIES_HZ.len() + f,
            }),
            _ => Err(Error::config(format!(
                "({amplitude_v} V, {frequency_hz} Hz) is not one of the vibration classes"
            ))),
        }
    }

    pub fn all() -> impl Iterator<Item = EventLabel> {
        (0..N_CLASSES).map(|class_index| EventLabel { class_index })
    }

    pub fn class_index(self) -> usize {
        self.class_index
    }

    pub fn amplitude_v(self) -> f64 {
        AMPLITUDES_V[self.class_index / FREQUENCIES_HZ.len()]
    }

    pub fn frequency_hz(self) -> f64 {
        FREQUENCIES_HZ[self.class_index % FREQUENCIES_HZ.len()]
    }

    pub fn vibration(self) -> Vibration {
        Vibration {
            amplitude_v: self.amplitude_v(),
            frequency_hz: self.frequency_hz(),
        }
    }
}

impl std::fmt::Display for EventLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "class {:02} ({} V, {} Hz)",
            self.class_index,
            self.amplitude_v(),
            self.frequency_hz()
        )
    }
}

/// Ground-truth PZT phase `k * A * sin(2π f m / prf)` for every trace.
pub fn ideal_phase_waveform(event: Vibration, config: &SimConfig) -> Vec<f64> {
    let peak = config.k_pzt_rad_per_volt * event.amplitude_v;
    (0..config.n_traces)
        .map(|m| {
            let t = m as f64 / config.prf_hz;
            peak * (2.0 * std::f64::consts::PI * event.frequency_hz * t).sin()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::dominant_bin;

    #[test]
    fn class_index_enumerates_all_pairs_once() {
        let mut seen = std::collections::HashSet::new();
        for &a in &AMPLITUDES_V {
            for &f in &FREQUENCIES_HZ {
                let l = EventLabel::new(a, f).unwrap();
                assert_eq!(l.amplitude_v(), a);
                assert_eq!(l.frequency_hz(), f);
                assert!(seen.insert(l.class_index()));
            }
        }
        assert_eq!(seen.len(), 15);
        assert_eq!(EventLabel::new(2.0, 500.0).unwrap().class_index(), 8);
        assert!(EventLabel::from_class(15).is_err());
        assert!(EventLabel::new(4.0, 50.0).is_err());
    }

    #[test]
    fn label_json_round_trip_and_mismatch_rejected() {
        let l = EventLabel::from_class(11).unwrap();
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(serde_json::from_str::<EventLabel>(&s).unwrap(), l);
        let bad = r#"{"class_index":0,"amplitude_v":3.0,"frequency_hz":50.0}"#;
        assert!(serde_json::from_str::<EventLabel>(bad).is_err());
    }

    #[test]
    fn desk_preset_geometry() {
        let c = SimConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.n_samples(), 4700);
        assert_eq!(c.column_of(c.pzt_start_m), 2320);
        assert_eq!(c.column_of(c.pzt_end_m), 2360);
        let f = SimConfig::full();
        f.validate().unwrap();
        assert_eq!(f.n_samples(), 47000);
        assert_eq!(f.column_of(f.pzt_start_m), 23200);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = SimConfig::desk();
        c.pzt_end_m = c.pzt_start_m;
        assert!(c.validate().is_err());
        let mut c = SimConfig::desk();
        c.f_aom_hz = 600e6;
        assert!(c.validate().is_err());
        let mut c = SimConfig::desk();
        c.n_traces = 1;
        assert!(c.validate().is_err());
        let mut c = SimConfig::desk();
        c.fiber_length_m = 0.01;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ideal_waveform_zero_amplitude_is_silent() {
        let c = SimConfig::desk();
        let w = ideal_phase_waveform(
            Vibration {
                amplitude_v: 0.0,
                frequency_hz: 200.0,
            },
            &c,
        );
        assert_eq!(w.len(), c.n_traces);
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ideal_waveform_quarter_period_hits_peak() {
        // 50 Hz at 20 kHz PRF: trace 100 is t = 5 ms, a quarter period.
        let mut c = SimConfig::desk();
        c.k_pzt_rad_per_volt = 1.7;
        let w = ideal_phase_waveform(EventLabel::new(1.0, 50.0).unwrap().vibration(), &c);
        assert!((w[100] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn ideal_waveform_spectral_peak_at_event_bin() {
        let c = SimConfig::desk();
        for label in EventLabel::all() {
            let w = ideal_phase_waveform(label.vibration(), &c);
            let expected = (label.frequency_hz() * c.n_traces as f64 / c.prf_hz).round() as usize;
            assert_eq!(dominant_bin(&w), expected, "{label}");
        }
    }
}
