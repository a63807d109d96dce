//! Heterodyne demodulation of raw beat-signal traces into the differential
//! amplitude and wrapped phase temporal-spatial matrices.
//!
//! Row pipeline: DFT-mask bandpass around the modulator shift, analytic
//! signal, magnitude / angle, carrier removal. Matrix pipeline: subtract the
//! first trace from the amplitudes, subtract the first column from the phases,
//! fold phases into `[0, 2π)`.

use std::f64::consts::{PI, TAU};
use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sim::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandpassSpec {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub sample_rate_hz: f64,
}

impl BandpassSpec {
    /// Band centred on the modulator shift, `2 / pulse_width` wide.
    pub fn for_config(config: &SimConfig) -> Self {
        Self {
            center_hz: config.f_aom_hz,
            bandwidth_hz: 2.0 / config.pulse_width_s,
            sample_rate_hz: config.fast_rate_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lo = self.center_hz - self.bandwidth_hz / 2.0;
        let hi = self.center_hz + self.bandwidth_hz / 2.0;
        if !(self.bandwidth_hz > 0.0 && lo > 0.0 && hi < self.sample_rate_hz / 2.0) {
            return Err(Error::config(format!(
                "band [{lo}, {hi}] Hz must lie strictly inside (0, {}) Hz",
                self.sample_rate_hz / 2.0
            )));
        }
        Ok(())
    }

    fn keeps_bin(&self, k: usize, n: usize) -> bool {
        let folded = if k <= n / 2 { k } else { n - k };
        let f = folded as f64 * self.sample_rate_hz / n as f64;
        let half = self.bandwidth_hz / 2.0;
        f >= self.center_hz - half && f <= self.center_hz + half
    }
}

/// Forward/inverse plans for one row length, shareable across threads.
struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    n: usize,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            n,
        }
    }

    fn bandpass(&self, row: &[f64], spec: &BandpassSpec) -> Vec<f64> {
        let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        for (k, v) in buf.iter_mut().enumerate() {
            if !spec.keeps_bin(k, self.n) {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    fn analytic(&self, row: &[f64]) -> Vec<Complex64> {
        let n = self.n;
        let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        // keep DC (and Nyquist for even n), double positive, zero negative
        let positive_end = n.div_ceil(2);
        for v in &mut buf[1..positive_end] {
            *v *= 2.0;
        }
        for v in &mut buf[n / 2 + 1..] {
            *v = Complex64::new(0.0, 0.0);
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        for v in &mut buf {
            *v *= scale;
        }
        buf
    }
}

/// Zeroes every DFT bin outside `center ± bandwidth/2` (both signed bands).
pub fn bandpass(row: &[f64], spec: &BandpassSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if row.is_empty() {
        return Ok(Vec::new());
    }
    Ok(Plans::new(row.len()).bandpass(row, spec))
}

/// DFT-method analytic signal; its real part reproduces the input.
pub fn analytic_signal(row: &[f64]) -> Result<Vec<Complex64>> {
    if row.len() < 2 {
        return Err(Error::shape(format!(
            "analytic signal needs at least 2 samples, got {}",
            row.len()
        )));
    }
    Ok(Plans::new(row.len()).analytic(row))
}

/// Per-row amplitude `|a(i)|` and carrier-free phase `arg a(i) - 2π f t_i`.
pub fn demodulate(raw: &Matrix, spec: &BandpassSpec) -> Result<(Matrix, Matrix)> {
    spec.validate()?;
    if !raw.is_finite() {
        return Err(Error::config("raw trace matrix contains non-finite samples"));
    }
    let (rows, cols) = raw.shape();
    if cols < 2 {
        return Err(Error::shape(format!("traces need at least 2 samples, got {cols}")));
    }
    let plans = Plans::new(cols);
    let carrier: Vec<f64> = (0..cols)
        .map(|i| TAU * spec.center_hz * i as f64 / spec.sample_rate_hz)
        .collect();
    let per_row: Vec<(Vec<f64>, Vec<f64>)> = (0..rows)
        .into_par_iter()
        .map(|m| {
            let filtered = plans.bandpass(raw.row(m), spec);
            let analytic = plans.analytic(&filtered);
            let amp = analytic.iter().map(|c| c.norm()).collect();
            let phase = analytic
                .iter()
                .zip(&carrier)
                .map(|(c, w)| c.arg() - w)
                .collect();
            (amp, phase)
        })
        .collect();
    let (amp, phase): (Vec<_>, Vec<_>) = per_row.into_iter().unzip();
    Ok((Matrix::from_rows(amp)?, Matrix::from_rows(phase)?))
}

/// `out[m][i] = amp[m][i] - amp[0][i]`.
pub fn differential_amplitude(amp: &Matrix) -> Matrix {
    let mut out = amp.clone();
    if amp.rows() == 0 {
        return out;
    }
    let reference = amp.row(0).to_vec();
    for m in 0..out.rows() {
        for (v, r) in out.row_mut(m).iter_mut().zip(&reference) {
            *v -= r;
        }
    }
    out
}

/// `out[m][i] = phase[m][i] - phase[m][0]`, cancelling any per-trace laser offset.
pub fn remove_initial_phase(phase: &Matrix) -> Matrix {
    let mut out = phase.clone();
    for m in 0..out.rows() {
        let row = out.row_mut(m);
        if let Some(&first) = row.first() {
            for v in row.iter_mut() {
                *v -= first;
            }
        }
    }
    out
}

/// Folds a phase into `[0, 2π)`; `2π` maps to `0`.
pub fn wrap_phase(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

pub fn wrap_mod_2pi(phase: &Matrix) -> Matrix {
    phase.map(wrap_phase)
}

/// 1-D unwrap: each successive difference is shifted by a multiple of 2π into
/// `(-π, π]`; the first element is kept.
pub fn unwrap_slow_time(column: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(column.len());
    let Some(&first) = column.first() else {
        return out;
    };
    out.push(first);
    let mut acc = first;
    for w in column.windows(2) {
        let d = w[1] - w[0];
        let k = ((d - PI) / TAU).ceil();
        acc += d - TAU * k;
        out.push(acc);
    }
    out
}

/// The two matrices rendered into one labelled image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSpatial {
    pub diff_amplitude: Matrix,
    pub wrapped_phase: Matrix,
}

/// Full preprocessing chain from raw traces.
pub fn process(raw: &Matrix, spec: &BandpassSpec) -> Result<TemporalSpatial> {
    let (amp, phase) = demodulate(raw, spec)?;
    Ok(TemporalSpatial {
        diff_amplitude: differential_amplitude(&amp),
        wrapped_phase: wrap_mod_2pi(&remove_initial_phase(&phase)),
    })
}

/// Slow-time phase of column `after` relative to column `before`, unwrapped.
pub fn cross_phase(phase: &Matrix, before: usize, after: usize) -> Vec<f64> {
    let diff: Vec<f64> = (0..phase.rows())
        .map(|m| wrap_phase(phase.get(m, after) - phase.get(m, before)))
        .collect();
    unwrap_slow_time(&diff)
}

/// Column in `range` with the largest mean amplitude. Bright columns have the
/// least phase noise, so they make good references around an event.
pub fn strongest_column(amp: &Matrix, range: Range<usize>) -> Option<usize> {
    let end = range.end.min(amp.cols());
    let total = |c: usize| amp.iter_rows().map(|r| r[c]).sum::<f64>();
    (range.start..end).max_by(|&a, &b| total(a).total_cmp(&total(b)).then(b.cmp(&a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> BandpassSpec {
        BandpassSpec {
            center_hz: 160e6,
            bandwidth_hz: 20e6,
            sample_rate_hz: 1e9,
        }
    }

    /// Tone at an exact bin frequency for a 1000-sample window.
    fn tone(freq: f64, phase: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (TAU * freq * i as f64 / 1e9 + phase).cos())
            .collect()
    }

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(i, &v)| v * Complex64::from_polar(1.0, -TAU * (k * i) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    fn naive_idft_real(x: &[Complex64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|i| {
                x.iter()
                    .enumerate()
                    .map(|(k, &v)| v * Complex64::from_polar(1.0, TAU * (k * i) as f64 / n as f64))
                    .sum::<Complex64>()
                    .re
                    / n as f64
            })
            .collect()
    }

    #[test]
    fn strongest_column_picks_brightest_in_range() {
        let m = Matrix::from_rows(vec![vec![1.0, 5.0, 2.0, 9.0], vec![1.0, 4.0, 3.0, 9.0]]).unwrap();
        assert_eq!(strongest_column(&m, 0..3), Some(1));
        assert_eq!(strongest_column(&m, 2..10), Some(3));
        assert_eq!(strongest_column(&m, 4..6), None);
    }

    #[test]
    fn in_band_tone_passes_unchanged() {
        let x = tone(160e6, 0.3, 1000);
        let y = bandpass(&x, &spec()).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_band_tone_rejected() {
        let x = tone(40e6, 0.0, 1000);
        let y = bandpass(&x, &spec()).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn superposition_matches_direct_dft_mask() {
        let n = 500;
        let x: Vec<f64> = tone(160e6, 0.2, n)
            .iter()
            .zip(tone(52e6, 1.0, n))
            .zip(tone(300e6, 0.4, n))
            .map(|((a, b), c)| a + 0.5 * b + 0.25 * c)
            .collect();
        // oracle: direct O(n^2) DFT, mask, direct inverse
        let s = spec();
        let mut spectrum = naive_dft(&x);
        for (k, v) in spectrum.iter_mut().enumerate() {
            if !s.keeps_bin(k, n) {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        let expected = naive_idft_real(&spectrum);
        let y = bandpass(&x, &s).unwrap();
        let in_band = tone(160e6, 0.2, n);
        for i in 0..n {
            assert!((y[i] - expected[i]).abs() < 1e-9);
            assert!((y[i] - in_band[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn band_outside_nyquist_rejected() {
        let mut s = spec();
        s.center_hz = 495e6;
        assert!(bandpass(&[0.0; 8], &s).is_err());
        s.center_hz = 5e6;
        assert!(s.validate().is_err());
    }

    #[test]
    fn analytic_of_integer_cosine_is_complex_exponential() {
        let n = 8;
        let x: Vec<f64> = (0..n).map(|i| (TAU * i as f64 / n as f64).cos()).collect();
        let a = analytic_signal(&x).unwrap();
        for (i, c) in a.iter().enumerate() {
            let expected = Complex64::from_polar(1.0, TAU * i as f64 / n as f64);
            assert!((c - expected).norm() < 1e-12);
            assert!((c.norm() - 1.0).abs() < 1e-12);
            assert!((c.im - (TAU * i as f64 / n as f64).sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_rejects_short_input() {
        assert!(analytic_signal(&[]).is_err());
        assert!(analytic_signal(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn analytic_real_part_reproduces_input(x in prop::collection::vec(-10.0f64..10.0, 2..200)) {
            let a = analytic_signal(&x).unwrap();
            for (c, v) in a.iter().zip(&x) {
                prop_assert!((c.re - v).abs() < 1e-9);
            }
        }

        #[test]
        fn wrapped_phase_in_half_open_range(x in -1e4f64..1e4) {
            let w = wrap_phase(x);
            prop_assert!((0.0..TAU).contains(&w));
            let k = ((x - w) / TAU).round();
            prop_assert!((x - w - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn unwrap_inverts_wrap_for_small_steps(steps in prop::collection::vec(-3.0f64..3.0, 1..100), start in -10.0f64..10.0) {
            let mut x = vec![start];
            for s in steps {
                let last = *x.last().unwrap();
                x.push(last + s);
            }
            let wrapped: Vec<f64> = x.iter().map(|&v| wrap_phase(v)).collect();
            let u = unwrap_slow_time(&wrapped);
            let offset = u[0] - x[0];
            let k = (offset / TAU).round();
            prop_assert!((offset - k * TAU).abs() < 1e-9);
            for (a, b) in u.iter().zip(&x) {
                prop_assert!((a - b - offset).abs() < 1e-8);
            }
        }

        #[test]
        fn initial_phase_removal_cancels_row_offsets(
            vals in prop::collection::vec(-5.0f64..5.0, 12),
            offsets in prop::collection::vec(-100.0f64..100.0, 3),
        ) {
            let m = Matrix::from_vec(3, 4, vals).unwrap();
            let mut shifted = m.clone();
            for r in 0..3 {
                for v in shifted.row_mut(r) {
                    *v += offsets[r];
                }
            }
            let a = remove_initial_phase(&m);
            let b = remove_initial_phase(&shifted);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn demodulated_phase_of_shifted_carrier() {
        let n = 1000;
        let raw = Matrix::from_rows(vec![tone(160e6, 0.7, n), tone(160e6, 0.7, n)]).unwrap();
        let (amp, phase) = demodulate(&raw, &spec()).unwrap();
        for i in 0..n {
            assert!((amp.get(0, i) - 1.0).abs() < 1e-9);
            assert!((wrap_phase(phase.get(1, i)) - 0.7).abs() < 1e-9);
        }
        assert_eq!(amp.row(0), amp.row(1));
    }

    #[test]
    fn demodulated_amplitude_recovers_envelope() {
        let n = 2000;
        let envelope = |i: usize| 1.0 + 0.5 * (TAU * 2.0 * i as f64 / n as f64).sin();
        let row: Vec<f64> = (0..n)
            .map(|i| envelope(i) * (TAU * 160e6 * i as f64 / 1e9).cos())
            .collect();
        let raw = Matrix::from_rows(vec![row]).unwrap();
        let (amp, _) = demodulate(&raw, &spec()).unwrap();
        for i in n / 100..n - n / 100 {
            let g = envelope(i);
            assert!((amp.get(0, i) - g).abs() < 0.01 * g);
        }
    }

    #[test]
    fn differential_amplitude_by_hand() {
        let amp = Matrix::from_rows(vec![vec![1.0, 2.0], vec![4.0, 6.0]]).unwrap();
        let d = differential_amplitude(&amp);
        assert_eq!(d, Matrix::from_rows(vec![vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap());
        // reapplying subtracts a zero row
        assert_eq!(differential_amplitude(&d), d);
        let same = Matrix::from_rows(vec![vec![2.5, 1.0]; 4]).unwrap();
        assert!(differential_amplitude(&same).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_phase_removal_by_hand() {
        let p = Matrix::from_rows(vec![vec![0.5, 1.5], vec![1.0, 3.0]]).unwrap();
        let out = remove_initial_phase(&p);
        assert_eq!(out, Matrix::from_rows(vec![vec![0.0, 1.0], vec![0.0, 2.0]]).unwrap());
        assert_eq!(remove_initial_phase(&out), out);
    }

    #[test]
    fn wrap_examples() {
        assert!((wrap_phase(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_phase(-PI / 2.0) - 1.5 * PI).abs() < 1e-12);
        assert_eq!(wrap_phase(TAU), 0.0);
        assert_eq!(wrap_phase(-1e-18), 0.0);
    }

    #[test]
    fn unwrap_examples() {
        let smooth = vec![0.0, 0.5, 1.0, 0.7, 0.2];
        assert_eq!(unwrap_slow_time(&smooth), smooth);
        let wrapped = [0.0, wrap_phase(-0.1), wrap_phase(-0.2)];
        let u = unwrap_slow_time(&wrapped);
        for (a, b) in u.iter().zip([0.0, -0.1, -0.2]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
