//! LSTM and bidirectional LSTM with gates stacked in the order `i, f, g, o`:
//! `W` is `4H x D`, `U` is `4H x H`, `b` is `4H`.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a> {
    w: &'a Tensor,
    u: &'a Tensor,
    b: &'a Tensor,
    hidden: usize,
    input: usize,
}

impl<'a> LstmWeights<'a> {
    pub fn new(w: &'a Tensor, u: &'a Tensor, b: &'a Tensor) -> Result<Self> {
        let [rows, input] = *w.dims() else {
            return Err(Error::shape(format!("lstm W: expected 4H x D, got {:?}", w.dims())));
        };
        if rows == 0 || rows % 4 != 0 {
            return Err(Error::shape(format!("lstm W has {rows} rows, not a multiple of 4")));
        }
        let hidden = rows / 4;
        u.expect_dims("lstm U", &[rows, hidden])?;
        b.expect_dims("lstm b", &[rows])?;
        Ok(Self {
            w,
            u,
            b,
            hidden,
            input,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrads {
    pub input: Tensor,
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

/// Per-step activations in processing order.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCache {
    reverse: bool,
    inputs: Vec<f64>,
    /// `[i, f, g, o]` after their nonlinearities, `4H` per step.
    gates: Vec<f64>,
    cells: Vec<f64>,
    hiddens: Vec<f64>,
    steps: usize,
    input_dim: usize,
    hidden: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out += M v` for a row-major `M` with `v.len()` columns.
fn mat_vec_acc(m: &[f64], v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks_exact(v.len())) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn sequence_dims(seq: &Tensor, input_dim: usize) -> Result<usize> {
    match *seq.dims() {
        [t, d] if t >= 1 && d == input_dim => Ok(t),
        ref dims => Err(Error::shape(format!(
            "lstm sequence: expected T x {input_dim} with T >= 1, got {dims:?}"
        ))),
    }
}

/// Runs one direction from a zero state. `out[t]` is the hidden state after
/// consuming input `t`; with `reverse` the inputs are consumed from `T-1` down.
pub fn lstm_forward(seq: &Tensor, weights: &LstmWeights, reverse: bool) -> Result<(Tensor, LstmCache)> {
    let d = weights.input;
    let h = weights.hidden;
    let steps = sequence_dims(seq, d)?;
    let mut gates = vec![0.0; steps * 4 * h];
    let mut cells = vec![0.0; (steps + 1) * h];
    let mut hiddens = vec![0.0; (steps + 1) * h];
    let mut out = vec![0.0; steps * h];
    for s in 0..steps {
        let t = if reverse { steps - 1 - s } else { s };
        let x = &seq.data()[t * d..(t + 1) * d];
        let a = &mut gates[s * 4 * h..(s + 1) * 4 * h];
        a.copy_from_slice(weights.b.data());
        mat_vec_acc(weights.w.data(), x, a);
        let (prev_h, rest) = hiddens.split_at_mut((s + 1) * h);
        mat_vec_acc(weights.u.data(), &prev_h[s * h..], a);
        for j in 0..h {
            let i = sigmoid(a[j]);
            let f = sigmoid(a[h + j]);
            let g = a[2 * h + j].tanh();
            let o = sigmoid(a[3 * h + j]);
            a[j] = i;
            a[h + j] = f;
            a[2 * h + j] = g;
            a[3 * h + j] = o;
            let c = f * cells[s * h + j] + i * g;
            cells[(s + 1) * h + j] = c;
            rest[j] = o * c.tanh();
            out[t * h + j] = rest[j];
        }
    }
    let cache = LstmCache {
        reverse,
        inputs: seq.data().to_vec(),
        gates,
        cells,
        hiddens,
        steps,
        input_dim: d,
        hidden: h,
    };
    Ok((Tensor::new(vec![steps, h], out)?, cache))
}

/// `grad_out` is `T x H`, indexed like the forward output.
pub fn lstm_backward(cache: &LstmCache, weights: &LstmWeights, grad_out: &Tensor) -> Result<LstmGrads> {
    let (steps, d, h) = (cache.steps, cache.input_dim, cache.hidden);
    if weights.hidden != h || weights.input != d {
        return Err(Error::shape("lstm weights do not match the cached forward pass"));
    }
    grad_out.expect_dims("lstm grad_out", &[steps, h])?;
    let w = weights.w.data();
    let u = weights.u.data();
    let mut dx = vec![0.0; steps * d];
    let mut dw = vec![0.0; 4 * h * d];
    let mut du = vec![0.0; 4 * h * h];
    let mut db = vec![0.0; 4 * h];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    for s in (0..steps).rev() {
        let t = if cache.reverse { steps - 1 - s } else { s };
        let gates = &cache.gates[s * 4 * h..(s + 1) * 4 * h];
        let c_prev = &cache.cells[s * h..(s + 1) * h];
        let c = &cache.cells[(s + 1) * h..(s + 2) * h];
        let h_prev = &cache.hiddens[s * h..(s + 1) * h];
        let x = &cache.inputs[t * d..(t + 1) * d];
        for j in 0..h {
            let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let dh = grad_out.data()[t * h + j] + dh_next[j];
            let tc = c[j].tanh();
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            da[j] = dc * g * i * (1.0 - i);
            da[h + j] = dc * c_prev[j] * f * (1.0 - f);
            da[2 * h + j] = dc * i * (1.0 - g * g);
            da[3 * h + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        let dxt = &mut dx[t * d..(t + 1) * d];
        for (r, &a) in da.iter().enumerate() {
            db[r] += a;
            if a == 0.0 {
                continue;
            }
            let wrow = &w[r * d..(r + 1) * d];
            for ((dwv, dxv), (&xv, &wv)) in dw[r * d..(r + 1) * d]
                .iter_mut()
                .zip(dxt.iter_mut())
                .zip(x.iter().zip(wrow))
            {
                *dwv += a * xv;
                *dxv += a * wv;
            }
            let urow = &u[r * h..(r + 1) * h];
            for ((duv, dhv), (&hv, &uv)) in du[r * h..(r + 1) * h]
                .iter_mut()
                .zip(dh_next.iter_mut())
                .zip(h_prev.iter().zip(urow))
            {
                *duv += a * hv;
                *dhv += a * uv;
            }
        }
    }
    Ok(LstmGrads {
        input: Tensor::new(vec![steps, d], dx)?,
        w: Tensor::new(vec![4 * h, d], dw)?,
        u: Tensor::new(vec![4 * h, h], du)?,
        b: Tensor::from_vec(db),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmCache {
    forward: LstmCache,
    backward: LstmCache,
}

/// Output row `t` is `[h_fwd(t), h_bwd(t)]`, `T x 2H` overall.
pub fn bilstm(seq: &Tensor, fwd: &LstmWeights, bwd: &LstmWeights) -> Result<(Tensor, BiLstmCache)> {
    if fwd.hidden != bwd.hidden || fwd.input != bwd.input {
        return Err(Error::shape("bilstm directions have different shapes"));
    }
    let (yf, cf) = lstm_forward(seq, fwd, false)?;
    let (yb, cb) = lstm_forward(seq, bwd, true)?;
    let h = fwd.hidden;
    let mut out = Vec::with_capacity(yf.len() * 2);
    for (a, b) in yf.data().chunks_exact(h).zip(yb.data().chunks_exact(h)) {
        out.extend_from_slice(a);
        out.extend_from_slice(b);
    }
    let steps = cf.steps;
    Ok((
        Tensor::new(vec![steps, 2 * h], out)?,
        BiLstmCache {
            forward: cf,
            backward: cb,
        },
    ))
}

/// Returns the input gradient (both directions summed) and per-direction
/// parameter gradients.
pub fn bilstm_backward(
    cache: &BiLstmCache,
    fwd: &LstmWeights,
    bwd: &LstmWeights,
    grad_out: &Tensor,
) -> Result<(Tensor, LstmGrads, LstmGrads)> {
    let h = fwd.hidden;
    let steps = cache.forward.steps;
    grad_out.expect_dims("bilstm grad_out", &[steps, 2 * h])?;
    let mut gf = Vec::with_capacity(steps * h);
    let mut gb = Vec::with_capacity(steps * h);
    for row in grad_out.data().chunks_exact(2 * h) {
        gf.extend_from_slice(&row[..h]);
        gb.extend_from_slice(&row[h..]);
    }
    let df = lstm_backward(&cache.forward, fwd, &Tensor::new(vec![steps, h], gf)?)?;
    let db = lstm_backward(&cache.backward, bwd, &Tensor::new(vec![steps, h], gb)?)?;
    let mut dx = df.input.clone();
    dx.add_assign(&db.input)?;
    Ok((dx, df, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, EPSILON};
    use crate::nn::testutil::random_tensor;

    struct Dir {
        w: Tensor,
        u: Tensor,
        b: Tensor,
    }

    impl Dir {
        fn random(d: usize, h: usize, seed: u64) -> Self {
            Self {
                w: random_tensor(&[4 * h, d], seed),
                u: random_tensor(&[4 * h, h], seed + 1),
                b: random_tensor(&[4 * h], seed + 2),
            }
        }

        fn weights(&self) -> LstmWeights<'_> {
            LstmWeights::new(&self.w, &self.u, &self.b).unwrap()
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let z = Dir {
            w: Tensor::zeros(&[8, 3]),
            u: Tensor::zeros(&[8, 2]),
            b: Tensor::zeros(&[8]),
        };
        let seq = random_tensor(&[4, 3], 1);
        let (y, _) = bilstm(&seq, &z.weights(), &z.weights()).unwrap();
        assert_eq!(y.dims(), &[4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    /// Plain scalar recurrence written independently of the vectorized code.
    #[test]
    fn single_unit_matches_hand_recurrence() {
        let w = Tensor::new(vec![4, 1], vec![0.5, -0.3, 0.8, 0.1]).unwrap();
        let u = Tensor::new(vec![4, 1], vec![0.2, 0.4, -0.6, 0.7]).unwrap();
        let b = Tensor::new(vec![4], vec![0.0, 1.0, 0.1, -0.2]).unwrap();
        let xs = [1.0, -2.0, 0.5];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0, 0.0);
        let mut expected = Vec::new();
        for &x in &xs {
            let gate = |k: usize| w.data()[k] * x + u.data()[k] * h + b.data()[k];
            let (i, f, g, o) = (sig(gate(0)), sig(gate(1)), gate(2).tanh(), sig(gate(3)));
            c = f * c + i * g;
            h = o * c.tanh();
            expected.push(h);
        }
        let seq = Tensor::new(vec![3, 1], xs.to_vec()).unwrap();
        let (y, _) = lstm_forward(&seq, &LstmWeights::new(&w, &u, &b).unwrap(), false).unwrap();
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn reversing_input_swaps_direction_blocks() {
        let (d, h, t) = (3, 2, 5);
        let a = Dir::random(d, h, 10);
        let b = Dir::random(d, h, 20);
        let seq = random_tensor(&[t, d], 30);
        let mut rev = Vec::new();
        for row in seq.data().chunks_exact(d).rev() {
            rev.extend_from_slice(row);
        }
        let rev = Tensor::new(vec![t, d], rev).unwrap();
        let (y1, _) = bilstm(&seq, &a.weights(), &b.weights()).unwrap();
        let (y2, _) = bilstm(&rev, &b.weights(), &a.weights()).unwrap();
        for step in 0..t {
            let r1 = &y1.data()[step * 2 * h..(step + 1) * 2 * h];
            let r2 = &y2.data()[(t - 1 - step) * 2 * h..(t - step) * 2 * h];
            assert_eq!(&r1[..h], &r2[h..]);
            assert_eq!(&r1[h..], &r2[..h]);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Dir::random(3, 2, 1);
        assert!(lstm_forward(&Tensor::zeros(&[2, 4]), &a.weights(), false).is_err());
        assert!(lstm_forward(&Tensor::zeros(&[0, 3]), &a.weights(), false).is_err());
        let bad_u = Tensor::zeros(&[8, 3]);
        assert!(LstmWeights::new(&a.w, &bad_u, &a.b).is_err());
        let bad_w = Tensor::zeros(&[7, 3]);
        assert!(LstmWeights::new(&bad_w, &a.u, &a.b).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (t, d, h) = (3, 2, 2);
        for seed in 0..10 {
            let base = 100 * seed;
            let fw = Dir::random(d, h, base);
            let bw = Dir::random(d, h, base + 10);
            let seq = random_tensor(&[t, d], base + 20);
            let proj = random_tensor(&[t, 2 * h], base + 30);
            let loss = |seq: &Tensor, f: &LstmWeights, b: &LstmWeights| {
                let (y, _) = bilstm(seq, f, b).unwrap();
                y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let (_, cache) = bilstm(&seq, &fw.weights(), &bw.weights()).unwrap();
            let (dx, gf, gb) = bilstm_backward(&cache, &fw.weights(), &bw.weights(), &proj).unwrap();
            let mut worst = grad_check(
                |v| loss(&Tensor::new(vec![t, d], v.to_vec()).unwrap(), &fw.weights(), &bw.weights()),
                seq.data(),
                dx.data(),
                EPSILON,
            );
            for (dir, grads, is_fwd) in [(&fw, &gf, true), (&bw, &gb, false)] {
                let other = if is_fwd { &bw } else { &fw };
                let eval = |w: &Tensor, u: &Tensor, b: &Tensor| {
                    let this = LstmWeights::new(w, u, b).unwrap();
                    if is_fwd {
                        loss(&seq, &this, &other.weights())
                    } else {
                        loss(&seq, &other.weights(), &this)
                    }
                };
                let re = |v: &[f64], like: &Tensor| Tensor::new(like.dims().to_vec(), v.to_vec()).unwrap();
                worst = worst
                    .max(grad_check(|v| eval(&re(v, &dir.w), &dir.u, &dir.b), dir.w.data(), grads.w.data(), EPSILON))
                    .max(grad_check(|v| eval(&dir.w, &re(v, &dir.u), &dir.b), dir.u.data(), grads.u.data(), EPSILON))
                    .max(grad_check(|v| eval(&dir.w, &dir.u, &re(v, &dir.b)), dir.b.data(), grads.b.data(), EPSILON));
            }
            assert!(worst < 1e-4, "seed {seed}: {worst}");
        }
    }
}
