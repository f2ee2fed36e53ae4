//! Tape operations: elementwise arithmetic, activations, matrix products,
//! reductions, and structural ops, each with its reverse rule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::BackwardFn;
use super::{ensure_finite, Result, Tape, Tensor, TensorError};

/// Inputs below this are clamped before `ln` so entropy and mask logits stay
/// bounded near certainty.
pub const LOG_CLAMP: f64 = 1e-6;

const ELU_ALPHA: f64 = 1.0;

enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.numel() == 1 {
        Ok(Broadcast::ScalarLhs)
    } else if b.numel() == 1 {
        Ok(Broadcast::ScalarRhs)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() == 2 {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(TensorError::InvalidArg {
            op,
            msg: format!("expected rank-2 tensor, got shape {:?}", t.shape()),
        })
    }
}

impl Tape {
    fn finish_unary<F>(&mut self, out: Tensor, a: &Tensor, df: F) -> Tensor
    where
        F: Fn(&[f64]) -> Vec<f64> + 'static,
    {
        match a.node() {
            Some(aid) => {
                let id = self.record(vec![aid], Box::new(move |g| vec![df(g)]));
                out.with_node(id, true)
            }
            None => out,
        }
    }

    fn finish_binary<FA, FB>(&mut self, out: Tensor, a: &Tensor, b: &Tensor, da: FA, db: FB) -> Tensor
    where
        FA: Fn(&[f64]) -> Vec<f64> + 'static,
        FB: Fn(&[f64]) -> Vec<f64> + 'static,
    {
        let backward: Option<(Vec<_>, BackwardFn)> = match (a.node(), b.node()) {
            (None, None) => None,
            (Some(ai), None) => Some((vec![ai], Box::new(move |g: &[f64]| vec![da(g)]))),
            (None, Some(bi)) => Some((vec![bi], Box::new(move |g: &[f64]| vec![db(g)]))),
            (Some(ai), Some(bi)) => {
                Some((vec![ai, bi], Box::new(move |g: &[f64]| vec![da(g), db(g)])))
            }
        };
        match backward {
            Some((inputs, back)) => {
                let id = self.record(inputs, back);
                out.with_node(id, true)
            }
            None => out,
        }
    }

    // ── Elementwise binary ─────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("add", a, b, |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("sub", a, b, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("mul", a, b, |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip(
            "div",
            a,
            b,
            |x, y| x / y,
            |_, y, g| g / y,
            |x, y, g| -g * x / (y * y),
        )
    }

    /// Shared elementwise-binary kernel with scalar-operand broadcasting.
    /// `da`/`db` map `(a_i, b_i, g_i)` to the per-element contribution; a
    /// scalar operand's contributions are summed.
    fn zip<F, FA, FB>(
        &mut self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: F,
        da: FA,
        db: FB,
    ) -> Result<Tensor>
    where
        F: Fn(f64, f64) -> f64,
        FA: Fn(f64, f64, f64) -> f64 + Copy + 'static,
        FB: Fn(f64, f64, f64) -> f64 + Copy + 'static,
    {
        let mode = broadcast(op, a, b)?;
        let (out_shape, data): (Vec<usize>, Vec<f64>) = match mode {
            Broadcast::Same => (
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::ScalarLhs => {
                let x = a.data()[0];
                (b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect())
            }
            Broadcast::ScalarRhs => {
                let y = b.data()[0];
                (a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        ensure_finite(op, &data)?;
        let out = Tensor::raw(out_shape, data);
        let (ac, bc) = (a.clone(), b.clone());
        let grad_a = move |g: &[f64]| -> Vec<f64> {
            if ac.numel() == 1 && g.len() > 1 {
                // a was broadcast: sum its contributions.
                let x = ac.data()[0];
                vec![g
                    .iter()
                    .zip(bc.data())
                    .map(|(&gi, &y)| da(x, y, gi))
                    .sum()]
            } else if bc.numel() == 1 {
                let y = bc.data()[0];
                ac.data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| da(x, y, gi))
                    .collect()
            } else {
                ac.data()
                    .iter()
                    .zip(bc.data())
                    .zip(g)
                    .map(|((&x, &y), &gi)| da(x, y, gi))
                    .collect()
            }
        };
        let (ac2, bc2) = (a.clone(), b.clone());
        let grad_b = move |g: &[f64]| -> Vec<f64> {
            if bc2.numel() == 1 && g.len() > 1 {
                let y = bc2.data()[0];
                vec![g
                    .iter()
                    .zip(ac2.data())
                    .map(|(&gi, &x)| db(x, y, gi))
                    .sum()]
            } else if ac2.numel() == 1 {
                let x = ac2.data()[0];
                bc2.data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| db(x, y, gi))
                    .collect()
            } else {
                ac2.data()
                    .iter()
                    .zip(bc2.data())
                    .zip(g)
                    .map(|((&x, &y), &gi)| db(x, y, gi))
                    .collect()
            }
        };
        Ok(self.finish_binary(out, a, b, grad_a, grad_b))
    }

    // ── Elementwise unary ──────────────────────────────────────────────

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| c * x).collect();
        ensure_finite("scale", &data)?;
        let out = Tensor::raw(a.shape().to_vec(), data);
        Ok(self.finish_unary(out, a, move |g| g.iter().map(|&gi| c * gi).collect()))
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| x + c).collect();
        ensure_finite("add_scalar", &data)?;
        let out = Tensor::raw(a.shape().to_vec(), data);
        Ok(self.finish_unary(out, a, |g| g.to_vec()))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::raw(a.shape().to_vec(), data);
        let ac = a.clone();
        Ok(self.finish_unary(out, a, move |g| {
            ac.data()
                .iter()
                .zip(g)
                .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                .collect()
        }))
    }

    pub fn elu(&mut self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a
            .data()
            .iter()
            .map(|&x| if x >= 0.0 { x } else { ELU_ALPHA * (x.exp() - 1.0) })
            .collect();
        ensure_finite("elu", &data)?;
        let out = Tensor::raw(a.shape().to_vec(), data);
        let (ac, oc) = (a.clone(), out.clone());
        Ok(self.finish_unary(out, a, move |g| {
            ac.data()
                .iter()
                .zip(oc.data())
                .zip(g)
                .map(|((&x, &y), &gi)| if x >= 0.0 { gi } else { gi * (y + ELU_ALPHA) })
                .collect()
        }))
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let out = Tensor::raw(a.shape().to_vec(), data);
        let oc = out.clone();
        Ok(self.finish_unary(out, a, move |g| {
            oc.data()
                .iter()
                .zip(g)
                .map(|(&y, &gi)| gi * y * (1.0 - y))
                .collect()
        }))
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| x.tanh()).collect();
        let out = Tensor::raw(a.shape().to_vec(), data);
        let oc = out.clone();
        Ok(self.finish_unary(out, a, move |g| {
            oc.data()
                .iter()
                .zip(g)
                .map(|(&y, &gi)| gi * (1.0 - y * y))
                .collect()
        }))
    }

    /// Natural log with inputs clamped to `>= LOG_CLAMP`. The clamped region
    /// has zero slope.
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| x.max(LOG_CLAMP).ln()).collect();
        let out = Tensor::raw(a.shape().to_vec(), data);
        let ac = a.clone();
        Ok(self.finish_unary(out, a, move |g| {
            ac.data()
                .iter()
                .zip(g)
                .map(|(&x, &gi)| if x > LOG_CLAMP { gi / x } else { 0.0 })
                .collect()
        }))
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| x.exp()).collect();
        ensure_finite("exp", &data)?;
        let out = Tensor::raw(a.shape().to_vec(), data);
        let oc = out.clone();
        Ok(self.finish_unary(out, a, move |g| {
            oc.data().iter().zip(g).map(|(&y, &gi)| gi * y).collect()
        }))
    }

    /// Clamp to `[lo, hi]`; gradient passes through strictly inside the band.
    pub fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        if !(lo < hi) {
            return Err(TensorError::InvalidArg {
                op: "clamp",
                msg: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let data: Vec<f64> = a.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let out = Tensor::raw(a.shape().to_vec(), data);
        let ac = a.clone();
        Ok(self.finish_unary(out, a, move |g| {
            ac.data()
                .iter()
                .zip(g)
                .map(|(&x, &gi)| if x > lo && x < hi { gi } else { 0.0 })
                .collect()
        }))
    }

    // ── Matrix products ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = require_rank2("matmul", a)?;
        let (kb, n) = require_rank2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = mm(m, ka, n, a.data(), b.data());
        ensure_finite("matmul", &data)?;
        let out = Tensor::raw(vec![m, n], data);
        let (ac, bc) = (a.clone(), b.clone());
        let da = move |g: &[f64]| mm_nt(m, n, ka, g, bc.data());
        let db = move |g: &[f64]| mm_tn(m, ka, n, ac.data(), g);
        Ok(self.finish_binary(out, a, b, da, db))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = require_rank2("transpose", a)?;
        let out = Tensor::raw(vec![n, m], transpose_raw(m, n, a.data()));
        Ok(self.finish_unary(out, a, move |g| transpose_raw(n, m, g)))
    }

    // ── Reductions ─────────────────────────────────────────────────────

    /// Row softmax with max-shift and 64-bit accumulation. Every output row
    /// sums to 1.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = require_rank2("softmax_rows", a)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &a.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0f64;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for v in &mut data[i * n..(i + 1) * n] {
                *v /= sum;
            }
        }
        let out = Tensor::raw(vec![m, n], data);
        let oc = out.clone();
        Ok(self.finish_unary(out, a, move |g| {
            let y = oc.data();
            let mut dx = vec![0.0; y.len()];
            for i in 0..m {
                let dot: f64 = (0..n).map(|j| g[i * n + j] * y[i * n + j]).sum();
                for j in 0..n {
                    dx[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                }
            }
            dx
        }))
    }

    /// Sum over `axis` (0: down columns, 1: across rows) of a rank-2 tensor.
    pub fn sum_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let (m, n) = require_rank2("sum_axis", a)?;
        if axis > 1 {
            return Err(TensorError::InvalidAxis { op: "sum_axis", axis });
        }
        let out = reduce_axis(m, n, a.data(), axis, |acc, x| acc + x);
        ensure_finite("sum_axis", &out)?;
        let shape = if axis == 0 { vec![1, n] } else { vec![m, 1] };
        let out = Tensor::raw(shape, out);
        Ok(self.finish_unary(out, a, move |g| spread_axis(m, n, g, axis, 1.0)))
    }

    pub fn mean_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let (m, n) = require_rank2("mean_axis", a)?;
        if axis > 1 {
            return Err(TensorError::InvalidAxis { op: "mean_axis", axis });
        }
        let len = if axis == 0 { m } else { n } as f64;
        let mut out = reduce_axis(m, n, a.data(), axis, |acc, x| acc + x);
        for v in &mut out {
            *v /= len;
        }
        ensure_finite("mean_axis", &out)?;
        let shape = if axis == 0 { vec![1, n] } else { vec![m, 1] };
        let out = Tensor::raw(shape, out);
        Ok(self.finish_unary(out, a, move |g| spread_axis(m, n, g, axis, 1.0 / len)))
    }

    /// Max over `axis`; the gradient routes to the lowest-index maximizer.
    pub fn max_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let (m, n) = require_rank2("max_axis", a)?;
        if axis > 1 {
            return Err(TensorError::InvalidAxis { op: "max_axis", axis });
        }
        let (lanes, stride, lane_len) = if axis == 0 {
            (n, n, m) // reduce down each column
        } else {
            (m, 1, n) // reduce across each row
        };
        let mut data = vec![0.0; lanes];
        let mut argmax = vec![0usize; lanes];
        for lane in 0..lanes {
            let base = if axis == 0 { lane } else { lane * n };
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0;
            for k in 0..lane_len {
                let v = a.data()[base + k * stride];
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            data[lane] = best;
            argmax[lane] = base + best_k * stride;
        }
        let shape = if axis == 0 { vec![1, n] } else { vec![m, 1] };
        let out = Tensor::raw(shape, data);
        let total = m * n;
        Ok(self.finish_unary(out, a, move |g| {
            let mut dx = vec![0.0; total];
            for (lane, &gi) in g.iter().enumerate() {
                dx[argmax[lane]] = gi;
            }
            dx
        }))
    }

    // ── Structural ops ─────────────────────────────────────────────────

    pub fn concat_rows(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ra, ca) = require_rank2("concat_rows", a)?;
        let (rb, cb) = require_rank2("concat_rows", b)?;
        if ca != cb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let out = Tensor::raw(vec![ra + rb, ca], data);
        let split = ra * ca;
        Ok(self.finish_binary(
            out,
            a,
            b,
            move |g| g[..split].to_vec(),
            move |g| g[split..].to_vec(),
        ))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = require_rank2("slice_rows", a)?;
        if start >= end || end > m {
            return Err(TensorError::InvalidArg {
                op: "slice_rows",
                msg: format!("range {start}..{end} out of {m} rows"),
            });
        }
        let out = Tensor::raw(
            vec![end - start, n],
            a.data()[start * n..end * n].to_vec(),
        );
        Ok(self.finish_unary(out, a, move |g| {
            let mut dx = vec![0.0; m * n];
            dx[start * n..end * n].copy_from_slice(g);
            dx
        }))
    }

    /// Block repeat: input row `r` occupies output rows `[r*j, (r+1)*j)`.
    pub fn repeat_rows(&mut self, a: &Tensor, j: usize) -> Result<Tensor> {
        let (m, n) = require_rank2("repeat_rows", a)?;
        if j < 1 {
            return Err(TensorError::InvalidArg {
                op: "repeat_rows",
                msg: "repeat count must be >= 1".to_string(),
            });
        }
        let mut data = Vec::with_capacity(m * j * n);
        for r in 0..m {
            let row = &a.data()[r * n..(r + 1) * n];
            for _ in 0..j {
                data.extend_from_slice(row);
            }
        }
        let out = Tensor::raw(vec![m * j, n], data);
        Ok(self.finish_unary(out, a, move |g| {
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                for rep in 0..j {
                    let src = &g[(r * j + rep) * n..(r * j + rep + 1) * n];
                    for (d, s) in dx[r * n..(r + 1) * n].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            dx
        }))
    }

    /// Multiplies each row of `a` (m×n) by the matching entry of the column
    /// vector `s` (m×1).
    pub fn scale_rows(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (m, n) = require_rank2("scale_rows", a)?;
        let (ms, cs) = require_rank2("scale_rows", s)?;
        if ms != m || cs != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: a.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let f = s.data()[i];
            for jx in 0..n {
                data[i * n + jx] = a.data()[i * n + jx] * f;
            }
        }
        ensure_finite("scale_rows", &data)?;
        let out = Tensor::raw(vec![m, n], data);
        let (ac, sc) = (a.clone(), s.clone());
        let da = move |g: &[f64]| -> Vec<f64> {
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let f = sc.data()[i];
                for jx in 0..n {
                    dx[i * n + jx] = g[i * n + jx] * f;
                }
            }
            dx
        };
        let ds = move |g: &[f64]| -> Vec<f64> {
            (0..m)
                .map(|i| (0..n).map(|jx| g[i * n + jx] * ac.data()[i * n + jx]).sum())
                .collect()
        };
        Ok(self.finish_binary(out, a, s, da, ds))
    }

    /// Inverted dropout. In train mode entries are zeroed with probability
    /// `p` and survivors scaled by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(
        &mut self,
        a: &Tensor,
        p: f64,
        rng: &mut ChaCha8Rng,
        train: bool,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArg {
                op: "dropout",
                msg: format!("p = {p} outside [0, 1)"),
            });
        }
        if !train {
            return Ok(a.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..a.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = a.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        ensure_finite("dropout", &data)?;
        let out = Tensor::raw(a.shape().to_vec(), data);
        Ok(self.finish_unary(out, a, move |g| {
            g.iter().zip(&mask).map(|(&gi, &m)| gi * m).collect()
        }))
    }

    /// Straight-through binarization: forward emits `1.0` where `q > thr`
    /// (else `0.0`); backward passes the upstream gradient unchanged, as if
    /// the op were the identity on `q`.
    pub fn straight_through_mask(&mut self, q: &Tensor, thr: f64) -> Result<Tensor> {
        let data: Vec<f64> = q
            .data()
            .iter()
            .map(|&x| if x > thr { 1.0 } else { 0.0 })
            .collect();
        let out = Tensor::raw(q.shape().to_vec(), data);
        Ok(self.finish_unary(out, q, |g| g.to_vec()))
    }
}

// ── Raw matrix kernels ─────────────────────────────────────────────────

/// C(m×n) = A(m×k) · B(k×n).
pub(crate) fn mm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// C(m×k) = A(m×n) · Bᵀ where B is k×n.
fn mm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            c[i * k + kk] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// C(k×n) = Aᵀ · B where A is m×k and B is m×n.
fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
    c
}

fn transpose_raw(m: usize, n: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn reduce_axis(m: usize, n: usize, a: &[f64], axis: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if axis == 0 {
        let mut out = vec![0.0f64; n];
        for i in 0..m {
            for j in 0..n {
                out[j] = f(out[j], a[i * n + j]);
            }
        }
        out
    } else {
        (0..m)
            .map(|i| a[i * n..(i + 1) * n].iter().fold(0.0f64, |acc, &x| f(acc, x)))
            .collect()
    }
}

fn spread_axis(m: usize, n: usize, g: &[f64], axis: usize, factor: f64) -> Vec<f64> {
    let mut dx = vec![0.0; m * n];
    if axis == 0 {
        for i in 0..m {
            for j in 0..n {
                dx[i * n + j] = g[j] * factor;
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                dx[i * n + j] = g[i] * factor;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor, TensorError};
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!((a - e).abs() <= tol, "{a} vs {e} (tol {tol})");
        }
    }

    #[test]
    fn relu_clips_negative_values() {
        let mut tape = Tape::new();
        let x = Tensor::row(&[-0.3, 0.0, 1.2]);
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.2]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let y = tape.sigmoid(&Tensor::scalar(0.0)).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn elu_matches_scalar_definition() {
        // Oracle: elu(x) = e^x - 1 for x < 0 with alpha = 1.
        let expected = (-1.0f64).exp() - 1.0;
        let mut tape = Tape::new();
        let y = tape.elu(&Tensor::scalar(-1.0)).unwrap();
        assert!((y.data()[0] - expected).abs() < 1e-12);
        assert!((y.data()[0] + 0.63212).abs() < 1e-5);
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let mut tape = Tape::new();
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(vec![2, 2], vec![3.0, -1.0, 0.5, 2.0]).unwrap();
        let y = tape.matmul(&eye, &m).unwrap();
        assert_eq!(y.data(), m.data());
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_ones_row_times_column_sums() {
        let k = 7;
        let mut tape = Tape::new();
        let row = Tensor::full(vec![1, k], 1.0);
        let col = Tensor::full(vec![k, 1], 1.0);
        let y = tape.matmul(&row, &col).unwrap();
        assert_eq!(y.data(), &[k as f64]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(
            tape.matmul(&a, &b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let y = tape.softmax_rows(&Tensor::row(&[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        // Oracle: e^x_j / sum, computed directly.
        let x = [1.0f64, 2.0, 3.0];
        let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let s: f64 = exps.iter().sum();
        let expected: Vec<f64> = exps.iter().map(|e| e / s).collect();
        let mut tape = Tape::new();
        let y = tape.softmax_rows(&Tensor::row(&x)).unwrap();
        assert_close(y.data(), &expected, 1e-12);
        assert_close(y.data(), &[0.09003, 0.24473, 0.66524], 1e-5);
    }

    #[test]
    fn max_axis_breaks_ties_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::column(&[0.2, 0.9, 0.9]));
        let y = tape.max_axis(&x, 0).unwrap();
        assert_eq!(y.data(), &[0.9]);
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::row(&[1.0, 4.0, -2.0]));
        let s = tape.sum_axis(&x, 1).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        // Oracle: d/dx sum(x*x) = 2x.
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::row(&[1.0, 2.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum_axis(&sq, 1).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_max_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::column(&[3.0, 5.0]));
        let m = tape.max_axis(&x, 0).unwrap();
        let grads = tape.backward(&m).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::row(&[1.0, 2.0]));
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn repeat_rows_block_layout() {
        let mut tape = Tape::new();
        let v = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.repeat_rows(&v, 2).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn repeat_rows_row_mapping_property() {
        let mut tape = Tape::new();
        let v = Tensor::from_vec(vec![3, 1], vec![10.0, 20.0, 30.0]).unwrap();
        let j = 4;
        let y = tape.repeat_rows(&v, j).unwrap();
        assert_eq!(y.rows(), v.rows() * j);
        for i in 0..y.rows() {
            assert_eq!(y.at(i, 0), v.at(i / j, 0));
        }
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::row(&[1.0, 2.0, 3.0]);
        let y = tape.dropout(&x, 0.5, &mut rng, false).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_train_mode_zeroes_and_rescales() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::full(vec![1, 1000], 1.0);
        let y = tape.dropout(&x, 0.5, &mut rng, true).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        let kept = y.data().iter().filter(|&&v| v == 2.0).count();
        assert_eq!(zeros + kept, 1000);
        assert!(zeros > 400 && zeros < 600, "zeros = {zeros}");
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::row(&[1.0]);
        assert!(tape.dropout(&x, 1.0, &mut rng, true).is_err());
        assert!(tape.dropout(&x, -0.1, &mut rng, true).is_err());
    }

    #[test]
    fn concat_rows_stacks_in_order() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![1, 2], vec![5.0, 6.0]).unwrap();
        let y = tape.concat_rows(&a, &b).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.exp(&Tensor::scalar(1000.0)),
            Err(TensorError::NonFinite { op: "exp" })
        ));
    }

    #[test]
    fn scalar_broadcast_add_and_grad() {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::row(&[1.0, 2.0, 3.0]));
        let c = tape.watch(&Tensor::scalar(10.0));
        let y = tape.add(&x, &c).unwrap();
        assert_eq!(y.data(), &[11.0, 12.0, 13.0]);
        let s = tape.sum_axis(&y, 1).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 1.0]);
        // Broadcast scalar accumulates all three contributions.
        assert_eq!(grads.get(&c).unwrap(), &[3.0]);
    }

    #[test]
    fn straight_through_mask_passes_gradient() {
        let mut tape = Tape::new();
        let q = tape.watch(&Tensor::column(&[0.3, 0.7]));
        let m = tape.straight_through_mask(&q, 0.5).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0]);
        let s = tape.sum_axis(&m, 0).unwrap();
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.get(&q).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_is_deterministic_across_runs() {
        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = tape.watch(&Tensor::row(&[0.5, -1.5, 2.5, 0.1]));
            let d = tape.dropout(&x, 0.3, &mut rng, true).unwrap();
            let sq = tape.mul(&d, &d).unwrap();
            let act = tape.tanh(&sq).unwrap();
            let s1 = tape.sum_axis(&act, 1).unwrap();
            let loss = tape.sum_axis(&s1, 0).unwrap();
            tape.backward(&loss).unwrap().get(&x).unwrap().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn finite_diff_sweep_over_differentiable_ops() {
        // Nudged inputs keep relu/max away from their kink points.
        let x = Tensor::from_vec(vec![2, 3], vec![0.61, -0.72, 1.33, 0.48, -1.21, 0.92]).unwrap();
        type BuildFn = fn(&mut Tape, &Tensor) -> super::super::Result<Tensor>;
        let cases: Vec<(&str, BuildFn)> = vec![
            ("relu", |t, x| t.relu(x)),
            ("elu", |t, x| t.elu(x)),
            ("sigmoid", |t, x| t.sigmoid(x)),
            ("tanh", |t, x| t.tanh(x)),
            ("exp", |t, x| t.exp(x)),
            ("softmax", |t, x| t.softmax_rows(x)),
            ("transpose", |t, x| t.transpose(x)),
            ("mean0", |t, x| t.mean_axis(x, 0)),
            ("scale", |t, x| t.scale(x, -1.7)),
            ("mul_self", |t, x| t.mul(x, x)),
            ("div_shift", |t, x| {
                let s = t.add_scalar(x, 3.0)?;
                t.div(x, &s)
            }),
            ("clamp", |t, x| t.clamp(x, -1.0, 1.1)),
            ("repeat", |t, x| t.repeat_rows(x, 3)),
            ("slice", |t, x| t.slice_rows(x, 0, 1)),
        ];
        for (name, build) in cases {
            let err = super::super::finite_diff_check(
                |tape, t| {
                    let y = build(tape, t)?;
                    // Squash through tanh so the reduction is nontrivial.
                    let z = tape.tanh(&y)?;
                    let c = tape.sum_axis(&z, 1)?;
                    tape.sum_axis(&c, 0)
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(err <= 1e-4, "{name}: relative error {err}");
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut tape = Tape::new();
            let y = tape.softmax_rows(&Tensor::from_vec(vec![rows, cols], data).unwrap()).unwrap();
            for i in 0..rows {
                let s: f64 = (0..cols).map(|j| y.at(i, j)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
                for j in 0..cols {
                    prop_assert!(y.at(i, j) > 0.0 && y.at(i, j) < 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn repeat_rows_places_block_copies(rows in 1usize..4, j in 1usize..5, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols = 3usize;
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let v = Tensor::from_vec(vec![rows, cols], data).unwrap();
            let mut tape = Tape::new();
            let y = tape.repeat_rows(&v, j).unwrap();
            prop_assert_eq!(y.rows(), rows * j);
            for i in 0..y.rows() {
                for c in 0..cols {
                    prop_assert_eq!(y.at(i, c), v.at(i / j, c));
                }
            }
        }
    }
}
