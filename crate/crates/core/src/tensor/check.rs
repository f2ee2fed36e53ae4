//! Gradient verification against central finite differences.

use super::{Result, Tape, Tensor};

/// Compares the analytic gradient of `f` at `x` to central differences.
///
/// `f` must build a deterministic scalar loss from its argument on the
/// supplied tape. The analytic gradient comes from one backward pass; the
/// numeric gradient perturbs each element by `±h`. Returns the maximum
/// relative error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let leaf = tape.watch(x);
    let loss = f(&mut tape, &leaf)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads.get_or_zeros(&leaf);

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let base = x.data()[i];
        let eval = |v: f64| -> Result<f64> {
            let mut t = Tape::new();
            let probe = x.with_element(i, v);
            f(&mut t, &probe)?.item()
        };
        let plus = eval(base + h)?;
        let minus = eval(base - h)?;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}
