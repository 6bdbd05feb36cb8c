use rand::seq::index;
use rand::Rng;

use super::Tensor;

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(tensor index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// For every tensor in `params`, up to `coords_per_tensor` coordinates are
/// sampled without replacement (all of them when the tensor is smaller).
/// `f` is evaluated at `params` with one coordinate perturbed by `±eps`;
/// `params` is restored before returning.
pub fn finite_diff_check<F, R>(
    mut f: F,
    params: &mut [Tensor],
    analytic: &[Vec<f64>],
    eps: f64,
    coords_per_tensor: usize,
    rng: &mut R,
) -> FiniteDiffReport
where
    F: FnMut(&[Tensor]) -> f64,
    R: Rng + ?Sized,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for t in 0..params.len() {
        let n = params[t].numel();
        let picks = index::sample(rng, n, coords_per_tensor.min(n));
        for c in picks.into_iter() {
            let orig = params[t].data()[c];
            params[t].data_mut()[c] = orig + eps;
            let plus = f(params);
            params[t].data_mut()[c] = orig - eps;
            let minus = f(params);
            params[t].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((t, c, a, numeric));
            }
        }
    }
    report
}
