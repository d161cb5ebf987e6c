use super::tape::{Graph, Var};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare the tape gradient of a scalar function against central
/// differences.
///
/// `f` records its computation on the supplied graph, starting from the
/// input variable, and returns the scalar output. Returns the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`; any
/// non-finite difference yields `f64::INFINITY`.
pub fn check_gradient<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let input = g.param(x.clone());
    let out = f(&mut g, input);
    if g.backward(out).is_err() {
        return f64::INFINITY;
    }
    let analytic = match g.grad(input) {
        Some(grad) => grad.to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let input = g.param(t);
        let out = f(&mut g, input);
        g.value(out).data()[0]
    };
    check_against_central_differences(&analytic, x, h, eval)
}

/// Same error measure as [`check_gradient`] for an arbitrary scalar
/// function whose analytic gradient is supplied by the caller.
pub fn check_against_central_differences<E>(analytic: &[f64], x: &Tensor, h: f64, eval: E) -> f64
where
    E: Fn(Tensor) -> f64,
{
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    worst
}
