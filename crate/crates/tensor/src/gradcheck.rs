//! Finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst coordinate found by [`check_gradients_many`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

fn evaluate<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares analytic gradients of a scalar function against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps` for every coordinate of every
/// input. Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::Param("check_gradients: function must be scalar-valued".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        for c in 0..x.numel() {
            let orig = x.data()[c];
            probe[k].data_mut()[c] = orig + eps;
            let fp = evaluate(&f, &probe)?;
            probe[k].data_mut()[c] = orig - eps;
            let fm = evaluate(&f, &probe)?;
            probe[k].data_mut()[c] = orig;
            let a = analytic[k].data()[c];
            if !fp.is_finite() || !fm.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFinite {
                    coordinate: c,
                    context: format!("input {k}: f(x+eps)={fp}, f(x-eps)={fm}, analytic={a}"),
                });
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_relative_error {
                report = GradCheckReport { max_relative_error: rel, worst: (k, c), analytic: a, numeric };
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`check_gradients_many`]; returns the max relative error.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps).map(|r| r.max_relative_error)
}
