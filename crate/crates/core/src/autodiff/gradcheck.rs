use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub checked: usize,
}

/// `|a - b| / max(1e-12, |a| + |b|)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-12)
}

fn eval_scalar<F>(f: &F, point: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point);
    let out = f(&mut g, x)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function returned {v}")));
    }
    Ok(v)
}

/// Checks every coordinate of `point`; see [`finite_difference_check_at`].
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_at(f, point, step, None)
}

/// Compares the reverse-mode gradient of the scalar function `f` at `point`
/// with central differences of half-width `step`, over `indices` (or all
/// coordinates).
pub fn finite_difference_check_at<F>(
    f: F,
    point: &Tensor,
    step: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x)?;
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function returned {value}")));
    }
    g.backward(out)?;
    let ad = g.grad(x).unwrap_or_else(|| Tensor::zeros(point.dims()));

    let all: Vec<usize>;
    let indices = match indices {
        Some(idx) => idx,
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval_scalar(&f, plus)? - eval_scalar(&f, minus)?) / (2.0 * step);
        let err = relative_error(ad.data()[i], fd);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
