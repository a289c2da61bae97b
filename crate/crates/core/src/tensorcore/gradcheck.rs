//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default step for float64 checks: truncation error is O(h²) ≈ 1e-8
/// relative, round-off on O(1) objectives about 1e-12.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Denominator floor of [`relative_error`], so that structurally zero
/// gradients are not compared against round-off.
pub const ERROR_FLOOR: f64 = 1e-6;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a − n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare `analytic` with `(f(x+h) − f(x−h)) / 2h`, element by element.
pub fn check_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic: &Tensor,
    h: f64,
) -> Result<GradCheckReport> {
    if analytic.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} vs input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: x.len(),
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at element {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Gradient check of a scalar graph function of one input tensor.
///
/// `f` receives a fresh graph and the input as a trainable leaf and must
/// return a one-element node. Returns the maximum relative error.
pub fn grad_check(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    grad_check_report(f, x, h).map(|r| r.max_rel_error)
}

pub fn grad_check_report(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(t.clone());
        let out = f(&mut g, xv)?;
        Ok(g.value(out).item())
    };
    check_gradient(eval, x, &analytic, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[2.0, 4.0, 6.0]);

        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-7, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::from_vec(vec![1], vec![1e-6]);
        let r = grad_check(
            |g, x| {
                let l = g.log(x)?;
                g.sum(l)
            },
            &x,
            1e-5,
        );
        assert!(r.is_err());
    }
}
