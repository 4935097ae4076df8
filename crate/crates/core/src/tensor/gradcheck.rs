//! Central finite-difference check of reverse-mode gradients (fp64 only).

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Check every coordinate of `x`. `f` must return a scalar.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradcheck_coords(f, x, eps, &coords)
}

/// Check only the listed flat coordinates (for inputs too large to sweep).
pub fn gradcheck_coords<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<GradcheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::Config("gradcheck: eps must be positive".into()));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x);
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck: function must return a scalar, got shape {:?}",
            y.shape()
        )));
    }
    if !y.requires_grad() {
        // Output independent of x: analytic gradient is zero.
        return check(&f, x, eps, coords, |_| 0.0);
    }
    y.backward()?;
    let grad = leaf
        .grad()
        .ok_or_else(|| Error::Usage("gradcheck: leaf received no gradient".into()))?;
    check(&f, x, eps, coords, |i| grad.data()[i])
}

fn check<F>(f: &F, x: &Tensor<f64>, eps: f64, coords: &[usize], analytic: impl Fn(usize) -> f64) -> Result<GradcheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let xp = x.with_value(i, x.data()[i] + delta).map_err(|_| Error::NonFinite {
            op: "gradcheck",
            index: i,
        })?;
        match f(&xp) {
            Ok(v) => {
                let v = v.item()?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite { op: "gradcheck", index: i })
                }
            }
            Err(Error::NonFinite { .. }) => Err(Error::NonFinite { op: "gradcheck", index: i }),
            Err(e) => Err(e),
        }
    };
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coords_checked: 0,
    };
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::Usage(format!("gradcheck: coordinate {i} out of range")));
        }
        let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
        let a = analytic(i);
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = Rng::seed(8);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 4], 1.0);
        let w: Tensor<f64> = rng.normal_tensor(&[4, 2], 1.0);
        let r = gradcheck(|x| x.matmul(&w)?.mul_scalar(3.0)?.sum(), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.coords_checked, 12);
    }

    #[test]
    fn silu_depth_three() {
        let mut rng = Rng::seed(2);
        let x: Tensor<f64> = rng.normal_tensor(&[10], 1.5);
        let r = gradcheck(|x| x.silu()?.mul_scalar(1.3)?.silu()?.add_scalar(-0.2)?.silu()?.sum(), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn non_finite_reports_coordinate() {
        // finite at x, overflows at x + eps on coordinate 1
        let x = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let f = |x: &Tensor<f64>| {
            let y = x.narrow(0, 1, 1)?.add_scalar(-1.0)?.mul_scalar(1e308)?.mul_scalar(1e10)?;
            x.sum()?.add(&y.reshape(&[])?)
        };
        match gradcheck(f, &x, 1e-5) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
