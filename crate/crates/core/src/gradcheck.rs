//! Central finite differences, used as the independent oracle for every
//! analytic backward pass in the crate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for [`max_relative_error`]. Central differences with
/// `h = 1e-5` carry roughly `1e-10` of roundoff, so gradient elements smaller
/// than this are compared on an absolute scale instead.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// Central-difference estimate of the gradient of scalar `f` at `x`:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Parameter(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is non-finite when perturbing element {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Element-wise relative error `|a − b| / max(|a|, |b|, RELATIVE_FLOOR)`,
/// paired with the flat index of the worst element.
pub fn worst_relative_error(analytic: &Tensor, numeric: &Tensor) -> (f64, usize) {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR))
        .enumerate()
        .fold((0.0, 0), |(best, at), (i, e)| if e > best { (e, i) } else { (best, at) })
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    worst_relative_error(analytic, numeric).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let g = finite_difference_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn gradient_of_half_square_norm_is_identity() {
        let x = Tensor::from_fn(&[7], |i| i as f64 - 3.5);
        let g = finite_difference_grad(|t| Ok(0.5 * t.sum_squares()), &x, 1e-5).unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite_objective() {
        let x = Tensor::zeros(&[2]);
        assert!(matches!(
            finite_difference_grad(|t| Ok(t.sum()), &x, 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            finite_difference_grad(|_| Ok(f64::NAN), &x, 1e-5),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn relative_error_reports_worst_index() {
        let a = Tensor::vector(vec![1.0, 2.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 2.2, 0.0]);
        let (err, at) = worst_relative_error(&a, &b);
        assert_eq!(at, 1);
        assert!((err - 0.2 / 2.2).abs() < 1e-12);
    }
}
