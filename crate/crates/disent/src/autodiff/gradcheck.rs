//! Central finite-difference gradient verification.

use super::{Tensor, TensorError};

/// Compare the analytic gradient of a scalar-valued `f` at `x` against
/// central finite differences with the given step.
///
/// Returns the max over components of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&Tensor) -> Result<Tensor, TensorError>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let leaf = Tensor::leaf(x.data().to_vec(), x.shape())?;
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().expect("leaf gradient populated by backward");

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        let fp = f(&Tensor::from_vec(plus, x.shape())?)?.item()?;
        let fm = f(&Tensor::from_vec(minus, x.shape())?)?.item()?;
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear_function() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0], &[3]).unwrap();
        let err = finite_difference_check(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "linear fd error {}", err);
    }

    #[test]
    fn sum_of_squares_matches_2x() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let err = finite_difference_check(|t| Ok(t.square().sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "quadratic fd error {}", err);
    }
}
