//! Central-difference gradient checking in double precision.

use crate::error::{Error, Result};

/// A scalar-valued function of a flat parameter vector with an analytic
/// gradient.
pub trait Fragment {
    fn loss(&self, params: &[f64]) -> Result<f64>;
    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>>;
}

/// Adapts a pair of closures into a [`Fragment`].
pub struct FnFragment<L, G> {
    pub loss: L,
    pub gradient: G,
}

impl<L, G> Fragment for FnFragment<L, G>
where
    L: Fn(&[f64]) -> Result<f64>,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn loss(&self, params: &[f64]) -> Result<f64> {
        (self.loss)(params)
    }

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(params)
    }
}

/// Max over parameters of `|analytic − numeric| / max(1, |analytic|, |numeric|)`
/// with numeric derivatives from central differences of width `2·eps`.
/// An empty parameter vector yields 0.
pub fn gradcheck(fragment: &impl Fragment, point: &[f64], eps: f64) -> Result<f64> {
    if point.is_empty() {
        return Ok(0.0);
    }
    let analytic = fragment.gradient(point)?;
    if analytic.len() != point.len() {
        return Err(Error::shape("gradcheck gradient", &[point.len()], &[analytic.len()]));
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient"));
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let up = fragment.loss(&probe)?;
        probe[i] = point[i] - eps;
        let down = fragment.loss(&probe)?;
        probe[i] = point[i];
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite("finite difference"));
        }
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let c = [0.5, -3.0, 2.25, 10.0];
        let f = FnFragment {
            loss: |p: &[f64]| Ok(p.iter().zip(&c).map(|(a, b)| a * b).sum()),
            gradient: |_: &[f64]| Ok(c.to_vec()),
        };
        let err = gradcheck(&f, &[1.0, 2.0, -1.0, 0.3], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn empty_fragment_is_zero() {
        let f = FnFragment {
            loss: |_: &[f64]| Ok(1.0),
            gradient: |_: &[f64]| Ok(vec![]),
        };
        assert_eq!(gradcheck(&f, &[], 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let f = FnFragment {
            loss: |p: &[f64]| Ok(p[0] * p[0]),
            gradient: |p: &[f64]| Ok(vec![3.0 * p[0]]),
        };
        assert!(gradcheck(&f, &[2.0], 1e-5).unwrap() > 0.1);
    }

    #[test]
    fn non_finite_is_reported() {
        let f = FnFragment {
            loss: |p: &[f64]| Ok(p[0].ln()),
            gradient: |p: &[f64]| Ok(vec![1.0 / p[0]]),
        };
        assert!(matches!(gradcheck(&f, &[0.0], 1e-5), Err(Error::NonFinite(_))));
    }
}
