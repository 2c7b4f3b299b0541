//! Bias-free linear classifier with softmax output and cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Max-subtracted softmax.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let m = logits.max();
    let e = logits.map(|s| (s - m).exp());
    let z = e.sum();
    e.map(|v| v / z)
}

/// `S_c = Σ_k W[c][k]·F[k]` and `P = softmax(S)`. There is no bias term.
pub fn linear_softmax_forward<T: Real>(
    features: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let k = features.len();
    let [c, wk] = *weights.shape() else {
        return Err(Error::invalid(format!(
            "classifier weights must be C×K, got {:?}",
            weights.shape()
        )));
    };
    if wk != k || features.ndim() != 1 {
        return Err(Error::shape("linear_softmax features", &[wk], features.shape()));
    }
    let f = features.data();
    let logits = Tensor::from_fn(&[c], |row| {
        weights.data()[row * k..(row + 1) * k]
            .iter()
            .zip(f)
            .map(|(&w, &x)| w * x)
            .sum()
    });
    let probs = softmax(&logits);
    Ok((logits, probs))
}

/// Given `∂L/∂S`, returns `(∂L/∂W, ∂L/∂F)`.
pub fn linear_softmax_backward<T: Real>(
    features: &Tensor<T>,
    weights: &Tensor<T>,
    d_logits: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let k = features.len();
    let c = d_logits.len();
    weights.expect_shape("linear_softmax_backward weights", &[c, k])?;
    let g = d_logits.data();
    let f = features.data();
    let dw = Tensor::from_fn(&[c, k], |i| g[i / k] * f[i % k]);
    let df = Tensor::from_fn(&[k], |j| {
        (0..c).map(|row| g[row] * weights.data()[row * k + j]).sum()
    });
    Ok((dw, df))
}

/// `L = −log P[label]` and `∂L/∂S = P − onehot(label)`.
pub fn cross_entropy_loss<T: Real>(probs: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let classes = probs.len();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let tiny = T::min_positive_value();
    let p = probs.data()[label];
    // clamp underflow but let NaN through so divergence is visible
    let loss = if p.is_nan() { p } else { -p.max(tiny).ln() };
    let mut grad = probs.clone();
    grad.data_mut()[label] = grad.data()[label] - T::one();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_weights_give_uniform() {
        let f = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = Tensor::zeros(&[4, 3]);
        let (s, p) = linear_softmax_forward(&f, &w).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_computed_two_class() {
        let f = Tensor::<f64>::new(&[1], vec![2.0]).unwrap();
        let w = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let (s, p) = linear_softmax_forward(&f, &w).unwrap();
        assert_eq!(s.data(), &[2.0, 6.0]);
        let z = 2f64.exp() + 6f64.exp();
        assert!((p.data()[0] - 2f64.exp() / z).abs() < 1e-15);
        assert!((p.data()[1] - 6f64.exp() / z).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_values() {
        let p = Tensor::<f64>::full(&[4], 0.25);
        let (l, _) = cross_entropy_loss(&p, 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let sure = Tensor::<f64>::new(&[3], vec![1e-12, 1.0 - 2e-12, 1e-12]).unwrap();
        assert!(cross_entropy_loss(&sure, 1).unwrap().0 < 1e-9);
        assert!(matches!(
            cross_entropy_loss(&p, 4),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let s = Tensor::<f64>::new(&[4], vec![0.3, -1.1, 2.0, 0.7]).unwrap();
        let (_, g) = cross_entropy_loss(&softmax(&s), 1).unwrap();
        let eps = 1e-5;
        for i in 0..4 {
            let mut up = s.clone();
            up.data_mut()[i] += eps;
            let mut dn = s.clone();
            dn.data_mut()[i] -= eps;
            let fd = (cross_entropy_loss(&softmax(&up), 1).unwrap().0
                - cross_entropy_loss(&softmax(&dn), 1).unwrap().0)
                / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f32..50.0, 1..12)) {
            let p = softmax(&Tensor::new(&[v.len()], v).unwrap());
            prop_assert!(p.data().iter().all(|&x| x >= 0.0));
            prop_assert!((p.sum() - 1.0).abs() <= 1e-6);
        }
    }
}
