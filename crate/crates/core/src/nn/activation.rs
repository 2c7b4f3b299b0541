use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `upstream` where `x > 0`; the subgradient at zero is zero.
pub fn relu_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.expect_shape("relu_backward", x.shape())?;
    let mut out = upstream.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn forward_clamps_negatives() {
        let x = Tensor::new(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_masks_nonpositive() {
        let x = Tensor::new(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let up = Tensor::full(&[3], 5.0);
        assert_eq!(relu_backward(&x, &up).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    proptest! {
        #[test]
        fn forward_is_idempotent(v in prop::collection::vec(-10.0f32..10.0, 1..64)) {
            let x = Tensor::new(&[v.len()], v).unwrap();
            let once = relu_forward(&x);
            prop_assert_eq!(relu_forward(&once), once);
        }
    }
}
