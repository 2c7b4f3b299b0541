use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One momentum-SGD update:
/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid(format!(
            "sgd_step got {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        g.expect_shape("sgd_step gradient", p.shape())?;
        v.expect_shape("sgd_step velocity", p.shape())?;
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

/// Momentum SGD with its velocity buffers.
#[derive(Debug, Clone)]
pub struct Sgd<T: Real> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(shapes: &[Vec<usize>], momentum: T, weight_decay: T) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: T) -> Result<()> {
        sgd_step(
            params,
            grads,
            &mut self.velocity,
            lr,
            self.momentum,
            self.weight_decay,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Tensor<f64>, Tensor<f64>, Vec<Tensor<f64>>) {
        let p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(&[3], vec![0.1, 0.2, -0.3]).unwrap();
        let v = vec![Tensor::zeros(&[3])];
        (p, g, v)
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut p, g, mut v) = setup();
        let orig = p.clone();
        sgd_step(&mut [&mut p], &[g], &mut v, 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn plain_sgd() {
        let (mut p, g, mut v) = setup();
        let orig = p.clone();
        sgd_step(&mut [&mut p], std::slice::from_ref(&g), &mut v, 0.1, 0.0, 0.0).unwrap();
        for i in 0..3 {
            assert!((p.data()[i] - (orig.data()[i] - 0.1 * g.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = g, v2 = 0.9g + g -> total displacement lr·(g + 1.9g)
        let (mut p, g, mut v) = setup();
        let orig = p.clone();
        for _ in 0..2 {
            sgd_step(&mut [&mut p], std::slice::from_ref(&g), &mut v, 0.1, 0.9, 0.0).unwrap();
        }
        for i in 0..3 {
            let want = orig.data()[i] - 0.1 * (g.data()[i] + 1.9 * g.data()[i]);
            assert!((p.data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let (mut p, _, mut v) = setup();
        let bad = Tensor::zeros(&[4]);
        assert!(sgd_step(&mut [&mut p], &[bad], &mut v, 0.1, 0.0, 0.0).is_err());
    }
}
