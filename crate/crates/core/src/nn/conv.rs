//! Direct-summation 2-D convolution over `C×H×W` tensors.

use crate::error::{Error, Result};
use crate::nn::LayerGrad;
use crate::tensor::{Real, Tensor};

/// Geometry of a convolution: square kernel, equal stride and zero padding on
/// both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output spatial size for an `h×w` input, floor semantics.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.kernel == 0 || self.kernel > ph || self.kernel > pw {
            return Err(Error::invalid(format!(
                "kernel {} does not fit padded input {ph}x{pw}",
                self.kernel
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }
}

fn geometry<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    if input.ndim() != 3 {
        return Err(Error::invalid(format!(
            "conv2d input must be C×H×W, got {:?}",
            input.shape()
        )));
    }
    if weights.ndim() != 4 || weights.shape()[2] != weights.shape()[3] {
        return Err(Error::invalid(format!(
            "conv2d weights must be C_out×C_in×k×k, got {:?}",
            weights.shape()
        )));
    }
    let ws = weights.shape();
    if ws[1] != input.shape()[0] {
        return Err(Error::shape(
            "conv2d input channels",
            &[ws[1]],
            &[input.shape()[0]],
        ));
    }
    Ok(ConvGeometry {
        in_channels: ws[1],
        out_channels: ws[0],
        kernel: ws[2],
        stride,
        pad,
    })
}

/// Range of output columns `x` for which `x*stride + d - pad` lands inside
/// `0..len`.
fn valid_range(out_len: usize, len: usize, stride: usize, d: usize, pad: usize) -> (usize, usize) {
    // x*stride + d >= pad
    let lo = if d >= pad { 0 } else { (pad - d).div_ceil(stride) };
    // x*stride + d - pad <= len - 1
    let hi = if len + pad > d {
        ((len + pad - d - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input, weights, stride, pad)?;
    bias.expect_shape("conv2d bias", &[g.out_channels])?;
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = g.output_size(h, w)?;
    let k = g.kernel;
    let mut out = Tensor::zeros(&[g.out_channels, oh, ow]);
    let x_in = input.data();
    let wd = weights.data();
    let out_data = out.data_mut();
    for o in 0..g.out_channels {
        let plane = &mut out_data[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(bias.data()[o]);
        for i in 0..g.in_channels {
            let src = &x_in[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                let (y_lo, y_hi) = valid_range(oh, h, stride, dy, pad);
                for dx in 0..k {
                    let wv = wd[((o * g.in_channels + i) * k + dy) * k + dx];
                    let (x_lo, x_hi) = valid_range(ow, w, stride, dx, pad);
                    for y in y_lo..y_hi {
                        let iy = y * stride + dy - pad;
                        let row = &src[iy * w..(iy + 1) * w];
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        if stride == 1 {
                            let ix0 = x_lo + dx - pad;
                            let n = x_hi - x_lo;
                            for (d, &s) in dst[x_lo..x_hi].iter_mut().zip(&row[ix0..ix0 + n]) {
                                *d = *d + wv * s;
                            }
                        } else {
                            for x in x_lo..x_hi {
                                dst[x] = dst[x] + wv * row[x * stride + dx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `L = Σ upstream ⊙ conv2d_forward(input, weights, ·)`.
///
/// Returns `[∂L/∂weights, ∂L/∂bias]` in `params` and `∂L/∂input` in `input`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let (dw, db, dx) = conv2d_backward_impl(input, weights, stride, pad, upstream, true)?;
    Ok(LayerGrad {
        params: vec![dw, db],
        input: dx.expect("input gradient requested"),
    })
}

/// Parameter gradients only; skips the input gradient for a network's first
/// layer.
pub(crate) fn conv2d_backward_params<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (dw, db, _) = conv2d_backward_impl(input, weights, stride, pad, upstream, false)?;
    Ok((dw, db))
}

/// Dot product with eight fixed partial sums; the reduction order depends only
/// on the slice length.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ca, cb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] = lanes[l] + ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    lanes.iter().copied().sum::<T>() + tail
}

type ConvGrads<T> = (Tensor<T>, Tensor<T>, Option<Tensor<T>>);

fn conv2d_backward_impl<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
    upstream: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let g = geometry(input, weights, stride, pad)?;
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = g.output_size(h, w)?;
    upstream.expect_shape("conv2d upstream gradient", &[g.out_channels, oh, ow])?;
    let k = g.kernel;
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(&[g.out_channels]);
    let mut dx = want_input.then(|| Tensor::zeros(input.shape()));
    let x_in = input.data();
    let wd = weights.data();
    let up = upstream.data();
    for o in 0..g.out_channels {
        let gplane = &up[o * oh * ow..(o + 1) * oh * ow];
        db.data_mut()[o] = gplane.iter().copied().sum();
        for i in 0..g.in_channels {
            let src = &x_in[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                let (y_lo, y_hi) = valid_range(oh, h, stride, dy, pad);
                for dxk in 0..k {
                    let widx = ((o * g.in_channels + i) * k + dy) * k + dxk;
                    let wv = wd[widx];
                    let (x_lo, x_hi) = valid_range(ow, w, stride, dxk, pad);
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let iy = y * stride + dy - pad;
                        let row = &src[iy * w..(iy + 1) * w];
                        let grow = &gplane[y * ow..(y + 1) * ow];
                        if stride == 1 {
                            let ix0 = x_lo + dxk - pad;
                            let n = x_hi - x_lo;
                            let gs = &grow[x_lo..x_hi];
                            let xs = &row[ix0..ix0 + n];
                            acc = acc + dot(gs, xs);
                            if let Some(dx) = dx.as_mut() {
                                let drow = &mut dx.data_mut()[i * h * w + iy * w..][..w];
                                for (d, &gv) in drow[ix0..ix0 + n].iter_mut().zip(gs) {
                                    *d = *d + wv * gv;
                                }
                            }
                        } else {
                            for x in x_lo..x_hi {
                                let ix = x * stride + dxk - pad;
                                acc = acc + grow[x] * row[ix];
                                if let Some(dx) = dx.as_mut() {
                                    let d = &mut dx.data_mut()[i * h * w + iy * w + ix];
                                    *d = *d + wv * grow[x];
                                }
                            }
                        }
                    }
                    dw.data_mut()[widx] = acc;
                }
            }
        }
    }
    Ok((dw, db, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn random(shape: &[usize], rng: &mut Pcg64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Six nested loops straight from the definition.
    fn conv_oracle(
        input: &Tensor<f64>,
        weights: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co, k) = (weights.shape()[0], weights.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let padded = |c: usize, y: isize, x: isize| -> f64 {
            let (y, x) = (y - pad as isize, x - pad as isize);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                input.at(&[c, y as usize, x as usize])
            }
        };
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = bias.at(&[o]);
                    for i in 0..ci {
                        for dy in 0..k {
                            for dx in 0..k {
                                s += weights.at(&[o, i, dy, dx])
                                    * padded(i, (y * stride + dy) as isize, (x * stride + dx) as isize);
                            }
                        }
                    }
                    out.set(&[o, y, x], s);
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_scales_input() {
        let x = Tensor::<f32>::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 1, 1], 2.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = Pcg64::seed_from_u64(3);
        let x = random(&[2, 5, 5], &mut rng);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        for o in 0..3 {
            assert!(y.channel(o).iter().all(|&v| v == b.data()[o]));
        }
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = Pcg64::seed_from_u64(11);
        for _ in 0..50 {
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=2);
            let k = rng.random_range(1..=3);
            let ci = rng.random_range(1..=3);
            let co = rng.random_range(1..=3);
            let x = random(&[ci, rng.random_range(3..7), rng.random_range(3..7)], &mut rng);
            let w = random(&[co, ci, k, k], &mut rng);
            let b = random(&[co], &mut rng);
            let got = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let want = conv_oracle(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            conv2d_forward(&x, &w, &b, 1, 1),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Pcg64::seed_from_u64(5);
        let x = random(&[2, 4, 4], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let g = conv2d_backward(&x, &w, 1, 1, &Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(g.params.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_kernel_weight_gradient() {
        let mut rng = Pcg64::seed_from_u64(6);
        let x = random(&[1, 4, 5], &mut rng);
        let up = random(&[1, 4, 5], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 0.7);
        let g = conv2d_backward(&x, &w, 1, 0, &up).unwrap();
        let want: f64 = x.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
        assert!((g.params[0].data()[0] - want).abs() < 1e-12);
        assert!((g.params[1].data()[0] - up.sum()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_upstream_shape() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        assert!(conv2d_backward(&x, &w, 1, 1, &Tensor::zeros(&[2, 3, 3])).is_err());
    }
}
