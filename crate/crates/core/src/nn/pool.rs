//! 2×2 max pooling and the global pooling reductions.
//!
//! All argmax selections break ties toward the first element in scan order.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn chw<T: Real>(op: &str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!(
            "{op} expects a C×H×W tensor, got {:?}",
            x.shape()
        ))),
    }
}

/// Offset within the input of the first maximum of each 2×2 window.
fn window_argmax<T: Real>(x: &Tensor<T>) -> Result<(Vec<usize>, [usize; 3])> {
    let (c, h, w) = chw("maxpool2x2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "maxpool2x2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let r0 = base + 2 * y * w + 2 * xo;
                let mut best = r0;
                for cand in [r0 + 1, r0 + w, r0 + w + 1] {
                    if d[cand] > d[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, [c, oh, ow]))
}

pub fn maxpool2x2_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (idx, shape) = window_argmax(x)?;
    let d = x.data();
    Tensor::new(&shape, idx.iter().map(|&i| d[i]).collect())
}

pub fn maxpool2x2_backward<T: Real>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (idx, shape) = window_argmax(x)?;
    upstream.expect_shape("maxpool2x2_backward", &shape)?;
    let mut dx = Tensor::zeros(x.shape());
    let out = dx.data_mut();
    for (&i, &g) in idx.iter().zip(upstream.data()) {
        out[i] = g;
    }
    Ok(dx)
}

/// Spatial mean of each of the `K` maps.
pub fn gap_forward<T: Real>(maps: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, h, w) = chw("gap", maps)?;
    let n = T::from_usize(h * w).expect("spatial size");
    Ok(Tensor::from_fn(&[k], |c| {
        maps.channel(c).iter().copied().sum::<T>() / n
    }))
}

/// Spreads each unit's upstream gradient uniformly as `g / (h·w)`.
pub fn gap_backward<T: Real>(map_shape: &[usize], upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let [k, h, w] = *map_shape else {
        return Err(Error::invalid(format!(
            "gap_backward expects a K×h×w shape, got {map_shape:?}"
        )));
    };
    upstream.expect_shape("gap_backward", &[k])?;
    let n = T::from_usize(h * w).expect("spatial size");
    let plane = h * w;
    Ok(Tensor::from_fn(map_shape, |i| upstream.data()[i / plane] / n))
}

fn map_argmax<T: Real>(maps: &Tensor<T>) -> Result<Vec<usize>> {
    let (k, h, w) = chw("gmp", maps)?;
    let plane = h * w;
    Ok((0..k)
        .map(|c| {
            let m = maps.channel(c);
            let mut best = 0;
            for (i, &v) in m.iter().enumerate() {
                if v > m[best] {
                    best = i;
                }
            }
            c * plane + best
        })
        .collect())
}

/// Spatial max of each of the `K` maps.
pub fn gmp_forward<T: Real>(maps: &Tensor<T>) -> Result<Tensor<T>> {
    let idx = map_argmax(maps)?;
    Tensor::new(&[idx.len()], idx.iter().map(|&i| maps.data()[i]).collect())
}

pub fn gmp_backward<T: Real>(maps: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let idx = map_argmax(maps)?;
    upstream.expect_shape("gmp_backward", &[idx.len()])?;
    let mut dx = Tensor::zeros(maps.shape());
    for (&i, &g) in idx.iter().zip(upstream.data()) {
        dx.data_mut()[i] = g;
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn maxpool_single_window() {
        let y = maxpool2x2_forward(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = Tensor::<f64>::full(&[1, 4, 4], 3.0);
        let y = maxpool2x2_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let up = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let dx = maxpool2x2_backward(&x, &up).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 0.0, 2.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            3.0, 0.0, 4.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(dx.data(), &want);
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let mut rng = Pcg64::seed_from_u64(21);
        for _ in 0..20 {
            let x = Tensor::<f64>::from_fn(&[1, 8, 8], |_| rng.random_range(-1.0..1.0));
            let y = maxpool2x2_forward(&x).unwrap();
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.at(&[0, 2 * oy + dy, 2 * ox + dx]));
                        }
                    }
                    assert_eq!(y.at(&[0, oy, ox]), m);
                }
            }
        }
    }

    #[test]
    fn maxpool_rejects_odd() {
        assert!(maxpool2x2_forward(&Tensor::<f32>::zeros(&[1, 3, 4])).is_err());
        assert!(maxpool2x2_forward(&Tensor::<f32>::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn gap_and_gmp_on_small_map() {
        let m = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(gap_forward(&m).unwrap().data(), &[2.5]);
        assert_eq!(gmp_forward(&m).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full(&[2, 3, 3], 1.75);
        assert_eq!(gap_forward(&c).unwrap().data(), &[1.75, 1.75]);
        assert_eq!(gmp_forward(&c).unwrap(), gap_forward(&c).unwrap());
    }

    #[test]
    fn gap_gradient_is_uniform() {
        // d/df_k of Σ w_k F_k = w_k / (h·w), checked against central differences
        let mut rng = Pcg64::seed_from_u64(4);
        let maps = Tensor::<f64>::from_fn(&[3, 4, 5], |_| rng.random_range(-1.0..1.0));
        let w = t(&[3], &[0.3, -1.2, 2.0]);
        let g = gap_backward(maps.shape(), &w).unwrap();
        let obj = |m: &Tensor<f64>| -> f64 {
            let f = gap_forward(m).unwrap();
            f.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-5;
        for i in 0..maps.len() {
            let mut p = maps.clone();
            p.data_mut()[i] += eps;
            let mut m = maps.clone();
            m.data_mut()[i] -= eps;
            let fd = (obj(&p) - obj(&m)) / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-9);
            assert!((g.data()[i] - w.data()[i / 20] / 20.0).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn gmp_dominates_gap(v in prop::collection::vec(-5.0f64..5.0, 12)) {
            let m = Tensor::new(&[3, 2, 2], v).unwrap();
            let a = gap_forward(&m).unwrap();
            let x = gmp_forward(&m).unwrap();
            for (ga, gx) in a.data().iter().zip(x.data()) {
                prop_assert!(gx >= ga);
            }
        }

        #[test]
        fn constant_maps_pool_identically(vals in prop::collection::vec(-3.0f64..3.0, 1..6), h in 1usize..5, w in 1usize..5) {
            let k = vals.len();
            let m = Tensor::from_fn(&[k, h, w], |i| vals[i / (h * w)]);
            let (a, x) = (gap_forward(&m).unwrap(), gmp_forward(&m).unwrap());
            for (ga, gx) in a.data().iter().zip(x.data()) {
                prop_assert!((ga - gx).abs() <= 1e-12 * gx.abs().max(1.0));
            }
        }
    }
}
