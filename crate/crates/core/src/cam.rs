//! Class activation maps, the logit decomposition check, bilinear upsampling
//! and the input-gradient saliency baseline.

use crate::error::{Error, Result};
use crate::gapnet::{ForwardTrace, GapNet};
use crate::tensor::{Real, Tensor};

/// Class activation map for one class at mapping resolution, optionally with
/// its image-resolution upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Cam<T: Real = f32> {
    pub class_id: usize,
    /// `h×w`, un-normalized.
    pub raw: Tensor<T>,
    pub upsampled: Option<Tensor<T>>,
    pub max_val: T,
    pub min_val: T,
}

impl<T: Real> Cam<T> {
    pub fn from_raw(class_id: usize, raw: Tensor<T>) -> Self {
        Self {
            class_id,
            max_val: raw.max(),
            min_val: raw.min(),
            raw,
            upsampled: None,
        }
    }

    /// Fills `upsampled` with the bilinear resize of `raw` to `height×width`.
    pub fn upsample(mut self, height: usize, width: usize) -> Result<Self> {
        self.upsampled = Some(upsample_bilinear(&self.raw, height, width)?);
        Ok(self)
    }

    pub fn mean(&self) -> T {
        self.raw.sum() / T::from_usize(self.raw.len()).expect("size")
    }
}

/// `M_c(x, y) = Σ_k W[c][k] · f_k(x, y)` from a trace's feature maps.
pub fn compute_cam<T: Real>(
    trace: &ForwardTrace<T>,
    weights: &Tensor<T>,
    class_id: usize,
) -> Result<Cam<T>> {
    cam_from_maps(&trace.feature_maps, weights, class_id)
}

pub fn cam_from_maps<T: Real>(
    maps: &Tensor<T>,
    weights: &Tensor<T>,
    class_id: usize,
) -> Result<Cam<T>> {
    let [k, h, w] = *maps.shape() else {
        return Err(Error::invalid(format!(
            "feature maps must be K×h×w, got {:?}",
            maps.shape()
        )));
    };
    let [classes, wk] = *weights.shape() else {
        return Err(Error::invalid(format!(
            "class weights must be C×K, got {:?}",
            weights.shape()
        )));
    };
    if wk != k {
        return Err(Error::shape("cam weights", &[classes, k], weights.shape()));
    }
    if class_id >= classes {
        return Err(Error::LabelOutOfRange {
            label: class_id,
            classes,
        });
    }
    let row = &weights.data()[class_id * k..(class_id + 1) * k];
    let mut raw = Tensor::zeros(&[h, w]);
    for (unit, &wv) in row.iter().enumerate() {
        for (o, &f) in raw.data_mut().iter_mut().zip(maps.channel(unit)) {
            *o = *o + wv * f;
        }
    }
    Ok(Cam::from_raw(class_id, raw))
}

/// `|S_c − mean(M_c)| / max(1, |S_c|)`. Zero up to rounding for GAP networks,
/// whose logits are the spatial mean of the class map.
pub fn verify_score_identity<T: Real>(trace: &ForwardTrace<T>, cam: &Cam<T>) -> f64 {
    let s = trace.logits.data()[cam.class_id].to_f64_lossy();
    let m = cam.mean().to_f64_lossy();
    (s - m).abs() / s.abs().max(1.0)
}

/// Linear blend clamped to the endpoints so the result never leaves
/// `[min(a, b), max(a, b)]`, and equals `a` exactly when `a == b`.
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    let v = a + t * (b - a);
    v.max(a.min(b)).min(a.max(b))
}

/// Per-axis sampling table: `(i0, i1, frac)` for each destination index using
/// half-pixel centers, `src = (dst + 0.5)·n/m − 0.5` clamped to `[0, n−1]`.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of an `h×w` map to `height×width` with half-pixel centers.
pub fn upsample_bilinear<T: Real>(raw: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let [h, w] = *raw.shape() else {
        return Err(Error::invalid(format!(
            "upsample expects an h×w map, got {:?}",
            raw.shape()
        )));
    };
    if height < h || width < w {
        return Err(Error::invalid(format!(
            "target {height}x{width} smaller than source {h}x{w}"
        )));
    }
    let ys = axis_taps(h, height);
    let xs = axis_taps(w, width);
    let d = raw.data();
    let mut out = Tensor::zeros(&[height, width]);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        let fy = T::from_f64_lossy(fy);
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let fx = T::from_f64_lossy(fx);
            let top = lerp(d[y0 * w + x0], d[y0 * w + x1], fx);
            let bot = lerp(d[y1 * w + x0], d[y1 * w + x1], fx);
            out.data_mut()[oy * width + ox] = lerp(top, bot, fy);
        }
    }
    Ok(out)
}

/// `|∂S_c/∂image|`, maximized over input channels: an `H×W` map.
pub fn saliency_backprop<T: Real>(net: &GapNet<T>, image: &Tensor<T>, class_id: usize) -> Result<Tensor<T>> {
    let classes = net.class_count();
    if class_id >= classes {
        return Err(Error::LabelOutOfRange {
            label: class_id,
            classes,
        });
    }
    let (trace, cache) = net.forward_cached(image)?;
    let onehot = Tensor::from_fn(&[classes], |c| if c == class_id { T::one() } else { T::zero() });
    let grad = net
        .backward(&trace, &cache, &onehot, true)?
        .input
        .expect("input gradient requested");
    let [c, h, w] = net.input_shape();
    let plane = h * w;
    Ok(Tensor::from_fn(&[h, w], |i| {
        (0..c)
            .map(|ch| grad.data()[ch * plane + i].abs())
            .fold(T::zero(), |a, b| a.max(b))
    }))
}
