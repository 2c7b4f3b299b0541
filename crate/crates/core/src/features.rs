//! Reusing pooled unit activations: linear hinge-loss heads trained on frozen
//! features, class maps from those heads, and per-class unit rankings with
//! receptive-field patches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;

use crate::cam::{cam_from_maps, Cam};
use crate::error::{Error, Result};
use crate::gapnet::{ForwardTrace, GapNet, Layer};
use crate::eval::{iou, IOU_THRESHOLD};
use crate::localize::{tight_box, BBox, TIGHT_THRESHOLD};
use crate::synthdata::Sample;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Bias-free one-vs-rest linear classifier over `K` pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `C'×K`.
    pub weights: Tensor<f32>,
    /// Free-form description of the label set the head was trained on.
    pub label_set: String,
    pub lambda: f64,
}

impl LinearHead {
    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn scores(&self, features: &[f32]) -> Vec<f32> {
        let k = self.units();
        self.weights
            .data()
            .chunks(k)
            .map(|row| row.iter().zip(features).map(|(w, f)| w * f).sum())
            .collect()
    }

    pub fn predict(&self, features: &[f32]) -> usize {
        let s = self.scores(features);
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        best
    }
}

/// Parses a relabelling such as `"0,0,1,1,2"`: entry `i` is the new label of
/// original class `i`.
pub fn parse_relabel(text: &str) -> Result<Vec<usize>> {
    let map: Vec<usize> = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad relabel entry {t:?} in {text:?}")))
        })
        .collect::<Result<_>>()?;
    let classes = map.iter().max().map_or(0, |m| m + 1);
    if (0..classes).any(|c| !map.contains(&c)) {
        return Err(Error::invalid(format!(
            "relabel {text:?} leaves some new labels unused"
        )));
    }
    Ok(map)
}

/// Pooled features of each image, one row per image: `N×K`.
pub fn extract_gap_features(net: &GapNet<f32>, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::invalid("no images to extract features from"));
    }
    let k = net.unit_count();
    let mut data = Vec::with_capacity(images.len() * k);
    for img in images {
        data.extend_from_slice(net.forward(img)?.features.data());
    }
    Tensor::new(&[images.len(), k], data)
}

/// One-vs-rest, L2-regularized hinge loss minimized by Pegasos-style
/// stochastic subgradient steps with step size `1/(λ·t)`; sample order is
/// reshuffled every epoch from a PCG stream seeded with `seed`.
pub fn train_linear_head(
    features: &Tensor<f32>,
    labels: &[usize],
    classes: usize,
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> Result<LinearHead> {
    let [n, k] = *features.shape() else {
        return Err(Error::invalid("features must be N×K"));
    };
    if labels.len() != n {
        return Err(Error::shape("train_linear_head labels", &[n], &[labels.len()]));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: l, classes });
    }
    let distinct = (0..classes).filter(|c| labels.contains(c)).count();
    if classes < 2 || distinct < 2 {
        return Err(Error::invalid("label set must contain at least two classes"));
    }
    if n < classes {
        return Err(Error::invalid(format!("{n} samples cannot train {classes} classes")));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    let x = features.data();
    let mut w = vec![0.0f64; classes * k];
    let radius = 1.0 / lambda.sqrt();
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0u64;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let xi = &x[i * k..(i + 1) * k];
            for c in 0..classes {
                let y = if labels[i] == c { 1.0 } else { -1.0 };
                let wc = &mut w[c * k..(c + 1) * k];
                let margin: f64 = y * wc.iter().zip(xi).map(|(a, &b)| a * b as f64).sum::<f64>();
                let shrink = 1.0 - eta * lambda;
                for v in wc.iter_mut() {
                    *v *= shrink;
                }
                if margin < 1.0 {
                    for (v, &b) in wc.iter_mut().zip(xi) {
                        *v += eta * y * b as f64;
                    }
                }
                let norm = wc.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > radius {
                    let s = radius / norm;
                    for v in wc.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
    }
    Ok(LinearHead {
        weights: Tensor::new(&[classes, k], w.into_iter().map(|v| v as f32).collect())?,
        label_set: format!("{classes} classes"),
        lambda,
    })
}

/// Relabels `train` through `map` and fits a head on its pooled features.
pub fn fit_relabeled_head(
    net: &GapNet<f32>,
    train: &[Sample],
    map: &[usize],
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> Result<LinearHead> {
    let images: Vec<&Tensor<f32>> = train.iter().map(|s| &s.image).collect();
    let labels = relabel(train, map)?;
    let f = extract_gap_features(net, &images)?;
    let classes = map.iter().max().map_or(0, |m| m + 1);
    let mut head = train_linear_head(&f, &labels, classes, lambda, epochs, seed)?;
    head.label_set = map.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    Ok(head)
}

fn relabel(samples: &[Sample], map: &[usize]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            map.get(s.label).copied().ok_or(Error::LabelOutOfRange {
                label: s.label,
                classes: map.len(),
            })
        })
        .collect()
}

/// Held-out accuracy of `head`, and ground-truth-known localization accuracy
/// of its class maps, on `test` relabelled through `map`.
pub fn score_head(net: &GapNet<f32>, head: &LinearHead, test: &[Sample], map: &[usize]) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let labels = relabel(test, map)?;
    let [_, h, w] = net.input_shape();
    let (mut correct, mut hits) = (0usize, 0usize);
    for (s, &label) in test.iter().zip(&labels) {
        let trace = net.forward(&s.image)?;
        correct += usize::from(head.predict(trace.features.data()) == label);
        let cam = cam_from_head(&trace, head, label)?.upsample(h, w)?;
        let b = tight_box(cam.upsampled.as_ref().expect("upsampled"), TIGHT_THRESHOLD)?;
        hits += usize::from(iou(&b, &s.gt_box) >= IOU_THRESHOLD);
    }
    let n = test.len() as f64;
    Ok((correct as f64 / n, hits as f64 / n))
}

/// Class map of `class_id` under the head's weights instead of the network's
/// own classifier.
pub fn cam_from_head(trace: &ForwardTrace<f32>, head: &LinearHead, class_id: usize) -> Result<Cam<f32>> {
    let k = trace.feature_maps.shape()[0];
    if head.units() != k {
        return Err(Error::shape("cam_from_head units", &[k], &[head.units()]));
    }
    cam_from_maps(&trace.feature_maps, &head.weights, class_id)
}

/// Input-image region seen by head-map cell `(y, x)`, derived from the layer
/// geometry and clipped to the image.
pub fn receptive_field(net: &GapNet<f32>, y: usize, x: usize) -> BBox {
    // Walk from the head back to the input, expanding [lo, hi] intervals.
    let mut ys = (y as i64, y as i64);
    let mut xs = (x as i64, x as i64);
    let expand = |(lo, hi): (i64, i64), k: usize, s: usize, p: usize| {
        (lo * s as i64 - p as i64, hi * s as i64 - p as i64 + k as i64 - 1)
    };
    let head = net.head();
    ys = expand(ys, head.weights.shape()[2], head.stride, head.pad);
    xs = expand(xs, head.weights.shape()[3], head.stride, head.pad);
    for layer in net.backbone().iter().rev() {
        match layer {
            Layer::Conv(c) => {
                ys = expand(ys, c.weights.shape()[2], c.stride, c.pad);
                xs = expand(xs, c.weights.shape()[3], c.stride, c.pad);
            }
            Layer::MaxPool => {
                ys = expand(ys, 2, 2, 0);
                xs = expand(xs, 2, 2, 0);
            }
            Layer::Relu => {}
        }
    }
    let [_, h, w] = net.input_shape();
    let clip = |(lo, hi): (i64, i64), n: usize| (lo.max(0) as usize, (hi.max(0) as usize).min(n - 1));
    let (y0, y1) = clip(ys, h);
    let (x0, x1) = clip(xs, w);
    BBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitPatch {
    /// Index into the mined image list.
    pub image_index: usize,
    /// Pooled activation of the unit on that image.
    pub activation: f32,
    pub region: BBox,
    /// `C×h×w` crop of the image over `region`.
    pub crop: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRanking {
    pub class_id: usize,
    /// All units, by descending class weight (stable).
    pub units: Vec<usize>,
    /// Class weight of each entry of `units`.
    pub weights: Vec<f32>,
    /// Top activating patches for the leading units, as `(unit, patches)`.
    pub patches: Vec<(usize, Vec<UnitPatch>)>,
}

/// Argsort of a weight row, descending, stable for ties.
pub fn rank_by_weight(row: &[f32]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..row.len()).collect();
    ids.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    ids
}

pub fn crop(image: &Tensor<f32>, region: BBox) -> Result<Tensor<f32>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::invalid("crop expects a C×H×W image"));
    };
    if !region.fits(w, h) {
        return Err(Error::invalid(format!("{region:?} exceeds {w}x{h} image")));
    }
    let (rw, rh) = (region.width(), region.height());
    Ok(Tensor::from_fn(&[c, rh, rw], |i| {
        let (ch, rest) = (i / (rw * rh), i % (rw * rh));
        let (y, x) = (region.y_min + rest / rw, region.x_min + rest % rw);
        image.data()[(ch * h + y) * w + x]
    }))
}

/// Ranks units by `weights[class_id]` and mines, for each of the first
/// `top_units` units, the `top_images` images with the highest pooled
/// activation, cropped to the receptive field of the unit's peak cell.
pub fn rank_units(
    net: &GapNet<f32>,
    weights: &Tensor<f32>,
    class_id: usize,
    images: &[&Tensor<f32>],
    top_units: usize,
    top_images: usize,
) -> Result<UnitRanking> {
    let [classes, k] = *weights.shape() else {
        return Err(Error::invalid("class weights must be C×K"));
    };
    if class_id >= classes {
        return Err(Error::LabelOutOfRange {
            label: class_id,
            classes,
        });
    }
    if k != net.unit_count() {
        return Err(Error::shape("rank_units weights", &[classes, net.unit_count()], weights.shape()));
    }
    let row = &weights.data()[class_id * k..(class_id + 1) * k];
    let units = rank_by_weight(row);
    let traces = images
        .iter()
        .map(|img| net.forward(img))
        .collect::<Result<Vec<_>>>()?;
    let (_, mh, mw) = {
        let s = net.mapping_resolution();
        (k, s.0, s.1)
    };
    let mut patches = Vec::new();
    for &unit in units.iter().take(top_units) {
        let mut idx: Vec<usize> = (0..images.len()).collect();
        let act = |i: usize| traces[i].features.data()[unit];
        idx.sort_by(|&a, &b| act(b).partial_cmp(&act(a)).unwrap_or(std::cmp::Ordering::Equal));
        let mut list = Vec::new();
        for &i in idx.iter().take(top_images) {
            let map = traces[i].feature_maps.channel(unit);
            let mut peak = 0;
            for (j, &v) in map.iter().enumerate() {
                if v > map[peak] {
                    peak = j;
                }
            }
            let region = receptive_field(net, peak / mw, peak % mw);
            debug_assert!(peak < mh * mw);
            list.push(UnitPatch {
                image_index: i,
                activation: act(i),
                region,
                crop: crop(images[i], region)?,
            });
        }
        patches.push((unit, list));
    }
    Ok(UnitRanking {
        class_id,
        weights: units.iter().map(|&u| row[u]).collect(),
        units,
        patches,
    })
}
