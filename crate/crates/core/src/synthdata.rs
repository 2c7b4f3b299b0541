//! Deterministic synthetic localization dataset.
//!
//! Each 64×64 grayscale image holds one class-bearing shape drawn with hard
//! edges over a noisy background and up to three low-contrast clutter
//! rectangles. The ground-truth box is the tight box of the shape's pixels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::gapnet::Labeled;
use crate::localize::BBox;
use crate::tensor::Tensor;

pub const CLASS_COUNT: usize = 5;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["disk", "square", "triangle", "ring", "disk-pair"];

/// Per-sample seeds are kept below 2^53 so they survive an f64 round trip.
const SEED_MASK: u64 = (1 << 53) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Ring,
    /// Two disjoint disks; the box covers both.
    DiskPair,
}

impl ShapeClass {
    pub fn from_id(id: usize) -> Result<Self> {
        Ok(match id {
            0 => ShapeClass::Disk,
            1 => ShapeClass::Square,
            2 => ShapeClass::Triangle,
            3 => ShapeClass::Ring,
            4 => ShapeClass::DiskPair,
            _ => {
                return Err(Error::LabelOutOfRange {
                    label: id,
                    classes: CLASS_COUNT,
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// Shape extent as a fraction of the image side.
    pub min_scale: f32,
    pub max_scale: f32,
    pub background: f32,
    /// Half-width of the uniform pixel noise.
    pub noise: f32,
    pub min_contrast: f32,
    pub max_contrast: f32,
    pub max_clutter: usize,
    /// Clutter contrast never exceeds this fraction of the shape contrast.
    pub clutter_contrast_cap: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_scale: 0.25,
            max_scale: 0.6,
            background: 0.1,
            noise: 0.05,
            min_contrast: 0.6,
            max_contrast: 0.85,
            max_clutter: 3,
            clutter_contrast_cap: 0.6,
        }
    }
}

/// Placement parameters recorded with every sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub seed: u64,
    /// Shape extent in pixels.
    pub scale: f32,
    /// Top-left corner of the shape's extent, in pixels.
    pub origin: (f32, f32),
    /// Orientation of a disk pair (0 horizontal, 1 vertical, 2 diagonal,
    /// 3 anti-diagonal); 0 for other classes.
    pub variant: u8,
    pub clutter: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub gt_box: BBox,
    pub meta: SampleMeta,
}

impl Labeled for Sample {
    fn image(&self) -> &Tensor<f32> {
        &self.image
    }

    fn label(&self) -> usize {
        self.label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Rasterized hard-edged shape as a membership test on pixel centers.
struct Shape {
    class: ShapeClass,
    scale: f32,
    x0: f32,
    y0: f32,
    variant: u8,
}

impl Shape {
    fn extent(class: ShapeClass, scale: f32, variant: u8) -> (f32, f32) {
        match (class, variant) {
            (ShapeClass::DiskPair, 0) => (scale, pair_diameter(scale)),
            (ShapeClass::DiskPair, 1) => (pair_diameter(scale), scale),
            _ => (scale, scale),
        }
    }

    fn covers(&self, px: f32, py: f32) -> bool {
        let s = self.scale;
        let (u, v) = (px - self.x0, py - self.y0);
        let r = s / 2.0;
        let in_disk = |cx: f32, cy: f32, r: f32| (u - cx).powi(2) + (v - cy).powi(2) <= r * r;
        match self.class {
            ShapeClass::Disk => in_disk(r, r, r),
            ShapeClass::Square => (0.0..s).contains(&u) && (0.0..s).contains(&v),
            ShapeClass::Triangle => {
                // apex at top center, base along the bottom edge
                (0.0..s).contains(&v) && (u - r).abs() <= v / 2.0
            }
            ShapeClass::Ring => {
                let d2 = (u - r).powi(2) + (v - r).powi(2);
                d2 <= r * r && d2 >= (0.55 * r).powi(2)
            }
            ShapeClass::DiskPair => {
                let pr = pair_diameter(s) / 2.0;
                let (a, b) = match self.variant {
                    0 => ((pr, pr), (s - pr, pr)),
                    1 => ((pr, pr), (pr, s - pr)),
                    2 => ((pr, pr), (s - pr, s - pr)),
                    _ => ((s - pr, pr), (pr, s - pr)),
                };
                in_disk(a.0, a.1, pr) || in_disk(b.0, b.1, pr)
            }
        }
    }
}

const PAIR_FILL: f32 = 0.45;
const PAIR_MAX_EXTENT: f32 = 0.95;

fn pair_diameter(scale: f32) -> f32 {
    PAIR_FILL * scale
}

/// Extent range for a disk pair, as a fraction of the image side. Each disk's
/// diameter starts at `min_scale` so a single disk is never smaller than a
/// lone disk could be.
fn pair_scale_range(config: &SynthConfig) -> (f32, f32) {
    let lo = (config.min_scale / PAIR_FILL).min(PAIR_MAX_EXTENT);
    (lo, PAIR_MAX_EXTENT.max(lo))
}

/// Draws one sample of `class_id` from a PCG stream seeded with `seed`.
pub fn generate_sample(class_id: usize, seed: u64, config: &SynthConfig) -> Result<Sample> {
    let class = ShapeClass::from_id(class_id)?;
    let n = config.size;
    let mut rng = Pcg64::seed_from_u64(seed);
    let (lo, hi) = if class == ShapeClass::DiskPair {
        pair_scale_range(config)
    } else {
        (config.min_scale, config.max_scale)
    };
    let scale = rng.random_range(lo..=hi) * n as f32;
    let variant = if class == ShapeClass::DiskPair {
        rng.random_range(0..4u8)
    } else {
        0
    };
    let (ew, eh) = Shape::extent(class, scale, variant);
    let x0 = rng.random_range(0.0..=(n as f32 - ew));
    let y0 = rng.random_range(0.0..=(n as f32 - eh));
    let contrast = rng.random_range(config.min_contrast..=config.max_contrast);
    let level = config.background + contrast;

    let mut img = vec![config.background; n * n];
    let clutter = rng.random_range(0..=config.max_clutter);
    for _ in 0..clutter {
        let w = rng.random_range(3..=10usize);
        let h = rng.random_range(3..=10usize);
        let cx = rng.random_range(0..=n - w);
        let cy = rng.random_range(0..=n - h);
        let raise = rng.random_range(0.15..=config.clutter_contrast_cap) * contrast;
        for y in cy..cy + h {
            for x in cx..cx + w {
                img[y * n + x] = config.background + raise;
            }
        }
    }

    let shape = Shape {
        class,
        scale,
        x0,
        y0,
        variant,
    };
    let mut fg = Vec::new();
    for y in 0..n {
        for x in 0..n {
            if shape.covers(x as f32 + 0.5, y as f32 + 0.5) {
                img[y * n + x] = level;
                fg.push((x, y));
            }
        }
    }
    let gt_box = BBox::enclosing(fg).ok_or_else(|| Error::invalid("shape rasterized to no pixels"))?;
    for v in img.iter_mut() {
        *v = (*v + rng.random_range(-config.noise..=config.noise)).clamp(0.0, 1.0);
    }
    Ok(Sample {
        image: Tensor::new(&[1, n, n], img)?,
        label: class_id,
        gt_box,
        meta: SampleMeta {
            seed,
            scale,
            origin: (x0, y0),
            variant,
            clutter: clutter as u8,
        },
    })
}

/// Seed of the sample at `index` in a dataset seeded with `seed`
/// (SplitMix64 finalizer over the pair).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) & SEED_MASK
}

/// `n_per_class` samples of every class, split 80/20 within each class by a
/// seeded shuffle. Both splits are then shuffled with the same stream.
pub fn generate_dataset(n_per_class: usize, seed: u64, config: &SynthConfig) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let n_train = (n_per_class * 4).div_ceil(5).min(n_per_class);
    let mut train = Vec::with_capacity(n_train * CLASS_COUNT);
    let mut test = Vec::with_capacity((n_per_class - n_train) * CLASS_COUNT);
    for class in 0..CLASS_COUNT {
        let mut samples = (0..n_per_class)
            .map(|j| {
                let index = (class * n_per_class + j) as u64;
                generate_sample(class, sample_seed(seed, index), config)
            })
            .collect::<Result<Vec<_>>>()?;
        samples.shuffle(&mut rng);
        test.extend(samples.split_off(n_train));
        train.extend(samples);
    }
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(Dataset { train, test })
}
