//! From an upsampled class activation map to bounding boxes: relative
//! thresholding, 8-connected component labelling, largest-component boxes and
//! the tight/loose proposal heuristic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Threshold for the tight box and for plain proposals, relative to the map max.
pub const TIGHT_THRESHOLD: f32 = 0.2;
/// Threshold for the loose box.
pub const LOOSE_THRESHOLD: f32 = 0.1;

/// Axis-aligned box with inclusive integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::invalid(format!(
                "degenerate box ({x_min},{y_min},{x_max},{y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            x_max: width - 1,
            y_max: height - 1,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    pub fn contains_point(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_max < width && self.y_max < height
    }

    /// Tight box of an iterator of `(x, y)` points.
    pub fn enclosing(points: impl IntoIterator<Item = (usize, usize)>) -> Option<Self> {
        points.into_iter().fold(None, |acc, (x, y)| {
            Some(match acc {
                None => BBox {
                    x_min: x,
                    y_min: y,
                    x_max: x,
                    y_max: y,
                },
                Some(b) => BBox {
                    x_min: b.x_min.min(x),
                    y_min: b.y_min.min(y),
                    x_max: b.x_max.max(x),
                    y_max: b.y_max.max(y),
                },
            })
        })
    }
}

/// Binary segmentation of a map with optional component labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub threshold_used: f32,
    /// 0 for background, `1..=components` otherwise. Empty until labelled.
    pub labels: Vec<u32>,
    pub components: usize,
}

impl SegmentMask {
    pub fn from_mask(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::shape("segment mask", &[height, width], &[mask.len()]));
        }
        Ok(Self {
            width,
            height,
            mask,
            threshold_used: f32::NAN,
            labels: Vec::new(),
            components: 0,
        })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_labelled(&self) -> bool {
        self.labels.len() == self.mask.len()
    }

    /// Box around every foreground pixel.
    pub fn union_bbox(&self) -> Option<BBox> {
        let w = self.width;
        BBox::enclosing(
            self.mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| (i % w, i / w)),
        )
    }
}

fn hw(map: &Tensor<f32>) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::invalid(format!(
            "expected an H×W map, got {:?}",
            map.shape()
        ))),
    }
}

/// Selects pixels `≥ rel_threshold · max`. A map whose max is not positive
/// yields an empty mask.
pub fn threshold_mask(map: &Tensor<f32>, rel_threshold: f32) -> Result<SegmentMask> {
    if !(rel_threshold > 0.0 && rel_threshold < 1.0) {
        return Err(Error::invalid(format!(
            "relative threshold must lie in (0, 1), got {rel_threshold}"
        )));
    }
    let (h, w) = hw(map)?;
    let max = map.max();
    let (mask, threshold_used) = if max > 0.0 {
        let t = rel_threshold * max;
        (map.data().iter().map(|&v| v >= t).collect(), t)
    } else {
        (vec![false; h * w], f32::NAN)
    };
    Ok(SegmentMask {
        width: w,
        height: h,
        mask,
        threshold_used,
        labels: Vec::new(),
        components: 0,
    })
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

/// Two-pass 8-connected labelling with union-find. Labels are numbered by the
/// scan-order position of each component's first pixel.
pub fn label_components(mut seg: SegmentMask) -> SegmentMask {
    let (w, h) = (seg.width, seg.height);
    let mut provisional = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !seg.mask[i] {
                continue;
            }
            let mut neighbors = [0u32; 4];
            let mut n = 0;
            let candidates = [
                (x > 0).then(|| i - 1),
                (y > 0 && x > 0).then(|| i - w - 1),
                (y > 0).then(|| i - w),
                (y > 0 && x + 1 < w).then(|| i - w + 1),
            ];
            for j in candidates.into_iter().flatten() {
                if provisional[j] != 0 {
                    neighbors[n] = provisional[j];
                    n += 1;
                }
            }
            if n == 0 {
                let id = parent.len() as u32;
                parent.push(id);
                provisional[i] = id;
            } else {
                let mut root = find(&mut parent, neighbors[0]);
                for &nb in &neighbors[1..n] {
                    let r = find(&mut parent, nb);
                    if r != root {
                        let (lo, hi) = (root.min(r), root.max(r));
                        parent[hi as usize] = lo;
                        root = lo;
                    }
                }
                provisional[i] = root;
            }
        }
    }
    let mut relabel = vec![0u32; parent.len()];
    let mut next = 0u32;
    let mut labels = vec![0u32; w * h];
    for i in 0..w * h {
        if provisional[i] == 0 {
            continue;
        }
        let r = find(&mut parent, provisional[i]) as usize;
        if relabel[r] == 0 {
            next += 1;
            relabel[r] = next;
        }
        labels[i] = relabel[r];
    }
    seg.labels = labels;
    seg.components = next as usize;
    seg
}

/// Tight box of the component with the largest pixel count; ties go to the
/// lower label, i.e. the earlier first pixel. `None` when there is no
/// foreground.
pub fn largest_component_bbox(seg: &SegmentMask) -> Option<BBox> {
    assert!(seg.is_labelled(), "mask must be labelled first");
    if seg.components == 0 {
        return None;
    }
    let mut area = vec![0usize; seg.components + 1];
    for &l in &seg.labels {
        area[l as usize] += 1;
    }
    let mut best = 1;
    for l in 2..=seg.components {
        if area[l] > area[best] {
            best = l;
        }
    }
    let w = seg.width;
    BBox::enclosing(
        seg.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == best)
            .map(|(i, _)| (i % w, i / w)),
    )
}

/// Box from a map at `rel_threshold` using the largest connected component,
/// falling back to the whole image when nothing is selected.
pub fn tight_box(map: &Tensor<f32>, rel_threshold: f32) -> Result<BBox> {
    let seg = label_components(threshold_mask(map, rel_threshold)?);
    Ok(largest_component_bbox(&seg).unwrap_or_else(|| BBox::full(seg.width, seg.height)))
}

/// Box around every pixel above `rel_threshold`, with the same fallback.
pub fn loose_box(map: &Tensor<f32>, rel_threshold: f32) -> Result<BBox> {
    let seg = threshold_mask(map, rel_threshold)?;
    Ok(seg.union_bbox().unwrap_or_else(|| BBox::full(seg.width, seg.height)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalMode {
    /// One tight box for each of the top five classes.
    Plain,
    /// Tight and loose boxes for the top two classes, a loose box for the third.
    Heuristic,
}

impl std::str::FromStr for ProposalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ProposalMode::Plain),
            "heuristic" => Ok(ProposalMode::Heuristic),
            other => Err(Error::invalid(format!("unknown proposal mode {other:?}"))),
        }
    }
}

/// A class map entering [`propose_boxes`], already at image resolution.
#[derive(Debug, Clone, Copy)]
pub struct RankedMap<'a> {
    pub class_id: usize,
    pub score: f32,
    pub map: &'a Tensor<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    /// Zero-based rank of the class the box came from.
    pub rank: usize,
    pub class_id: usize,
    pub score: f32,
    pub bbox: BBox,
}

/// Box proposals from maps ordered by descending class probability.
pub fn propose_boxes(maps: &[RankedMap<'_>], mode: ProposalMode) -> Result<Vec<Proposal>> {
    let mk = |rank: usize, m: &RankedMap<'_>, bbox| Proposal {
        rank,
        class_id: m.class_id,
        score: m.score,
        bbox,
    };
    match mode {
        ProposalMode::Plain => maps
            .iter()
            .take(5)
            .enumerate()
            .map(|(r, m)| Ok(mk(r, m, tight_box(m.map, TIGHT_THRESHOLD)?)))
            .collect(),
        ProposalMode::Heuristic => {
            if maps.len() < 3 {
                return Err(Error::invalid(format!(
                    "heuristic proposals need 3 ranked classes, got {}",
                    maps.len()
                )));
            }
            let mut out = Vec::with_capacity(5);
            for (r, m) in maps[..2].iter().enumerate() {
                out.push(mk(r, m, tight_box(m.map, TIGHT_THRESHOLD)?));
                out.push(mk(r, m, loose_box(m.map, LOOSE_THRESHOLD)?));
            }
            out.push(mk(2, &maps[2], loose_box(maps[2].map, LOOSE_THRESHOLD)?));
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, v: Vec<f32>) -> Tensor<f32> {
        Tensor::new(&[h, w], v).unwrap()
    }

    fn mask_from(rows: &[&str]) -> SegmentMask {
        let h = rows.len();
        let w = rows[0].len();
        let m = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        SegmentMask::from_mask(w, h, m).unwrap()
    }

    #[test]
    fn threshold_is_relative_to_max() {
        let m = map(1, 5, vec![10.0, 2.0, 1.99, -3.0, 5.0]);
        let s = threshold_mask(&m, 0.2).unwrap();
        assert_eq!(s.mask, vec![true, true, false, false, true]);
        assert_eq!(s.threshold_used, 2.0);
    }

    #[test]
    fn constant_and_negative_maps() {
        let s = threshold_mask(&Tensor::full(&[4, 4], 0.3), 0.2).unwrap();
        assert_eq!(s.count(), 16);
        let s = threshold_mask(&Tensor::full(&[4, 4], -0.3), 0.2).unwrap();
        assert_eq!(s.count(), 0);
        assert!(tight_box(&Tensor::full(&[4, 6], -1.0), 0.2).unwrap() == BBox::full(6, 4));
        assert!(threshold_mask(&Tensor::full(&[2, 2], 1.0), 1.0).is_err());
    }

    #[test]
    fn labelling_edge_cases() {
        let empty = label_components(mask_from(&["...", "..."]));
        assert_eq!(empty.components, 0);
        assert_eq!(largest_component_bbox(&empty), None);
        let full = label_components(mask_from(&["###", "###"]));
        assert_eq!(full.components, 1);
        // diagonal neighbours join under 8-connectivity
        let diag = label_components(mask_from(&["#..", ".#.", "..#"]));
        assert_eq!(diag.components, 1);
        // U shape merges two provisional labels
        let u = label_components(mask_from(&["#.#", "#.#", "###"]));
        assert_eq!(u.components, 1);
    }

    #[test]
    fn largest_component_wins() {
        let s = label_components(mask_from(&[
            "##.....",
            "##...##",
            "#....##",
            ".....##",
            "......#",
            "......#",
        ]));
        assert_eq!(s.components, 2);
        assert_eq!(largest_component_bbox(&s), Some(BBox::new(5, 1, 6, 5).unwrap()));
    }

    #[test]
    fn single_pixel_and_tie_break() {
        let mut m = vec![false; 64];
        m[4 * 8 + 3] = true;
        let s = label_components(SegmentMask::from_mask(8, 8, m).unwrap());
        assert_eq!(largest_component_bbox(&s), Some(BBox::new(3, 4, 3, 4).unwrap()));
        let tie = label_components(mask_from(&["...##", "##...", "....."]));
        assert_eq!(tie.components, 2);
        assert_eq!(largest_component_bbox(&tie), Some(BBox::new(3, 0, 4, 0).unwrap()));
    }

    fn blob(h: usize, w: usize, cx: f32, cy: f32, s: f32) -> Tensor<f32> {
        Tensor::from_fn(&[h, w], |i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
        })
    }

    #[test]
    fn proposal_counts_and_classes() {
        let maps: Vec<Tensor<f32>> = (0..5).map(|i| blob(32, 32, 5.0 + 5.0 * i as f32, 16.0, 4.0)).collect();
        let ranked: Vec<RankedMap> = [3, 1, 4, 0, 2]
            .iter()
            .enumerate()
            .map(|(r, &c)| RankedMap {
                class_id: c,
                score: 1.0 / (r + 1) as f32,
                map: &maps[r],
            })
            .collect();
        let plain = propose_boxes(&ranked, ProposalMode::Plain).unwrap();
        assert_eq!(plain.iter().map(|p| p.class_id).collect::<Vec<_>>(), vec![3, 1, 4, 0, 2]);
        let heur = propose_boxes(&ranked, ProposalMode::Heuristic).unwrap();
        assert_eq!(heur.iter().map(|p| p.class_id).collect::<Vec<_>>(), vec![3, 3, 1, 1, 4]);
        assert!(heur[1].bbox.contains(&heur[0].bbox));
        assert!(heur[3].bbox.contains(&heur[2].bbox));
        assert!(propose_boxes(&ranked[..2], ProposalMode::Heuristic).is_err());
    }

    fn flood_fill_oracle(mask: &[bool], w: usize, h: usize) -> Vec<u32> {
        fn fill(mask: &[bool], lab: &mut [u32], w: usize, h: usize, x: usize, y: usize, id: u32) {
            let i = y * w + x;
            if !mask[i] || lab[i] != 0 {
                return;
            }
            lab[i] = id;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        fill(mask, lab, w, h, nx as usize, ny as usize, id);
                    }
                }
            }
        }
        let mut lab = vec![0; w * h];
        let mut next = 0;
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] && lab[y * w + x] == 0 {
                    next += 1;
                    fill(mask, &mut lab, w, h, x, y, next);
                }
            }
        }
        lab
    }

    proptest! {
        #[test]
        fn labelling_matches_flood_fill(bits in prop::collection::vec(any::<bool>(), 256)) {
            let s = label_components(SegmentMask::from_mask(16, 16, bits.clone()).unwrap());
            prop_assert_eq!(s.labels, flood_fill_oracle(&bits, 16, 16));
        }

        #[test]
        fn lowering_threshold_never_shrinks(v in prop::collection::vec(-1.0f32..1.0, 64), lo in 0.01f32..0.5, d in 0.0f32..0.49) {
            let m = map(8, 8, v);
            let hi = lo + d;
            let a = threshold_mask(&m, hi).unwrap();
            let b = threshold_mask(&m, lo).unwrap();
            for (x, y) in a.mask.iter().zip(&b.mask) {
                prop_assert!(!x || *y);
            }
            if let (Some(t), Some(l)) = (largest_component_bbox(&label_components(a)), b.union_bbox()) {
                prop_assert!(l.contains(&t));
            }
        }

        #[test]
        fn power_of_two_scaling_is_exact(v in prop::collection::vec(-1.0f32..1.0, 64), e in -20i32..20) {
            let m = map(8, 8, v);
            let scaled = m.scale(2f32.powi(e));
            prop_assert_eq!(threshold_mask(&m, 0.2).unwrap().mask, threshold_mask(&scaled, 0.2).unwrap().mask);
            prop_assert_eq!(tight_box(&m, 0.2).unwrap(), tight_box(&scaled, 0.2).unwrap());
            prop_assert_eq!(loose_box(&m, 0.1).unwrap(), loose_box(&scaled, 0.1).unwrap());
        }

        #[test]
        fn arbitrary_scaling_only_moves_boundary_pixels(v in prop::collection::vec(-1.0f32..1.0, 64), k in 1e-3f32..1e3) {
            let m = map(8, 8, v);
            let max = m.max();
            prop_assume!(max > 0.0);
            let a = threshold_mask(&m, 0.2).unwrap();
            let b = threshold_mask(&m.scale(k), 0.2).unwrap();
            for (i, (x, y)) in a.mask.iter().zip(&b.mask).enumerate() {
                if x != y {
                    let rel = m.data()[i] / max;
                    prop_assert!((rel - 0.2).abs() < 1e-5, "pixel {} at relative value {}", i, rel);
                }
            }
        }
    }
}
