//! IoU, top-k classification/localization error, ground-truth-known
//! localization accuracy and the benchmark harness.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use crate::cam::{compute_cam, saliency_backprop};
use crate::error::{Error, Result};
use crate::gapnet::{ForwardTrace, GapNet};
use crate::localize::{propose_boxes, tight_box, BBox, Proposal, ProposalMode, RankedMap, TIGHT_THRESHOLD};
use crate::synthdata::Sample;
use crate::tensor::Tensor;

pub const IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union with inclusive pixel areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let x0 = a.x_min.max(b.x_min);
    let y0 = a.y_min.max(b.y_min);
    let x1 = a.x_max.min(b.x_max);
    let y1 = a.y_max.min(b.y_max);
    if x0 > x1 || y0 > y1 {
        return 0.0;
    }
    let inter = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    inter / (a.area() as f64 + b.area() as f64 - inter)
}

/// Whether `label` is among the first `k` entries of `ranked`.
pub fn cls_correct(ranked: &[usize], label: usize, k: usize) -> bool {
    ranked.iter().take(k).any(|&c| c == label)
}

/// Whether some proposal from the top-`k` classes carries `label` and overlaps
/// `gt` by at least [`IOU_THRESHOLD`].
pub fn loc_correct(predictions: &[Proposal], label: usize, gt: &BBox, k: usize) -> Result<bool> {
    if predictions.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    Ok(predictions
        .iter()
        .filter(|p| p.rank < k)
        .any(|p| p.class_id == label && iou(&p.bbox, gt) >= IOU_THRESHOLD))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocMethod {
    Cam,
    Saliency,
}

impl LocMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            LocMethod::Cam => "cam",
            LocMethod::Saliency => "saliency",
        }
    }
}

impl std::str::FromStr for LocMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam" => Ok(LocMethod::Cam),
            "saliency" => Ok(LocMethod::Saliency),
            other => Err(Error::invalid(format!("unknown localization method {other:?}"))),
        }
    }
}

/// What a localizer produced for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Classes by descending score.
    pub ranked: Vec<usize>,
    pub proposals: Vec<Proposal>,
    /// Box from the ground-truth class's map.
    pub gt_known_box: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub label: usize,
    pub gt_box: BBox,
    /// Top five classes by descending score.
    pub top5: Vec<usize>,
    pub proposals: Vec<Proposal>,
    pub gt_known_box: BBox,
    pub gt_known_iou: f64,
    pub top1_loc: bool,
    pub top5_loc: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub top1_cls_err: f64,
    pub top5_cls_err: f64,
    pub top1_loc_err: f64,
    pub top5_loc_err: f64,
    pub gt_known_loc_acc: f64,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.top1_cls_err
    }

    /// Mean ground-truth-known IoU over samples of `class_id`; `None` if the
    /// class has no samples.
    pub fn class_mean_iou(&self, class_id: usize) -> Option<f64> {
        let ious: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.label == class_id)
            .map(|r| r.gt_known_iou)
            .collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub const CSV_HEADER: &'static str =
        "name,samples,top1_cls_err,top5_cls_err,top1_loc_err,top5_loc_err,gt_known_loc_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.name,
            self.records.len(),
            self.top1_cls_err,
            self.top5_cls_err,
            self.top1_loc_err,
            self.top5_loc_err,
            self.gt_known_loc_acc
        )
    }

    /// Per-sample CSV: label, top-1 class, ground-truth and gt-known boxes,
    /// their IoU, and top-1/top-5 localization correctness.
    pub fn records_csv(&self) -> String {
        let mut s = String::from(
            "index,label,top1,gt_x_min,gt_y_min,gt_x_max,gt_y_max,x_min,y_min,x_max,y_max,gt_known_iou,top1_loc,top5_loc\n",
        );
        for r in &self.records {
            let (g, b) = (r.gt_box, r.gt_known_box);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{:.6},{},{}",
                r.index,
                r.label,
                r.top5[0],
                g.x_min,
                g.y_min,
                g.x_max,
                g.y_max,
                b.x_min,
                b.y_min,
                b.x_max,
                b.y_max,
                r.gt_known_iou,
                r.top1_loc as u8,
                r.top5_loc as u8
            );
        }
        s
    }
}

/// Summary CSV for several reports, header included.
pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{}\n", EvalReport::CSV_HEADER);
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Fixed-width table of several reports, errors in percent.
pub fn reports_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut s = format!(
        "{:<width$}  {:>8} {:>8} {:>8} {:>8} {:>9}\n",
        "method", "top1cls", "top5cls", "top1loc", "top5loc", "gt-known"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>9.2}",
            r.name,
            100.0 * r.top1_cls_err,
            100.0 * r.top5_cls_err,
            100.0 * r.top1_loc_err,
            100.0 * r.top5_loc_err,
            100.0 * r.gt_known_loc_acc
        );
    }
    s
}

/// Scores arbitrary predictions; `predict` is called once per sample in order.
pub fn evaluate_with<F>(name: &str, samples: &[Sample], mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&Sample) -> Result<Prediction>,
{
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let mut records = Vec::with_capacity(samples.len());
    let (mut c1, mut c5, mut l1, mut l5, mut gk) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (index, s) in samples.iter().enumerate() {
        let p = predict(s)?;
        let top1_loc = loc_correct(&p.proposals, s.label, &s.gt_box, 1)?;
        let top5_loc = loc_correct(&p.proposals, s.label, &s.gt_box, 5)?;
        let gt_known_iou = iou(&p.gt_known_box, &s.gt_box);
        c1 += usize::from(cls_correct(&p.ranked, s.label, 1));
        c5 += usize::from(cls_correct(&p.ranked, s.label, 5));
        l1 += usize::from(top1_loc);
        l5 += usize::from(top5_loc);
        gk += usize::from(gt_known_iou >= IOU_THRESHOLD);
        records.push(SampleRecord {
            index,
            label: s.label,
            gt_box: s.gt_box,
            top5: p.ranked.iter().take(5).copied().collect(),
            proposals: p.proposals,
            gt_known_box: p.gt_known_box,
            gt_known_iou,
            top1_loc,
            top5_loc,
        });
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        name: name.to_string(),
        top1_cls_err: 1.0 - c1 as f64 / n,
        top5_cls_err: 1.0 - c5 as f64 / n,
        top1_loc_err: 1.0 - l1 as f64 / n,
        top5_loc_err: 1.0 - l5 as f64 / n,
        gt_known_loc_acc: gk as f64 / n,
        records,
    })
}

/// Image-resolution localization map of `class_id`.
pub fn class_map(
    net: &GapNet<f32>,
    image: &Tensor<f32>,
    trace: &ForwardTrace<f32>,
    method: LocMethod,
    class_id: usize,
) -> Result<Tensor<f32>> {
    let [_, h, w] = net.input_shape();
    match method {
        LocMethod::Cam => Ok(compute_cam(trace, net.classifier(), class_id)?
            .upsample(h, w)?
            .upsampled
            .expect("upsampled")),
        LocMethod::Saliency => saliency_backprop(net, image, class_id),
    }
}

/// Full prediction for one image: ranked classes, proposals under `mode`, and
/// the ground-truth-known box for `label`.
pub fn predict(
    net: &GapNet<f32>,
    image: &Tensor<f32>,
    label: usize,
    method: LocMethod,
    mode: ProposalMode,
) -> Result<Prediction> {
    let trace = net.forward(image)?;
    let ranked = trace.ranked_classes();
    let depth = match mode {
        ProposalMode::Plain => 5,
        ProposalMode::Heuristic => 3,
    }
    .min(ranked.len());
    let mut maps: Vec<(usize, Tensor<f32>)> = Vec::with_capacity(depth + 1);
    for &c in &ranked[..depth] {
        maps.push((c, class_map(net, image, &trace, method, c)?));
    }
    let ranked_maps: Vec<RankedMap<'_>> = maps
        .iter()
        .map(|(c, m)| RankedMap {
            class_id: *c,
            score: trace.probs.data()[*c],
            map: m,
        })
        .collect();
    let proposals = propose_boxes(&ranked_maps, mode)?;
    let gt_known_box = match maps.iter().find(|(c, _)| *c == label) {
        Some((_, m)) => tight_box(m, TIGHT_THRESHOLD)?,
        None => tight_box(&class_map(net, image, &trace, method, label)?, TIGHT_THRESHOLD)?,
    };
    Ok(Prediction {
        ranked,
        proposals,
        gt_known_box,
    })
}

pub fn evaluate(
    name: &str,
    net: &GapNet<f32>,
    samples: &[Sample],
    method: LocMethod,
    mode: ProposalMode,
) -> Result<EvalReport> {
    evaluate_with(name, samples, |s| predict(net, &s.image, s.label, method, mode))
}

/// Every (net, method) pair, in the given order; names are `"{net}-{method}"`.
pub fn run_benchmark(
    nets: &[(&str, &GapNet<f32>)],
    samples: &[Sample],
    methods: &[LocMethod],
    mode: ProposalMode,
) -> Result<Vec<EvalReport>> {
    if nets.is_empty() {
        return Err(Error::invalid("benchmark needs at least one network"));
    }
    let mut out = Vec::new();
    for (name, net) in nets {
        for &m in methods {
            out.push(evaluate(&format!("{name}-{}", m.as_str()), net, samples, m, mode)?);
        }
    }
    Ok(out)
}

/// Box of size `(w, h)` placed uniformly among the valid positions.
pub fn random_box<R: Rng>(rng: &mut R, size: (usize, usize), image: (usize, usize)) -> BBox {
    let w = size.0.clamp(1, image.0);
    let h = size.1.clamp(1, image.1);
    let x = rng.random_range(0..=image.0 - w);
    let y = rng.random_range(0..=image.1 - h);
    BBox {
        x_min: x,
        y_min: y,
        x_max: x + w - 1,
        y_max: y + h - 1,
    }
}

/// Fraction of samples where a random box of the mean ground-truth size hits
/// IoU ≥ 0.5.
pub fn random_box_accuracy(samples: &[Sample], seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let n = samples.len() as f64;
    let mw = samples.iter().map(|s| s.gt_box.width() as f64).sum::<f64>() / n;
    let mh = samples.iter().map(|s| s.gt_box.height() as f64).sum::<f64>() / n;
    let size = (mw.round() as usize, mh.round() as usize);
    let mut rng = Pcg64::seed_from_u64(seed);
    let hits = samples
        .iter()
        .filter(|s| {
            let [_, h, w] = *s.image.shape() else { return false };
            iou(&random_box(&mut rng, size, (w, h)), &s.gt_box) >= IOU_THRESHOLD
        })
        .count();
    Ok(hits as f64 / n)
}
