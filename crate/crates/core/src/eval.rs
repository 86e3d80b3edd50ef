//! Depth metrics, monocular evaluation conventions, per-class breakdown,
//! segmentation mIoU and the brightness robustness sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::{inv_depth_from_sigmoid, DepthMap};
use crate::losses::IGNORE_INDEX;
use crate::ops::Mode;
use crate::tensor::Tensor;
use crate::training::{darken, SceneSample, TrainMode};
use crate::units::SafeNet;

/// Depth cap of the standard protocol, metres.
pub const DEFAULT_CAP: f64 = 80.0;
/// Floor applied before logs and divisions, metres.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub n_pixels: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3,n_pixels";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.a1, self.a2, self.a3, self.n_pixels
        )
    }
}

/// Running sums behind [`MetricsReport`], so that reports over disjoint pixel
/// sets can be merged exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSums {
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    sq_log: f64,
    a: [usize; 3],
    n: usize,
}

impl MetricSums {
    pub fn add(&mut self, pred: f64, gt: f64) {
        let diff = pred - gt;
        self.abs_rel += diff.abs() / gt;
        self.sq_rel += diff * diff / gt;
        self.sq += diff * diff;
        let l = pred.ln() - gt.ln();
        self.sq_log += l * l;
        let ratio = (pred / gt).max(gt / pred);
        let mut thr = 1.0;
        for a in &mut self.a {
            thr *= 1.25;
            // strict, as in "δ < 1.25"
            if ratio < thr {
                *a += 1;
            }
        }
        self.n += 1;
    }

    pub fn merge(&mut self, other: &MetricSums) {
        self.abs_rel += other.abs_rel;
        self.sq_rel += other.sq_rel;
        self.sq += other.sq;
        self.sq_log += other.sq_log;
        for (a, b) in self.a.iter_mut().zip(other.a) {
            *a += b;
        }
        self.n += other.n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::Degenerate("no pixels to evaluate".into()));
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            abs_rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            rmse_log: (self.sq_log / n).sqrt(),
            a1: self.a[0] as f64 / n,
            a2: self.a[1] as f64 / n,
            a3: self.a[2] as f64 / n,
            n_pixels: self.n,
        })
    }
}

fn check_sizes(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<()> {
    let (ps, gs) = (pred.values.shape(), gt.values.shape());
    if ps != gs || mask.len() != gt.values.numel() {
        return Err(Error::dim("depth_metrics", ps, gs));
    }
    Ok(())
}

fn masked_sums(pred: &DepthMap, gt: &DepthMap, mask: &[bool], keep: impl Fn(usize) -> bool) -> Result<MetricSums> {
    check_sizes(pred, gt, mask)?;
    let mut sums = MetricSums::default();
    for (i, (&p, &g)) in pred.values.data().iter().zip(gt.values.data()).enumerate() {
        if !mask[i] || !keep(i) {
            continue;
        }
        if !(p > 0.0 && g > 0.0) || !p.is_finite() || !g.is_finite() {
            return Err(Error::Range(format!("masked pixel {i} has pred {p}, gt {g}; both must be positive")));
        }
        sums.add(p, g);
    }
    Ok(sums)
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<MetricsReport> {
    masked_sums(pred, gt, mask, |_| true)?.report()
}

/// How predictions are brought onto the ground-truth scale before scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub cap: f64,
    pub min_depth: f64,
    /// Per-image median scaling (monocular scale ambiguity).
    pub median_scaling: bool,
}

impl EvalProtocol {
    pub fn for_mode(mode: TrainMode, cap: f64) -> Self {
        Self {
            cap,
            min_depth: MIN_EVAL_DEPTH,
            median_scaling: mode == TrainMode::Sequence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cap > 0.0) || !(self.min_depth >= 0.0) || self.min_depth >= self.cap {
            return Err(Error::Config(format!(
                "need 0 <= min_depth < cap, got min_depth {} and cap {}",
                self.min_depth, self.cap
            )));
        }
        Ok(())
    }
}

/// Prediction and ground truth ready for [`depth_metrics`].
#[derive(Clone, Debug)]
pub struct Prepared {
    pub pred: DepthMap,
    pub gt: DepthMap,
    pub mask: Vec<bool>,
    /// Factor the prediction was multiplied by (1 without median scaling).
    pub scale: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Masks ground truth to `(min_depth, cap]`, optionally median-scales the
/// prediction, then clamps it to `[min_depth, cap]`.
pub fn prepare(pred: &DepthMap, gt: &DepthMap, protocol: &EvalProtocol) -> Result<Prepared> {
    protocol.validate()?;
    let n = gt.values.numel();
    if pred.values.shape() != gt.values.shape() {
        return Err(Error::dim("prepare", pred.values.shape(), gt.values.shape()));
    }
    let (pd, gd) = (pred.values.data(), gt.values.data());
    let mask: Vec<bool> = (0..n)
        .map(|i| gt.valid[i] && pred.valid[i] && gd[i] > protocol.min_depth && gd[i] <= protocol.cap && pd[i] > 0.0)
        .collect();
    let picked = |d: &[f64]| d.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect::<Vec<_>>();
    if !mask.iter().any(|&m| m) {
        return Err(Error::Degenerate("no ground-truth pixel inside the evaluation range".into()));
    }
    let scale = if protocol.median_scaling {
        median(picked(gd)) / median(picked(pd))
    } else {
        1.0
    };
    let values = pred.values.map(|v| (v * scale).clamp(protocol.min_depth, protocol.cap));
    Ok(Prepared {
        pred: DepthMap::new(values, pred.valid.clone())?,
        gt: gt.clone(),
        mask,
        scale,
    })
}

/// [`prepare`] with median scaling and the given cap.
pub fn prepare_monocular(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<Prepared> {
    prepare(
        pred,
        gt,
        &EvalProtocol {
            cap,
            min_depth: MIN_EVAL_DEPTH,
            median_scaling: true,
        },
    )
}

pub type ClassBreakdown = BTreeMap<u8, MetricsReport>;

fn class_sums(pred: &DepthMap, gt: &DepthMap, mask: &[bool], seg: &[u8]) -> Result<BTreeMap<u8, MetricSums>> {
    if seg.len() != mask.len() {
        return Err(Error::dim("per_class_metrics", &[seg.len()], &[mask.len()]));
    }
    check_sizes(pred, gt, mask)?;
    let mut out: BTreeMap<u8, MetricSums> = BTreeMap::new();
    let mut classes: Vec<u8> = seg.iter().copied().filter(|&c| c != IGNORE_INDEX).collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let sums = masked_sums(pred, gt, mask, |i| seg[i] == c)?;
        if sums.count() > 0 {
            out.insert(c, sums);
        }
    }
    Ok(out)
}

/// Metrics restricted to each class's pixels; classes without pixels in the
/// mask are omitted.
pub fn per_class_metrics(pred: &DepthMap, gt: &DepthMap, mask: &[bool], seg: &[u8]) -> Result<ClassBreakdown> {
    class_sums(pred, gt, mask, seg)?
        .into_iter()
        .map(|(c, s)| Ok((c, s.report()?)))
        .collect()
}

/// Mean IoU over classes present in the prediction or the ground truth.
pub fn miou(pred: &[u8], gt: &[u8], n_classes: usize, ignore_index: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("miou", &[pred.len()], &[gt.len()]));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == ignore_index {
            continue;
        }
        for l in [p, g] {
            if l as usize >= n_classes {
                return Err(Error::Range(format!("label {l} outside {n_classes} classes")));
            }
        }
        if p == g {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[g as usize] += 1;
        }
    }
    let ious: Vec<f64> = (0..n_classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| tp[c] as f64 / (tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    if ious.is_empty() {
        return Err(Error::Degenerate("no labelled pixels".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

// ---------------------------------------------------------------------------
// Model evaluation

/// Anything that maps an input image to a depth map.
pub trait DepthModel {
    /// Depth for `image` (`[3, H, W]`), which shows `sample` possibly darkened.
    fn predict_depth(&mut self, image: &Tensor, sample: &SceneSample) -> Result<DepthMap>;

    /// Class labels for `image`, if the model segments.
    fn predict_labels(&mut self, _image: &Tensor) -> Result<Option<Vec<u8>>> {
        Ok(None)
    }
}

/// Returns the ground-truth depth whatever the input: the control for the
/// evaluation harness.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruthOracle;

impl DepthModel for GroundTruthOracle {
    fn predict_depth(&mut self, _image: &Tensor, sample: &SceneSample) -> Result<DepthMap> {
        Ok(sample.gt_depth.clone())
    }
}

fn batched(image: &Tensor) -> Result<Tensor> {
    match *image.shape() {
        [3, h, w] => image.reshape(&[1, 3, h, w]),
        _ => Err(Error::shape(image.shape(), "image must be [3, H, W]")),
    }
}

impl DepthModel for SafeNet {
    fn predict_depth(&mut self, image: &Tensor, _sample: &SceneSample) -> Result<DepthMap> {
        let tape = Tape::new();
        let x = tape.constant(batched(image)?);
        let pred = self.forward(&tape, x, Mode::Eval)?;
        let inv = inv_depth_from_sigmoid(pred.disp[0]).value();
        let s = inv.shape();
        DepthMap::from_tensor(inv.map(|v| 1.0 / v).reshape(&[1, s[2], s[3]])?)
    }

    fn predict_labels(&mut self, image: &Tensor) -> Result<Option<Vec<u8>>> {
        let tape = Tape::new();
        let x = tape.constant(batched(image)?);
        let logits = self.forward(&tape, x, Mode::Eval)?.seg_logits.value();
        let s = logits.shape();
        let (k, hw) = (s[1], s[2] * s[3]);
        let d = logits.data();
        Ok(Some(
            (0..hw)
                .map(|p| (0..k).max_by(|&a, &b| d[a * hw + p].total_cmp(&d[b * hw + p])).unwrap_or(0) as u8)
                .collect(),
        ))
    }
}

/// Scores of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub metrics: MetricsReport,
    pub per_class: Option<ClassBreakdown>,
    pub miou: Option<f64>,
}

/// Evaluates `model` on every scene after darkening the target by `scale`.
/// Pixels are pooled over scenes.
pub fn evaluate(
    model: &mut dyn DepthModel,
    scenes: &[SceneSample],
    protocol: &EvalProtocol,
    scale: f64,
    per_class: bool,
) -> Result<EvalResult> {
    let mut all = MetricSums::default();
    let mut classes: BTreeMap<u8, MetricSums> = BTreeMap::new();
    let (mut pred_labels, mut gt_labels) = (Vec::new(), Vec::new());
    let mut segments = true;
    for s in scenes {
        let image = darken(s.target(), scale)?;
        let pred = model.predict_depth(&image, s)?;
        let p = prepare(&pred, &s.gt_depth, protocol)?;
        all.merge(&masked_sums(&p.pred, &p.gt, &p.mask, |_| true)?);
        if per_class {
            for (c, sums) in class_sums(&p.pred, &p.gt, &p.mask, &s.seg_mask)? {
                classes.entry(c).or_default().merge(&sums);
            }
        }
        match model.predict_labels(&image)? {
            Some(l) if segments => {
                pred_labels.extend(l);
                gt_labels.extend_from_slice(&s.seg_mask);
            }
            _ => segments = false,
        }
    }
    let miou = if segments && !gt_labels.is_empty() {
        let n = pred_labels.iter().chain(&gt_labels).filter(|&&l| l != IGNORE_INDEX).max().map_or(1, |&m| m as usize + 1);
        Some(miou(&pred_labels, &gt_labels, n, IGNORE_INDEX)?)
    } else {
        None
    };
    Ok(EvalResult {
        metrics: all.report()?,
        per_class: per_class
            .then(|| classes.iter().map(|(c, s)| Ok((*c, s.report()?))).collect::<Result<_>>())
            .transpose()?,
        miou,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// Factor the input was multiplied by.
    pub scale: f64,
    /// `1 − scale`, the "darkness" reading of the same axis.
    pub darkness: f64,
    pub metrics: MetricsReport,
}

pub const SWEEP_CSV_HEADER: &str = "scale,darkness,sq_rel,abs_rel,rmse,rmse_log,a1,a2,a3,n_pixels";

/// Evaluation at each brightness scale, in the order given.
pub fn robustness_sweep(
    model: &mut dyn DepthModel,
    scenes: &[SceneSample],
    scales: &[f64],
    protocol: &EvalProtocol,
) -> Result<Vec<SweepRow>> {
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0 && s <= 1.0)) {
        return Err(Error::Range(format!("sweep scale {s} outside (0, 1]")));
    }
    scales
        .iter()
        .map(|&scale| {
            Ok(SweepRow {
                scale,
                darkness: 1.0 - scale,
                metrics: evaluate(model, scenes, protocol, scale, false)?.metrics,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.scale, r.darkness, m.sq_rel, m.abs_rel, m.rmse, m.rmse_log, m.a1, m.a2, m.a3, m.n_pixels
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: &[f64]) -> DepthMap {
        DepthMap::from_tensor(Tensor::new(&[1, 1, values.len()], values.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = map(&[1.0, 2.0, 5.0]);
        let r = depth_metrics(&g, &g, &[true; 3]).unwrap();
        assert_eq!(
            (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.a1, r.a2, r.a3),
            (0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn doubled_prediction_closed_form() {
        let r = depth_metrics(&map(&[2.0; 4]), &map(&[1.0; 4]), &[true; 4]).unwrap();
        assert_eq!((r.abs_rel, r.sq_rel, r.rmse), (1.0, 1.0, 1.0));
        assert!((r.rmse_log - 2f64.ln()).abs() < 1e-15);
        assert_eq!((r.a1, r.a2, r.a3), (0.0, 0.0, 0.0));
        assert_eq!(r.n_pixels, 4);
    }

    #[test]
    fn delta_boundary_is_strict() {
        let r = depth_metrics(&map(&[1.25, 2.5]), &map(&[1.0, 2.0]), &[true; 2]).unwrap();
        assert_eq!((r.a1, r.a2, r.a3), (0.0, 1.0, 1.0));
    }

    #[test]
    fn empty_mask_and_bad_pixels_are_rejected() {
        let g = map(&[1.0, 2.0]);
        assert!(matches!(depth_metrics(&g, &g, &[false; 2]), Err(Error::Degenerate(_))));
        let p = DepthMap::new(Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap(), vec![false, true]).unwrap();
        assert!(matches!(depth_metrics(&p, &g, &[true; 2]), Err(Error::Range(_))));
    }

    #[test]
    fn median_scaling_removes_global_scale() {
        let g = map(&[3.0, 7.0, 90.0, 12.0, 0.5]);
        let p = map(&[6.0, 14.0, 180.0, 24.0, 1.0]);
        let prep = prepare_monocular(&p, &g, DEFAULT_CAP).unwrap();
        assert_eq!(prep.mask, vec![true, true, false, true, true]);
        assert_eq!(prep.scale, 0.5);
        let r = depth_metrics(&prep.pred, &prep.gt, &prep.mask).unwrap();
        assert_eq!((r.abs_rel, r.a1), (0.0, 1.0));
    }

    #[test]
    fn class_breakdown_recombines() {
        let g = map(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let p = map(&[1.5, 2.0, 2.0, 4.4, 7.0]);
        let mask = [true, true, true, false, true];
        let seg = [0, 1, 0, 1, 2];
        let all = depth_metrics(&p, &g, &mask).unwrap();
        let by = per_class_metrics(&p, &g, &mask, &seg).unwrap();
        assert_eq!(by.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        let n: usize = by.values().map(|r| r.n_pixels).sum();
        assert_eq!(n, all.n_pixels);
        let w: f64 = by.values().map(|r| r.abs_rel * r.n_pixels as f64).sum::<f64>() / n as f64;
        assert!((w - all.abs_rel).abs() < 1e-12);
        let single = per_class_metrics(&p, &g, &mask, &[4; 5]).unwrap();
        assert_eq!(single[&4], all);
    }

    #[test]
    fn miou_cases() {
        assert_eq!(miou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2, 255).unwrap(), 1.0);
        // 2×2 grid, left column class 0, right column class 1; prediction
        // swaps one pixel of each: TP 1, FP 1, FN 1 per class
        let gt = [0, 1, 0, 1];
        let pred = [0, 0, 1, 1];
        assert!((miou(&pred, &gt, 2, 255).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // ignored pixels do not count even with out-of-range predictions
        assert_eq!(miou(&[0, 1, 7], &[0, 1, 255], 2, 255).unwrap(), 1.0);
        assert!(matches!(miou(&[0], &[255], 2, 255), Err(Error::Degenerate(_))));
        assert!(matches!(miou(&[3], &[0], 2, 255), Err(Error::Range(_))));
    }
}
