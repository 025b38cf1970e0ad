//! Detection and evaluation metrics.
//!
//! Proposal scores are per-proposal class softmax probabilities of the
//! chosen head, computed on unscaled features unless explicit object
//! scores are supplied.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Bag, Dataset};
use crate::entropy::{softmax_rows, EPS};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms, rank_desc, BBox};
use crate::model::{forward, Head, ModelParams};

pub const DEFAULT_NMS_IOU: f64 = 0.4;
pub const DEFAULT_SCORE_FLOOR: f64 = 1e-3;
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub nms_iou: f64,
    pub score_floor: f64,
    /// Also report mAP averaged over IoU thresholds 0.5:0.05:0.95.
    pub coco_map: bool,
    /// Scale features by the training-time object scores before scoring.
    pub use_train_scores: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            nms_iou: DEFAULT_NMS_IOU,
            score_floor: DEFAULT_SCORE_FLOOR,
            coco_map: false,
            use_train_scores: false,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::InvalidConfig(format!("nms_iou {} outside [0, 1]", self.nms_iou)));
        }
        if self.score_floor.is_nan() {
            return Err(Error::InvalidConfig("score_floor is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bag: String,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Per-proposal class probabilities of `head` for one bag.
pub fn proposal_probs(params: &ModelParams, bag: &Bag, head: Head, scales: Option<&[f64]>) -> Result<Array2<f64>> {
    let mut x = bag.feature_matrix();
    if let Some(s) = scales {
        if s.len() != x.nrows() {
            return Err(Error::Shape(format!(
                "bag `{}`: {} object scores for {} proposals",
                bag.id,
                s.len(),
                x.nrows()
            )));
        }
        for (mut row, &si) in x.axis_iter_mut(Axis(0)).zip(s) {
            row *= si;
        }
    }
    Ok(softmax_rows(&forward(params, &x, head)?))
}

/// Per-class NMS over proposals scoring at least `score_floor`.
pub fn detect_from_probs(bag: &Bag, probs: &Array2<f64>, nms_iou: f64, score_floor: f64) -> Result<Vec<Detection>> {
    let boxes = bag.boxes();
    let mut out = Vec::new();
    for class in 0..probs.ncols() {
        let kept: Vec<usize> = (0..boxes.len()).filter(|&h| probs[[h, class]] >= score_floor).collect();
        let kb: Vec<BBox> = kept.iter().map(|&h| boxes[h]).collect();
        let ks: Vec<f64> = kept.iter().map(|&h| probs[[h, class]]).collect();
        for i in nms(&kb, &ks, nms_iou)? {
            out.push(Detection {
                bag: bag.id.clone(),
                class,
                bbox: kb[i],
                score: ks[i],
            });
        }
    }
    Ok(out)
}

pub fn detect(params: &ModelParams, head: Head, bag: &Bag, nms_iou: f64, score_floor: f64) -> Result<Vec<Detection>> {
    let probs = proposal_probs(params, bag, head, None)?;
    detect_from_probs(bag, &probs, nms_iou, score_floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub warning: Option<String>,
}

/// All-points interpolated AP for one class.
///
/// `gts` holds `(bag id, box)` pairs; detections only match ground truth of
/// their own bag. Detections are ranked by descending score, ties by input order.
pub fn average_precision(dets: &[Detection], gts: &[(String, BBox)], iou_threshold: f64) -> ApResult {
    if gts.is_empty() {
        let warning = if dets.is_empty() {
            "no ground truth and no detections; AP set to 0"
        } else {
            "no ground truth; AP set to 0"
        };
        return ApResult {
            ap: 0.0,
            warning: Some(warning.into()),
        };
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut matched = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(dets.len());
    for i in rank_desc(&scores) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, (bag, gb)) in gts.iter().enumerate() {
            if matched[g] || *bag != d.bag {
                continue;
            }
            let o = iou(&d.bbox, gb);
            if o >= iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
        }
        tp_flags.push(best.is_some());
    }
    ApResult {
        ap: ap_from_flags(&tp_flags, gts.len()),
        warning: None,
    }
}

/// Area under the monotone precision envelope of a ranked TP/FP sequence.
pub fn ap_from_flags(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut tp = 0usize;
    for (i, &t) in tp_flags.iter().enumerate() {
        tp += t as usize;
        rec.push(tp as f64 / num_gt as f64);
        prec.push(tp as f64 / (i + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (1..rec.len()).map(|i| (rec[i] - rec[i - 1]) * prec[i]).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocStats {
    pub accuracy: f64,
    pub variance: f64,
    /// Probabilities were all zero and uniform weights were used instead.
    pub uniform_fallback: bool,
}

/// Probability-weighted mean and variance of each proposal's best overlap
/// with the class's ground truth.
pub fn localization_stats(probs: &Array2<f64>, boxes: &[BBox], gts: &[BBox], class: usize) -> Result<LocStats> {
    if gts.is_empty() {
        return Err(Error::InvalidDataset(format!("no ground truth for class {class}")));
    }
    if probs.nrows() != boxes.len() || class >= probs.ncols() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs {} boxes, class {class}",
            probs.shape(),
            boxes.len()
        )));
    }
    let overlaps: Vec<f64> = boxes
        .iter()
        .map(|b| gts.iter().map(|g| iou(b, g)).fold(0.0, f64::max))
        .collect();
    let col = probs.column(class);
    let total: f64 = col.sum();
    let uniform_fallback = total <= EPS;
    let weights: Vec<f64> = if uniform_fallback {
        vec![1.0 / boxes.len() as f64; boxes.len()]
    } else {
        col.iter().map(|p| p / total).collect()
    };
    let accuracy: f64 = weights.iter().zip(&overlaps).map(|(w, o)| w * o).sum();
    let variance: f64 = weights
        .iter()
        .zip(&overlaps)
        .map(|(w, o)| w * (o - accuracy).powi(2))
        .sum();
    Ok(LocStats {
        accuracy,
        variance,
        uniform_fallback,
    })
}

/// Highest-probability proposal for a class, ties to the lowest index.
pub fn top_proposal(probs: &Array2<f64>, class: usize) -> usize {
    rank_desc(&probs.column(class).to_vec())[0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_coco: Option<f64>,
    pub per_class_corloc: Vec<Option<f64>>,
    pub mean_corloc: f64,
    pub pointing: f64,
    pub localization_accuracy: f64,
    pub localization_variance: f64,
    pub warnings: Vec<String>,
}

struct Scored<'a> {
    bag: &'a Bag,
    probs: Array2<f64>,
}

fn score_all<'a>(
    params: &ModelParams,
    head: Head,
    ds: &'a Dataset,
    scales: Option<&BTreeMap<String, Vec<f64>>>,
) -> Result<Vec<Scored<'a>>> {
    if params.dims.feature_dim != ds.feature_dim || params.dims.num_classes != ds.num_classes() {
        return Err(Error::Checkpoint(format!(
            "model expects feature_dim {} / {} classes, dataset has {} / {}",
            params.dims.feature_dim,
            params.dims.num_classes,
            ds.feature_dim,
            ds.num_classes()
        )));
    }
    ds.bags
        .iter()
        .map(|bag| {
            let s = match scales {
                Some(m) => Some(
                    m.get(&bag.id)
                        .ok_or_else(|| Error::UnknownBag(bag.id.clone()))?
                        .as_slice(),
                ),
                None => None,
            };
            Ok(Scored {
                bag,
                probs: proposal_probs(params, bag, head, s)?,
            })
        })
        .collect()
}

fn require_ground_truth(ds: &Dataset) -> Result<()> {
    if ds.has_ground_truth() {
        Ok(())
    } else {
        Err(Error::InvalidDataset(
            "evaluation requires ground_truth on every bag".into(),
        ))
    }
}

/// Mean localization accuracy and variance over positive (bag, class) pairs.
pub fn localization_summary(params: &ModelParams, head: Head, ds: &Dataset) -> Result<(f64, f64)> {
    let scored = score_all(params, head, ds, None)?;
    let (acc, var, _) = loc_summary(&scored)?;
    Ok((acc, var))
}

fn loc_summary(scored: &[Scored<'_>]) -> Result<(f64, f64, usize)> {
    let (mut acc, mut var, mut n, mut uniform) = (0.0, 0.0, 0usize, 0usize);
    for s in scored {
        for c in s.bag.positive_classes() {
            let gts = s.bag.gt_boxes(c);
            if gts.is_empty() {
                continue;
            }
            let st = localization_stats(&s.probs, &s.bag.boxes(), &gts, c)?;
            acc += st.accuracy;
            var += st.variance;
            n += 1;
            uniform += st.uniform_fallback as usize;
        }
    }
    if n == 0 {
        return Ok((0.0, 0.0, 0));
    }
    Ok((acc / n as f64, var / n as f64, uniform))
}

/// Per-class fraction of positive bags whose top proposal satisfies `hit`.
fn top_proposal_rate(
    scored: &[Scored<'_>],
    num_classes: usize,
    hit: impl Fn(&BBox, &[BBox]) -> bool,
) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| {
            let (mut correct, mut total) = (0usize, 0usize);
            for s in scored.iter().filter(|s| s.bag.is_positive(c)) {
                let top = s.bag.proposals[top_proposal(&s.probs, c)].bbox;
                correct += hit(&top, &s.bag.gt_boxes(c)) as usize;
                total += 1;
            }
            (total > 0).then(|| correct as f64 / total as f64)
        })
        .collect()
}

fn corloc_hit(top: &BBox, gts: &[BBox]) -> bool {
    gts.iter().any(|g| iou(top, g) >= MATCH_IOU)
}

fn pointing_hit(top: &BBox, gts: &[BBox]) -> bool {
    let (x, y) = top.center();
    gts.iter().any(|g| g.contains_point(x, y))
}

fn mean_defined(values: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorLoc {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn corloc(params: &ModelParams, head: Head, ds: &Dataset) -> Result<CorLoc> {
    require_ground_truth(ds)?;
    let scored = score_all(params, head, ds, None)?;
    let per_class = top_proposal_rate(&scored, ds.num_classes(), corloc_hit);
    Ok(CorLoc {
        mean: mean_defined(&per_class),
        per_class,
    })
}

pub fn pointing(params: &ModelParams, head: Head, ds: &Dataset) -> Result<f64> {
    require_ground_truth(ds)?;
    let scored = score_all(params, head, ds, None)?;
    Ok(pointing_rate(&scored, ds.num_classes()))
}

fn pointing_rate(scored: &[Scored<'_>], num_classes: usize) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for c in 0..num_classes {
        for s in scored.iter().filter(|s| s.bag.is_positive(c)) {
            let top = s.bag.proposals[top_proposal(&s.probs, c)].bbox;
            correct += pointing_hit(&top, &s.bag.gt_boxes(c)) as usize;
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Full metrics report over every bag of `ds`.
pub fn evaluate(
    params: &ModelParams,
    head: Head,
    ds: &Dataset,
    settings: &EvalSettings,
    scales: Option<&BTreeMap<String, Vec<f64>>>,
) -> Result<MetricsReport> {
    settings.validate()?;
    require_ground_truth(ds)?;
    let n = ds.num_classes();
    let scored = score_all(params, head, ds, scales)?;
    let mut warnings = Vec::new();

    let mut dets_by_class: Vec<Vec<Detection>> = vec![Vec::new(); n];
    for s in &scored {
        for d in detect_from_probs(s.bag, &s.probs, settings.nms_iou, settings.score_floor)? {
            dets_by_class[d.class].push(d);
        }
    }
    let gts_by_class: Vec<Vec<(String, BBox)>> = (0..n)
        .map(|c| {
            ds.bags
                .iter()
                .flat_map(|b| b.gt_boxes(c).into_iter().map(move |g| (b.id.clone(), g)))
                .collect()
        })
        .collect();

    let ap_at = |thr: f64, warnings: &mut Vec<String>| -> Vec<Option<f64>> {
        (0..n)
            .map(|c| {
                let r = average_precision(&dets_by_class[c], &gts_by_class[c], thr);
                match r.warning {
                    Some(w) => {
                        warnings.push(format!("class `{}`: {w}; excluded from mAP", ds.classes[c]));
                        None
                    }
                    None => Some(r.ap),
                }
            })
            .collect()
    };
    let per_class_ap = ap_at(MATCH_IOU, &mut warnings);
    let map = mean_defined(&per_class_ap);
    let map_coco = settings.coco_map.then(|| {
        let mut sink = Vec::new();
        let maps: Vec<f64> = (0..10)
            .map(|i| mean_defined(&ap_at(0.5 + 0.05 * i as f64, &mut sink)))
            .collect();
        maps.iter().sum::<f64>() / maps.len() as f64
    });

    let per_class_corloc = top_proposal_rate(&scored, n, corloc_hit);
    for (c, v) in per_class_corloc.iter().enumerate() {
        if v.is_none() {
            warnings.push(format!(
                "class `{}`: no positive bags; excluded from CorLoc",
                ds.classes[c]
            ));
        }
    }
    let (localization_accuracy, localization_variance, uniform) = loc_summary(&scored)?;
    if uniform > 0 {
        warnings.push(format!(
            "{uniform} bag/class pairs had all-zero probabilities; uniform weights used"
        ));
    }
    Ok(MetricsReport {
        classes: ds.classes.clone(),
        per_class_ap,
        map,
        map_coco,
        mean_corloc: mean_defined(&per_class_corloc),
        per_class_corloc,
        pointing: pointing_rate(&scored, n),
        localization_accuracy,
        localization_variance,
        warnings,
    })
}
