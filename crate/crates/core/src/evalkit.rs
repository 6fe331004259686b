//! Detection metrics and the annotation-budget sampler.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BBox;
use crate::rng::Rng;

/// Intersection over union of two boxes; both must have positive extent.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(Error::input(format!("degenerate box {}x{}", bx.w, bx.h)));
        }
    }
    Ok(box_iou(a, b))
}

/// IoU without validation; degenerate boxes give 0.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a.x as f64, a.y as f64, (a.x + a.w) as f64, (a.y + a.h) as f64);
    let (bx0, by0, bx1, by1) = (b.x as f64, b.y as f64, (b.x + b.w) as f64, (b.y + b.h) as f64);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f32,
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detection indices in descending score order (stable for ties).
    pub order: Vec<usize>,
    /// TP flag per entry of `order`.
    pub tp: Vec<bool>,
    /// Matched ground-truth index per entry of `order`.
    pub matched: Vec<Option<usize>>,
    pub false_negatives: usize,
}

/// Greedy matching: in descending score order each detection takes the
/// unmatched ground truth of highest IoU, provided that IoU reaches `thr`.
pub fn match_detections(dets: &[ScoredBox], gts: &[BBox], thr: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(order.len());
    let mut matched = Vec::with_capacity(order.len());
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = box_iou(&dets[i].bbox, gt);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        tp.push(best.is_some());
        matched.push(best.map(|(g, _)| g));
    }
    MatchResult {
        order,
        tp,
        matched,
        false_negatives: taken.iter().filter(|t| !**t).count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    AllPoints,
    ElevenPoint,
}

/// `(recall, precision)` after each detection of a ranked TP/FP list.
pub fn pr_curve(ranked_tp: &[bool], total_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    ranked_tp
        .iter()
        .enumerate()
        .map(|(k, &is_tp)| {
            tp += usize::from(is_tp);
            let recall = if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 };
            (recall, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// Area under the interpolated precision–recall curve of a ranked list.
/// Without ground truth the AP is 1 when there are no detections, else 0.
pub fn ap_from_ranked(ranked_tp: &[bool], total_gt: usize, interp: Interpolation) -> f64 {
    if total_gt == 0 {
        return if ranked_tp.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(ranked_tp, total_gt);
    match interp {
        Interpolation::AllPoints => {
            // precision envelope, right to left
            let mut env: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
            for k in (0..env.len().saturating_sub(1)).rev() {
                env[k] = env[k].max(env[k + 1]);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (k, &(r, _)) in curve.iter().enumerate() {
                if r > prev_recall {
                    ap += (r - prev_recall) * env[k];
                    prev_recall = r;
                }
            }
            ap
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|i| {
                    let level = i as f64 / 10.0;
                    curve
                        .iter()
                        .filter(|&&(r, _)| r >= level - 1e-12)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Single-image average precision at IoU `thr` (all-points interpolation).
pub fn average_precision(dets: &[ScoredBox], gts: &[BBox], thr: f64) -> f64 {
    let m = match_detections(dets, gts, thr);
    ap_from_ranked(&m.tp, gts.len(), Interpolation::AllPoints)
}

/// Per-image detections and ground truth, keyed by image id.
pub type PerImage<T> = BTreeMap<usize, Vec<T>>;

fn check_ids<A, B>(dets: &PerImage<A>, gts: &PerImage<B>) -> Result<()> {
    if dets.len() != gts.len() || dets.keys().zip(gts.keys()).any(|(a, b)| a != b) {
        let missing: Vec<_> = gts.keys().filter(|k| !dets.contains_key(k)).take(5).collect();
        let extra: Vec<_> = dets.keys().filter(|k| !gts.contains_key(k)).take(5).collect();
        return Err(Error::input(format!(
            "detection and ground-truth image ids differ (missing {missing:?}, unexpected {extra:?})"
        )));
    }
    Ok(())
}

/// Dataset-pooled ranked TP list: images are matched independently, then all
/// detections are ranked jointly by score (ties keep image order).
pub fn pooled_ranking(dets: &PerImage<ScoredBox>, gts: &PerImage<BBox>, thr: f64) -> Result<(Vec<bool>, usize)> {
    check_ids(dets, gts)?;
    let mut pooled: Vec<(f32, bool)> = Vec::new();
    let mut total_gt = 0;
    for (id, d) in dets {
        let g = &gts[id];
        total_gt += g.len();
        let m = match_detections(d, g, thr);
        pooled.extend(m.order.iter().zip(&m.tp).map(|(&i, &tp)| (d[i].score, tp)));
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok((pooled.into_iter().map(|(_, tp)| tp).collect(), total_gt))
}

pub fn map_at(dets: &PerImage<ScoredBox>, gts: &PerImage<BBox>, thr: f64, interp: Interpolation) -> Result<f64> {
    let (ranked, total) = pooled_ranking(dets, gts, thr)?;
    Ok(ap_from_ranked(&ranked, total, interp))
}

/// Single-class AP at IoU 0.5 with one PR curve over the whole dataset.
pub fn map50(dets: &PerImage<ScoredBox>, gts: &PerImage<BBox>) -> Result<f64> {
    map_at(dets, gts, 0.5, Interpolation::AllPoints)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub images: usize,
    pub detections: usize,
    pub ground_truth: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Precision, recall and F1 from pooled greedy matching. With no detections
/// precision is taken as 1.
pub fn f1_at_iou(dets: &PerImage<ScoredBox>, gts: &PerImage<BBox>, thr: f64) -> Result<(f64, f64, f64, Counts)> {
    check_ids(dets, gts)?;
    let mut c = Counts {
        images: gts.len(),
        ..Counts::default()
    };
    for (id, d) in dets {
        let m = match_detections(d, &gts[id], thr);
        c.detections += d.len();
        c.ground_truth += gts[id].len();
        c.tp += m.tp.iter().filter(|t| **t).count();
        c.fn_ += m.false_negatives;
    }
    c.fp = c.detections - c.tp;
    let precision = if c.detections == 0 { 1.0 } else { c.tp as f64 / c.detections as f64 };
    let recall = if c.ground_truth == 0 { 0.0 } else { c.tp as f64 / c.ground_truth as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f1, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "mAP50")]
    pub map50: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

/// mAP50, F1 statistics and the PR points behind the mAP.
pub fn evaluate(dets: &PerImage<ScoredBox>, gts: &PerImage<BBox>) -> Result<(Metrics, Vec<(f64, f64)>)> {
    let (ranked, total) = pooled_ranking(dets, gts, 0.5)?;
    let (precision, recall, f1, counts) = f1_at_iou(dets, gts, 0.5)?;
    Ok((
        Metrics {
            map50: ap_from_ranked(&ranked, total, Interpolation::AllPoints),
            precision,
            recall,
            f1,
            counts,
        },
        pr_curve(&ranked, total),
    ))
}

pub fn pr_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("rank,recall,precision\n");
    for (k, (r, p)) in points.iter().enumerate() {
        let _ = writeln!(s, "{},{r},{p}", k + 1);
    }
    s
}

/// Shuffle the items with `rng` and keep the longest prefix whose total cost
/// fits the budget.
pub fn budget_sample<T: Clone>(items: &[(T, f64)], budget: f64, rng: &mut Rng) -> Result<Vec<T>> {
    if let Some((_, c)) = items.iter().find(|(_, c)| !(*c > 0.0)) {
        return Err(Error::input(format!("item costs must be positive, got {c}")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut spent = 0.0;
    let mut out = Vec::new();
    for i in order {
        let (id, cost) = &items[i];
        if spent + cost > budget {
            break;
        }
        spent += cost;
        out.push(id.clone());
    }
    Ok(out)
}
