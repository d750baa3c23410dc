//! Detection metrics: greedy score-ranked matching on BEV IoU, 40-point
//! interpolated average precision pooled across scenes, and recall over
//! objects the vehicle cannot see.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, BBox3D, PerceptionRange};
use crate::scenario::Scene;

pub const AP_RECALL_POINTS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Vehicle frame.
    pub bbox: BBox3D,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchFlags {
    /// Prediction indices in descending score order (ties by index).
    pub order: Vec<usize>,
    /// TP flag per prediction, indexed like the input.
    pub pred_tp: Vec<bool>,
    /// Which prediction claimed each ground truth.
    pub gt_match: Vec<Option<usize>>,
}

impl MatchFlags {
    pub fn gt_matched(&self) -> Vec<bool> {
        self.gt_match.iter().map(Option::is_some).collect()
    }

    /// TP flags in rank order.
    pub fn ranked_flags(&self) -> Vec<bool> {
        self.order.iter().map(|i| self.pred_tp[*i]).collect()
    }
}

fn score_order(preds: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|a, b| preds[*b].score.partial_cmp(&preds[*a].score).unwrap_or(Ordering::Equal).then(a.cmp(b)));
    order
}

/// Each prediction, in score order, claims the still-unmatched ground truth
/// with the highest IoU at or above `iou_thr`.
pub fn match_predictions(preds: &[Prediction], gts: &[BBox3D], iou_thr: f64) -> MatchFlags {
    let order = score_order(preds);
    let mut pred_tp = vec![false; preds.len()];
    let mut gt_match = vec![None; gts.len()];
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_match[g].is_some() {
                continue;
            }
            let iou = bev_iou(&preds[p].bbox, gt);
            if iou >= iou_thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            gt_match[g] = Some(p);
            pred_tp[p] = true;
        }
    }
    MatchFlags { order, pred_tp, gt_match }
}

/// 40-point interpolated AP from TP/FP flags already in rank order. Recall
/// levels are `i/40`, `i = 1..=40`; each contributes the best precision
/// reached at any recall at or above it.
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    // (tp count, precision) at each rank
    let mut points = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, &is_tp) in ranked_tp.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp, tp as f64 / (k + 1) as f64));
    }
    // suffix max of precision, so each recall level is a single lookup
    let mut best_from = vec![0.0f64; points.len() + 1];
    for k in (0..points.len()).rev() {
        best_from[k] = best_from[k + 1].max(points[k].1);
    }
    let mut total = 0.0;
    let mut k = 0;
    for i in 1..=AP_RECALL_POINTS {
        // first rank whose recall reaches i/40, compared in integers
        while k < points.len() && points[k].0 * AP_RECALL_POINTS < i * num_gt {
            k += 1;
        }
        if k == points.len() {
            break;
        }
        total += best_from[k];
    }
    total / AP_RECALL_POINTS as f64
}

/// Which ground-truth objects each agent could see in a scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VisibilityInfo {
    pub veh_visible: Vec<u32>,
    pub inf_visible: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// `(IoU threshold, AP)` in the order requested.
    pub ap_bev: Vec<(f64, f64)>,
    /// Recall at the first requested threshold.
    pub recall_total: f64,
    /// Recall over objects hidden from the vehicle but seen by the
    /// infrastructure, at the first requested threshold.
    pub recall_occluded_from_vehicle: f64,
    pub num_gt: usize,
    pub num_pred: usize,
    pub num_occluded_gt: usize,
}

impl EvalResult {
    pub fn ap_at(&self, thr: f64) -> Option<f64> {
        self.ap_bev.iter().find(|(t, _)| (t - thr).abs() < 1e-12).map(|(_, a)| *a)
    }
}

pub fn evaluate(
    preds_per_scene: &[Vec<Prediction>],
    scenes: &[Scene],
    iou_thrs: &[f64],
    vis_info: &[VisibilityInfo],
    range: &PerceptionRange,
) -> Result<EvalResult> {
    if preds_per_scene.len() != scenes.len() {
        return Err(Error::LengthMismatch { left: preds_per_scene.len(), right: scenes.len() });
    }
    if vis_info.len() != scenes.len() {
        return Err(Error::LengthMismatch { left: vis_info.len(), right: scenes.len() });
    }
    let mut ap_bev = Vec::with_capacity(iou_thrs.len());
    let mut recall_total = 0.0;
    let mut recall_occ = 0.0;
    let mut num_gt = 0;
    let mut num_pred = 0;
    let mut num_occ = 0;
    for (t_idx, &thr) in iou_thrs.iter().enumerate() {
        let mut pooled: Vec<(f64, bool)> = Vec::new();
        let mut gt_total = 0;
        let mut gt_hit = 0;
        let mut occ_total = 0;
        let mut occ_hit = 0;
        let mut pred_total = 0;
        for ((preds, scene), vis) in preds_per_scene.iter().zip(scenes).zip(vis_info) {
            let gts: Vec<&crate::scenario::SceneObject> =
                scene.objects.iter().filter(|o| range.contains_xy(o.bbox.center)).collect();
            let gt_boxes: Vec<BBox3D> = gts.iter().map(|o| o.bbox).collect();
            let kept: Vec<Prediction> = preds.iter().filter(|p| range.contains_xy(p.bbox.center)).copied().collect();
            let flags = match_predictions(&kept, &gt_boxes, thr);
            pooled.extend(kept.iter().zip(&flags.pred_tp).map(|(p, tp)| (p.score, *tp)));
            pred_total += kept.len();
            gt_total += gts.len();
            let veh: HashSet<u32> = vis.veh_visible.iter().copied().collect();
            let inf: HashSet<u32> = vis.inf_visible.iter().copied().collect();
            for (o, m) in gts.iter().zip(&flags.gt_match) {
                if m.is_some() {
                    gt_hit += 1;
                }
                if !veh.contains(&o.id) && inf.contains(&o.id) {
                    occ_total += 1;
                    if m.is_some() {
                        occ_hit += 1;
                    }
                }
            }
        }
        // stable sort keeps scene order for equal scores
        pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        let ranked: Vec<bool> = pooled.iter().map(|(_, tp)| *tp).collect();
        ap_bev.push((thr, average_precision(&ranked, gt_total)));
        if t_idx == 0 {
            recall_total = if gt_total > 0 { gt_hit as f64 / gt_total as f64 } else { 0.0 };
            recall_occ = if occ_total > 0 { occ_hit as f64 / occ_total as f64 } else { 0.0 };
            num_gt = gt_total;
            num_pred = pred_total;
            num_occ = occ_total;
        }
    }
    Ok(EvalResult {
        ap_bev,
        recall_total,
        recall_occluded_from_vehicle: recall_occ,
        num_gt,
        num_pred,
        num_occluded_gt: num_occ,
    })
}
