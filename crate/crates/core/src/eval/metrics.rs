use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::discrete_frechet;
use crate::numeric::Matrix;
use crate::scene::{Centerline, ElementCategory, Lane, LaneCategory, SceneGraph, TrafficElement};

/// A detected lane with its score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredLane {
    pub centerline: Centerline,
    pub category: LaneCategory,
    pub confidence: f64,
}

/// One-to-one pairing of predictions with ground truth at a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub threshold: f64,
    /// `(pred index, gt index)` in the order the pairs were formed.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl MatchResult {
    /// Prediction matched to each ground-truth item.
    pub fn pred_of_gt(&self, gts: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; gts];
        for &(p, g) in &self.pairs {
            out[g] = Some(p);
        }
        out
    }

    pub fn is_matched_pred(&self, preds: usize) -> Vec<bool> {
        let mut out = vec![false; preds];
        for &(p, _) in &self.pairs {
            out[p] = true;
        }
        out
    }
}

/// Prediction indices by descending confidence, ties by index.
fn confidence_order(confidence: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching on a precomputed `preds × gts` cost matrix: predictions
/// in descending confidence each take the lowest-cost unmatched ground
/// truth with `accept(cost)`; ties go to the lower gt index.
pub fn greedy_match(
    cost: &Matrix,
    confidence: &[f64],
    threshold: f64,
    accept: impl Fn(f64) -> bool,
    better: impl Fn(f64, f64) -> bool,
) -> MatchResult {
    let (np, ng) = cost.shape();
    let mut taken = vec![false; ng];
    let mut pairs = Vec::new();
    let mut unmatched_pred = Vec::new();
    for p in confidence_order(confidence) {
        let mut best: Option<usize> = None;
        for g in 0..ng {
            let c = cost.get(p, g);
            if taken[g] || !accept(c) {
                continue;
            }
            if best.is_none_or(|b| better(c, cost.get(p, b))) {
                best = Some(g);
            }
        }
        match best {
            Some(g) => {
                taken[g] = true;
                pairs.push((p, g));
            }
            None => unmatched_pred.push(p),
        }
    }
    unmatched_pred.sort_unstable();
    debug_assert!(np == confidence.len());
    MatchResult {
        threshold,
        pairs,
        unmatched_pred,
        unmatched_gt: (0..ng).filter(|&g| !taken[g]).collect(),
    }
}

/// Fréchet distance of every prediction to every ground-truth lane.
pub fn frechet_matrix(preds: &[&Centerline], gts: &[&Centerline]) -> Matrix {
    Matrix::from_fn(preds.len(), gts.len(), |p, g| {
        discrete_frechet(preds[p].points(), gts[g].points())
    })
}

/// Greedy confidence-ordered matching by Fréchet distance `≤ threshold`.
pub fn match_instances(preds: &[PredLane], gts: &[Lane], threshold: f64) -> MatchResult {
    let p: Vec<&Centerline> = preds.iter().map(|l| &l.centerline).collect();
    let g: Vec<&Centerline> = gts.iter().map(|l| &l.centerline).collect();
    let conf: Vec<f64> = preds.iter().map(|l| l.confidence).collect();
    greedy_match(&frechet_matrix(&p, &g), &conf, threshold, |d| d <= threshold, |a, b| a < b)
}

/// Continuous interpolated AP of a pooled ranking. `hits` holds
/// `(confidence, is true positive)`; ties keep their given order.
pub fn ap_from_hits(hits: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..hits.len()).collect();
    order.sort_by(|&a, &b| hits[b].0.total_cmp(&hits[a].0).then(a.cmp(&b)));
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if hits[i].1 {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Interpolate: best precision at this recall or beyond.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    order
        .iter()
        .enumerate()
        .filter(|(_, &i)| hits[i].1)
        .map(|(k, _)| precision[k])
        .sum::<f64>()
        / num_gt as f64
}

/// `(confidence, matched)` for every prediction of one match.
pub fn hits_of(preds: &[PredLane], m: &MatchResult) -> Vec<(f64, bool)> {
    let matched = m.is_matched_pred(preds.len());
    preds.iter().zip(matched).map(|(p, t)| (p.confidence, t)).collect()
}

/// Class-agnostic AP of one scene at a Fréchet threshold.
pub fn average_precision(preds: &[PredLane], gts: &[Lane], threshold: f64) -> f64 {
    let m = match_instances(preds, gts, threshold);
    ap_from_hits(&hits_of(preds, &m), gts.len())
}

/// Categories present in the ground truth, in index order.
pub fn gt_categories(gts: &[Lane]) -> Vec<LaneCategory> {
    let set: BTreeSet<usize> = gts.iter().map(|l| l.category.index()).collect();
    set.into_iter().filter_map(LaneCategory::from_index).collect()
}

/// Predictions and ground truth restricted to one category.
pub fn split_by_category(preds: &[PredLane], gts: &[Lane], c: LaneCategory) -> (Vec<PredLane>, Vec<Lane>) {
    (
        preds.iter().filter(|p| p.category == c).cloned().collect(),
        gts.iter().filter(|g| g.category == c).cloned().collect(),
    )
}

/// Mean over ground-truth categories of the per-category AP.
pub fn mean_ap(preds: &[PredLane], gts: &[Lane], threshold: f64) -> f64 {
    let cats = gt_categories(gts);
    if cats.is_empty() {
        return 0.0;
    }
    cats.iter()
        .map(|&c| {
            let (p, g) = split_by_category(preds, gts, c);
            average_precision(&p, &g, threshold)
        })
        .sum::<f64>()
        / cats.len() as f64
}

/// `(correct, total)` over all ordered pairs of distinct ground-truth lanes.
/// A pair is correct when both lanes are matched and the predicted edge
/// between their predictions agrees with the ground truth.
pub fn edge_accuracy_counts(pred_edges: &BTreeSet<(usize, usize)>, gt: &SceneGraph, m: &MatchResult) -> (usize, usize) {
    let n = gt.lanes.len();
    let pred_of = m.pred_of_gt(n);
    let mut correct = 0;
    for g in 0..n {
        for h in 0..n {
            if g == h {
                continue;
            }
            if let (Some(a), Some(b)) = (pred_of[g], pred_of[h]) {
                if pred_edges.contains(&(a, b)) == gt.has_edge(g, h) {
                    correct += 1;
                }
            }
        }
    }
    (correct, n * n.saturating_sub(1))
}

/// A@1 of one scene. A scene with a single lane scores 1 if that lane is
/// matched; with no lanes matched the score is 0.
pub fn edge_accuracy(pred_edges: &BTreeSet<(usize, usize)>, gt: &SceneGraph, m: &MatchResult) -> f64 {
    if m.pairs.is_empty() {
        return 0.0;
    }
    let (c, t) = edge_accuracy_counts(pred_edges, gt, m);
    if t == 0 {
        1.0
    } else {
        c as f64 / t as f64
    }
}

/// AP of one ranked retrieval list: mean precision at the ranks of the
/// relevant items, over all `num_relevant` (unretrieved ones count 0).
pub fn vertex_ap(ranked_relevance: &[bool], num_relevant: usize) -> f64 {
    if num_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    total / num_relevant as f64
}

/// Per-lane vertex APs of lane–lane topology for one scene: one entry per
/// ground-truth lane with at least one successor. Each lane ranks the other
/// matched ground-truth lanes by the predicted score between their matched
/// predictions (ties by index); unmatched lanes score 0.
pub fn top_ll_vertices(pred_scores: &Matrix, gt: &SceneGraph, m: &MatchResult) -> Vec<f64> {
    let n = gt.lanes.len();
    let pred_of = m.pred_of_gt(n);
    let mut out = Vec::new();
    for g in 0..n {
        let successors = (0..n).filter(|&h| h != g && gt.has_edge(g, h)).count();
        if successors == 0 {
            continue;
        }
        let Some(a) = pred_of[g] else {
            out.push(0.0);
            continue;
        };
        let mut cands: Vec<(usize, f64)> = (0..n)
            .filter(|&h| h != g)
            .filter_map(|h| pred_of[h].map(|b| (h, pred_scores.get(a, b))))
            .collect();
        cands.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let ranked: Vec<bool> = cands.iter().map(|&(h, _)| gt.has_edge(g, h)).collect();
        out.push(vertex_ap(&ranked, successors));
    }
    out
}

/// Mean of [`top_ll_vertices`]; `None` when no lane has a successor.
pub fn top_ll(pred_scores: &Matrix, gt: &SceneGraph, m: &MatchResult) -> Option<f64> {
    mean(&top_ll_vertices(pred_scores, gt, m))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Intersection over union of two `[x0, y0, x1, y1]` boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy confidence-ordered element matching by IoU `≥ min_iou`.
pub fn match_elements(preds: &[(TrafficElement, f64)], gts: &[TrafficElement], min_iou: f64) -> MatchResult {
    let cost = Matrix::from_fn(preds.len(), gts.len(), |p, g| iou(&preds[p].0.bbox, &gts[g].bbox));
    let conf: Vec<f64> = preds.iter().map(|p| p.1).collect();
    greedy_match(&cost, &conf, min_iou, |v| v >= min_iou, |a, b| a > b)
}

/// Per-lane vertex APs of lane–element topology for one scene. Lanes and
/// elements are associated when their categories are equal; traffic lights
/// are excluded on both sides. Each ground-truth lane with at least one
/// associated signal retrieves exactly the elements whose matched detection
/// shares its matched prediction's category (ranked by element index).
pub fn top_lt_vertices(
    pred_lanes: &[PredLane],
    lane_match: &MatchResult,
    gt: &SceneGraph,
    pred_elements: &[(TrafficElement, f64)],
    element_match: &MatchResult,
    gt_elements: &[TrafficElement],
) -> Vec<f64> {
    let lane_pred = lane_match.pred_of_gt(gt.lanes.len());
    let elem_pred = element_match.pred_of_gt(gt_elements.len());
    let signals: Vec<usize> = (0..gt_elements.len())
        .filter(|&e| !gt_elements[e].category.is_light())
        .collect();
    let mut out = Vec::new();
    for (g, lane) in gt.lanes.iter().enumerate() {
        let relevant = |e: usize| gt_elements[e].category == ElementCategory::Signal(lane.category);
        let num_rel = signals.iter().filter(|&&e| relevant(e)).count();
        if num_rel == 0 {
            continue;
        }
        let Some(p) = lane_pred[g] else {
            out.push(0.0);
            continue;
        };
        let predicted = ElementCategory::Signal(pred_lanes[p].category);
        let ranked: Vec<bool> = signals
            .iter()
            .filter(|&&e| elem_pred[e].is_some_and(|d| pred_elements[d].0.category == predicted))
            .map(|&e| relevant(e))
            .collect();
        out.push(vertex_ap(&ranked, num_rel));
    }
    out
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("ols input `{name}` = {value} lies outside [0, 1]")]
pub struct OlsRangeError {
    pub name: &'static str,
    pub value: f64,
}

/// `¼ [det_l + det_t + √top_ll + √top_lt]`.
pub fn ols(det_l: f64, det_t: f64, top_ll: f64, top_lt: f64) -> Result<f64, OlsRangeError> {
    for (name, value) in [("det_l", det_l), ("det_t", det_t), ("top_ll", top_ll), ("top_lt", top_lt)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(OlsRangeError { name, value });
        }
    }
    Ok(0.25 * (det_l + det_t + top_ll.sqrt() + top_lt.sqrt()))
}
