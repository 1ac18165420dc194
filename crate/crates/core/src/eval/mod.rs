//! Detection and topology metrics: discrete Fréchet matching, AP/mAP,
//! edge accuracy (A@1), vertex-AP topology scores, and OLS.
//!
//! Scene-level functions live in [`metrics`]; [`evaluate`] pools them over
//! a dataset the way detection benchmarks do (AP over all predictions of
//! all scenes, topology over all ground-truth vertices).

mod frechet;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use frechet::discrete_frechet;
pub use metrics::{
    ap_from_hits, average_precision, edge_accuracy, edge_accuracy_counts, greedy_match, iou, match_elements,
    match_instances, mean_ap, ols, top_ll, top_ll_vertices, top_lt_vertices, vertex_ap, MatchResult, OlsRangeError,
    PredLane,
};

use crate::datagen::DetectionSample;
use crate::model::{ModelError, PredictedGraph, TopoFormer};
use crate::numeric::Matrix;
use crate::scene::{ElementCategory, LaneCategory, SceneGraph, TrafficElement};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fréchet thresholds (meters) for AP, mAP, and A@1.
    pub thresholds: Vec<f64>,
    /// Fréchet threshold used to match lanes for TOP_ll and TOP_lt.
    pub topology_threshold: f64,
    /// IoU needed to match a traffic element.
    pub element_iou: f64,
    /// Minimum class probability for a query to count as a lane.
    pub node_threshold: f64,
    /// Minimum factual edge score for a predicted edge (A@1).
    pub edge_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![1.0, 2.0, 3.0],
            topology_threshold: 1.5,
            element_iou: 0.5,
            node_threshold: crate::model::NODE_THRESHOLD,
            edge_threshold: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err("eval.thresholds must be a non-empty list of positive distances".into());
        }
        if !(self.topology_threshold > 0.0) {
            return Err("eval.topology_threshold must be positive".into());
        }
        if !(self.element_iou > 0.0 && self.element_iou <= 1.0) {
            return Err("eval.element_iou must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.edge_threshold) || !(0.0..=1.0).contains(&self.node_threshold) {
            return Err("eval.node_threshold and eval.edge_threshold must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Everything predicted for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub lanes: Vec<PredLane>,
    /// Edge scores among `lanes`.
    pub edge_scores: Matrix,
    /// Thresholded edges among `lanes`.
    pub edges: BTreeSet<(usize, usize)>,
    /// Detected traffic elements with confidences.
    pub elements: Vec<(TrafficElement, f64)>,
}

impl ScenePrediction {
    pub fn from_graph(g: &PredictedGraph, elements: Vec<(TrafficElement, f64)>) -> Self {
        Self {
            lanes: g
                .graph
                .lanes
                .iter()
                .zip(&g.confidences)
                .map(|(l, &c)| PredLane {
                    centerline: l.centerline.clone(),
                    category: l.category,
                    confidence: c,
                })
                .collect(),
            edge_scores: g.edge_scores.clone(),
            edges: g.graph.edges.clone(),
            elements,
        }
    }

    /// The ground truth restated as a perfect prediction.
    pub fn from_truth(scene: &SceneGraph, elements: &[TrafficElement]) -> Self {
        Self {
            lanes: scene
                .lanes
                .iter()
                .map(|l| PredLane {
                    centerline: l.centerline.clone(),
                    category: l.category,
                    confidence: 1.0,
                })
                .collect(),
            edge_scores: scene.adjacency(),
            edges: scene.edges.clone(),
            elements: elements.iter().map(|e| (e.clone(), 1.0)).collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            lanes: Vec::new(),
            edge_scores: Matrix::zeros(0, 0),
            edges: BTreeSet::new(),
            elements: Vec::new(),
        }
    }
}

/// Ground truth of one scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneTruth<'a> {
    pub scene: &'a SceneGraph,
    pub elements: &'a [TrafficElement],
}

impl<'a> From<&'a DetectionSample> for SceneTruth<'a> {
    fn from(s: &'a DetectionSample) -> Self {
        Self {
            scene: &s.scene,
            elements: &s.traffic_elements,
        }
    }
}

/// Dataset-level scores, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    /// Class-agnostic AP per Fréchet threshold (keyed like `"1.0"`).
    pub ap: BTreeMap<String, f64>,
    /// Mean over lane categories of the per-category AP, per threshold.
    pub map_per_class: BTreeMap<String, f64>,
    pub a_at_1: BTreeMap<String, f64>,
    /// mAP averaged over the thresholds.
    pub det_l: f64,
    /// Traffic-element mAP at the IoU threshold.
    pub det_t: f64,
    pub top_ll: f64,
    pub top_lt: f64,
    pub ols: f64,
    /// Conventions that affected this report (undefined metrics, exclusions).
    pub flags: Vec<String>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

fn pooled_lane_ap(
    preds: &[ScenePrediction],
    truths: &[SceneTruth<'_>],
    threshold: f64,
    category: Option<LaneCategory>,
) -> f64 {
    let mut hits = Vec::new();
    let mut num_gt = 0;
    for (p, t) in preds.iter().zip(truths) {
        let (pl, gl) = match category {
            Some(c) => metrics::split_by_category(&p.lanes, &t.scene.lanes, c),
            None => (p.lanes.clone(), t.scene.lanes.clone()),
        };
        let m = match_instances(&pl, &gl, threshold);
        hits.extend(metrics::hits_of(&pl, &m));
        num_gt += gl.len();
    }
    ap_from_hits(&hits, num_gt)
}

fn pooled_element_ap(preds: &[ScenePrediction], truths: &[SceneTruth<'_>], c: ElementCategory, min_iou: f64) -> f64 {
    let mut hits = Vec::new();
    let mut num_gt = 0;
    for (p, t) in preds.iter().zip(truths) {
        let pe: Vec<(TrafficElement, f64)> = p.elements.iter().filter(|e| e.0.category == c).cloned().collect();
        let ge: Vec<TrafficElement> = t.elements.iter().filter(|e| e.category == c).cloned().collect();
        let m = match_elements(&pe, &ge, min_iou);
        let matched = m.is_matched_pred(pe.len());
        hits.extend(pe.iter().zip(matched).map(|(e, ok)| (e.1, ok)));
        num_gt += ge.len();
    }
    ap_from_hits(&hits, num_gt)
}

/// Scores `preds` against `truths` (same order, same length).
pub fn evaluate(preds: &[ScenePrediction], truths: &[SceneTruth<'_>], cfg: &EvalConfig) -> EvalReport {
    assert_eq!(preds.len(), truths.len(), "one prediction per scene");
    let mut flags = Vec::new();
    let mut ap = BTreeMap::new();
    let mut map_per_class = BTreeMap::new();
    let mut a_at_1 = BTreeMap::new();

    let categories: BTreeSet<usize> = truths
        .iter()
        .flat_map(|t| t.scene.lanes.iter().map(|l| l.category.index()))
        .collect();
    let mut det_l = 0.0;
    for &t in &cfg.thresholds {
        let key = threshold_key(t);
        ap.insert(key.clone(), pooled_lane_ap(preds, truths, t, None));
        let m = if categories.is_empty() {
            0.0
        } else {
            categories
                .iter()
                .map(|&c| pooled_lane_ap(preds, truths, t, LaneCategory::from_index(c)))
                .sum::<f64>()
                / categories.len() as f64
        };
        det_l += m / cfg.thresholds.len() as f64;
        map_per_class.insert(key.clone(), m);

        let (mut correct, mut total) = (0usize, 0usize);
        for (p, tr) in preds.iter().zip(truths) {
            let mt = match_instances(&p.lanes, &tr.scene.lanes, t);
            let (c, n) = edge_accuracy_counts(&p.edges, tr.scene, &mt);
            correct += c;
            total += n;
        }
        if total == 0 {
            flags.push(format!("a_at_1@{key} undefined: no ground-truth lane pairs; reported as 0"));
        }
        a_at_1.insert(key, if total == 0 { 0.0 } else { correct as f64 / total as f64 });
    }

    let element_categories: BTreeSet<ElementCategory> =
        truths.iter().flat_map(|t| t.elements.iter().map(|e| e.category)).collect();
    let det_t = if element_categories.is_empty() {
        flags.push("det_t undefined: no ground-truth traffic elements; reported as 0".into());
        0.0
    } else {
        element_categories
            .iter()
            .map(|&c| pooled_element_ap(preds, truths, c, cfg.element_iou))
            .sum::<f64>()
            / element_categories.len() as f64
    };

    let mut ll = Vec::new();
    let mut lt = Vec::new();
    let mut lights = false;
    for (p, t) in preds.iter().zip(truths) {
        let m = match_instances(&p.lanes, &t.scene.lanes, cfg.topology_threshold);
        ll.extend(top_ll_vertices(&p.edge_scores, t.scene, &m));
        let em = match_elements(&p.elements, t.elements, cfg.element_iou);
        lt.extend(top_lt_vertices(&p.lanes, &m, t.scene, &p.elements, &em, t.elements));
        lights |= t.elements.iter().any(|e| e.category.is_light());
    }
    let mean_or_flag = |v: &[f64], name: &str, flags: &mut Vec<String>| {
        if v.is_empty() {
            flags.push(format!("{name} undefined: no ground-truth relations; reported as 0"));
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let top_ll = mean_or_flag(&ll, "top_ll", &mut flags);
    let top_lt = mean_or_flag(&lt, "top_lt", &mut flags);
    if lights {
        flags.push("traffic lights excluded from top_lt".into());
    }
    let ols = ols(det_l, det_t, top_ll, top_lt).expect("metrics lie in [0, 1]");
    EvalReport {
        scenes: preds.len(),
        ap,
        map_per_class,
        a_at_1,
        det_l,
        det_t,
        top_ll,
        top_lt,
        ols,
        flags,
    }
}

/// Runs inference on every sample, spreading the work over `jobs` threads.
/// The result order matches `samples` regardless of `jobs`.
pub fn predict_all(
    model: &TopoFormer,
    samples: &[DetectionSample],
    cfg: &EvalConfig,
    jobs: usize,
) -> Result<Vec<ScenePrediction>, ModelError> {
    let predict = |s: &DetectionSample| -> Result<ScenePrediction, ModelError> {
        let g = model.infer(s.into(), cfg.node_threshold, cfg.edge_threshold)?;
        Ok(ScenePrediction::from_graph(&g, s.detected_elements.clone()))
    };
    let jobs = jobs.max(1).min(samples.len().max(1));
    if jobs == 1 {
        return samples.iter().map(predict).collect();
    }
    let chunk = samples.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(predict).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Inference plus [`evaluate`] over a dataset.
pub fn evaluate_model(
    model: &TopoFormer,
    samples: &[DetectionSample],
    cfg: &EvalConfig,
    jobs: usize,
) -> Result<EvalReport, ModelError> {
    let preds = predict_all(model, samples, cfg, jobs)?;
    let truths: Vec<SceneTruth<'_>> = samples.iter().map(SceneTruth::from).collect();
    Ok(evaluate(&preds, &truths, cfg))
}

impl EvalReport {
    /// Fixed-width summary: the headline columns, then per-threshold rows.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "DET_l", "DET_t", "TOP_ll", "TOP_lt", "OLS"
        ));
        s.push_str(&format!(
            "{:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1}\n",
            100.0 * self.det_l,
            100.0 * self.det_t,
            100.0 * self.top_ll,
            100.0 * self.top_lt,
            100.0 * self.ols
        ));
        s.push('\n');
        s.push_str(&format!("{:>8} {:>8} {:>8} {:>8}\n", "thresh", "AP", "mAP", "A@1"));
        for (k, ap) in &self.ap {
            s.push_str(&format!(
                "{:>8} {:>8.1} {:>8.1} {:>8.1}\n",
                k,
                100.0 * ap,
                100.0 * self.map_per_class[k],
                100.0 * self.a_at_1[k]
            ));
        }
        for f in &self.flags {
            s.push_str(&format!("note: {f}\n"));
        }
        s
    }
}
