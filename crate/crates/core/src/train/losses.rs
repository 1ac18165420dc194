use serde::{Deserialize, Serialize};

use crate::datagen::DetectionSample;
use crate::model::{normalized_points, EdgeScores, ForwardVars};
use crate::numeric::{focal_loss_logits, focal_loss_probs, l1_loss_weighted, Matrix, NumericError, Tape, Var};
use crate::scene::LaneCategory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.5,
            lambda_reg: 0.02,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_reg", self.lambda_reg),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("loss.{name} must be a nonnegative number"));
            }
        }
        if self.focal_alpha > 1.0 {
            return Err("loss.focal_alpha must be at most 1".into());
        }
        Ok(())
    }
}

/// How the edge loss reads the total indirect effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieMode {
    /// `E_A − E_cf` clamped to `[ε, 1 − ε]` and treated as a probability.
    #[default]
    Clamp,
    /// `sigmoid(z_A − z_cf)` on the edge logits.
    Logit,
}

/// Pairwise supervision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTargets {
    /// 1 where the assigned ground-truth lanes are connected.
    pub target: Matrix,
    /// 1 for pairs that enter the loss.
    pub valid_mask: Matrix,
}

/// Per-query supervision derived from the generator's assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// One-hot category rows; all zero for background queries.
    pub class: Matrix,
    /// Normalized ground-truth points (`N × 3l`); zero for background.
    pub points: Matrix,
    /// 1 on every coordinate of a matched query.
    pub point_mask: Matrix,
    pub edges: EdgeTargets,
}

/// Targets for `sample` given a query → ground-truth lane assignment.
/// Background-background pairs are left out of the edge mask when
/// `mask_background_pairs` is set; the diagonal always is.
pub fn assign_targets_with(
    sample: &DetectionSample,
    assignment: &[Option<usize>],
    mask_background_pairs: bool,
) -> Targets {
    let n = assignment.len();
    let lanes = &sample.scene.lanes;
    let width = 3 * sample.points_per_lane();
    let mut class = Matrix::zeros(n, LaneCategory::COUNT);
    let mut points = Matrix::zeros(n, width);
    let mut point_mask = Matrix::zeros(n, width);
    let gt_rows = normalized_points(&sample.scene.centerlines(), &sample.extent);
    for (q, a) in assignment.iter().enumerate() {
        if let Some(g) = *a {
            class.set(q, lanes[g].category.index(), 1.0);
            points.row_mut(q).copy_from_slice(gt_rows.row(g));
            point_mask.row_mut(q).fill(1.0);
        }
    }
    let target = Matrix::from_fn(n, n, |i, j| match (assignment[i], assignment[j]) {
        (Some(g), Some(h)) if sample.scene.has_edge(g, h) => 1.0,
        _ => 0.0,
    });
    let valid_mask = Matrix::from_fn(n, n, |i, j| {
        let both_bg = assignment[i].is_none() && assignment[j].is_none();
        if i == j || (mask_background_pairs && both_bg) {
            0.0
        } else {
            1.0
        }
    });
    Targets {
        class,
        points,
        point_mask,
        edges: EdgeTargets { target, valid_mask },
    }
}

/// Targets from the generator's provenance links.
pub fn assign_targets(sample: &DetectionSample, mask_background_pairs: bool) -> Targets {
    assign_targets_with(sample, &sample.assignment, mask_background_pairs)
}

/// `λ_cls · focal(cls) + λ_reg · L1(points of matched queries)`.
pub fn node_loss(
    tape: &mut Tape,
    cls_logits: Var,
    reg_points: Var,
    targets: &Targets,
    w: &LossWeights,
) -> Result<Var, NumericError> {
    let ones = Matrix::filled(targets.class.rows(), targets.class.cols(), 1.0);
    let cls = focal_loss_logits(tape, cls_logits, &targets.class, &ones, w.focal_alpha, w.focal_gamma)?;
    let reg = l1_loss_weighted(tape, reg_points, &targets.points, &targets.point_mask)?;
    let cls = tape.scale(cls, w.lambda_cls);
    let reg = tape.scale(reg, w.lambda_reg);
    tape.add(cls, reg)
}

/// `E_A − mean_k E_cf[k]`, recorded on the tape.
pub fn tie(tape: &mut Tape, e_a: Var, e_cf: &[Var]) -> Result<Var, NumericError> {
    let mean = mean_of(tape, e_cf)?;
    tape.sub(e_a, mean)
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var, NumericError> {
    let (&first, rest) = vars.split_first().expect("at least one counterfactual sample");
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(if vars.len() > 1 {
        tape.scale(acc, 1.0 / vars.len() as f64)
    } else {
        acc
    })
}

/// Value-level TIE for inspection and tests.
pub fn tie_values(e_a: &Matrix, e_cf: &[Matrix]) -> Result<Matrix, NumericError> {
    let mut mean = Matrix::zeros(e_a.rows(), e_a.cols());
    for m in e_cf {
        mean = mean.add(m)?;
    }
    e_a.sub(&mean.scale(1.0 / e_cf.len().max(1) as f64))
}

/// Default clamp applied to TIE before the focal formula.
pub const TIE_EPS: f64 = 1e-6;

/// `λ_cls · focal(clamp(tie))`, masked by the valid pairs.
pub fn edge_loss(
    tape: &mut Tape,
    tie_scores: Var,
    targets: &EdgeTargets,
    w: &LossWeights,
    eps: f64,
) -> Result<Var, NumericError> {
    let l = focal_loss_probs(
        tape,
        tie_scores,
        &targets.target,
        &targets.valid_mask,
        w.focal_alpha,
        w.focal_gamma,
        eps,
    )?;
    Ok(tape.scale(l, w.lambda_cls))
}

/// `λ_cls · focal(z_A − mean z_cf)` on logits.
pub fn edge_loss_logit(
    tape: &mut Tape,
    factual: &EdgeScores,
    counterfactual: &[EdgeScores],
    targets: &EdgeTargets,
    w: &LossWeights,
) -> Result<Var, NumericError> {
    let z_cf: Vec<Var> = counterfactual.iter().map(|e| e.logits).collect();
    let mean = mean_of(tape, &z_cf)?;
    let z = tape.sub(factual.logits, mean)?;
    edge_loss_on_logits(tape, z, targets, w)
}

/// `λ_cls · focal(sigmoid(z))`, the objective without intervention.
pub fn edge_loss_on_logits(
    tape: &mut Tape,
    logits: Var,
    targets: &EdgeTargets,
    w: &LossWeights,
) -> Result<Var, NumericError> {
    let l = focal_loss_logits(
        tape,
        logits,
        &targets.target,
        &targets.valid_mask,
        w.focal_alpha,
        w.focal_gamma,
    )?;
    Ok(tape.scale(l, w.lambda_cls))
}

/// What drives the edge head during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeObjective {
    /// Focal loss on the total indirect effect.
    #[default]
    Tie,
    /// Focal loss on the factual scores alone (the no-intervention
    /// ablation).
    Factual,
}

/// Loss nodes for one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub l_v: Var,
    pub l_e: Var,
    pub total: Var,
}

/// `L_V + L_E` for one forward pass. With `edge_weight = 0` the edge term
/// is still recorded (for logging) but contributes nothing.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    vars: &ForwardVars,
    targets: &Targets,
    w: &LossWeights,
    objective: EdgeObjective,
    tie_mode: TieMode,
    edge_weight: f64,
) -> Result<LossParts, NumericError> {
    let l_v = node_loss(tape, vars.cls_logits, vars.reg_points, targets, w)?;
    let l_e = match (objective, tie_mode) {
        (EdgeObjective::Factual, _) => edge_loss_on_logits(tape, vars.edges.logits, &targets.edges, w)?,
        (EdgeObjective::Tie, TieMode::Clamp) => {
            let cf: Vec<Var> = vars.cf_edges.iter().map(|e| e.probs).collect();
            let t = tie(tape, vars.edges.probs, &cf)?;
            edge_loss(tape, t, &targets.edges, w, TIE_EPS)?
        }
        (EdgeObjective::Tie, TieMode::Logit) => {
            edge_loss_logit(tape, &vars.edges, &vars.cf_edges, &targets.edges, w)?
        }
    };
    let gated = tape.scale(l_e, edge_weight);
    let total = tape.add(l_v, gated)?;
    Ok(LossParts { l_v, l_e, total })
}
