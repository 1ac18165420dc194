//! TopoFormer: stacked lane-aggregation / counterfactual-intervention
//! blocks over detector queries, followed by a lane head and a pairwise edge
//! head.
//!
//! Every forward pass can run two branches that share all parameters. The
//! factual branch uses learned attention everywhere; the counterfactual
//! branch swaps the attention logits of each intervention layer for the
//! configured [`CilMode`]. Inference only ever reads the factual branch.

mod checkpoint;
mod config;
mod heads;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{CheckpointError, ModelFile, NamedTensor, CHECKPOINT_VERSION};
pub use config::{CilMode, ModelConfig, ResidualScheme, SpmMode};
pub use heads::{EdgeHead, EdgeScores, LaneHead};
pub use layers::{
    cil_forward, counterfactual_logits, csa_forward, gsa_forward, lal_forward, policy_rng, Attended,
    AttentionBlock, CilLayer, LalLayer,
};

use crate::datagen::{BevExtent, DetectionSample};
use crate::numeric::{sigmoid, Linear, Matrix, NumericError, ParamStore, Tape, Var};
use crate::scene::{spm, Centerline, Lane, LaneCategory, SceneGraph};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample does not fit the model: {0}")]
    Input(String),
}

/// One LAL followed by one CIL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub lal: LalLayer,
    pub cil: CilLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopoFormer {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub lane_head: LaneHead,
    pub edge_head: EdgeHead,
}

/// What the model reads from a sample.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub queries: &'a Matrix,
    pub centerlines: &'a [Centerline],
    pub extent: &'a BevExtent,
}

impl<'a> From<&'a DetectionSample> for ModelInput<'a> {
    fn from(s: &'a DetectionSample) -> Self {
        Self {
            queries: &s.queries,
            centerlines: &s.pred_centerlines,
            extent: &s.extent,
        }
    }
}

/// Which branches to record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branches {
    FactualOnly,
    /// Factual plus counterfactual branches; `step` reseeds the random
    /// policy.
    Both { step: u64 },
}

/// Tape handles produced by [`TopoFormer::forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub spm: Var,
    pub x_tilde: Var,
    /// Factual edge scores (`E_A`).
    pub edges: EdgeScores,
    /// One entry per counterfactual draw. With `cil_mode = off` this holds
    /// the factual scores themselves.
    pub cf_edges: Vec<EdgeScores>,
    pub cls_logits: Var,
    /// Normalized points, `N × 3l`.
    pub reg_points: Var,
    /// Factual attention of every layer, in execution order.
    pub attention: Vec<Var>,
    /// Counterfactual-branch attention of every layer the branch computed.
    pub cf_attention: Vec<Var>,
}

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub x_tilde: Matrix,
    pub e_a: Matrix,
    pub e_cf: Vec<Matrix>,
    pub cls_logits: Matrix,
    pub reg_points: Matrix,
}

/// Result of [`TopoFormer::infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedGraph {
    pub graph: SceneGraph,
    /// Max class probability of each kept lane.
    pub confidences: Vec<f64>,
    /// Query each kept lane came from.
    pub query_index: Vec<usize>,
    /// Factual edge scores among kept lanes.
    pub edge_scores: Matrix,
}

/// Default minimum class probability for a query to become a lane.
pub const NODE_THRESHOLD: f64 = 0.3;

/// Detected centerlines as normalized, flattened rows (`N × 3l`).
pub fn normalized_points(centerlines: &[Centerline], extent: &BevExtent) -> Matrix {
    let width = centerlines.first().map_or(0, |c| 3 * c.len());
    Matrix::from_fn(centerlines.len(), width, |r, c| {
        extent.normalize(centerlines[r].points()[c / 3])[c % 3]
    })
}

/// Inverse of [`normalized_points`] for one row.
pub fn denormalize_row(row: &[f64], extent: &BevExtent) -> Centerline {
    Centerline::from_points_unchecked(
        row.chunks_exact(3)
            .map(|p| extent.denormalize([p[0], p[1], p[2]]))
            .collect(),
    )
}

impl TopoFormer {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let input = Linear::new(&mut store, "input", config.d_in, d, &mut rng);
        let blocks = (0..config.n_blocks)
            .map(|b| Block {
                lal: LalLayer(AttentionBlock::new(
                    &mut store,
                    &format!("block{b}.lal"),
                    d,
                    config.ffn_width,
                    config.residual,
                    &mut rng,
                )),
                cil: CilLayer(AttentionBlock::new(
                    &mut store,
                    &format!("block{b}.cil"),
                    d,
                    config.ffn_width,
                    config.residual,
                    &mut rng,
                )),
            })
            .collect();
        let lane_head = LaneHead::new(&mut store, d, config.points_per_lane, &mut rng);
        let edge_head = EdgeHead::new(&mut store, d, config.edge_hidden, &mut rng);
        Ok(Self {
            config,
            store,
            input,
            blocks,
            lane_head,
            edge_head,
        })
    }

    fn check_input(&self, input: &ModelInput<'_>) -> Result<(), ModelError> {
        let n = input.queries.rows();
        let c = &self.config;
        if n == 0 {
            return Err(ModelError::Input("sample has no queries".into()));
        }
        if n > c.num_queries {
            return Err(ModelError::Input(format!(
                "{n} queries exceed model.num_queries = {}",
                c.num_queries
            )));
        }
        if input.queries.cols() != c.d_in {
            return Err(ModelError::Input(format!(
                "query width {} differs from model.d_in = {}",
                input.queries.cols(),
                c.d_in
            )));
        }
        if input.centerlines.len() != n {
            return Err(ModelError::Input(format!(
                "{} centerlines for {n} queries",
                input.centerlines.len()
            )));
        }
        if let Some(bad) = input.centerlines.iter().find(|l| l.len() != c.points_per_lane) {
            return Err(ModelError::Input(format!(
                "centerline has {} points, model.points_per_lane = {}",
                bad.len(),
                c.points_per_lane
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, input: ModelInput<'_>, branches: Branches) -> Result<ForwardVars, ModelError> {
        self.check_input(&input)?;
        let c = &self.config;
        let store = &self.store;
        let a_spm = tape.constant(spm(input.centerlines, &c.spm));
        let q = tape.constant(input.queries.clone());
        let x0 = self.input.forward(tape, store, q)?;

        let mut attention = Vec::with_capacity(2 * self.blocks.len());
        let mut first_lal = None;
        let mut x = x0;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        for block in &self.blocks {
            let a = lal_forward(tape, store, &block.lal, x, a_spm, c.spm_mode)?;
            attention.push(a.attn);
            first_lal.get_or_insert(a);
            let b = cil_forward(tape, store, &block.cil, a.out, a_spm, c.spm_mode, None, &mut unused)?;
            attention.push(b.attn);
            x = b.out;
        }
        let x_tilde = x;
        let edges = self.edge_head.forward(tape, store, x_tilde)?;
        let (cls_logits, offsets) = self.lane_head.forward(tape, store, x_tilde)?;
        let base = tape.constant(normalized_points(input.centerlines, input.extent));
        let reg_points = tape.add(base, offsets)?;

        let mut cf_edges = Vec::new();
        let mut cf_attention = Vec::new();
        match (branches, c.cil_mode) {
            (Branches::FactualOnly, _) => {}
            (Branches::Both { .. }, CilMode::Off) => cf_edges.push(edges),
            (Branches::Both { step }, policy) => {
                let draws = if policy == CilMode::Random { c.n_cf_samples } else { 1 };
                let first = first_lal.expect("at least one block");
                for draw in 0..draws {
                    let mut x = x0;
                    for (k, block) in self.blocks.iter().enumerate() {
                        // The first LAL has the same input in both branches,
                        // so its recorded output is reused.
                        let a = if k == 0 {
                            first
                        } else {
                            lal_forward(tape, store, &block.lal, x, a_spm, c.spm_mode)?
                        };
                        cf_attention.push(a.attn);
                        let mut rng = policy_rng(c.seed, step, k, draw);
                        let b = cil_forward(tape, store, &block.cil, a.out, a_spm, c.spm_mode, Some(policy), &mut rng)?;
                        cf_attention.push(b.attn);
                        x = b.out;
                    }
                    cf_edges.push(self.edge_head.forward(tape, store, x)?);
                }
            }
        }
        Ok(ForwardVars {
            spm: a_spm,
            x_tilde,
            edges,
            cf_edges,
            cls_logits,
            reg_points,
            attention,
            cf_attention,
        })
    }
}

impl TopoFormer {
    /// Runs both branches (step 0) and returns plain values.
    pub fn forward_values(&self, input: ModelInput<'_>) -> Result<ForwardOutput, ModelError> {
        self.forward_values_at(input, 0)
    }

    pub fn forward_values_at(&self, input: ModelInput<'_>, step: u64) -> Result<ForwardOutput, ModelError> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, input, Branches::Both { step })?;
        Ok(ForwardOutput {
            x_tilde: tape.value(v.x_tilde).clone(),
            e_a: tape.value(v.edges.probs).clone(),
            e_cf: v.cf_edges.iter().map(|e| tape.value(e.probs).clone()).collect(),
            cls_logits: tape.value(v.cls_logits).clone(),
            reg_points: tape.value(v.reg_points).clone(),
        })
    }

    /// Factual class logits, normalized points, and edge scores.
    pub fn factual(&self, input: ModelInput<'_>) -> Result<(Matrix, Matrix, Matrix), ModelError> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, input, Branches::FactualOnly)?;
        Ok((
            tape.value(v.cls_logits).clone(),
            tape.value(v.reg_points).clone(),
            tape.value(v.edges.probs).clone(),
        ))
    }

    /// Predicted T²SG: queries whose best class probability reaches
    /// `node_threshold` become lanes (refined geometry, argmax category);
    /// kept pairs with factual score `≥ edge_threshold` become edges.
    pub fn infer(
        &self,
        input: ModelInput<'_>,
        node_threshold: f64,
        edge_threshold: f64,
    ) -> Result<PredictedGraph, ModelError> {
        let (cls, reg, e_a) = self.factual(input)?;
        Ok(graph_from_scores(&cls, &reg, &e_a, input.extent, node_threshold, edge_threshold))
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Builds the predicted graph from factual head outputs. Depends on
/// nothing but these three matrices.
pub fn graph_from_scores(
    cls_logits: &Matrix,
    reg_points: &Matrix,
    e_a: &Matrix,
    extent: &BevExtent,
    node_threshold: f64,
    edge_threshold: f64,
) -> PredictedGraph {
    let probs = cls_logits.map(sigmoid);
    let mut lanes = Vec::new();
    let mut confidences = Vec::new();
    let mut query_index = Vec::new();
    for q in 0..probs.rows() {
        let (best, conf) = probs
            .row(q)
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
        if conf >= node_threshold {
            lanes.push(Lane {
                category: LaneCategory::from_index(best).expect("class index in range"),
                centerline: denormalize_row(reg_points.row(q), extent),
            });
            confidences.push(conf);
            query_index.push(q);
        }
    }
    let k = query_index.len();
    let edge_scores = Matrix::from_fn(k, k, |a, b| e_a.get(query_index[a], query_index[b]));
    let mut edges = std::collections::BTreeSet::new();
    for a in 0..k {
        for b in 0..k {
            if a != b && edge_scores.get(a, b) >= edge_threshold {
                edges.insert((a, b));
            }
        }
    }
    PredictedGraph {
        graph: SceneGraph::new(lanes, edges),
        confidences,
        query_index,
        edge_scores,
    }
}
