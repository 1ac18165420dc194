use rand::Rng;

use crate::numeric::{
    mlp_forward, Activation, Linear, Matrix, Mlp, NumericError, ParamId, ParamStore, Parameter, Tape, Var,
};
use crate::scene::LaneCategory;

/// Per-query classification and centerline refinement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaneHead {
    /// `d → d → d → |categories|`
    pub cls: Mlp,
    /// `d → d → d → 3l`; predicts normalized offsets added to the detected
    /// centerline.
    pub reg: Mlp,
}

impl LaneHead {
    pub fn new(store: &mut ParamStore, d: usize, points: usize, rng: &mut impl Rng) -> Self {
        let cls = Mlp::new(store, "lane_head.cls", &[d, d, d, LaneCategory::COUNT], rng);
        let reg = Mlp::new(store, "lane_head.reg", &[d, d, d, 3 * points], rng);
        // Start from the detector's own geometry.
        let w = reg.last().weight;
        let shape = store.get(w).value.shape();
        store.get_mut(w).value = Matrix::zeros(shape.0, shape.1);
        Self { cls, reg }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var), NumericError> {
        let cls = mlp_forward(tape, store, x, &self.cls, Activation::Relu)?;
        let reg = mlp_forward(tape, store, x, &self.reg, Activation::Relu)?;
        Ok((cls, reg))
    }
}

/// Pairwise edge scorer. `MLP_s` and `MLP_e` embed start and end roles; the
/// edge MLP sees their concatenation. Its first layer is stored split into
/// the halves acting on each role, which equals a `2d → h` layer on the
/// concatenated vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeHead {
    pub mlp_s: Mlp,
    pub mlp_e: Mlp,
    pub w_pair_s: ParamId,
    pub w_pair_e: ParamId,
    pub b_pair: ParamId,
    pub out: Linear,
}

/// Edge-head outputs for one branch.
#[derive(Debug, Clone, Copy)]
pub struct EdgeScores {
    /// `N × N` pre-sigmoid scores (diagonal included, ignored downstream).
    pub logits: Var,
    /// Sigmoid of the logits with a zeroed diagonal.
    pub probs: Var,
}

impl EdgeHead {
    pub fn new(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mlp_s = Mlp::new(store, "edge_head.mlp_s", &[d, d, d, d], rng);
        let mlp_e = Mlp::new(store, "edge_head.mlp_e", &[d, d, d, d], rng);
        // Glorot over the full concatenated fan-in.
        let first = Linear::new(store, "edge_head.pair", 2 * d, hidden, rng);
        let w = store.get(first.weight).value.clone();
        let top = Matrix::from_fn(d, hidden, |r, c| w.get(r, c));
        let bottom = Matrix::from_fn(d, hidden, |r, c| w.get(d + r, c));
        *store.get_mut(first.weight) = Parameter::new("edge_head.pair.weight_s", top);
        let w_pair_e = store.add("edge_head.pair.weight_e", bottom);
        let out = Linear::new(store, "edge_head.out", hidden, 1, rng);
        Self {
            mlp_s,
            mlp_e,
            w_pair_s: first.weight,
            w_pair_e,
            b_pair: first.bias,
            out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<EdgeScores, NumericError> {
        let n = tape.value(x).rows();
        let s = mlp_forward(tape, store, x, &self.mlp_s, Activation::Relu)?;
        let e = mlp_forward(tape, store, x, &self.mlp_e, Activation::Relu)?;
        let ws = tape.param(store, self.w_pair_s);
        let we = tape.param(store, self.w_pair_e);
        let b = tape.param(store, self.b_pair);
        let ps = tape.matmul(s, ws)?;
        let pe = tape.matmul(e, we)?;
        let pairs = tape.pair_sum(ps, pe)?;
        let pairs = tape.add_row(pairs, b)?;
        let h = tape.relu(pairs);
        let scores = self.out.forward(tape, store, h)?;
        let logits = tape.reshape(scores, n, n)?;
        let sig = tape.sigmoid(logits);
        let off_diag = tape.constant(Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }));
        let probs = tape.hadamard(sig, off_diag)?;
        Ok(EdgeScores { logits, probs })
    }
}
