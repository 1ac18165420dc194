//! Lane aggregation and counterfactual intervention layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{CilMode, ResidualScheme, SpmMode};
use crate::numeric::{mlp_forward, Activation, Matrix, Mlp, NumericError, Norm, ParamId, ParamStore, Tape, Var};

/// Parameters shared in shape by both layer kinds: bias-free query, key and
/// value projections, a two-layer FFN, and the layer norm(s).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionBlock {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ffn: Mlp,
    pub norm: Norm,
    /// Second norm, present only for [`ResidualScheme::TwoSublayer`].
    pub norm_ffn: Option<Norm>,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        ffn_width: usize,
        residual: ResidualScheme,
        rng: &mut impl Rng,
    ) -> Self {
        let mut proj = |suffix: &str, rng: &mut dyn rand::RngCore| {
            let limit = (3.0 / d as f64).sqrt();
            let w = Matrix::from_fn(d, d, |_, _| rng.random_range(-limit..limit));
            store.add(format!("{name}.{suffix}"), w)
        };
        let w_q = proj("w_q", rng);
        let w_k = proj("w_k", rng);
        let w_v = proj("w_v", rng);
        let ffn = Mlp::new(store, &format!("{name}.ffn"), &[d, ffn_width, d], rng);
        let norm = Norm::new(store, &format!("{name}.norm"), d);
        let norm_ffn = match residual {
            ResidualScheme::Fused => None,
            ResidualScheme::TwoSublayer => Some(Norm::new(store, &format!("{name}.norm_ffn"), d)),
        };
        Self {
            w_q,
            w_k,
            w_v,
            ffn,
            norm,
            norm_ffn,
        }
    }

    fn width(&self, store: &ParamStore) -> usize {
        store.get(self.w_q).value.rows()
    }
}

/// Lane Aggregation Layer: geometry-guided self-attention plus FFN.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LalLayer(pub AttentionBlock);

/// Counterfactual Intervention Layer. Same shapes as [`LalLayer`] with
/// independent parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CilLayer(pub AttentionBlock);

/// Output of an attention primitive.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub out: Var,
    /// Row-stochastic attention weights.
    pub attn: Var,
}

fn combine(tape: &mut Tape, logits: Var, spm: Var, mode: SpmMode) -> Result<Var, NumericError> {
    match mode {
        SpmMode::Add => tape.add(logits, spm),
        SpmMode::Mul => tape.matmul(logits, spm),
        SpmMode::Hadamard => tape.hadamard(logits, spm),
        SpmMode::Off => Ok(logits),
    }
}

fn check_inputs(tape: &Tape, x: Var, spm: Var, d: usize) -> Result<(), NumericError> {
    let (xs, ss) = (tape.value(x).shape(), tape.value(spm).shape());
    if xs.1 != d || ss != (xs.0, xs.0) {
        return Err(NumericError::Shape {
            op: "attention",
            left: xs,
            right: ss,
        });
    }
    Ok(())
}

/// `XW_Q (XW_K)ᵀ / √d`, recorded on the tape.
fn scaled_logits(tape: &mut Tape, store: &ParamStore, block: &AttentionBlock, x: Var) -> Result<Var, NumericError> {
    let d = block.width(store);
    let wq = tape.param(store, block.w_q);
    let wk = tape.param(store, block.w_k);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let qk = tape.matmul_t(q, k)?;
    Ok(tape.scale(qk, 1.0 / (d as f64).sqrt()))
}

/// Geometry-guided self-attention:
/// `softmax(combine(XW_Q (XW_K)ᵀ/√d, A_spm)) · XW_V`.
pub fn gsa_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &AttentionBlock,
    x: Var,
    spm: Var,
    mode: SpmMode,
) -> Result<Attended, NumericError> {
    check_inputs(tape, x, spm, layer.width(store))?;
    let logits = scaled_logits(tape, store, layer, x)?;
    let combined = combine(tape, logits, spm, mode)?;
    let attn = tape.row_softmax(combined);
    let wv = tape.param(store, layer.w_v);
    let v = tape.matmul(x, wv)?;
    let out = tape.matmul(attn, v)?;
    Ok(Attended { out, attn })
}

/// Counterfactual logits replacing the learned ones. They are built from
/// current values and enter the tape as constants.
pub fn counterfactual_logits(
    store: &ParamStore,
    layer: &AttentionBlock,
    x: &Matrix,
    policy: CilMode,
    rng: &mut impl Rng,
) -> Result<Matrix, NumericError> {
    let n = x.rows();
    let factual = || -> Result<Matrix, NumericError> {
        let q = x.matmul(&store.get(layer.w_q).value)?;
        let k = x.matmul(&store.get(layer.w_k).value)?;
        Ok(q.matmul_t(&k)?.scale(1.0 / (layer.width(store) as f64).sqrt()))
    };
    Ok(match policy {
        CilMode::Zero | CilMode::Off => Matrix::zeros(n, n),
        CilMode::Mean => Matrix::filled(n, n, factual()?.mean()),
        CilMode::Random => {
            let f = factual()?;
            let mean = f.mean();
            let var = f.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.data().len() as f64;
            let normal = Normal::new(mean, var.sqrt()).expect("finite logits");
            Matrix::from_fn(n, n, |_, _| normal.sample(rng))
        }
    })
}

/// Counterfactual self-attention: `softmax(combine(Ā, A_spm)) · XW_V` with
/// `Ā` chosen by `policy`. The query/key path does not enter the output.
pub fn csa_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &AttentionBlock,
    x: Var,
    spm: Var,
    mode: SpmMode,
    policy: CilMode,
    rng: &mut impl Rng,
) -> Result<Attended, NumericError> {
    check_inputs(tape, x, spm, layer.width(store))?;
    let bar = counterfactual_logits(store, layer, tape.value(x), policy, rng)?;
    let bar = tape.constant(bar);
    let combined = combine(tape, bar, spm, mode)?;
    let attn = tape.row_softmax(combined);
    let wv = tape.param(store, layer.w_v);
    let v = tape.matmul(x, wv)?;
    let out = tape.matmul(attn, v)?;
    Ok(Attended { out, attn })
}

fn wrap(
    tape: &mut Tape,
    store: &ParamStore,
    block: &AttentionBlock,
    x: Var,
    attended: Var,
) -> Result<Var, NumericError> {
    match &block.norm_ffn {
        None => {
            let f = mlp_forward(tape, store, attended, &block.ffn, Activation::Relu)?;
            let r = tape.add(x, f)?;
            block.norm.forward(tape, store, r)
        }
        Some(norm_ffn) => {
            let r = tape.add(x, attended)?;
            let y = block.norm.forward(tape, store, r)?;
            let f = mlp_forward(tape, store, y, &block.ffn, Activation::Relu)?;
            let r2 = tape.add(y, f)?;
            norm_ffn.forward(tape, store, r2)
        }
    }
}

/// `Norm(X + FFN(GSA(X)))`; returns the layer output and its attention.
pub fn lal_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &LalLayer,
    x: Var,
    spm: Var,
    mode: SpmMode,
) -> Result<Attended, NumericError> {
    let a = gsa_forward(tape, store, &layer.0, x, spm, mode)?;
    let out = wrap(tape, store, &layer.0, x, a.out)?;
    Ok(Attended { out, attn: a.attn })
}

/// `Norm(X + FFN(CSA(X)))` when `policy` is `Some`, otherwise the factual
/// pass of the same layer (its own learned attention).
pub fn cil_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &CilLayer,
    x: Var,
    spm: Var,
    mode: SpmMode,
    policy: Option<CilMode>,
    rng: &mut impl Rng,
) -> Result<Attended, NumericError> {
    let a = match policy {
        Some(p) => csa_forward(tape, store, &layer.0, x, spm, mode, p, rng)?,
        None => gsa_forward(tape, store, &layer.0, x, spm, mode)?,
    };
    let out = wrap(tape, store, &layer.0, x, a.out)?;
    Ok(Attended { out, attn: a.attn })
}

/// Deterministic generator for the random policy at a given training step.
pub fn policy_rng(seed: u64, step: u64, layer: usize, draw: usize) -> ChaCha8Rng {
    let s = crate::datagen::split_seed(seed ^ 0xC0FF_EE00, step);
    let s = crate::datagen::split_seed(s, (layer as u64) << 16 | draw as u64);
    ChaCha8Rng::seed_from_u64(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::row_softmax;

    fn setup(n: usize, d: usize, seed: u64) -> (ParamStore, AttentionBlock, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "l", d, 2 * d, ResidualScheme::Fused, &mut rng);
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let spm = Matrix::from_fn(n, n, |_, _| rng.random_range(0.0..2.0));
        (store, block, x, spm)
    }

    /// Scalar-loop attention oracle, independent of the tape.
    fn oracle(store: &ParamStore, b: &AttentionBlock, x: &Matrix, spm: Option<&Matrix>) -> Matrix {
        let (n, d) = x.shape();
        let proj = |w: &Matrix| {
            let mut out = vec![vec![0.0; d]; n];
            for i in 0..n {
                for j in 0..d {
                    for k in 0..d {
                        out[i][j] += x.get(i, k) * w.get(k, j);
                    }
                }
            }
            out
        };
        let (q, k, v) = (
            proj(&store.get(b.w_q).value),
            proj(&store.get(b.w_k).value),
            proj(&store.get(b.w_v).value),
        );
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..d {
                    s += q[i][t] * k[j][t];
                }
                logits[j] = s / (d as f64).sqrt() + spm.map_or(0.0, |m| m.get(i, j));
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                for t in 0..d {
                    out.set(i, t, out.get(i, t) + exps[j] / z * v[j][t]);
                }
            }
        }
        out
    }

    #[test]
    fn off_equals_add_with_zero_spm_and_oracle() {
        for seed in 0..10 {
            let (store, block, x, _) = setup(3, 5, seed);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let zero = tape.constant(Matrix::zeros(3, 3));
            let a = gsa_forward(&mut tape, &store, &block, xv, zero, SpmMode::Off).unwrap();
            let b = gsa_forward(&mut tape, &store, &block, xv, zero, SpmMode::Add).unwrap();
            assert_eq!(tape.value(a.out), tape.value(b.out));
            let o = oracle(&store, &block, &x, None);
            assert!(tape.value(a.out).max_abs_diff(&o) < 1e-10);
        }
    }

    #[test]
    fn add_mode_matches_oracle_with_spm() {
        let (store, block, x, spm) = setup(4, 6, 3);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = tape.constant(spm.clone());
        let a = gsa_forward(&mut tape, &store, &block, xv, s, SpmMode::Add).unwrap();
        assert!(tape.value(a.out).max_abs_diff(&oracle(&store, &block, &x, Some(&spm))) < 1e-10);
    }

    #[test]
    fn mul_and_hadamard_modes_differ() {
        let (store, block, x, spm) = setup(4, 6, 5);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let s = tape.constant(spm);
        let m = gsa_forward(&mut tape, &store, &block, xv, s, SpmMode::Mul).unwrap();
        let h = gsa_forward(&mut tape, &store, &block, xv, s, SpmMode::Hadamard).unwrap();
        assert!(tape.value(m.attn).max_abs_diff(tape.value(h.attn)) > 1e-6);
    }

    #[test]
    fn singleton_attends_to_itself() {
        let (store, block, x, _) = setup(1, 4, 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = tape.constant(Matrix::filled(1, 1, 1.0));
        let a = gsa_forward(&mut tape, &store, &block, xv, s, SpmMode::Add).unwrap();
        assert_eq!(tape.value(a.attn).data(), &[1.0]);
        let xw = x.matmul(&store.get(block.w_v).value).unwrap();
        assert!(tape.value(a.out).max_abs_diff(&xw) < 1e-15);
    }

    #[test]
    fn wrong_spm_shape_is_rejected() {
        let (store, block, x, _) = setup(3, 4, 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let s = tape.constant(Matrix::zeros(2, 2));
        assert!(gsa_forward(&mut tape, &store, &block, xv, s, SpmMode::Add).is_err());
    }

    #[test]
    fn zero_policy_without_spm_is_uniform() {
        let (store, block, x, _) = setup(5, 4, 2);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = tape.constant(Matrix::zeros(5, 5));
        let mut rng = policy_rng(0, 0, 0, 0);
        let a = csa_forward(&mut tape, &store, &block, xv, s, SpmMode::Add, CilMode::Zero, &mut rng).unwrap();
        for &w in tape.value(a.attn).data() {
            assert!((w - 0.2).abs() < 1e-15);
        }
        let xw = x.matmul(&store.get(block.w_v).value).unwrap();
        for r in 0..5 {
            for c in 0..4 {
                let col_mean = (0..5).map(|i| xw.get(i, c)).sum::<f64>() / 5.0;
                assert!((tape.value(a.out).get(r, c) - col_mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_policy_attention_is_softmax_of_spm() {
        let (mut store, block, x, spm) = setup(4, 4, 8);
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let s = tape.constant(spm.clone());
            let mut rng = policy_rng(0, 0, 0, 0);
            let a = csa_forward(&mut tape, store, &block, xv, s, SpmMode::Add, CilMode::Zero, &mut rng).unwrap();
            (tape.value(a.attn).clone(), tape.value(a.out).clone())
        };
        let (attn, out) = run(&store);
        assert!(attn.max_abs_diff(&row_softmax(&spm)) < 1e-15);
        store.get_mut(block.w_q).value.data_mut()[3] += 0.7;
        store.get_mut(block.w_k).value.data_mut()[0] -= 1.3;
        let (attn2, out2) = run(&store);
        assert_eq!(attn, attn2);
        assert!(out.max_abs_diff(&out2) <= 1e-12);
    }

    #[test]
    fn mean_policy_on_constant_logits_equals_zero_policy() {
        // Zero query weights give constant (zero) factual logits; the mean
        // policy then shifts every logit equally, which softmax ignores.
        let (mut store, block, x, spm) = setup(4, 3, 4);
        store.get_mut(block.w_q).value = Matrix::zeros(3, 3);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let s = tape.constant(spm);
        let mut rng = policy_rng(0, 0, 0, 0);
        let z = csa_forward(&mut tape, &store, &block, xv, s, SpmMode::Add, CilMode::Zero, &mut rng).unwrap();
        let m = csa_forward(&mut tape, &store, &block, xv, s, SpmMode::Add, CilMode::Mean, &mut rng).unwrap();
        assert!(tape.value(z.attn).max_abs_diff(tape.value(m.attn)) < 1e-15);

        // Nonzero constant shift, verified numerically.
        let shifted = Matrix::from_fn(4, 4, |i, j| tape.value(s).get(i, j) + 2.5);
        assert!(row_softmax(&shifted).max_abs_diff(tape.value(z.attn)) < 1e-15);
    }

    #[test]
    fn random_policy_matches_factual_moments_and_is_reproducible() {
        let (store, block, _, _) = setup(30, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Matrix::from_fn(30, 8, |_, _| rng.random_range(-2.0..2.0));
        let a = counterfactual_logits(&store, &block, &x, CilMode::Random, &mut policy_rng(1, 5, 0, 0)).unwrap();
        let b = counterfactual_logits(&store, &block, &x, CilMode::Random, &mut policy_rng(1, 5, 0, 0)).unwrap();
        assert_eq!(a, b);
        let f = x
            .matmul(&store.get(block.w_q).value)
            .unwrap()
            .matmul_t(&x.matmul(&store.get(block.w_k).value).unwrap())
            .unwrap()
            .scale(1.0 / 8f64.sqrt());
        let std = |m: &Matrix| {
            let mu = m.mean();
            (m.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m.data().len() as f64).sqrt()
        };
        assert!((a.mean() - f.mean()).abs() < 0.15 * std(&f));
        assert!((std(&a) / std(&f) - 1.0).abs() < 0.15);
    }

    #[test]
    fn layers_preserve_shape_and_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let lal = LalLayer(AttentionBlock::new(&mut store, "lal", 4, 8, ResidualScheme::Fused, &mut rng));
        let x = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.37 - 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = tape.constant(Matrix::filled(3, 3, 1.0));
        let y = lal_forward(&mut tape, &store, &lal, xv, s, SpmMode::Add).unwrap();
        assert_eq!(tape.value(y.out).shape(), (3, 4));

        // Zeroed FFN output layer: the residual alone is normalized.
        let last = *lal.0.ffn.last();
        store.get_mut(last.weight).value = Matrix::zeros(8, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let s = tape.constant(Matrix::filled(3, 3, 1.0));
        let y = lal_forward(&mut tape, &store, &lal, xv, s, SpmMode::Add).unwrap();
        let g = tape.constant(Matrix::filled(1, 4, 1.0));
        let b = tape.constant(Matrix::zeros(1, 4));
        let normed = tape.layer_norm(xv, g, b).unwrap();
        assert!(tape.value(y.out).max_abs_diff(tape.value(normed)) < 1e-12);
    }
}
