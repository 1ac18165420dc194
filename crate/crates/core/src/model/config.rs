use serde::{Deserialize, Serialize};

use crate::scene::SpmConfig;

/// How the spatial proximity matrix enters the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpmMode {
    /// `logits + A_spm`
    #[default]
    Add,
    /// Matrix product `logits · A_spm`.
    Mul,
    /// Elementwise product.
    Hadamard,
    Off,
}

/// Counterfactual attention substituted inside the intervention layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CilMode {
    #[default]
    Zero,
    /// Constant matrix holding the mean of the factual logits.
    Mean,
    /// I.i.d. normal samples matching the factual logits' mean and std.
    Random,
    /// No intervention: both branches are identical.
    Off,
}

/// Where the residual and normalization sit inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualScheme {
    /// `Norm(X + FFN(Attn(X)))`
    #[default]
    Fused,
    /// `Y = Norm(X + Attn(X)); Norm(Y + FFN(Y))`
    TwoSublayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width.
    pub d: usize,
    /// Number of (LAL, CIL) pairs.
    pub n_blocks: usize,
    /// Maximum number of queries per sample.
    pub num_queries: usize,
    pub points_per_lane: usize,
    /// Width of the incoming query features.
    pub d_in: usize,
    pub ffn_width: usize,
    /// Hidden width of the pairwise edge MLP.
    pub edge_hidden: usize,
    pub spm_mode: SpmMode,
    pub cil_mode: CilMode,
    pub residual: ResidualScheme,
    /// Counterfactual draws per step (only `random` draws differ).
    pub n_cf_samples: usize,
    pub spm: SpmConfig,
    /// Initialization seed; also seeds the random policy.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_blocks: 2,
            num_queries: 24,
            points_per_lane: 11,
            d_in: 64,
            ffn_width: 128,
            edge_hidden: 64,
            spm_mode: SpmMode::Add,
            cil_mode: CilMode::Zero,
            residual: ResidualScheme::Fused,
            n_cf_samples: 1,
            spm: SpmConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale config of width `d` with FFN and edge widths derived from it.
    pub fn with_width(d: usize) -> Self {
        Self {
            d,
            ffn_width: 2 * d,
            edge_hidden: d,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("d", self.d),
            ("n_blocks", self.n_blocks),
            ("num_queries", self.num_queries),
            ("points_per_lane", self.points_per_lane),
            ("d_in", self.d_in),
            ("ffn_width", self.ffn_width),
            ("edge_hidden", self.edge_hidden),
            ("n_cf_samples", self.n_cf_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("model.{name} must be positive"));
            }
        }
        if !(self.spm.epsilon > 0.0) {
            return Err("model.spm.epsilon must be positive".into());
        }
        Ok(())
    }
}
