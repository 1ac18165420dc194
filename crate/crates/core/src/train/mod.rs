//! Losses, target assignment, AdamW, and the training loop.

mod losses;
mod matching;
mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{
    assign_targets, assign_targets_with, edge_loss, edge_loss_logit, edge_loss_on_logits, node_loss, tie,
    tie_values, total_loss, EdgeObjective, EdgeTargets, LossParts, LossWeights, Targets, TieMode, TIE_EPS,
};
pub use matching::{hungarian, hungarian_assignment};
pub use optim::{cosine_lr, OptimConfig, OptimState};

use crate::datagen::{split_seed, DetectionSample};
use crate::model::{Branches, CilMode, ModelError, ModelFile, TopoFormer};
use crate::numeric::{NumericError, Tape};

/// Which query is supervised by which ground-truth lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    /// The generator's provenance links.
    #[default]
    Provenance,
    /// Minimum-cost bipartite matching on class and point costs.
    Hungarian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples whose gradients are averaged per update.
    pub batch_size: usize,
    /// Epochs during which only the node loss is optimized.
    pub warmup_epochs: usize,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub edge_objective: EdgeObjective,
    pub tie_mode: TieMode,
    pub assignment: AssignmentMode,
    /// Leave background-background pairs out of the edge loss.
    pub mask_background_pairs: bool,
    /// Treat the counterfactual edge scores as constants in the edge loss,
    /// so only the factual branch is pushed by the total indirect effect.
    pub detach_counterfactual: bool,
    pub shuffle: bool,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 1,
            warmup_epochs: 0,
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            edge_objective: EdgeObjective::Tie,
            tie_mode: TieMode::Clamp,
            assignment: AssignmentMode::Provenance,
            mask_background_pairs: true,
            detach_counterfactual: false,
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks the config on its own and against the model it will train.
    pub fn validate(&self, cil_mode: CilMode) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive".into());
        }
        self.loss.validate().map_err(TrainError::Config)?;
        self.optim.validate().map_err(TrainError::Config)?;
        if cil_mode == CilMode::Off && self.edge_objective == EdgeObjective::Tie {
            return bad(
                "model.cil_mode = off makes the total indirect effect identically zero; \
                 set train.edge_objective = \"factual\" to train without intervention"
                    .into(),
            );
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        samples.div_ceil(self.batch_size) as u64
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("non-finite values in `{tensor}` at epoch {epoch}, step {step} (sample {sample})")]
    NonFinite {
        tensor: String,
        epoch: usize,
        step: u64,
        sample: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot decode training checkpoint: {0}")]
    Decode(#[from] serde_json::Error),
    #[error(transparent)]
    Checkpoint(#[from] crate::model::CheckpointError),
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Mean node loss over the epoch.
    pub l_v: f64,
    /// Mean edge loss over the epoch (0 during warmup).
    pub l_e: f64,
    /// Learning rate used by the epoch's last update.
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<serde_json::Value>,
}

/// Losses of one update, averaged over its batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_v: f64,
    pub l_e: f64,
    pub lr: f64,
}

/// Loss of one sample recorded on `tape`, with targets assigned per
/// `config.assignment`.
pub fn sample_loss(
    tape: &mut Tape,
    model: &TopoFormer,
    sample: &DetectionSample,
    config: &TrainConfig,
    step: u64,
    edge_weight: f64,
) -> Result<(LossParts, crate::model::ForwardVars), TrainError> {
    let branches = match (edge_weight > 0.0, config.edge_objective) {
        (true, EdgeObjective::Tie) => Branches::Both { step },
        _ => Branches::FactualOnly,
    };
    let mut vars = model.forward(tape, sample.into(), branches)?;
    if config.detach_counterfactual && branches != Branches::FactualOnly {
        for e in &mut vars.cf_edges {
            e.logits = tape.constant(tape.value(e.logits).clone());
            e.probs = tape.constant(tape.value(e.probs).clone());
        }
    }
    let targets = match config.assignment {
        AssignmentMode::Provenance => assign_targets(sample, config.mask_background_pairs),
        AssignmentMode::Hungarian => {
            let a = hungarian_assignment(
                sample,
                tape.value(vars.cls_logits),
                tape.value(vars.reg_points),
                &config.loss,
            );
            assign_targets_with(sample, &a, config.mask_background_pairs)
        }
    };
    let objective = if branches == Branches::FactualOnly {
        EdgeObjective::Factual
    } else {
        config.edge_objective
    };
    let parts = total_loss(
        tape,
        &vars,
        &targets,
        &config.loss,
        objective,
        config.tie_mode,
        edge_weight,
    )?;
    Ok((parts, vars))
}

/// First non-finite tensor among a forward pass and its losses.
fn first_non_finite(tape: &Tape, vars: &crate::model::ForwardVars, parts: &LossParts) -> Option<String> {
    let mut named = vec![
        ("x_tilde".to_string(), vars.x_tilde),
        ("cls_logits".into(), vars.cls_logits),
        ("reg_points".into(), vars.reg_points),
        ("E_A".into(), vars.edges.probs),
    ];
    for (k, e) in vars.cf_edges.iter().enumerate() {
        named.push((format!("E_cf[{k}]"), e.probs));
    }
    named.push(("l_v".into(), parts.l_v));
    named.push(("l_e".into(), parts.l_e));
    named
        .into_iter()
        .find(|(_, v)| !tape.value(*v).is_finite())
        .map(|(n, _)| n)
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub model: ModelFile,
    pub optim: OptimState,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TopoFormer,
    pub optim: OptimState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh optimizer state sized for `config.epochs` over `samples`.
    pub fn new(model: TopoFormer, config: TrainConfig, samples: usize) -> Result<Self, TrainError> {
        config.validate(model.config.cil_mode)?;
        if samples == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let total = config.steps_per_epoch(samples) * config.epochs as u64;
        let optim = OptimState::new(config.optim, &model.store, total);
        Ok(Self {
            model,
            optim,
            config,
            epoch: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn edge_weight(&self) -> f64 {
        if self.epoch < self.config.warmup_epochs {
            0.0
        } else {
            1.0
        }
    }

    /// Sample order for the current epoch.
    pub fn epoch_order(&self, samples: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..samples).collect();
        if self.config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(self.config.seed, self.epoch as u64));
            order.shuffle(&mut rng);
        }
        order
    }

    /// Accumulates the batch's mean gradient and applies one update.
    pub fn train_step(&mut self, batch: &[&DetectionSample]) -> Result<StepLosses, TrainError> {
        let edge_weight = self.edge_weight();
        let step = self.optim.step;
        let scale = 1.0 / batch.len() as f64;
        let (mut l_v, mut l_e) = (0.0, 0.0);
        for sample in batch {
            let mut tape = Tape::new();
            let (parts, vars) = sample_loss(&mut tape, &self.model, sample, &self.config, step, edge_weight)?;
            if let Some(tensor) = first_non_finite(&tape, &vars, &parts) {
                return Err(TrainError::NonFinite {
                    tensor,
                    epoch: self.epoch,
                    step,
                    sample: sample.scene_id.clone(),
                });
            }
            l_v += tape.scalar(parts.l_v) * scale;
            l_e += tape.scalar(parts.l_e) * edge_weight * scale;
            let loss = tape.scale(parts.total, scale);
            tape.backward(loss, &mut self.model.store)?;
        }
        if let Some(p) = self.model.store.iter().find(|p| !p.grad.is_finite()) {
            return Err(TrainError::NonFinite {
                tensor: format!("grad of {}", p.name),
                epoch: self.epoch,
                step,
                sample: batch.first().map(|s| s.scene_id.clone()).unwrap_or_default(),
            });
        }
        let lr = self.optim.step(&mut self.model.store);
        Ok(StepLosses { l_v, l_e, lr })
    }

    pub fn run_epoch(&mut self, data: &[DetectionSample]) -> Result<EpochRecord, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let order = self.epoch_order(data.len());
        let (mut l_v, mut l_e, mut lr) = (0.0, 0.0, self.optim.current_lr());
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&DetectionSample> = chunk.iter().map(|&i| &data[i]).collect();
            let s = self.train_step(&batch)?;
            l_v += s.l_v;
            l_e += s.l_e;
            lr = s.lr;
            batches += 1;
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            step: self.optim.step,
            l_v: l_v / batches as f64,
            l_e: l_e / batches as f64,
            lr,
            val: None,
        })
    }

    /// Runs the remaining epochs, handing each record to `on_epoch` (which
    /// may attach validation metrics before it is returned in the log).
    pub fn fit(
        &mut self,
        data: &[DetectionSample],
        mut on_epoch: impl FnMut(&Trainer, &mut EpochRecord) -> Result<(), TrainError>,
    ) -> Result<Vec<EpochRecord>, TrainError> {
        let mut log = Vec::new();
        while !self.is_done() {
            let mut rec = self.run_epoch(data)?;
            on_epoch(self, &mut rec)?;
            log.push(rec);
        }
        Ok(log)
    }

    pub fn to_checkpoint(&self) -> TrainCheckpoint {
        TrainCheckpoint {
            model: self.model.to_file(),
            optim: self.optim.clone(),
            train: self.config.clone(),
            epoch: self.epoch,
        }
    }

    pub fn from_checkpoint(ckpt: TrainCheckpoint) -> Result<Self, TrainError> {
        let model = TopoFormer::from_file(ckpt.model)?;
        if ckpt.optim.m.len() != model.store.len() {
            return Err(TrainError::Config("optimizer state does not match the model".into()));
        }
        ckpt.train.validate(model.config.cil_mode)?;
        Ok(Self {
            model,
            optim: ckpt.optim,
            config: ckpt.train,
            epoch: ckpt.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests;
