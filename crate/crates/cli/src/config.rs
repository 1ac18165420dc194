use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use t2sg::datagen::{split_seed, ScenarioKind, ScenarioSpec};
use t2sg::eval::EvalConfig;
use t2sg::model::ModelConfig;
use t2sg::train::TrainConfig;
use toml::{Table, Value};

use crate::CliError;

// Stream ids for seeds derived from the top-level seed.
const MODEL_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Template for every scene; `kind` and `seed` are set per record.
    pub scenario: ScenarioSpec,
    /// Layout families, used round-robin.
    pub kinds: Vec<ScenarioKind>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            kinds: vec![ScenarioKind::Straight, ScenarioKind::TJunction, ScenarioKind::Crossroad],
            train_size: 500,
            val_size: 100,
            test_size: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Directory holding `train.jsonl`, `val.jsonl`, `test.jsonl`.
    /// Defaults to the output directory.
    pub data_dir: Option<PathBuf>,
    /// Model file for `eval`/`infer`; defaults to `<out>/model.json`.
    pub checkpoint: Option<PathBuf>,
    /// Split scored by `eval`.
    pub split: String,
    /// Continue from `<out>/train_state.json`.
    pub resume: bool,
    /// End this invocation after this many epochs; the learning-rate
    /// schedule still spans `train.epochs`, so a later `resume` picks up
    /// exactly where it stopped.
    pub stop_after: Option<usize>,
    /// Scene source for `infer` and `plot`: a dataset (`.jsonl`) or, for
    /// `plot`, a T²SG file written by `infer`.
    pub input: Option<PathBuf>,
    /// Scene index within a dataset input.
    pub index: usize,
    /// Dataset holding the ground truth to compare a plotted prediction to.
    pub truth: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            data_dir: None,
            checkpoint: None,
            split: "test".into(),
            resume: false,
            stop_after: None,
            input: None,
            index: 0,
            truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Model, training, and split seeds derive from it unless
    /// set explicitly.
    pub seed: u64,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gen: GenConfig::default(),
            model: ModelConfig {
                seed: derived_seed(0, MODEL_STREAM) as u64,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                seed: derived_seed(0, TRAIN_STREAM) as u64,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            run: RunSection::default(),
        }
    }
}

impl RunConfig {
    /// Seed of a dataset split (`0` train, `1` val, `2` test).
    pub fn split_seed(&self, split: usize) -> u64 {
        derived_seed(self.seed, SPLIT_STREAM + split as u64) as u64
    }

    pub fn data_dir<'a>(&'a self, out: &'a Path) -> &'a Path {
        self.run.data_dir.as_deref().unwrap_or(out)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.gen.scenario.validate().or_else(|e| bad(format!("gen.scenario: {e}")))?;
        if self.gen.kinds.is_empty() {
            return bad("gen.kinds must name at least one scenario kind".into());
        }
        for k in &self.gen.kinds {
            let spec = ScenarioSpec {
                kind: *k,
                ..self.gen.scenario.clone()
            };
            spec.validate().or_else(|e| bad(format!("gen.kinds: {e}")))?;
        }
        self.model.validate().or_else(|e| bad(format!("model: {e}")))?;
        if self.model.d_in != self.gen.scenario.feature_dim {
            return bad(format!(
                "model.d_in = {} but gen.scenario.feature_dim = {}",
                self.model.d_in, self.gen.scenario.feature_dim
            ));
        }
        if self.model.points_per_lane != self.gen.scenario.points_per_lane {
            return bad(format!(
                "model.points_per_lane = {} but gen.scenario.points_per_lane = {}",
                self.model.points_per_lane, self.gen.scenario.points_per_lane
            ));
        }
        self.train
            .validate(self.model.cil_mode)
            .or_else(|e| bad(e.to_string()))?;
        self.eval.validate().or_else(|e| bad(e))?;
        if !["train", "val", "test"].contains(&self.run.split.as_str()) {
            return bad(format!("run.split must be train, val, or test, got `{}`", self.run.split));
        }
        Ok(())
    }
}

/// Reads the config file (if any), applies `--seed` and `--set`
/// overrides in that order, and fills in derived seeds.
pub fn load(path: Option<&Path>, seed: Option<u64>, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| CliError::Config(format!("--seed {s} exceeds {}", i64::MAX)))?;
        table.insert("seed".into(), Value::Integer(s));
    }
    for s in sets {
        apply_override(&mut table, s)?;
    }
    let cfg = resolve(table)?;
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(mut table: Table) -> Result<RunConfig, CliError> {
    let seed = match table.get("seed") {
        None => 0,
        Some(Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(other) => {
            return Err(CliError::Config(format!("seed must be a non-negative integer, got {other}")))
        }
    };
    for (section, stream) in [("model", MODEL_STREAM), ("train", TRAIN_STREAM)] {
        let entry = table
            .entry(section)
            .or_insert_with(|| Value::Table(Table::new()));
        if let Value::Table(t) = entry {
            t.entry("seed").or_insert(Value::Integer(derived_seed(seed, stream)));
        }
    }
    RunConfig::deserialize(Value::Table(table)).map_err(|e| CliError::Config(e.to_string()))
}

/// Derived seeds keep 63 bits so that every resolved config stays
/// expressible in TOML.
fn derived_seed(seed: u64, stream: u64) -> i64 {
    (split_seed(seed, stream) >> 1) as i64
}

/// `a.b.c=value`, where `value` is read as a TOML value and falls back to
/// a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{spec}`")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set has an empty key segment in `{key}`")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cur = table;
    for p in parents {
        let next = cur
            .entry(*p)
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match next {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("--set {key}: `{p}` is not a table"))),
        };
    }
    cur.insert((*last).to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Pretty TOML of the resolved config, for echoing and for the run folder.
pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).unwrap_or_else(|e| format!("# cannot render config as TOML: {e}\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_types() {
        let mut t = Table::new();
        apply_override(&mut t, "train.epochs=3").unwrap();
        apply_override(&mut t, "model.spm_mode=off").unwrap();
        apply_override(&mut t, "eval.thresholds=[1.0, 2.0]").unwrap();
        assert_eq!(t["train"]["epochs"], Value::Integer(3));
        assert_eq!(t["model"]["spm_mode"], Value::String("off".into()));
        assert_eq!(t["eval"]["thresholds"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn seed_derivation_and_explicit_override() {
        let a = load(None, Some(5), &[]).unwrap();
        assert_eq!(a.model.seed, derived_seed(5, MODEL_STREAM) as u64);
        assert_eq!(a.train.seed, derived_seed(5, TRAIN_STREAM) as u64);
        let b = load(None, Some(5), &["model.seed=9".into()]).unwrap();
        assert_eq!(b.model.seed, 9);
        assert_ne!(a.split_seed(0), a.split_seed(2));
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let err = load(None, None, &["train.epoch=3".into()]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("epoch"), "{err}");
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = to_toml(&cfg);
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
