use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use t2sg::datagen::{generate_dataset, read_dataset, write_dataset, BevExtent, DetectionSample};
use t2sg::eval::{evaluate_model, EvalReport};
use t2sg::model::TopoFormer;
use t2sg::scene::{validate, SceneGraph};
use t2sg::train::Trainer;

use crate::config::{to_toml, RunConfig};
use crate::plot;
use crate::CliError;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const T2SG_VERSION: u32 = 1;

pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a Path,
    pub jobs: usize,
}

impl Context<'_> {
    fn dataset_path(&self, split: &str) -> PathBuf {
        self.cfg.data_dir(self.out).join(format!("{split}.jsonl"))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg
            .run
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.json"))
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self.cfg).expect("configs serialize")
    }

    fn write_resolved_config(&self, command: &str) -> Result<(), CliError> {
        std::fs::write(self.out.join(format!("{command}.config.toml")), to_toml(self.cfg))?;
        Ok(())
    }
}

fn load_split(path: &Path) -> Result<Vec<DetectionSample>, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("{} does not exist (run `t2sg gen` first?)", path.display())));
    }
    let (_, samples) = read_dataset(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(samples)
}

fn load_model(path: &Path) -> Result<TopoFormer, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("{} does not exist (run `t2sg train` first?)", path.display())));
    }
    TopoFormer::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn gen(ctx: &Context<'_>) -> Result<(), CliError> {
    let g = &ctx.cfg.gen;
    let sizes = [g.train_size, g.val_size, g.test_size];
    for (k, (split, size)) in SPLITS.iter().zip(sizes).enumerate() {
        let seed = ctx.cfg.split_seed(k);
        let samples = generate_dataset(&g.scenario, &g.kinds, size, seed, ctx.jobs)
            .map_err(|e| CliError::Config(format!("gen: {e}")))?;
        let header = serde_json::json!({ "split": split, "split_seed": seed, "run": ctx.config_json() });
        let path = ctx.out.join(format!("{split}.jsonl"));
        write_dataset(&samples, &header, &path)?;
        log::info!("wrote {} scenes to {}", samples.len(), path.display());
    }
    ctx.write_resolved_config("gen")
}

pub fn train(ctx: &Context<'_>) -> Result<(), CliError> {
    let cfg = ctx.cfg;
    let train = load_split(&ctx.dataset_path("train"))?;
    let val_path = ctx.dataset_path("val");
    let val = if val_path.exists() {
        load_split(&val_path)?
    } else {
        log::warn!("{} not found; training without validation metrics", val_path.display());
        Vec::new()
    };
    let state_path = ctx.out.join("train_state.json");
    let metrics_path = ctx.out.join("metrics.jsonl");
    let mut trainer = if cfg.run.resume {
        if !state_path.exists() {
            return Err(CliError::Data(format!("cannot resume: {} does not exist", state_path.display())));
        }
        let t = Trainer::load(&state_path)?;
        if t.config != cfg.train || t.model.config != cfg.model {
            log::warn!("resuming with the configuration stored in {}", state_path.display());
        }
        log::info!("resuming after epoch {} (step {})", t.epoch, t.step());
        t
    } else {
        let model = TopoFormer::new(cfg.model.clone())?;
        File::create(&metrics_path)?;
        Trainer::new(model, cfg.train.clone(), train.len())?
    };
    log::info!(
        "training {} parameters on {} scenes for {} epochs",
        trainer.model.num_parameters(),
        train.len(),
        trainer.config.epochs
    );
    let mut metrics = OpenOptions::new().append(true).create(true).open(&metrics_path)?;
    let mut budget = cfg.run.stop_after.unwrap_or(usize::MAX);
    while !trainer.is_done() && budget > 0 {
        budget -= 1;
        let mut rec = trainer.run_epoch(&train)?;
        if !val.is_empty() {
            let report = evaluate_model(&trainer.model, &val, &cfg.eval, ctx.jobs)?;
            log::info!(
                "epoch {:>3}  l_v {:.4}  l_e {:.4}  lr {:.2e}  TOP_ll {:.3}  DET_l {:.3}",
                rec.epoch,
                rec.l_v,
                rec.l_e,
                rec.lr,
                report.top_ll,
                report.det_l
            );
            rec.val = Some(serde_json::to_value(&report).map_err(std::io::Error::from)?);
        } else {
            log::info!("epoch {:>3}  l_v {:.4}  l_e {:.4}  lr {:.2e}", rec.epoch, rec.l_v, rec.l_e, rec.lr);
        }
        writeln!(metrics, "{}", serde_json::to_string(&rec).map_err(std::io::Error::from)?)?;
        trainer.save(&state_path)?;
        trainer.model.save(&ctx.out.join("model.json"))?;
    }
    ctx.write_resolved_config("train")
}

/// `eval_report.json`: the report plus the configuration that produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub config: serde_json::Value,
    pub report: EvalReport,
}

pub fn eval(ctx: &Context<'_>) -> Result<(), CliError> {
    let model_path = ctx.checkpoint_path();
    let model = load_model(&model_path)?;
    let data_path = ctx.dataset_path(&ctx.cfg.run.split);
    let samples = load_split(&data_path)?;
    let report = evaluate_model(&model, &samples, &ctx.cfg.eval, ctx.jobs)?;
    print!("{}", report.table());
    let file = ReportFile {
        checkpoint: model_path,
        dataset: data_path,
        config: ctx.config_json(),
        report,
    };
    let text = serde_json::to_string_pretty(&file).map_err(std::io::Error::from)?;
    std::fs::write(ctx.out.join("eval_report.json"), text + "\n")?;
    ctx.write_resolved_config("eval")
}

/// A predicted (or ground-truth) T²SG as written by `infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct T2sgFile {
    pub format_version: u32,
    pub scene_id: String,
    pub extent: BevExtent,
    pub graph: SceneGraph,
    /// Class confidence per lane.
    pub confidences: Vec<f64>,
}

impl T2sgFile {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let file: T2sgFile =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if file.format_version != T2SG_VERSION {
            return Err(CliError::Data(format!(
                "{}: unsupported format_version {} (expected {T2SG_VERSION})",
                path.display(),
                file.format_version
            )));
        }
        check_graph(&file.graph)?;
        Ok(file)
    }
}

fn check_graph(g: &SceneGraph) -> Result<(), CliError> {
    validate(g).map_err(|v| {
        let list: Vec<String> = v.iter().map(ToString::to_string).collect();
        CliError::Data(format!("invalid scene graph: {}", list.join("; ")))
    })
}

fn pick_scene(ctx: &Context<'_>, path: &Path) -> Result<DetectionSample, CliError> {
    let mut samples = load_split(path)?;
    let i = ctx.cfg.run.index;
    if i >= samples.len() {
        return Err(CliError::Data(format!(
            "run.index = {i} but {} holds {} scenes",
            path.display(),
            samples.len()
        )));
    }
    Ok(samples.swap_remove(i))
}

pub fn infer(ctx: &Context<'_>) -> Result<(), CliError> {
    let model = load_model(&ctx.checkpoint_path())?;
    let input = ctx.cfg.run.input.clone().unwrap_or_else(|| ctx.dataset_path("test"));
    let sample = pick_scene(ctx, &input)?;
    let g = model.infer((&sample).into(), ctx.cfg.eval.node_threshold, ctx.cfg.eval.edge_threshold)?;
    check_graph(&g.graph)?;
    let file = T2sgFile {
        format_version: T2SG_VERSION,
        scene_id: sample.scene_id.clone(),
        extent: sample.extent,
        graph: g.graph,
        confidences: g.confidences,
    };
    let path = ctx.out.join(format!("{}.t2sg.json", sample.scene_id));
    let text = serde_json::to_string_pretty(&file).map_err(std::io::Error::from)?;
    std::fs::write(&path, text + "\n")?;
    log::info!(
        "{}: {} lanes, {} edges -> {}",
        file.scene_id,
        file.graph.lanes.len(),
        file.graph.edges.len(),
        path.display()
    );
    Ok(())
}

fn truth_file(sample: &DetectionSample) -> T2sgFile {
    T2sgFile {
        format_version: T2SG_VERSION,
        scene_id: sample.scene_id.clone(),
        extent: sample.extent,
        graph: sample.scene.clone(),
        confidences: vec![1.0; sample.scene.lanes.len()],
    }
}

pub fn plot(ctx: &Context<'_>) -> Result<(), CliError> {
    let input = ctx
        .cfg
        .run
        .input
        .clone()
        .ok_or_else(|| CliError::Config("plot needs run.input (a .jsonl dataset or a .t2sg.json file)".into()))?;
    let is_dataset = input.extension().is_some_and(|e| e == "jsonl");
    let shown = if is_dataset {
        truth_file(&pick_scene(ctx, &input)?)
    } else {
        T2sgFile::read(&input)?
    };
    let (svg, name) = match &ctx.cfg.run.truth {
        Some(truth_path) => {
            let truth = truth_file(&pick_scene(ctx, truth_path)?);
            if truth.scene_id != shown.scene_id {
                log::warn!("comparing {} against ground truth of {}", shown.scene_id, truth.scene_id);
            }
            let svg = plot::compare_svg(&shown, &truth, ctx.cfg.eval.topology_threshold);
            (svg, format!("{}.compare.svg", shown.scene_id))
        }
        None => (plot::scene_svg(&shown), format!("{}.svg", shown.scene_id)),
    };
    let path = ctx.out.join(name);
    std::fs::write(&path, svg)?;
    log::info!("wrote {}", path.display());
    Ok(())
}
