use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::{generate_scene, perturb_detections, ScenarioKind, ScenarioSpec};
use crate::model::{normalized_points, EdgeScores, ModelConfig};
use crate::numeric::{sigmoid, Matrix, Var};

fn sample(kind: ScenarioKind, seed: u64) -> DetectionSample {
    let spec = ScenarioSpec {
        kind,
        seed,
        feature_dim: 16,
        distractor_count: 2,
        ..Default::default()
    };
    perturb_detections(&generate_scene(&spec).unwrap(), &spec).unwrap()
}

fn clean_sample() -> DetectionSample {
    let spec = ScenarioSpec {
        kind: ScenarioKind::Straight,
        seed: 2,
        feature_dim: 16,
        distractor_count: 2,
        noise_sigma: 0.0,
        ..Default::default()
    };
    perturb_detections(&generate_scene(&spec).unwrap(), &spec).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        d_in: 16,
        ffn_width: 16,
        edge_hidden: 8,
        ..ModelConfig::default()
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Focal loss of one probability, written out directly.
fn focal_scalar(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if y == 1.0 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

fn masked_focal_mean(p: &Matrix, y: &Matrix, mask: &Matrix, w: &LossWeights) -> f64 {
    let (mut total, mut count) = (0.0, 0.0);
    for r in 0..p.rows() {
        for c in 0..p.cols() {
            if mask.get(r, c) != 0.0 {
                total += mask.get(r, c) * focal_scalar(p.get(r, c), y.get(r, c), w.focal_alpha, w.focal_gamma);
                count += mask.get(r, c);
            }
        }
    }
    if count == 0.0 {
        0.0
    } else {
        total / count
    }
}

// ---------------------------------------------------------------- targets

#[test]
fn provenance_targets_follow_the_assignment() {
    let s = sample(ScenarioKind::TJunction, 5);
    let t = assign_targets(&s, true);
    let gt_rows = normalized_points(&s.scene.centerlines(), &s.extent);
    for (q, a) in s.assignment.iter().enumerate() {
        match *a {
            Some(g) => {
                let hot: Vec<usize> = (0..t.class.cols()).filter(|&c| t.class.get(q, c) == 1.0).collect();
                assert_eq!(hot, vec![s.scene.lanes[g].category.index()]);
                assert_eq!(t.points.row(q), gt_rows.row(g));
                assert!(t.point_mask.row(q).iter().all(|&v| v == 1.0));
            }
            None => {
                assert!(t.class.row(q).iter().all(|&v| v == 0.0));
                assert!(t.point_mask.row(q).iter().all(|&v| v == 0.0));
            }
        }
    }
    let n = s.num_queries();
    let mut edges = 0;
    for i in 0..n {
        assert_eq!(t.edges.valid_mask.get(i, i), 0.0);
        for j in 0..n {
            let both_bg = s.assignment[i].is_none() && s.assignment[j].is_none();
            if i != j {
                assert_eq!(t.edges.valid_mask.get(i, j), if both_bg { 0.0 } else { 1.0 });
            }
            if t.edges.target.get(i, j) == 1.0 {
                edges += 1;
                let (g, h) = (s.assignment[i].unwrap(), s.assignment[j].unwrap());
                assert!(s.scene.has_edge(g, h));
            }
        }
    }
    assert_eq!(edges, s.scene.edges.len());
    let unmasked = assign_targets(&s, false);
    let off_diag = (n * n - n) as f64;
    assert_eq!(unmasked.edges.valid_mask.sum(), off_diag);
}

#[test]
fn permuted_assignment_permutes_targets() {
    let s = sample(ScenarioKind::Crossroad, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = s.num_queries();
    let mut perm: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(&mut rng);
    // Query q takes over the role of query perm[q].
    let assignment: Vec<Option<usize>> = perm.iter().map(|&p| s.assignment[p]).collect();
    let base = assign_targets(&s, true);
    let moved = assign_targets_with(&s, &assignment, true);
    for q in 0..n {
        assert_eq!(moved.class.row(q), base.class.row(perm[q]));
        assert_eq!(moved.points.row(q), base.points.row(perm[q]));
        for r in 0..n {
            assert_eq!(moved.edges.target.get(q, r), base.edges.target.get(perm[q], perm[r]));
            assert_eq!(moved.edges.valid_mask.get(q, r), base.edges.valid_mask.get(perm[q], perm[r]));
        }
    }
}

// ------------------------------------------------------------- node loss

#[test]
fn perfect_node_predictions_cost_nothing() {
    let s = sample(ScenarioKind::TJunction, 1);
    let t = assign_targets(&s, true);
    let logits = t.class.map(|y| if y == 1.0 { 20.0 } else { -20.0 });
    let mut tape = Tape::new();
    let cls = tape.constant(logits);
    let reg = tape.constant(t.points.clone());
    let l = node_loss(&mut tape, cls, reg, &t, &LossWeights::default()).unwrap();
    assert!(tape.scalar(l) < 1e-6, "{}", tape.scalar(l));
}

#[test]
fn node_loss_matches_scalar_oracle_and_decomposes() {
    let s = sample(ScenarioKind::Crossroad, 4);
    let t = assign_targets(&s, true);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let logits = random_matrix(&mut rng, t.class.rows(), t.class.cols(), -4.0, 4.0);
    let points = random_matrix(&mut rng, t.points.rows(), t.points.cols(), 0.0, 1.0);
    let w = LossWeights::default();

    let probs = logits.map(sigmoid);
    let ones = Matrix::filled(t.class.rows(), t.class.cols(), 1.0);
    let cls = masked_focal_mean(&probs, &t.class, &ones, &w);
    let (mut l1, mut count) = (0.0, 0.0);
    for r in 0..points.rows() {
        for c in 0..points.cols() {
            if t.point_mask.get(r, c) == 1.0 {
                l1 += (points.get(r, c) - t.points.get(r, c)).abs();
                count += 1.0;
            }
        }
    }
    let oracle = w.lambda_cls * cls + w.lambda_reg * l1 / count;

    let mut tape = Tape::new();
    let (a, b) = (tape.constant(logits.clone()), tape.constant(points.clone()));
    let l = node_loss(&mut tape, a, b, &t, &w).unwrap();
    assert!((tape.scalar(l) - oracle).abs() < 1e-10, "{} vs {oracle}", tape.scalar(l));

    let no_reg = LossWeights { lambda_reg: 0.0, ..w };
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(logits), tape.constant(points));
    let l = node_loss(&mut tape, a, b, &t, &no_reg).unwrap();
    assert!((tape.scalar(l) - w.lambda_cls * cls).abs() < 1e-12);
}

// ------------------------------------------------------------------- TIE

#[test]
fn tie_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e_a = random_matrix(&mut rng, 5, 5, 0.0, 1.0);
    let zero = Matrix::zeros(5, 5);
    assert_eq!(tie_values(&e_a, &[e_a.clone()]).unwrap(), zero);
    assert_eq!(tie_values(&e_a, &[zero.clone()]).unwrap(), e_a);

    let (c1, c2) = (random_matrix(&mut rng, 5, 5, 0.0, 1.0), random_matrix(&mut rng, 5, 5, 0.0, 1.0));
    let by_hand = Matrix::from_fn(5, 5, |i, j| e_a.get(i, j) - (c1.get(i, j) + c2.get(i, j)) / 2.0);
    let values = tie_values(&e_a, &[c1.clone(), c2.clone()]).unwrap();
    let mut tape = Tape::new();
    let (a, x, y) = (tape.constant(e_a.clone()), tape.constant(c1), tape.constant(c2));
    let on_tape = tie(&mut tape, a, &[x, y]).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert!((values.get(i, j) - by_hand.get(i, j)).abs() < 1e-15);
            assert!((tape.value(on_tape).get(i, j) - by_hand.get(i, j)).abs() < 1e-15);
        }
    }
    assert!(tie_values(&e_a, &[Matrix::zeros(4, 5)]).is_err());
}

// ------------------------------------------------------------- edge loss

fn edge_targets(rng: &mut impl Rng, n: usize) -> EdgeTargets {
    EdgeTargets {
        target: Matrix::from_fn(n, n, |i, j| if i != j && rng.random_bool(0.2) { 1.0 } else { 0.0 }),
        valid_mask: Matrix::from_fn(n, n, |i, j| if i != j && rng.random_bool(0.7) { 1.0 } else { 0.0 }),
    }
}

#[test]
fn edge_loss_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let w = LossWeights::default();
    let t = edge_targets(&mut rng, 7);

    let mut tape = Tape::new();
    let exact = tape.constant(t.target.clone());
    let l = edge_loss(&mut tape, exact, &t, &w, TIE_EPS).unwrap();
    assert!(tape.scalar(l) < 1e-6);

    let masked = EdgeTargets {
        target: t.target.clone(),
        valid_mask: Matrix::zeros(7, 7),
    };
    let mut tape = Tape::new();
    let any = tape.constant(random_matrix(&mut rng, 7, 7, -1.0, 1.0));
    let l = edge_loss(&mut tape, any, &masked, &w, TIE_EPS).unwrap();
    assert_eq!(tape.scalar(l), 0.0);

    // TIE lives in [-1, 1]; the oracle clamps it the same way.
    let scores = random_matrix(&mut rng, 7, 7, -1.0, 1.0);
    let clamped = scores.map(|v| v.clamp(TIE_EPS, 1.0 - TIE_EPS));
    let oracle = w.lambda_cls * masked_focal_mean(&clamped, &t.target, &t.valid_mask, &w);
    let mut tape = Tape::new();
    let v = tape.constant(scores);
    let l = edge_loss(&mut tape, v, &t, &w, TIE_EPS).unwrap();
    assert!((tape.scalar(l) - oracle).abs() < 1e-10);
}

#[test]
fn logit_mode_applies_focal_to_the_logit_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let w = LossWeights::default();
    let t = edge_targets(&mut rng, 6);
    let z_a = random_matrix(&mut rng, 6, 6, -3.0, 3.0);
    let z_cf = random_matrix(&mut rng, 6, 6, -3.0, 3.0);
    let p = Matrix::from_fn(6, 6, |i, j| sigmoid(z_a.get(i, j) - z_cf.get(i, j)));
    let oracle = w.lambda_cls * masked_focal_mean(&p, &t.target, &t.valid_mask, &w);

    let mut tape = Tape::new();
    let scores = |tape: &mut Tape, z: &Matrix| EdgeScores {
        logits: tape.constant(z.clone()),
        probs: tape.constant(z.map(sigmoid)),
    };
    let (fa, fc) = (scores(&mut tape, &z_a), scores(&mut tape, &z_cf));
    let l = edge_loss_logit(&mut tape, &fa, &[fc], &t, &w).unwrap();
    assert!((tape.scalar(l) - oracle).abs() < 1e-10);
}

// ------------------------------------------------------------ total loss

#[test]
fn total_is_node_plus_edge() {
    let model = TopoFormer::new(small_config()).unwrap();
    let s = sample(ScenarioKind::TJunction, 6);
    let t = assign_targets(&s, true);
    let w = LossWeights::default();
    for mode in [TieMode::Clamp, TieMode::Logit] {
        let mut tape = Tape::new();
        let vars = model.forward(&mut tape, (&s).into(), Branches::Both { step: 0 }).unwrap();
        let parts = total_loss(&mut tape, &vars, &t, &w, EdgeObjective::Tie, mode, 1.0).unwrap();
        let (v, e, total) = (tape.scalar(parts.l_v), tape.scalar(parts.l_e), tape.scalar(parts.total));
        assert_eq!(total, v + e);

        let node = node_loss(&mut tape, vars.cls_logits, vars.reg_points, &t, &w).unwrap();
        assert_eq!(tape.scalar(node), v);
        let edge = match mode {
            TieMode::Clamp => {
                let cf: Vec<Var> = vars.cf_edges.iter().map(|e| e.probs).collect();
                let ti = tie(&mut tape, vars.edges.probs, &cf).unwrap();
                edge_loss(&mut tape, ti, &t.edges, &w, TIE_EPS).unwrap()
            }
            TieMode::Logit => edge_loss_logit(&mut tape, &vars.edges, &vars.cf_edges, &t.edges, &w).unwrap(),
        };
        assert_eq!(tape.scalar(edge), e);
    }

    let mut tape = Tape::new();
    let zero = tape.constant(Matrix::zeros(1, 1));
    let sum = tape.add(zero, zero).unwrap();
    assert_eq!(tape.scalar(sum), 0.0);
}

// ------------------------------------------------------------ optimizer

#[test]
fn zero_gradients_and_no_decay_leave_parameters_unchanged() {
    let model = TopoFormer::new(small_config()).unwrap();
    let mut store = model.store.clone();
    let config = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut opt = OptimState::new(config, &store, 10);
    store.zero_grad();
    opt.step(&mut store);
    assert_eq!(opt.step, 1);
    for (a, b) in store.iter().zip(model.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

// -------------------------------------------------------------- training

fn trainer(config: TrainConfig, samples: usize) -> Trainer {
    Trainer::new(TopoFormer::new(small_config()).unwrap(), config, samples).unwrap()
}

#[test]
fn single_sample_overfits() {
    let s = clean_sample();
    let mut t = trainer(
        TrainConfig {
            epochs: 500,
            optim: OptimConfig {
                lr: 2e-3,
                lr_floor: 2e-3,
                ..OptimConfig::default()
            },
            ..TrainConfig::default()
        },
        1,
    );
    let mut totals = Vec::new();
    for _ in 0..500 {
        let l = t.train_step(&[&s]).unwrap();
        totals.push(l.l_v + l.l_e);
    }
    for k in 1..10 {
        assert!(totals[k] < totals[k - 1], "step {k}: {} !< {}", totals[k], totals[k - 1]);
    }
    let last = *totals.last().unwrap();
    assert!(last < 0.01, "final loss {last}");
}

#[test]
fn training_is_deterministic_and_seed_dependent() {
    let data: Vec<DetectionSample> = (0..4).map(|k| sample(ScenarioKind::TJunction, k)).collect();
    let run = |seed: u64| {
        let mut cfg = TrainConfig {
            epochs: 2,
            seed,
            ..TrainConfig::default()
        };
        cfg.optim.lr = 1e-3;
        let mut t = trainer(cfg, data.len());
        t.fit(&data, |_, _| Ok(())).unwrap()
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_ne!(a, run(2));
}

#[test]
fn warmup_keeps_the_edge_head_still() {
    let s = sample(ScenarioKind::Crossroad, 3);
    let mut t = trainer(
        TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            ..TrainConfig::default()
        },
        1,
    );
    assert_eq!(t.edge_weight(), 0.0);
    let mut tape = Tape::new();
    let (parts, _) = sample_loss(&mut tape, &t.model, &s, &t.config, 0, t.edge_weight()).unwrap();
    t.model.store.zero_grad();
    tape.backward(parts.total, &mut t.model.store).unwrap();
    for p in t.model.store.iter().filter(|p| p.name.starts_with("edge_head")) {
        assert!(p.grad.data().iter().all(|&g| g == 0.0), "{}", p.name);
    }
    let before = t.model.store.clone();
    let rec = t.run_epoch(std::slice::from_ref(&s)).unwrap();
    assert_eq!(rec.l_e, 0.0);
    for (a, b) in t.model.store.iter().zip(before.iter()) {
        if a.name.starts_with("edge_head") {
            // Only decoupled weight decay moves them.
            let decayed = b.value.scale(1.0 - t.optim.config.lr * t.optim.config.weight_decay);
            for (x, y) in a.value.data().iter().zip(decayed.data()) {
                assert!((x - y).abs() < 1e-15, "{}", a.name);
            }
        }
    }
    assert_eq!(t.edge_weight(), 1.0);
    let rec = t.run_epoch(std::slice::from_ref(&s)).unwrap();
    assert!(rec.l_e > 0.0);
}

#[test]
fn non_finite_values_abort_with_the_tensor_name() {
    let s = sample(ScenarioKind::Straight, 1);
    let mut t = trainer(TrainConfig::default(), 1);
    let id = t.model.store.find("lane_head.cls.0.weight").unwrap();
    t.model.store.get_mut(id).value.data_mut()[0] = f64::NAN;
    match t.train_step(&[&s]) {
        Err(TrainError::NonFinite { tensor, sample, .. }) => {
            assert_eq!(tensor, "cls_logits");
            assert_eq!(sample, s.scene_id);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn tie_training_without_intervention_is_rejected() {
    let model = TopoFormer::new(ModelConfig {
        cil_mode: CilMode::Off,
        ..small_config()
    })
    .unwrap();
    let err = Trainer::new(model.clone(), TrainConfig::default(), 1).unwrap_err();
    assert!(matches!(err, TrainError::Config(_)));
    let factual = TrainConfig {
        edge_objective: EdgeObjective::Factual,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(model, factual, 1).is_ok());
}

#[test]
fn resume_continues_the_step_count_exactly() {
    let data: Vec<DetectionSample> = (0..3).map(|k| sample(ScenarioKind::Crossroad, k)).collect();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut straight = trainer(cfg.clone(), data.len());
    let full = straight.fit(&data, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    let mut first = trainer(cfg, data.len());
    let head = first.run_epoch(&data).unwrap();
    first.save(&path).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    assert_eq!(resumed.step(), 3);
    let tail = resumed.fit(&data, |_, _| Ok(())).unwrap();
    assert_eq!(vec![head, tail[0].clone()], full);
    assert_eq!(resumed.step(), straight.step());
    assert_eq!(resumed.model.store, straight.model.store);
}

#[test]
fn inference_ignores_the_counterfactual_policy() {
    let data: Vec<DetectionSample> = (0..2).map(|k| sample(ScenarioKind::TJunction, k)).collect();
    let mut t = trainer(TrainConfig::default(), data.len());
    t.run_epoch(&data).unwrap();
    let probe = sample(ScenarioKind::Crossroad, 11);
    let base = t.model.infer((&probe).into(), 0.3, 0.5).unwrap();
    for policy in [CilMode::Mean, CilMode::Random, CilMode::Off] {
        let mut m = t.model.clone();
        m.config.cil_mode = policy;
        m.config.n_cf_samples = 3;
        assert_eq!(m.infer((&probe).into(), 0.3, 0.5).unwrap(), base, "{policy:?}");
        // The training signal does depend on it.
        let out = m.forward_values((&probe).into()).unwrap();
        assert_eq!(out.e_a, t.model.forward_values((&probe).into()).unwrap().e_a);
    }
}

#[test]
fn detached_counterfactual_sends_no_gradient_through_the_cf_branch() {
    let s = sample(ScenarioKind::Crossroad, 2);
    let base = TrainConfig::default();
    let detached = TrainConfig {
        detach_counterfactual: true,
        ..TrainConfig::default()
    };
    let model = TopoFormer::new(small_config()).unwrap();
    let grads = |cfg: &TrainConfig| {
        let mut store = model.store.clone();
        let mut tape = Tape::new();
        let (parts, _) = sample_loss(&mut tape, &model, &s, cfg, 0, 1.0).unwrap();
        store.zero_grad();
        tape.backward(parts.total, &mut store).unwrap();
        (tape.scalar(parts.total), store)
    };
    let (la, ga) = grads(&base);
    let (lb, gb) = grads(&detached);
    assert_eq!(la, lb);
    assert_ne!(ga, gb);
}
