use super::*;
use crate::data::{prepare_dataset, DataConfig, DatasetSplit, FeatureSchema, SplitSizes, SynthConfig, TripSeries};
use crate::model::{Model, ModelKind, ModelSpec};
use crate::tensor::Graph;

fn tiny_data() -> (DataConfig, Vec<TripSeries>) {
    let cfg = DataConfig {
        synth: SynthConfig {
            n_trips: 3,
            length: 3000,
            ..SynthConfig::default()
        },
        split: SplitSizes {
            train: 64,
            validation: 16,
            test: 16,
        },
        ..DataConfig::default()
    };
    let trips = cfg.load_source(&cfg.schema, 5).unwrap();
    (cfg, trips)
}

fn tiny_split() -> DatasetSplit {
    let (cfg, trips) = tiny_data();
    prepare_dataset(&trips, &cfg, &cfg.schema, 5).unwrap().split
}

fn tiny_template() -> ModelSpec {
    ModelSpec {
        n_encoders: 1,
        n_decoders: 1,
        n_heads: 2,
        d_model: 8,
        ffn_width: 16,
        lstm_layers: 1,
        ..ModelSpec::default()
    }
}

fn tiny_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec {
        kind,
        ..tiny_template()
    }
    .for_data(&FeatureSchema::default(), 12, 6)
}

#[test]
fn one_step_reduces_batch_loss_for_most_seeds() {
    let split = tiny_split();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let idx: Vec<usize> = (0..split.train.len()).collect();
    let batch_loss = |m: &Model| {
        let (x, t, y) = split.batch(&split.train, &idx);
        batch_gradients(m, x, t, y).unwrap().0
    };
    for kind in ModelKind::ALL {
        let mut decreased = 0;
        for seed in 0..20 {
            let mut m = Model::build(&tiny_spec(kind), seed).unwrap();
            let before = batch_loss(&m);
            let log = train(&mut m, &split, &cfg, seed).unwrap();
            assert_eq!(log.steps, 1);
            if batch_loss(&m) < before {
                decreased += 1;
            }
        }
        assert!(decreased >= 18, "{kind}: {decreased}/20");
    }
}

#[test]
fn patience_zero_stops_at_first_non_improving_epoch() {
    let split = tiny_split();
    let cfg = TrainConfig {
        epochs: 200,
        patience: 0,
        learning_rate: 3e-2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut m = Model::build(&tiny_spec(ModelKind::Lstm), 3).unwrap();
    let log = train(&mut m, &split, &cfg, 3).unwrap();
    assert!(log.stopped_early);
    let n = log.epochs.len();
    assert!(n < 200);
    let last = log.epochs[n - 1].val_loss;
    let prior = log.epochs[..n - 1].iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert!(last >= prior, "the stopping epoch must not improve");
    for w in log.epochs[..n - 1].windows(2) {
        assert!(w[1].val_loss < w[0].val_loss, "an earlier non-improving epoch should have stopped training");
    }
}

#[test]
fn best_parameters_are_restored() {
    let split = tiny_split();
    let cfg = TrainConfig {
        epochs: 12,
        patience: 3,
        learning_rate: 2e-2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    for kind in [ModelKind::VTst, ModelKind::EncTst] {
        let mut m = Model::build(&tiny_spec(kind), 9).unwrap();
        let log = train(&mut m, &split, &cfg, 9).unwrap();
        let min = log.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(log.best_val_loss, min);
        assert_eq!(validation_loss(&m, &split.validation).unwrap(), min, "{kind}");
        assert_eq!(log.epochs[log.best_epoch - 1].val_loss, min);
    }
}

#[test]
fn training_is_deterministic() {
    let split = tiny_split();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Model::build(&tiny_spec(ModelKind::TstLstm), 4).unwrap();
        let log = train(&mut m, &split, &cfg, 4).unwrap();
        (m.params().tensors().to_vec(), log.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn teacher_forced_loss_matches_an_independent_forward() {
    let split = tiny_split();
    for kind in [ModelKind::VTst, ModelKind::TstLstm] {
        let m = Model::build(&tiny_spec(kind), 2).unwrap();
        for chunk in [[0usize, 1, 2, 3], [4, 5, 6, 7]] {
            let (x, t, y) = split.batch(&split.train, &chunk);
            let (loss, _) = batch_gradients(&m, x.clone(), t.clone(), y.clone()).unwrap();
            let pred = m.forward(&x, Some(&t)).unwrap();
            assert_eq!(loss, mse(pred.data(), y.data()));
            let mut g = Graph::new();
            let p = m.params().bind(&mut g);
            let (xv, tv) = (g.constant(x), g.constant(t));
            let out = m.forward_graph(&mut g, &p, xv, Some(tv)).unwrap();
            assert_eq!(g.value(out), pred.data());
        }
    }
}

#[test]
fn evaluation_ignores_future_targets() {
    let split = tiny_split();
    for kind in ModelKind::ALL {
        let m = Model::build(&tiny_spec(kind), 6).unwrap();
        let before = predict_normalized(&m, &split.test).unwrap();
        let mut blind = split.test.clone();
        for s in &mut blind {
            s.y.iter_mut().for_each(|v| *v = 0.0);
            s.teacher.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(predict_normalized(&m, &blind).unwrap(), before, "{kind}");
    }
}

#[test]
fn memorized_toy_set_reaches_high_r2() {
    let (mut cfg, trips) = tiny_data();
    cfg.split = SplitSizes {
        train: 10,
        validation: 10,
        test: 10,
    };
    let mut split = prepare_dataset(&trips, &cfg, &cfg.schema, 8).unwrap().split;
    split.validation = split.train.clone();
    let tc = TrainConfig {
        epochs: 600,
        batch_size: 10,
        learning_rate: 5e-3,
        patience: 600,
        ..TrainConfig::default()
    };
    let mut m = Model::build(&tiny_spec(ModelKind::EncTst), 1).unwrap();
    train(&mut m, &split, &tc, 1).unwrap();
    let r = evaluate(&m, &split.train, &split.stats, "train", &split.target_channels).unwrap();
    assert!(r.r2_pooled.unwrap() > 0.99, "{r:?}");
    assert!(r.mse < 1e-3, "{}", r.mse);
}

#[test]
fn report_echoes_the_spec() {
    let split = tiny_split();
    let m = Model::build(&tiny_spec(ModelKind::TstLstm), 0).unwrap();
    let r = evaluate(&m, &split.test, &split.stats, "test", &split.target_channels).unwrap();
    assert_eq!((r.kind, r.window, r.horizon), (ModelKind::TstLstm, 12, 6));
    assert_eq!(r.parameters, m.count_parameters());
    assert_eq!(r.samples, 16);
    assert_eq!(r.targets, vec!["soc", "battery_temp"]);
    assert_eq!(r.r2_per_target.len(), 2);
    assert!(r.r2_per_target.iter().all(|v| v.is_some_and(|v| v <= 1.0)));
    let json = serde_json::to_string(&r).unwrap();
    assert!(!json.contains("seconds"));
    assert!(evaluate(&m, &[], &split.stats, "test", &split.target_channels).is_err());
}

#[test]
fn incompatible_dataset_is_rejected() {
    let split = tiny_split();
    let spec = ModelSpec {
        kind: ModelKind::Lstm,
        ..tiny_template()
    }
    .for_data(&FeatureSchema::default(), 10, 6);
    let mut m = Model::build(&spec, 0).unwrap();
    let e = train(&mut m, &split, &TrainConfig::default(), 0).unwrap_err();
    assert!(matches!(e, TrainError::Incompatible(_)), "{e}");
    let bad = TrainConfig {
        learning_rate: -1.0,
        batch_size: 0,
        ..TrainConfig::default()
    };
    let e = train(&mut m, &split, &bad, 0).unwrap_err().to_string();
    assert!(e.contains("learning_rate") && e.contains("batch_size"), "{e}");
}

fn grid_setup<'a>(cfg: &'a DataConfig, trips: &'a [TripSeries], template: &'a ModelSpec, train: &'a TrainConfig) -> GridSetup<'a> {
    GridSetup {
        trips,
        data: cfg,
        schema: &cfg.schema,
        template,
        train,
        seed: 5,
        jobs: 1,
    }
}

#[test]
fn single_cell_grid_equals_direct_run() {
    let (cfg, trips) = tiny_data();
    let template = tiny_template();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let report = run_grid(&[ModelKind::VTst], &[(12, 6)], &grid_setup(&cfg, &trips, &template, &tc));
    assert_eq!(report.cells.len(), 1);
    let split = prepare_dataset(&trips, &cfg, &cfg.schema, 5).unwrap().split;
    let exp = run_experiment(&tiny_spec(ModelKind::VTst), &split, &tc, 5).unwrap();
    match &report.cells[0].outcome {
        CellOutcome::Completed { test, parameters, .. } => {
            assert_eq!(*test, CellMetrics::from(&exp.reports[2]));
            assert_eq!(*parameters, exp.model.count_parameters());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn grid_covers_every_cell_isolates_failures_and_is_deterministic() {
    let (cfg, trips) = tiny_data();
    let template = tiny_template();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 64,
        ..TrainConfig::default()
    };
    // 60-step trips cannot hold W + H = 80, so that case fails.
    let cases = [(12, 6), (6, 6), (50, 30)];
    let setup = grid_setup(&cfg, &trips, &template, &tc);
    let report = run_grid(&ModelKind::ALL, &cases, &setup);
    assert_eq!(report.cells.len(), 15);
    assert_eq!(report.completed(), 10);
    assert!(!report.all_failed());
    for c in &report.cells {
        let failed = matches!(c.outcome, CellOutcome::Failed { .. });
        assert_eq!(failed, c.window == 50, "{c:?}");
    }
    assert!(report.annotations.iter().all(|a| !a.binding));
    let again = run_grid(&ModelKind::ALL, &cases, &GridSetup { jobs: 2, ..setup });
    assert_eq!(report, again);

    let table = report.to_table();
    let lines: Vec<&str> = table.lines().take(2 + ModelKind::ALL.len()).collect();
    assert!(lines[1].starts_with("Model"));
    assert!(lines[1].contains("Params"));
    let width = lines[2].len();
    assert!(lines[3..].iter().all(|l| l.len() <= width + 8));
    // Column boundaries line up: every row ends its first case block at the
    // same offset as the header.
    let end_of = |l: &str, pat: &str| l.find(pat).map(|i| i + pat.len());
    let r2_col = end_of(lines[1], "R2(test)").unwrap();
    for l in &lines[2..] {
        assert!(!l.as_bytes()[r2_col - 1].is_ascii_whitespace(), "{l}");
    }
    assert!(table.contains("[non-binding]"));
    assert!(table.contains("failed: V_TST W=50 H=30"));

    let json = serde_json::to_string(&report).unwrap();
    let back: GridReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn all_failed_grid_is_detected() {
    let (cfg, trips) = tiny_data();
    let template = tiny_template();
    let tc = TrainConfig::default();
    let report = run_grid(&[ModelKind::Lstm], &[(70, 30)], &grid_setup(&cfg, &trips, &template, &tc));
    assert!(report.all_failed());
    assert_eq!(report.annotations[0].holds, None);
}
