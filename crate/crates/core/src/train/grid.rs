//! The window/horizon experiment grid: every (kind, case) cell is trained
//! from scratch and evaluated on all three partitions.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trainer::{evaluate, train, EvalReport, TrainConfig, TrainLog};
use super::TrainError;
use crate::data::{prepare_dataset, DataConfig, DatasetSplit, FeatureSchema, TripSeries};
use crate::model::{Model, ModelKind, ModelSpec};

pub const GRID_FORMAT_VERSION: u32 = 1;

/// The three cases of the reference experiment grid.
pub const DEFAULT_CASES: [(usize, usize); 3] = [(12, 6), (30, 6), (50, 30)];

/// Reference ranking, best first, checked as a non-binding annotation.
pub const REFERENCE_RANKING: [ModelKind; 5] = [
    ModelKind::VTst,
    ModelKind::Lstm,
    ModelKind::TstLstm,
    ModelKind::EncTst,
    ModelKind::EncTstDecLstm,
];

/// A trained model with its log and train/validation/test reports.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: Model,
    pub log: TrainLog,
    pub reports: [EvalReport; 3],
}

/// Builds, trains and evaluates one model on a prepared split. Both the
/// single-run command and every grid cell go through here.
pub fn run_experiment(spec: &ModelSpec, split: &DatasetSplit, cfg: &TrainConfig, root_seed: u64) -> Result<Experiment, TrainError> {
    let mut model = Model::build(spec, root_seed)?;
    let log = train(&mut model, split, cfg, root_seed)?;
    let names = &split.target_channels;
    let reports = [
        evaluate(&model, &split.train, &split.stats, "train", names)?,
        evaluate(&model, &split.validation, &split.stats, "validation", names)?,
        evaluate(&model, &split.test, &split.stats, "test", names)?,
    ];
    Ok(Experiment { model, log, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub mse: f64,
    pub r2_pooled: Option<f64>,
    pub r2_per_target: Vec<Option<f64>>,
}

impl From<&EvalReport> for CellMetrics {
    fn from(r: &EvalReport) -> Self {
        Self {
            mse: r.mse,
            r2_pooled: r.r2_pooled,
            r2_per_target: r.r2_per_target.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Completed {
        parameters: usize,
        epochs_run: usize,
        best_epoch: usize,
        train: CellMetrics,
        validation: CellMetrics,
        test: CellMetrics,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub kind: ModelKind,
    pub window: usize,
    pub horizon: usize,
    pub outcome: CellOutcome,
}

impl GridCell {
    fn test_r2(&self) -> Option<f64> {
        match &self.outcome {
            CellOutcome::Completed { test, .. } => test.r2_pooled,
            CellOutcome::Failed { .. } => None,
        }
    }
}

/// Observation about a claim from the reference study. Never affects the
/// exit status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub claim: String,
    /// `None` when the grid lacks the cells needed to judge.
    pub holds: Option<bool>,
    pub detail: String,
    pub binding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub format_version: u32,
    pub kinds: Vec<ModelKind>,
    pub cases: Vec<(usize, usize)>,
    pub cells: Vec<GridCell>,
    pub annotations: Vec<Annotation>,
}

/// What a grid run needs besides the list of kinds and cases.
#[derive(Debug, Clone)]
pub struct GridSetup<'a> {
    pub trips: &'a [TripSeries],
    pub data: &'a DataConfig,
    pub schema: &'a FeatureSchema,
    /// Architecture hyperparameters shared by all cells; kind, W, H and the
    /// feature counts are filled in per cell.
    pub template: &'a ModelSpec,
    pub train: &'a TrainConfig,
    pub seed: u64,
    /// Worker threads; 0 uses rayon's default.
    pub jobs: usize,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn run_cell(kind: ModelKind, case: (usize, usize), split: &Result<DatasetSplit, String>, setup: &GridSetup) -> GridCell {
    let (window, horizon) = case;
    let outcome = match split {
        Err(e) => CellOutcome::Failed { error: e.clone() },
        Ok(split) => {
            let spec = ModelSpec {
                kind,
                ..setup.template.clone()
            }
            .for_data(setup.schema, window, horizon);
            let result = catch_unwind(AssertUnwindSafe(|| run_experiment(&spec, split, setup.train, setup.seed)));
            match result {
                Ok(Ok(exp)) => CellOutcome::Completed {
                    parameters: exp.model.count_parameters(),
                    epochs_run: exp.log.epochs.len(),
                    best_epoch: exp.log.best_epoch,
                    train: (&exp.reports[0]).into(),
                    validation: (&exp.reports[1]).into(),
                    test: (&exp.reports[2]).into(),
                },
                Ok(Err(e)) => CellOutcome::Failed { error: e.to_string() },
                Err(p) => CellOutcome::Failed {
                    error: format!("panic: {}", panic_message(p)),
                },
            }
        }
    };
    GridCell {
        kind,
        window,
        horizon,
        outcome,
    }
}

/// Trains and evaluates every `(kind, case)` cell. A failing cell is marked
/// and the rest still run.
pub fn run_grid(kinds: &[ModelKind], cases: &[(usize, usize)], setup: &GridSetup) -> GridReport {
    let work = || {
        let splits: Vec<Result<DatasetSplit, String>> = cases
            .par_iter()
            .map(|&(window, horizon)| {
                let cfg = DataConfig {
                    window,
                    horizon,
                    ..setup.data.clone()
                };
                prepare_dataset(setup.trips, &cfg, setup.schema, setup.seed)
                    .map(|p| p.split)
                    .map_err(|e| format!("dataset for W={window}, H={horizon}: {e}"))
            })
            .collect();
        let jobs: Vec<(ModelKind, usize)> = kinds
            .iter()
            .flat_map(|&k| (0..cases.len()).map(move |c| (k, c)))
            .collect();
        jobs.par_iter()
            .map(|&(kind, c)| run_cell(kind, cases[c], &splits[c], setup))
            .collect::<Vec<_>>()
    };
    let cells = match rayon::ThreadPoolBuilder::new().num_threads(setup.jobs).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    };
    let annotations = vec![window_annotation(kinds, cases, &cells), ranking_annotation(cases, &cells)];
    GridReport {
        format_version: GRID_FORMAT_VERSION,
        kinds: kinds.to_vec(),
        cases: cases.to_vec(),
        cells,
        annotations,
    }
}

fn find(cells: &[GridCell], kind: ModelKind, case: (usize, usize)) -> Option<&GridCell> {
    cells.iter().find(|c| c.kind == kind && (c.window, c.horizon) == case)
}

fn window_annotation(kinds: &[ModelKind], cases: &[(usize, usize)], cells: &[GridCell]) -> Annotation {
    let mut verdicts = Vec::new();
    let mut lines = Vec::new();
    for &kind in kinds {
        for &(w1, h1) in cases {
            for &(w2, h2) in cases {
                if h1 != h2 || w2 <= w1 {
                    continue;
                }
                let a = find(cells, kind, (w1, h1)).and_then(GridCell::test_r2);
                let b = find(cells, kind, (w2, h2)).and_then(GridCell::test_r2);
                if let (Some(a), Some(b)) = (a, b) {
                    verdicts.push(b >= a);
                    lines.push(format!("{kind} H={h1}: W={w1} R²={a:.4} -> W={w2} R²={b:.4}"));
                }
            }
        }
    }
    Annotation {
        claim: "test performance increases for larger W at fixed H".into(),
        holds: (!verdicts.is_empty()).then(|| verdicts.iter().all(|&v| v)),
        detail: if lines.is_empty() {
            "no pair of completed cells with equal H and different W".into()
        } else {
            lines.join("; ")
        },
        binding: false,
    }
}

fn ranking_annotation(cases: &[(usize, usize)], cells: &[GridCell]) -> Annotation {
    let mut verdicts = Vec::new();
    let mut lines = Vec::new();
    for &case in cases {
        let mut scored: Vec<(ModelKind, f64)> = REFERENCE_RANKING
            .iter()
            .filter_map(|&k| find(cells, k, case).and_then(GridCell::test_r2).map(|r| (k, r)))
            .collect();
        if scored.len() < 2 {
            continue;
        }
        let reference: Vec<ModelKind> = scored.iter().map(|(k, _)| *k).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let observed: Vec<ModelKind> = scored.iter().map(|(k, _)| *k).collect();
        verdicts.push(observed == reference);
        let names: Vec<&str> = observed.iter().map(|k| k.name()).collect();
        lines.push(format!("W={} H={}: {}", case.0, case.1, names.join(" > ")));
    }
    let reference: Vec<&str> = REFERENCE_RANKING.iter().map(|k| k.name()).collect();
    Annotation {
        claim: format!("ranking by test R²: {}", reference.join(" > ")),
        holds: (!verdicts.is_empty()).then(|| verdicts.iter().all(|&v| v)),
        detail: if lines.is_empty() {
            "fewer than two completed kinds in every case".into()
        } else {
            lines.join("; ")
        },
        binding: false,
    }
}

impl GridReport {
    pub fn completed(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c.outcome, CellOutcome::Completed { .. }))
            .count()
    }

    pub fn all_failed(&self) -> bool {
        !self.cells.is_empty() && self.completed() == 0
    }

    /// Aligned text table: one row per kind, and for each case the train,
    /// validation and test error (MSE × 10³, normalized units), the test R²
    /// and the parameter count.
    pub fn to_table(&self) -> String {
        let mut header1 = vec![String::new()];
        let mut header2 = vec!["Model".to_string()];
        for &(w, h) in &self.cases {
            header1.extend([format!("W={w} H={h}"), String::new(), String::new(), String::new(), String::new()]);
            header2.extend(["Params", "Train", "Val", "Test", "R2(test)"].map(String::from));
        }
        let mut rows = vec![header1, header2];
        for &kind in &self.kinds {
            let mut row = vec![kind.name().to_string()];
            for &case in &self.cases {
                match find(&self.cells, kind, case).map(|c| &c.outcome) {
                    Some(CellOutcome::Completed {
                        parameters,
                        train,
                        validation,
                        test,
                        ..
                    }) => {
                        row.push(parameters.to_string());
                        for m in [train, validation, test] {
                            row.push(format!("{:.3}", m.mse * 1e3));
                        }
                        row.push(test.r2_pooled.map_or("n/a".into(), |r| format!("{r:.4}")));
                    }
                    _ => row.extend(["failed", "-", "-", "-", "-"].map(String::from)),
                }
            }
            rows.push(row);
        }
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    if c == 0 {
                        format!("{s:<w$}", w = widths[c])
                    } else {
                        format!("{s:>w$}", w = widths[c])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        let _ = writeln!(out, "\nErrors are MSE x 1e3 on normalized targets; R2 is pooled over targets in physical units.");
        for a in &self.annotations {
            let verdict = match a.holds {
                Some(true) => "holds",
                Some(false) => "does not hold",
                None => "not assessable",
            };
            let _ = writeln!(out, "[non-binding] {}: {verdict} ({})", a.claim, a.detail);
        }
        for c in &self.cells {
            if let CellOutcome::Failed { error } = &c.outcome {
                let _ = writeln!(out, "failed: {} W={} H={}: {error}", c.kind, c.window, c.horizon);
            }
        }
        out
    }
}
