use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use battformer::config::RunConfig;
use battformer::data::{
    self, load_dataset, prepare_dataset, save_dataset, synthesize_trip, write_trip_csv, DatasetSplit, FeatureSchema,
    NormStats, SkippedTrip,
};
use battformer::gradcheck;
use battformer::model::{save_checkpoint, ModelKind};
use battformer::seed;
use battformer::tensor::OpKind;
use battformer::train::{run_experiment, run_grid, EvalReport, GridSetup};

use crate::error::CliError;
use crate::RunArgs;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PREPROCESS_FILE: &str = "preprocess.json";

/// Everything `predict` needs to turn a raw trip into model input and the
/// model output back into physical units.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    pub schema: FeatureSchema,
    pub savgol_window: usize,
    pub savgol_order: usize,
    pub resample_period_s: f64,
    pub window: usize,
    pub horizon: usize,
    pub stats: NormStats,
}

/// Loads the config, applies command-line overrides and returns it with the
/// output directory to use.
fn load_config(args: &RunArgs) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path, &args.overrides)?,
        None => RunConfig::from_overrides(&args.overrides)?,
    };
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    if cfg.jobs > 0 {
        // Fails only if a global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    }
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    Ok((cfg, out))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn datagen(args: &RunArgs) -> Result<(), CliError> {
    let (cfg, out) = load_config(args)?;
    let synth_seed = seed::derive(cfg.seed, "synth");
    let mut trips = Vec::with_capacity(cfg.data.synth.n_trips);
    for i in 0..cfg.data.synth.n_trips {
        let trip = synthesize_trip(&cfg.data.synth, i, synth_seed);
        let file = format!("{}.csv", trip.trip_id);
        write_trip_csv(&trip, &out.join(&file))?;
        trips.push(json!({
            "file": file,
            "trip_id": trip.trip_id,
            "seed": seed::derive(synth_seed, &format!("synth-trip-{i}")),
            "samples": trip.len(),
        }));
    }
    let manifest = json!({
        "root_seed": cfg.seed,
        "synth_seed": synth_seed,
        "sample_period_s": data::RAW_PERIOD_S,
        "synth": cfg.data.synth,
        "trips": trips,
    });
    write(&out.join("manifest.json"), to_json(&manifest))?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    println!("wrote {} trips to {}", cfg.data.synth.n_trips, out.display());
    Ok(())
}

/// The split and schema a run trains on, either from the pipeline or from
/// a dataset cache.
fn obtain_split(cfg: &RunConfig, cache: Option<&Path>) -> Result<(DatasetSplit, FeatureSchema, Vec<SkippedTrip>), CliError> {
    let schema = cfg.data.resolve_schema()?;
    schema.validate()?;
    if let Some(path) = cache {
        let split = load_dataset(path)?;
        if split.input_channels != schema.inputs || split.target_channels != schema.targets {
            return Err(CliError::Validation(format!(
                "{}: dataset channels {:?} -> {:?} do not match the configured schema {:?} -> {:?}",
                path.display(),
                split.input_channels,
                split.target_channels,
                schema.inputs,
                schema.targets
            )));
        }
        return Ok((split, schema, Vec::new()));
    }
    let trips = cfg.data.load_source(&schema, cfg.seed)?;
    let prepared = prepare_dataset(&trips, &cfg.data, &schema, cfg.seed)?;
    Ok((prepared.split, schema, prepared.skipped))
}

#[derive(Serialize)]
struct TrainReport<'a> {
    kind: ModelKind,
    window: usize,
    horizon: usize,
    parameters: usize,
    seed: u64,
    epochs_run: usize,
    best_epoch: usize,
    best_val_loss: f64,
    stopped_early: bool,
    steps: usize,
    skipped_trips: &'a [SkippedTrip],
    splits: &'a [EvalReport; 3],
}

pub fn train(args: &RunArgs, cache: Option<&Path>, save_cache: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let (cfg, out) = load_config(args)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let (split, schema, skipped) = obtain_split(&cfg, cache)?;
    for s in &skipped {
        eprintln!("skipped trip {}: {}", s.trip_id, s.reason);
    }
    let data_seconds = started.elapsed().as_secs_f64();
    if save_cache {
        save_dataset(&split, &out.join("dataset.bin"))?;
    }
    let spec = cfg.model.spec(&schema, split.window, split.horizon);
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(CliError::Validation(format!("invalid model:\n  {}", problems.join("\n  "))));
    }
    let exp = run_experiment(&spec, &split, &cfg.train, cfg.seed)?;
    save_checkpoint(&exp.model, &out.join(CHECKPOINT_FILE))?;
    let pre = Preprocess {
        schema,
        savgol_window: cfg.data.savgol_window,
        savgol_order: cfg.data.savgol_order,
        resample_period_s: cfg.data.resample_period_s,
        window: split.window,
        horizon: split.horizon,
        stats: split.stats.clone(),
    };
    write(&out.join(PREPROCESS_FILE), to_json(&pre))?;
    let report = TrainReport {
        kind: spec.kind,
        window: spec.window,
        horizon: spec.horizon,
        parameters: exp.model.count_parameters(),
        seed: cfg.seed,
        epochs_run: exp.log.epochs.len(),
        best_epoch: exp.log.best_epoch,
        best_val_loss: exp.log.best_val_loss,
        stopped_early: exp.log.stopped_early,
        steps: exp.log.steps,
        skipped_trips: &skipped,
        splits: &exp.reports,
    };
    write(&out.join("report.json"), to_json(&report))?;
    write(&out.join("epoch_log.csv"), exp.log.to_csv())?;
    let metadata = json!({
        "data_seconds": data_seconds,
        "total_seconds": started.elapsed().as_secs_f64(),
        "epoch_seconds": exp.log.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>(),
        "eval_seconds": exp.reports.iter().map(|r| (r.split.clone(), r.seconds)).collect::<Vec<_>>(),
    });
    write(&out.join("metadata.json"), to_json(&metadata))?;
    println!(
        "{} ({} parameters): {} epochs, best epoch {}",
        spec.kind,
        report.parameters,
        report.epochs_run,
        report.best_epoch
    );
    for r in exp.reports.iter() {
        let r2 = r.r2_pooled.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!("  {:<10} mse {:.6}  R² {}", r.split, r.mse, r2);
    }
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn grid(args: &RunArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let (cfg, out) = load_config(args)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let schema = cfg.data.resolve_schema()?;
    schema.validate()?;
    let trips = cfg.data.load_source(&schema, cfg.seed)?;
    let template = cfg.model.spec(&schema, cfg.data.window, cfg.data.horizon);
    let setup = GridSetup {
        trips: &trips,
        data: &cfg.data,
        schema: &schema,
        template: &template,
        train: &cfg.train,
        seed: cfg.seed,
        jobs: cfg.jobs,
    };
    let report = run_grid(&cfg.grid.kinds, &cfg.grid.cases, &setup);
    write(&out.join("grid.json"), to_json(&report))?;
    let table = report.to_table();
    write(&out.join("grid.txt"), &table)?;
    write(
        &out.join("metadata.json"),
        to_json(&json!({ "total_seconds": started.elapsed().as_secs_f64() })),
    )?;
    print!("{table}");
    if report.all_failed() {
        return Err(CliError::AllCellsFailed(report.cells.len()));
    }
    Ok(())
}

pub fn gradcheck(corrupt: Option<&str>) -> Result<(), CliError> {
    let fault = match corrupt {
        None => None,
        Some(name) => Some(
            OpKind::ALL
                .into_iter()
                .find(|k| k.name().eq_ignore_ascii_case(name))
                .ok_or_else(|| {
                    let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                    CliError::Validation(format!("unknown op {name:?} (known: {})", names.join(", ")))
                })?,
        ),
    };
    let started = Instant::now();
    let results = gradcheck::suite(fault)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let verdict = if r.passed() { "ok  " } else { "FAIL" };
        println!(
            "{verdict} {:<width$}  max rel error {:.3e}  ({} values)",
            r.name, r.max_rel_error, r.checked
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    println!(
        "{} checks, {} failed, tolerance {:.0e}, {:.1} s",
        results.len(),
        failed.len(),
        gradcheck::TOLERANCE,
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("gradient check failed: {}", failed.join(", "))))
    }
}
