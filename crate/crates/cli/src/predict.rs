use std::path::{Path, PathBuf};

use clap::Args;

use battformer::data::{clean_trip, read_trip_csv, DataConfig, DataError};
use battformer::model::load_checkpoint;
use battformer::Tensor;

use crate::commands::{Preprocess, PREPROCESS_FILE};
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Preprocessing sidecar; defaults to `preprocess.json` next to the
    /// checkpoint.
    #[arg(long)]
    preprocess: Option<PathBuf>,
    /// Raw trip CSV sampled at 0.1 s.
    #[arg(long)]
    trip: PathBuf,
    /// First forecast step, counted in model steps after resampling. The
    /// `W` steps before it are the observed window.
    #[arg(long)]
    start: usize,
    /// Output CSV; standard output when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Header for a target column, with its physical unit where known.
pub fn unit_column(channel: &str) -> String {
    match channel {
        "soc" => "soc_pct".into(),
        "battery_temp" => "batt_temp_C".into(),
        other => other.into(),
    }
}

fn load_preprocess(path: &Path) -> Result<Preprocess, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&args.checkpoint)?;
    let pre_path = args.preprocess.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(PREPROCESS_FILE)
    });
    let pre = load_preprocess(&pre_path)?;
    let spec = model.spec();
    let (w, h) = (spec.window, spec.horizon);
    let (f, v) = (pre.schema.inputs.len(), pre.schema.targets.len());
    if (pre.window, pre.horizon, f, v) != (w, h, spec.input_features, spec.output_features) {
        return Err(CliError::Validation(format!(
            "{} does not match the checkpoint: (W, H, F, v) = {:?} vs {:?}",
            pre_path.display(),
            (pre.window, pre.horizon, f, v),
            (w, h, spec.input_features, spec.output_features)
        )));
    }

    let trip = read_trip_csv(&args.trip, &pre.schema).map_err(|e| match e {
        DataError::InFile { file, source } if matches!(*source, DataError::MissingColumns(_)) => {
            CliError::Validation(format!("schema mismatch in {file}: {source}"))
        }
        other => other.into(),
    })?;
    if trip.len() < pre.savgol_window {
        return Err(CliError::Validation(format!(
            "{}: {} samples is shorter than the smoothing window {}",
            args.trip.display(),
            trip.len(),
            pre.savgol_window
        )));
    }
    let cfg = DataConfig {
        savgol_window: pre.savgol_window,
        savgol_order: pre.savgol_order,
        resample_period_s: pre.resample_period_s,
        ..DataConfig::default()
    };
    let cleaned = clean_trip(&trip, &cfg, &pre.schema)?;
    let n = cleaned.len();
    if args.start < w {
        return Err(CliError::Validation(format!(
            "insufficient history: start index {} needs W = {w} earlier steps",
            args.start
        )));
    }
    if args.start > n {
        return Err(CliError::Validation(format!(
            "start index {} is past the end of the trip ({n} steps)",
            args.start
        )));
    }

    let inputs = pre
        .schema
        .inputs
        .iter()
        .map(|c| cleaned.channel(c))
        .collect::<Result<Vec<_>, _>>()?;
    let targets = pre
        .schema
        .targets
        .iter()
        .map(|c| cleaned.channel(c))
        .collect::<Result<Vec<_>, _>>()?;
    let mut x: Vec<f64> = (args.start - w..args.start)
        .flat_map(|t| inputs.iter().map(move |c| c[t]))
        .collect();
    pre.stats.normalize_inputs(&mut x);
    let x = Tensor::new(&[1, w, f], x).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut forecast = model.forward(&x, None)?.into_data();
    pre.stats.denormalize_targets(&mut forecast);

    let mut out = csv::Writer::from_writer(Vec::new());
    let names: Vec<String> = pre.schema.targets.iter().map(|c| unit_column(c)).collect();
    let mut header = vec!["step".to_string(), "time_s".into(), "segment".into()];
    header.extend(names.iter().cloned());
    header.extend(names.iter().map(|n| format!("actual_{n}")));
    let csv_err = |e: csv::Error| CliError::Runtime(e.to_string());
    out.write_record(&header).map_err(csv_err)?;
    let actual = |t: usize| -> Vec<String> {
        targets
            .iter()
            .map(|c| if t < n { c[t].to_string() } else { String::new() })
            .collect()
    };
    for t in args.start - w..args.start {
        let mut row = vec![t.to_string(), (t as f64 * pre.resample_period_s).to_string(), "observed".into()];
        row.extend(actual(t));
        row.extend(actual(t));
        out.write_record(&row).map_err(csv_err)?;
    }
    for k in 0..h {
        let t = args.start + k;
        let mut row = vec![t.to_string(), (t as f64 * pre.resample_period_s).to_string(), "forecast".into()];
        row.extend(forecast[k * v..(k + 1) * v].iter().map(f64::to_string));
        row.extend(actual(t));
        out.write_record(&row).map_err(csv_err)?;
    }
    let bytes = out.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    match &args.out {
        Some(path) => crate::commands::write(path, bytes),
        None => {
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }
}
