//! Trip ingestion, cleaning, windowing and dataset splitting.
//!
//! The per-trip stages run independently (in parallel under rayon):
//! aggregate redundant sensors, Savitzky-Golay smooth every channel, decimate
//! to the model step, cut sliding windows. The split stage then pools every
//! window, shuffles with the configured seed and z-scores with training
//! statistics.

mod cache;
mod savgol;
mod split;
mod synth;
mod trip;
mod window;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{decode_dataset, encode_dataset, load_dataset, save_dataset, CACHE_VERSION};
pub use savgol::{savgol_smooth, weights as savgol_weights, DEFAULT_ORDER, DEFAULT_WINDOW};
pub use split::{normalize_and_split, stack, DatasetSplit, NormStats, SplitMode, SplitSizes, MIN_STD};
pub use synth::{synthesize, synthesize_trip, synthesize_trips, SynthConfig};
pub use trip::{
    aggregate_redundant, load_trips, parse_trip_csv, read_trip_csv, write_trip_csv, Aggregation, FeatureSchema,
    TripSeries, DEFAULT_INPUTS, RAW_PERIOD_S, VENT_CHANNELS,
};
pub use window::{make_windows, resample, SkippedTrip, WindowedSample};

use crate::seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing required columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("line {line}: expected {expected} fields, found {found}")]
    Ragged {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}, column \"{column}\": not a finite number: {value:?}")]
    NonNumeric {
        line: usize,
        column: String,
        value: String,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("{file}: {source}")]
    InFile {
        file: String,
        #[source]
        source: Box<DataError>,
    },
    #[error("trip {trip}: missing channel \"{channel}\"")]
    MissingChannel { trip: String, channel: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("savgol: {0}")]
    Savgol(String),
    #[error("resample: {0}")]
    Resample(String),
    #[error(
        "insufficient {what}: requested {requested} (train {train}, validation {validation}, test {test}), available {available}"
    )]
    Insufficient {
        requested: usize,
        train: usize,
        validation: usize,
        test: usize,
        available: usize,
        what: String,
    },
    #[error("dataset cache: {0}")]
    Cache(String),
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (DataError::Io { .. } | DataError::InFile { .. }) => e,
            e => DataError::InFile {
                file: path.display().to_string(),
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Everything needed to go from raw trips to a [`DatasetSplit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// A trip CSV or a directory of them; synthetic trips when absent.
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
    /// JSON sidecar; replaces the inline `schema` when set.
    pub schema_file: Option<PathBuf>,
    pub schema: FeatureSchema,
    pub savgol_window: usize,
    pub savgol_order: usize,
    pub resample_period_s: f64,
    pub window: usize,
    pub horizon: usize,
    pub split: SplitSizes,
    pub split_mode: SplitMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synth: SynthConfig::default(),
            schema_file: None,
            schema: FeatureSchema::default(),
            savgol_window: DEFAULT_WINDOW,
            savgol_order: DEFAULT_ORDER,
            resample_period_s: 5.0,
            window: 12,
            horizon: 6,
            split: SplitSizes::default(),
            split_mode: SplitMode::Shuffled,
        }
    }
}

impl DataConfig {
    /// Semantic problems, each prefixed with its key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.savgol_window.is_multiple_of(2) {
            out.push(format!("data.savgol_window: {} must be odd", self.savgol_window));
        }
        if self.savgol_window <= self.savgol_order {
            out.push(format!(
                "data.savgol_window: {} must exceed data.savgol_order {}",
                self.savgol_window, self.savgol_order
            ));
        }
        let ratio = self.resample_period_s / RAW_PERIOD_S;
        if !(ratio >= 1.0 && ratio.is_finite()) || (ratio - ratio.round()).abs() > 1e-6 * ratio {
            out.push(format!(
                "data.resample_period_s: {} must be a positive multiple of {RAW_PERIOD_S} s",
                self.resample_period_s
            ));
        }
        if self.window == 0 {
            out.push("data.window: must be at least 1".into());
        }
        if self.horizon == 0 {
            out.push("data.horizon: must be at least 1".into());
        }
        if self.split.train == 0 {
            out.push("data.split.train: must be at least 1".into());
        }
        if self.split.validation == 0 {
            out.push("data.split.validation: must be at least 1".into());
        }
        if self.split.test == 0 {
            out.push("data.split.test: must be at least 1".into());
        }
        if !(self.synth.noise >= 0.0 && self.synth.noise.is_finite()) {
            out.push(format!("data.synth.noise: {} must be a finite non-negative number", self.synth.noise));
        }
        if !(self.synth.max_speed >= 0.0 && self.synth.max_speed.is_finite()) {
            out.push(format!("data.synth.max_speed: {} must be finite and non-negative", self.synth.max_speed));
        }
        if self.path.is_none() && self.synth.n_trips == 0 {
            out.push("data.synth.n_trips: must be at least 1 when no data.path is given".into());
        }
        if let Err(e) = self.schema.validate() {
            out.push(format!("data.schema: {e}"));
        }
        out
    }

    /// The schema in effect: the sidecar file when configured, else inline.
    pub fn resolve_schema(&self) -> Result<FeatureSchema> {
        match &self.schema_file {
            Some(path) => FeatureSchema::load(path),
            None => Ok(self.schema.clone()),
        }
    }

    /// Raw trips: loaded from `path`, or synthesized from `root_seed`.
    pub fn load_source(&self, schema: &FeatureSchema, root_seed: u64) -> Result<Vec<TripSeries>> {
        match &self.path {
            Some(path) => load_trips(path, schema),
            None => Ok(synthesize(&self.synth, seed::derive(root_seed, "synth"))),
        }
    }
}

/// Output of [`prepare_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub split: DatasetSplit,
    pub skipped: Vec<SkippedTrip>,
}

/// Aggregated, smoothed and decimated copy of one trip.
pub fn clean_trip(trip: &TripSeries, cfg: &DataConfig, schema: &FeatureSchema) -> Result<TripSeries> {
    let trip = aggregate_redundant(trip, schema)?;
    let channels = trip
        .channels
        .iter()
        .map(|(k, v)| Ok((k.clone(), savgol_smooth(v, cfg.savgol_window, cfg.savgol_order)?)))
        .collect::<Result<_>>()?;
    let smoothed = TripSeries::new(trip.trip_id.clone(), trip.sample_period_s, channels)?;
    resample(&smoothed, cfg.resample_period_s)
}

/// Windows of one trip after cleaning; trips too short for the filter or the
/// window are skipped with a record instead of failing the run.
fn trip_windows(
    trip: &TripSeries,
    cfg: &DataConfig,
    schema: &FeatureSchema,
) -> Result<std::result::Result<Vec<WindowedSample>, SkippedTrip>> {
    if trip.len() < cfg.savgol_window {
        return Ok(Err(SkippedTrip {
            trip_id: trip.trip_id.clone(),
            reason: format!("length {} shorter than the smoothing window {}", trip.len(), cfg.savgol_window),
        }));
    }
    let cleaned = clean_trip(trip, cfg, schema)?;
    make_windows(&cleaned, schema, cfg.window, cfg.horizon)
}

/// Runs the full pipeline over `trips`.
pub fn prepare_dataset(trips: &[TripSeries], cfg: &DataConfig, schema: &FeatureSchema, root_seed: u64) -> Result<Prepared> {
    let per_trip: Vec<_> = trips
        .par_iter()
        .map(|t| trip_windows(t, cfg, schema))
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for r in per_trip {
        match r {
            Ok(s) => samples.extend(s),
            Err(skip) => skipped.push(skip),
        }
    }
    let split = normalize_and_split(samples, schema, cfg.split, cfg.split_mode, seed::derive(root_seed, "data"))?;
    Ok(Prepared { split, skipped })
}
