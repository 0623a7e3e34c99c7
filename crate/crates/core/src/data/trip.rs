//! Trip records, the feature schema and CSV ingestion.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// Raw sample period of the trip logs, in seconds.
pub const RAW_PERIOD_S: f64 = 0.1;

/// One driving trip: equally long, uniformly sampled channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripSeries {
    pub trip_id: String,
    pub sample_period_s: f64,
    pub channels: IndexMap<String, Vec<f64>>,
}

impl TripSeries {
    /// Builds a trip, checking that every channel has the same length.
    pub fn new(trip_id: impl Into<String>, sample_period_s: f64, channels: IndexMap<String, Vec<f64>>) -> Result<Self> {
        let trip_id = trip_id.into();
        let mut lens = channels.values().map(Vec::len);
        if let Some(first) = lens.next() {
            if lens.any(|l| l != first) {
                return Err(DataError::Invalid(format!("{trip_id}: channels differ in length")));
            }
        }
        Ok(Self {
            trip_id,
            sample_period_s,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.channels.values().next().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        self.channels
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| DataError::MissingChannel {
                trip: self.trip_id.clone(),
                channel: name.to_string(),
            })
    }
}

/// A derived channel computed as the mean of several member channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregation {
    pub output: String,
    pub members: Vec<String>,
}

/// Which channels feed the model and which ones it forecasts.
///
/// `columns` renames raw CSV headers to channel names; headers without an
/// entry keep their own name. Aggregations run before feature selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSchema {
    pub columns: IndexMap<String, String>,
    pub aggregations: Vec<Aggregation>,
    pub inputs: Vec<String>,
    pub targets: Vec<String>,
}

pub const DEFAULT_INPUTS: [&str; 15] = [
    "velocity",
    "acceleration",
    "throttle",
    "elevation",
    "ambient_temp",
    "battery_voltage",
    "battery_current",
    "battery_temp",
    "soc",
    "heater_power",
    "ac_power",
    "avg_vent_temp",
    "cabin_temp",
    "cabin_setpoint",
    "regen_power",
];

pub const VENT_CHANNELS: [&str; 4] = ["vent_temp_1", "vent_temp_2", "vent_temp_3", "vent_temp_4"];

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            columns: IndexMap::new(),
            aggregations: vec![Aggregation {
                output: "avg_vent_temp".into(),
                members: VENT_CHANNELS.iter().map(|s| s.to_string()).collect(),
            }],
            inputs: DEFAULT_INPUTS.iter().map(|s| s.to_string()).collect(),
            targets: vec!["soc".into(), "battery_temp".into()],
        }
    }
}

impl FeatureSchema {
    /// Parses the JSON sidecar and validates it.
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            DataError::Schema(msg) => DataError::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.inputs.is_empty() {
            problems.push("no input channels".to_string());
        }
        if self.targets.is_empty() {
            problems.push("no target channels".to_string());
        }
        for (list, what) in [(&self.inputs, "input"), (&self.targets, "target")] {
            for (i, name) in list.iter().enumerate() {
                if list[..i].contains(name) {
                    problems.push(format!("duplicate {what} channel {name:?}"));
                }
            }
        }
        for agg in &self.aggregations {
            if agg.members.is_empty() {
                problems.push(format!("aggregation {:?} has no members", agg.output));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DataError::Schema(problems.join("; ")))
        }
    }

    /// Channel names that must be present in every trip after renaming.
    pub fn required_channels(&self) -> Vec<String> {
        let produced: Vec<&str> = self.aggregations.iter().map(|a| a.output.as_str()).collect();
        let mut out: Vec<String> = Vec::new();
        let mut push = |name: &str| {
            if !out.iter().any(|n| n == name) {
                out.push(name.to_string());
            }
        };
        for agg in &self.aggregations {
            agg.members.iter().for_each(|m| push(m));
        }
        for name in self.inputs.iter().chain(&self.targets) {
            if !produced.contains(&name.as_str()) {
                push(name);
            }
        }
        out
    }

    /// Position of each target inside the input list, when every target is
    /// also an input.
    pub fn target_input_indices(&self) -> Option<Vec<usize>> {
        self.targets
            .iter()
            .map(|t| self.inputs.iter().position(|i| i == t))
            .collect()
    }

    fn channel_for<'a>(&'a self, header: &'a str) -> &'a str {
        self.columns.get(header).map_or(header, String::as_str)
    }
}

/// Reads one trip CSV. Columns that the schema does not need are ignored.
pub fn read_trip_csv(path: &Path, schema: &FeatureSchema) -> Result<TripSeries> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let trip_id = path
        .file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    parse_trip_csv(file, &trip_id, schema).map_err(|e| e.in_file(path))
}

/// Parses trip CSV text from any reader; `trip_id` names the result.
pub fn parse_trip_csv<R: std::io::Read>(reader: R, trip_id: &str, schema: &FeatureSchema) -> Result<TripSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let required = schema.required_channels();
    let mut picks: Vec<(usize, String)> = Vec::with_capacity(required.len());
    let mut missing = Vec::new();
    for name in &required {
        match headers.iter().position(|h| schema.channel_for(h.trim()) == name) {
            Some(c) => picks.push((c, name.clone())),
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(DataError::MissingColumns(missing));
    }
    let mut channels: IndexMap<String, Vec<f64>> =
        required.iter().map(|n| (n.clone(), Vec::new())).collect();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        if record.len() != headers.len() {
            return Err(DataError::Ragged {
                line,
                expected: headers.len(),
                found: record.len(),
            });
        }
        for (col, name) in &picks {
            let cell = record[*col].trim();
            let value: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                line,
                column: headers[*col].to_string(),
                value: cell.chars().take(32).collect(),
            })?;
            if !value.is_finite() {
                return Err(DataError::NonNumeric {
                    line,
                    column: headers[*col].to_string(),
                    value: cell.chars().take(32).collect(),
                });
            }
            channels[name.as_str()].push(value);
        }
    }
    TripSeries::new(trip_id, RAW_PERIOD_S, channels)
}

/// Loads a single CSV file or every `*.csv` in a directory, in file-name
/// order.
pub fn load_trips(path: &Path, schema: &FeatureSchema) -> Result<Vec<TripSeries>> {
    let meta = std::fs::metadata(path).map_err(|e| DataError::io(path, e))?;
    if !meta.is_dir() {
        return Ok(vec![read_trip_csv(path, schema)?]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| DataError::io(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::Invalid(format!("{}: no .csv files", path.display())));
    }
    files.iter().map(|f| read_trip_csv(f, schema)).collect()
}

/// Writes a trip in the CSV format accepted by [`load_trips`]. Values use
/// the shortest representation that parses back to the same `f64`.
pub fn write_trip_csv(trip: &TripSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Csv(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| DataError::Csv(format!("{}: {e}", path.display()));
    w.write_record(trip.channels.keys()).map_err(wrap)?;
    let cols: Vec<&Vec<f64>> = trip.channels.values().collect();
    let mut row = Vec::with_capacity(cols.len());
    for t in 0..trip.len() {
        row.clear();
        row.extend(cols.iter().map(|c| c[t].to_string()));
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Replaces each aggregation's members with their element-wise mean.
pub fn aggregate_redundant(trip: &TripSeries, schema: &FeatureSchema) -> Result<TripSeries> {
    let mut channels = trip.channels.clone();
    for agg in &schema.aggregations {
        let members = agg
            .members
            .iter()
            .map(|m| trip.channel(m))
            .collect::<Result<Vec<_>>>()?;
        let n = members.len() as f64;
        let mean: Vec<f64> = (0..trip.len())
            .map(|t| members.iter().map(|m| m[t]).sum::<f64>() / n)
            .collect();
        for m in &agg.members {
            channels.shift_remove(m);
        }
        channels.insert(agg.output.clone(), mean);
    }
    TripSeries::new(trip.trip_id.clone(), trip.sample_period_s, channels)
}
