//! Decimation and sliding-window sample construction.

use serde::{Deserialize, Serialize};

use super::trip::{FeatureSchema, TripSeries};
use super::{DataError, Result};

/// Keeps every `target / source`-th sample, starting from the first.
pub fn resample(trip: &TripSeries, target_period_s: f64) -> Result<TripSeries> {
    let ratio = target_period_s / trip.sample_period_s;
    let stride = ratio.round();
    if !(stride >= 1.0) || (ratio - stride).abs() > 1e-6 * stride {
        return Err(DataError::Resample(format!(
            "target period {target_period_s} s is not an integer multiple of {} s",
            trip.sample_period_s
        )));
    }
    let stride = stride as usize;
    let channels = trip
        .channels
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().step_by(stride).copied().collect()))
        .collect();
    TripSeries::new(trip.trip_id.clone(), target_period_s, channels)
}

/// One supervised example. `x_enc` is `W × F` and `teacher`, `y` are `H × v`,
/// all row-major. `teacher` is the target sequence shifted one step back: its
/// first row is the target value at the last input step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedSample {
    pub trip_id: String,
    pub start: usize,
    pub x_enc: Vec<f64>,
    pub teacher: Vec<f64>,
    pub y: Vec<f64>,
}

/// A trip that produced no samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTrip {
    pub trip_id: String,
    pub reason: String,
}

/// All windows of `trip` with stride 1: `L − W − H + 1` of them, or a skip
/// record when the trip is too short.
pub fn make_windows(
    trip: &TripSeries,
    schema: &FeatureSchema,
    window: usize,
    horizon: usize,
) -> Result<std::result::Result<Vec<WindowedSample>, SkippedTrip>> {
    if window == 0 || horizon == 0 {
        return Err(DataError::Invalid("window and horizon must be positive".into()));
    }
    let inputs = schema
        .inputs
        .iter()
        .map(|c| trip.channel(c))
        .collect::<Result<Vec<_>>>()?;
    let targets = schema
        .targets
        .iter()
        .map(|c| trip.channel(c))
        .collect::<Result<Vec<_>>>()?;
    let len = trip.len();
    if len < window + horizon {
        return Ok(Err(SkippedTrip {
            trip_id: trip.trip_id.clone(),
            reason: format!("length {len} < W + H = {}", window + horizon),
        }));
    }
    let count = len - window - horizon + 1;
    let samples = (0..count)
        .map(|s| {
            let mut x_enc = Vec::with_capacity(window * inputs.len());
            for t in s..s + window {
                x_enc.extend(inputs.iter().map(|c| c[t]));
            }
            let rows = |from: usize| {
                let mut out = Vec::with_capacity(horizon * targets.len());
                for t in from..from + horizon {
                    out.extend(targets.iter().map(|c| c[t]));
                }
                out
            };
            WindowedSample {
                trip_id: trip.trip_id.clone(),
                start: s,
                x_enc,
                teacher: rows(s + window - 1),
                y: rows(s + window),
            }
        })
        .collect();
    Ok(Ok(samples))
}
