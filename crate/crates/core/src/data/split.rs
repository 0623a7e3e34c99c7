//! Shuffling, train/validation/test partitioning and z-score normalization.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::trip::FeatureSchema;
use super::window::WindowedSample;
use super::{DataError, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Standard deviations below this are replaced by 1 so constant channels
/// normalize to zero instead of dividing by zero.
pub const MIN_STD: f64 = 1e-12;

/// Per-channel z-score parameters, computed on the training portion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

fn z(x: &mut [f64], mean: &[f64], std: &[f64]) {
    for (i, v) in x.iter_mut().enumerate() {
        let c = i % mean.len();
        *v = (*v - mean[c]) / std[c];
    }
}

fn unz(x: &mut [f64], mean: &[f64], std: &[f64]) {
    for (i, v) in x.iter_mut().enumerate() {
        let c = i % mean.len();
        *v = *v * std[c] + mean[c];
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    (mean, if std < MIN_STD { 1.0 } else { std })
}

impl NormStats {
    /// Fits the statistics to `samples`. Targets that are also inputs reuse
    /// the input channel's statistics, so a target value read from `x_enc`
    /// and the same value in `y` normalize identically.
    pub fn fit(samples: &[WindowedSample], schema: &FeatureSchema) -> Result<Self> {
        if samples.is_empty() {
            return Err(DataError::Invalid("cannot fit normalization on zero samples".into()));
        }
        let f = schema.inputs.len();
        let v = schema.targets.len();
        let (input_mean, input_std): (Vec<_>, Vec<_>) = (0..f)
            .map(|c| mean_std(samples.iter().flat_map(move |s| s.x_enc.iter().skip(c).step_by(f).copied())))
            .unzip();
        let (target_mean, target_std): (Vec<_>, Vec<_>) = (0..v)
            .map(|j| match schema.inputs.iter().position(|i| *i == schema.targets[j]) {
                Some(c) => (input_mean[c], input_std[c]),
                None => mean_std(samples.iter().flat_map(move |s| s.y.iter().skip(j).step_by(v).copied())),
            })
            .unzip();
        Ok(Self {
            input_mean,
            input_std,
            target_mean,
            target_std,
        })
    }

    pub fn normalize_sample(&self, s: &mut WindowedSample) {
        z(&mut s.x_enc, &self.input_mean, &self.input_std);
        z(&mut s.teacher, &self.target_mean, &self.target_std);
        z(&mut s.y, &self.target_mean, &self.target_std);
    }

    pub fn normalize_inputs(&self, x: &mut [f64]) {
        z(x, &self.input_mean, &self.input_std);
    }

    pub fn denormalize_inputs(&self, x: &mut [f64]) {
        unz(x, &self.input_mean, &self.input_std);
    }

    pub fn normalize_targets(&self, y: &mut [f64]) {
        z(y, &self.target_mean, &self.target_std);
    }

    /// Maps row-major `[.., v]` target values back to physical units.
    pub fn denormalize_targets(&self, y: &mut [f64]) {
        unz(y, &self.target_mean, &self.target_std);
    }
}

/// How samples are assigned to the three partitions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Pool every window, shuffle, and cut.
    #[default]
    Shuffled,
    /// Whole trips go to test, then validation, then training, so no trip
    /// contributes to more than one partition.
    TripHoldout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 4000,
            validation: 500,
            test: 500,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// Normalized train/validation/test samples plus what is needed to undo the
/// normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<WindowedSample>,
    pub validation: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
    pub stats: NormStats,
    pub seed: u64,
    pub window: usize,
    pub horizon: usize,
    pub input_channels: Vec<String>,
    pub target_channels: Vec<String>,
}

fn shortfall(sizes: SplitSizes, available: usize, what: &str) -> DataError {
    DataError::Insufficient {
        requested: sizes.total(),
        train: sizes.train,
        validation: sizes.validation,
        test: sizes.test,
        available,
        what: what.to_string(),
    }
}

/// Shuffles `samples` with `seed`, partitions them and z-scores every
/// partition with statistics fitted on the training part only.
pub fn normalize_and_split(
    samples: Vec<WindowedSample>,
    schema: &FeatureSchema,
    sizes: SplitSizes,
    mode: SplitMode,
    seed: u64,
) -> Result<DatasetSplit> {
    let f = schema.inputs.len();
    let v = schema.targets.len();
    let first = samples.first().ok_or_else(|| shortfall(sizes, 0, "samples"))?;
    let window = first.x_enc.len() / f;
    let horizon = first.y.len() / v;
    if samples
        .iter()
        .any(|s| s.x_enc.len() != window * f || s.y.len() != horizon * v || s.teacher.len() != horizon * v)
    {
        return Err(DataError::Invalid("samples have inconsistent shapes".into()));
    }
    let mut rng = seed::rng(seed, "split");
    let (train, validation, test) = match mode {
        SplitMode::Shuffled => {
            if samples.len() < sizes.total() {
                return Err(shortfall(sizes, samples.len(), "samples"));
            }
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            let mut slots: Vec<Option<WindowedSample>> = samples.into_iter().map(Some).collect();
            let mut take = |range: std::ops::Range<usize>| -> Vec<WindowedSample> {
                order[range].iter().map(|&i| slots[i].take().expect("each index once")).collect()
            };
            let a = sizes.train;
            let b = a + sizes.validation;
            let c = b + sizes.test;
            (take(0..a), take(a..b), take(b..c))
        }
        SplitMode::TripHoldout => {
            let mut trips: Vec<String> = Vec::new();
            for s in &samples {
                if trips.last() != Some(&s.trip_id) && !trips.contains(&s.trip_id) {
                    trips.push(s.trip_id.clone());
                }
            }
            trips.shuffle(&mut rng);
            let count = |id: &str| samples.iter().filter(|s| s.trip_id == id).count();
            let mut group = vec![2u8; trips.len()];
            let (mut n_test, mut n_val) = (0, 0);
            for (g, id) in group.iter_mut().zip(&trips) {
                if n_test < sizes.test {
                    *g = 0;
                    n_test += count(id);
                } else if n_val < sizes.validation {
                    *g = 1;
                    n_val += count(id);
                }
            }
            let mut parts: [Vec<WindowedSample>; 3] = Default::default();
            for s in samples {
                let k = trips.iter().position(|t| *t == s.trip_id).expect("trip listed");
                parts[group[k] as usize].push(s);
            }
            let [test, validation, train] = parts;
            let mut cut = |mut part: Vec<WindowedSample>, n: usize, what: &str| {
                if part.len() < n {
                    return Err(shortfall(sizes, part.len(), what));
                }
                part.shuffle(&mut rng);
                part.truncate(n);
                Ok(part)
            };
            let test = cut(test, sizes.test, "test trips")?;
            let validation = cut(validation, sizes.validation, "validation trips")?;
            let train = cut(train, sizes.train, "training trips")?;
            (train, validation, test)
        }
    };
    let stats = NormStats::fit(&train, schema)?;
    let norm = |mut part: Vec<WindowedSample>| {
        part.iter_mut().for_each(|s| stats.normalize_sample(s));
        part
    };
    Ok(DatasetSplit {
        train: norm(train),
        validation: norm(validation),
        test: norm(test),
        stats: stats.clone(),
        seed,
        window,
        horizon,
        input_channels: schema.inputs.clone(),
        target_channels: schema.targets.clone(),
    })
}

impl DatasetSplit {
    pub fn n_inputs(&self) -> usize {
        self.input_channels.len()
    }

    pub fn n_targets(&self) -> usize {
        self.target_channels.len()
    }

    /// Stacks the chosen samples into `(x_enc [B,W,F], teacher [B,H,v], y [B,H,v])`.
    pub fn batch(&self, samples: &[WindowedSample], idx: &[usize]) -> (Tensor, Tensor, Tensor) {
        stack(samples, idx, self.window, self.n_inputs(), self.horizon, self.n_targets())
    }
}

pub fn stack(
    samples: &[WindowedSample],
    idx: &[usize],
    window: usize,
    f: usize,
    horizon: usize,
    v: usize,
) -> (Tensor, Tensor, Tensor) {
    let b = idx.len();
    let mut x = Vec::with_capacity(b * window * f);
    let mut t = Vec::with_capacity(b * horizon * v);
    let mut y = Vec::with_capacity(b * horizon * v);
    for &i in idx {
        x.extend_from_slice(&samples[i].x_enc);
        t.extend_from_slice(&samples[i].teacher);
        y.extend_from_slice(&samples[i].y);
    }
    (
        Tensor::new(&[b, window, f], x).expect("sample sizes checked"),
        Tensor::new(&[b, horizon, v], t).expect("sample sizes checked"),
        Tensor::new(&[b, horizon, v], y).expect("sample sizes checked"),
    )
}
