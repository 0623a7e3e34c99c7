use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::FeatureSchema;

/// The five forecasting architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ModelKind {
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "ENC_TST")]
    EncTst,
    #[serde(rename = "V_TST")]
    VTst,
    #[serde(rename = "TST_LSTM")]
    TstLstm,
    #[serde(rename = "ENC_TST_DEC_LSTM")]
    EncTstDecLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Lstm,
        ModelKind::EncTst,
        ModelKind::VTst,
        ModelKind::TstLstm,
        ModelKind::EncTstDecLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lstm => "LSTM",
            ModelKind::EncTst => "ENC_TST",
            ModelKind::VTst => "V_TST",
            ModelKind::TstLstm => "TST_LSTM",
            ModelKind::EncTstDecLstm => "ENC_TST_DEC_LSTM",
        }
    }

    /// Kinds whose decoder consumes a target sequence (teacher forcing during
    /// training, autoregressive decoding at inference).
    pub fn has_decoder_input(self) -> bool {
        matches!(self, ModelKind::VTst | ModelKind::TstLstm)
    }

    pub fn allowed_names() -> String {
        ModelKind::ALL.map(ModelKind::name).join(", ")
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownKind(pub String);

impl fmt::Display for UnknownKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "unknown model kind {:?} (allowed: {})",
            self.0,
            ModelKind::allowed_names()
        )
    }
}

impl std::error::Error for UnknownKind {}

impl<'de> Deserialize<'de> for ModelKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for ModelKind {
    type Err = UnknownKind;

    /// Accepts the canonical names case-insensitively, with `-` or `_`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| UnknownKind(s.to_string()))
    }
}

/// Architecture selector plus hyperparameters. Defaults follow the reference
/// configuration: 4 encoder and 4 decoder blocks, 8 heads, `d_model` 128, FFN
/// width 128, 4 LSTM layers, 15 input features, 2 targets, `W = 12`, `H = 6`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_encoders: usize,
    pub n_decoders: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub ffn_width: usize,
    pub lstm_layers: usize,
    pub input_features: usize,
    pub output_features: usize,
    pub window: usize,
    pub horizon: usize,
    /// Input-feature index holding the current value of each target. The
    /// decoder's first input is read from these columns of the last window
    /// step; empty means a zero start token.
    pub decoder_seed_features: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::VTst,
            n_encoders: 4,
            n_decoders: 4,
            n_heads: 8,
            d_model: 128,
            ffn_width: 128,
            lstm_layers: 4,
            input_features: 15,
            output_features: 2,
            window: 12,
            horizon: 6,
            decoder_seed_features: Vec::new(),
        }
    }
}

/// Upper bounds that keep a decoded spec from requesting absurd allocations.
const MAX_WIDTH: usize = 4096;
const MAX_DEPTH: usize = 64;
const MAX_STEPS: usize = 100_000;
const MAX_PARAMS: usize = 200_000_000;

fn lstm_params(d_in: usize, hidden: usize, layers: usize) -> usize {
    (0..layers)
        .map(|l| {
            let input = if l == 0 { d_in } else { hidden };
            input * 4 * hidden + hidden * 4 * hidden + 4 * hidden
        })
        .sum()
}

impl ModelSpec {
    pub fn with_kind(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Copies the dataset-dependent sizes from `schema`, `window` and
    /// `horizon`. The decoder start token reads the targets' input columns
    /// when every target is also an input.
    pub fn for_data(self, schema: &FeatureSchema, window: usize, horizon: usize) -> Self {
        Self {
            input_features: schema.inputs.len(),
            output_features: schema.targets.len(),
            window,
            horizon,
            decoder_seed_features: schema.target_input_indices().unwrap_or_default(),
            ..self
        }
    }

    /// Every problem with the spec, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("input_features", self.input_features),
            ("output_features", self.output_features),
            ("window", self.window),
            ("horizon", self.horizon),
            ("d_model", self.d_model),
        ];
        for (name, v) in positive {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("ffn_width", self.ffn_width),
            ("input_features", self.input_features),
            ("output_features", self.output_features),
            ("n_heads", self.n_heads),
        ] {
            if v > MAX_WIDTH {
                out.push(format!("{name} {v} exceeds {MAX_WIDTH}"));
            }
        }
        for (name, v) in [
            ("n_encoders", self.n_encoders),
            ("n_decoders", self.n_decoders),
            ("lstm_layers", self.lstm_layers),
        ] {
            if v > MAX_DEPTH {
                out.push(format!("{name} {v} exceeds {MAX_DEPTH}"));
            }
        }
        for (name, v) in [("window", self.window), ("horizon", self.horizon)] {
            if v > MAX_STEPS {
                out.push(format!("{name} {v} exceeds {MAX_STEPS}"));
            }
        }
        if !self.d_model.is_multiple_of(2) {
            out.push(format!("d_model {} must be even for the position table", self.d_model));
        }
        let uses_attention = self.kind != ModelKind::Lstm;
        if uses_attention {
            if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
                out.push(format!(
                    "d_model {} is not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ));
            }
            if self.n_encoders == 0 {
                out.push("n_encoders must be positive".into());
            }
        }
        if self.kind.has_decoder_input() && self.n_decoders == 0 {
            out.push("n_decoders must be positive".into());
        }
        if matches!(self.kind, ModelKind::Lstm | ModelKind::EncTstDecLstm) && self.lstm_layers == 0 {
            out.push("lstm_layers must be positive".into());
        }
        if matches!(self.kind, ModelKind::EncTst | ModelKind::VTst) && self.ffn_width == 0 {
            out.push("ffn_width must be positive".into());
        }
        if !self.decoder_seed_features.is_empty() {
            if self.decoder_seed_features.len() != self.output_features {
                out.push(format!(
                    "decoder_seed_features has {} entries for {} outputs",
                    self.decoder_seed_features.len(),
                    self.output_features
                ));
            }
            if let Some(bad) = self
                .decoder_seed_features
                .iter()
                .find(|&&i| i >= self.input_features)
            {
                out.push(format!("decoder seed feature {bad} out of range"));
            }
        }
        if out.is_empty() {
            match self.parameter_count() {
                Some(n) if n <= MAX_PARAMS => {}
                _ => out.push(format!("model exceeds {MAX_PARAMS} parameters")),
            }
        }
        out
    }

    /// Parameter count derived from the hyperparameters alone; `None` on
    /// arithmetic overflow. Agrees with building the model and counting.
    pub fn parameter_count(&self) -> Option<usize> {
        let d = self.d_model;
        let hv = self.horizon.checked_mul(self.output_features)?;
        let linear = |i: usize, o: usize| i.checked_mul(o)?.checked_add(o);
        let norm = 2 * d;
        let mha = 3 * d * d + linear(d, d)?;
        let sub = match self.kind {
            ModelKind::TstLstm => lstm_params(d, d, 1) + linear(d, d)?,
            _ => linear(d, self.ffn_width)? + linear(self.ffn_width, d)?,
        };
        let encoder = linear(self.input_features, d)?
            + self.n_encoders.checked_mul(2 * norm + mha + sub)?
            + norm;
        let total = match self.kind {
            ModelKind::Lstm => {
                linear(self.input_features, d)? + lstm_params(d, d, self.lstm_layers) + linear(d, hv)?
            }
            ModelKind::EncTst => encoder + linear(self.window.checked_mul(d)?, hv)?,
            ModelKind::VTst | ModelKind::TstLstm => {
                let block = 3 * norm + 2 * mha + sub;
                encoder
                    + linear(self.output_features, d)?
                    + self.n_decoders.checked_mul(block)?
                    + norm
                    + linear(d, self.output_features)?
            }
            ModelKind::EncTstDecLstm => encoder + lstm_params(d, d, self.lstm_layers) + linear(d, hv)?,
        };
        Some(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        assert_eq!("v-tst".parse::<ModelKind>().unwrap(), ModelKind::VTst);
        assert_eq!("ENC_TST_DEC_LSTM".parse::<ModelKind>().unwrap(), ModelKind::EncTstDecLstm);
        let err = "vtst2".parse::<ModelKind>().unwrap_err().to_string();
        assert!(err.contains("vtst2") && err.contains("TST_LSTM"), "{err}");
    }

    #[test]
    fn defaults_follow_reference_table() {
        let s = ModelSpec::default();
        assert_eq!(
            (s.n_encoders, s.n_decoders, s.n_heads, s.d_model, s.ffn_width, s.lstm_layers),
            (4, 4, 8, 128, 128, 4)
        );
        assert!(s.problems().is_empty());
    }

    #[test]
    fn problems_are_all_reported() {
        let s = ModelSpec {
            d_model: 30,
            n_heads: 8,
            window: 0,
            ..ModelSpec::default()
        };
        let p = s.problems();
        assert!(p.iter().any(|m| m.contains("window")));
        assert!(p.iter().any(|m| m.contains("divisible")));
    }
}
