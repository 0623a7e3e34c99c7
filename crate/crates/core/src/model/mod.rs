//! The five forecasting architectures behind one forward interface.
//!
//! Every kind maps `x_enc: [B, W, F]` to a forecast `[B, H, v]`:
//!
//! - `LSTM`: input projection, stacked LSTM, final hidden state → linear head
//!   reshaped to `(H, v)`.
//! - `ENC_TST`: embedding + position table, encoder blocks, flattened encoder
//!   output → linear head.
//! - `V_TST`: encoder stack plus a decoder stack with masked self-attention and
//!   cross-attention onto the encoder output; per-position linear head.
//! - `TST_LSTM`: `V_TST` wiring where every block's FFN is a one-layer LSTM.
//! - `ENC_TST_DEC_LSTM`: encoder stack read by stacked LSTM layers; the final
//!   hidden state feeds the linear head. No cross-attention.

mod checkpoint;
mod spec;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use spec::{ModelKind, ModelSpec, UnknownKind};

use thiserror::Error;

use crate::nn::{
    positional_encoding, Bound, DecoderBlock, EncoderBlock, LayerNorm, Linear, Lstm, ParamStore,
    SubLayerKind,
};
use crate::seed;
use crate::tensor::{Graph, Mask, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),
    #[error("{0} needs a teacher sequence in training mode")]
    MissingTeacher(ModelKind),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Embedding, position table, encoder blocks and a final norm.
#[derive(Debug, Clone)]
struct Encoder {
    embed: Linear,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

impl Encoder {
    fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, spec: &ModelSpec, sub: SubLayerKind) -> Result<Self> {
        let d = spec.d_model;
        let embed = Linear::new(store, rng, "encoder.embed", spec.input_features, d, true);
        let blocks = (0..spec.n_encoders)
            .map(|i| {
                EncoderBlock::new(store, rng, &format!("encoder.block{i}"), d, spec.n_heads, spec.ffn_width, sub)
            })
            .collect::<std::result::Result<_, _>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", d);
        Ok(Self { embed, blocks, norm })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, d_model: usize) -> Result<Var> {
        let len = g.shape(x)[1];
        let h = self.embed.forward(g, p, x)?;
        let pe = g.constant(positional_encoding(len, d_model)?);
        let mut h = g.add(h, pe)?;
        for block in &self.blocks {
            h = block.forward(g, p, h)?;
        }
        Ok(self.norm.forward(g, p, h)?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    embed: Linear,
    blocks: Vec<DecoderBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl Decoder {
    fn forward(&self, g: &mut Graph, p: &Bound, dec_in: Var, memory: Var, d_model: usize) -> Result<Var> {
        let len = g.shape(dec_in)[1];
        let h = self.embed.forward(g, p, dec_in)?;
        let pe = g.constant(positional_encoding(len, d_model)?);
        let mut h = g.add(h, pe)?;
        let mask = Mask::causal(len);
        for block in &self.blocks {
            h = block.forward(g, p, h, memory, &mask)?;
        }
        let h = self.norm.forward(g, p, h)?;
        Ok(self.head.forward(g, p, h)?)
    }
}

#[derive(Debug, Clone)]
enum Network {
    Lstm {
        embed: Linear,
        lstm: Lstm,
        head: Linear,
    },
    EncTst {
        encoder: Encoder,
        head: Linear,
    },
    Seq2Seq {
        encoder: Encoder,
        decoder: Decoder,
    },
    EncTstDecLstm {
        encoder: Encoder,
        lstm: Lstm,
        head: Linear,
    },
}

/// A built model: spec, named parameters and the wiring between them.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    net: Network,
}

impl Model {
    /// Builds and initializes a model; identical `(spec, seed)` give
    /// bit-identical parameters.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let problems = spec.problems();
        if !problems.is_empty() {
            return Err(ModelError::InvalidSpec(problems));
        }
        let mut rng = seed::rng(seed, "model-init");
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = spec.d_model;
        let hv = spec.horizon * spec.output_features;
        let net = match spec.kind {
            ModelKind::Lstm => Network::Lstm {
                embed: Linear::new(s, rng, "embed", spec.input_features, d, true),
                lstm: Lstm::new(s, rng, "lstm", d, d, spec.lstm_layers),
                head: Linear::new(s, rng, "head", d, hv, true),
            },
            ModelKind::EncTst => Network::EncTst {
                encoder: Encoder::new(s, rng, spec, SubLayerKind::FeedForward)?,
                head: Linear::new(s, rng, "head", spec.window * d, hv, true),
            },
            ModelKind::VTst | ModelKind::TstLstm => {
                let sub = if spec.kind == ModelKind::TstLstm {
                    SubLayerKind::Lstm
                } else {
                    SubLayerKind::FeedForward
                };
                let encoder = Encoder::new(s, rng, spec, sub)?;
                let embed = Linear::new(s, rng, "decoder.embed", spec.output_features, d, true);
                let blocks = (0..spec.n_decoders)
                    .map(|i| {
                        DecoderBlock::new(s, rng, &format!("decoder.block{i}"), d, spec.n_heads, spec.ffn_width, sub)
                    })
                    .collect::<std::result::Result<_, _>>()?;
                let norm = LayerNorm::new(s, "decoder.norm", d);
                let head = Linear::new(s, rng, "head", d, spec.output_features, true);
                Network::Seq2Seq {
                    encoder,
                    decoder: Decoder {
                        embed,
                        blocks,
                        norm,
                        head,
                    },
                }
            }
            ModelKind::EncTstDecLstm => Network::EncTstDecLstm {
                encoder: Encoder::new(s, rng, spec, SubLayerKind::FeedForward)?,
                lstm: Lstm::new(s, rng, "decoder.lstm", d, d, spec.lstm_layers),
                head: Linear::new(s, rng, "head", d, hv, true),
            },
        };
        Ok(Self {
            spec: spec.clone(),
            params: store,
            net,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.params.num_elements()
    }

    fn check_shape(&self, what: &'static str, got: &[usize], expected: [usize; 3]) -> Result<()> {
        if got != expected {
            return Err(ModelError::Shape {
                what,
                expected: expected.to_vec(),
                got: got.to_vec(),
            });
        }
        Ok(())
    }

    fn check_input(&self, g: &Graph, x_enc: Var) -> Result<usize> {
        let shape = g.shape(x_enc);
        let batch = shape.first().copied().unwrap_or(0);
        self.check_shape("x_enc", shape, [batch, self.spec.window, self.spec.input_features])?;
        Ok(batch)
    }

    /// Training-mode forward on an existing graph. Decoder-input kinds require
    /// `teacher: [B, H, v]` (the ground-truth sequence shifted by one step);
    /// the others ignore it.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x_enc: Var, teacher: Option<Var>) -> Result<Var> {
        let batch = self.check_input(g, x_enc)?;
        let s = &self.spec;
        let out_shape = [batch, s.horizon, s.output_features];
        match &self.net {
            Network::Lstm { embed, lstm, head } => {
                let e = embed.forward(g, p, x_enc)?;
                let (_, states) = lstm.forward(g, p, e, None)?;
                let last = states.last().expect("at least one layer").h;
                let y = head.forward(g, p, last)?;
                Ok(g.reshape(y, &out_shape)?)
            }
            Network::EncTst { encoder, head } => {
                let m = encoder.forward(g, p, x_enc, s.d_model)?;
                let flat = g.reshape(m, &[batch, s.window * s.d_model])?;
                let y = head.forward(g, p, flat)?;
                Ok(g.reshape(y, &out_shape)?)
            }
            Network::Seq2Seq { encoder, decoder } => {
                let teacher = teacher.ok_or(ModelError::MissingTeacher(s.kind))?;
                self.check_shape("teacher", g.shape(teacher), out_shape)?;
                let m = encoder.forward(g, p, x_enc, s.d_model)?;
                decoder.forward(g, p, teacher, m, s.d_model)
            }
            Network::EncTstDecLstm { encoder, lstm, head } => {
                let m = encoder.forward(g, p, x_enc, s.d_model)?;
                let (_, states) = lstm.forward(g, p, m, None)?;
                let last = states.last().expect("at least one layer").h;
                let y = head.forward(g, p, last)?;
                Ok(g.reshape(y, &out_shape)?)
            }
        }
    }

    /// Decoder start token `[B, 1, v]`: the current target values read from
    /// the last window step of `x_enc`.
    pub fn start_token(&self, x_enc: &Tensor) -> Tensor {
        let s = &self.spec;
        let batch = x_enc.shape()[0];
        let v = s.output_features;
        if s.decoder_seed_features.is_empty() {
            return Tensor::zeros(&[batch, 1, v]);
        }
        Tensor::from_fn(&[batch, 1, v], |i| {
            let (b, j) = (i / v, i % v);
            x_enc.at(&[b, s.window - 1, s.decoder_seed_features[j]])
        })
    }

    /// Inference forward. With `teacher`, decoder-input kinds run
    /// teacher-forced; without it they decode autoregressively from
    /// [`start_token`](Self::start_token), feeding back their own predictions.
    pub fn forward(&self, x_enc: &Tensor, teacher: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(x_enc.clone());
        let out = match (&self.net, teacher) {
            (Network::Seq2Seq { encoder, decoder }, None) => {
                self.check_input(&g, x)?;
                let memory = encoder.forward(&mut g, &p, x, self.spec.d_model)?;
                let memory = g.tensor(memory).with_requires_grad(false);
                return self.decode_autoregressive(decoder, &memory, x_enc);
            }
            (_, teacher) => {
                let t = teacher.map(|t| g.constant(t.clone()));
                self.forward_graph(&mut g, &p, x, t)?
            }
        };
        Ok(g.tensor(out).with_requires_grad(false))
    }

    /// Each step runs on a fresh graph so memory stays bounded by one
    /// decoder pass instead of growing with the horizon.
    fn decode_autoregressive(&self, decoder: &Decoder, memory: &Tensor, x_enc: &Tensor) -> Result<Tensor> {
        let (h, v) = (self.spec.horizon, self.spec.output_features);
        let batch = x_enc.shape()[0];
        let start = self.start_token(x_enc);
        // Decoder input rows per batch element, grown by one step at a time.
        let mut inputs: Vec<Vec<f64>> = (0..batch).map(|b| start.data()[b * v..(b + 1) * v].to_vec()).collect();
        let mut preds = vec![0.0; batch * h * v];
        for step in 0..h {
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let mem = g.constant(memory.clone());
            let dec_in = Tensor::new(&[batch, step + 1, v], inputs.concat())?;
            let dec_in = g.constant(dec_in);
            let out = decoder.forward(&mut g, &p, dec_in, mem, self.spec.d_model)?;
            let out = g.value(out);
            for (b, row) in inputs.iter_mut().enumerate() {
                let next = &out[(b * (step + 1) + step) * v..(b * (step + 1) + step + 1) * v];
                preds[(b * h + step) * v..(b * h + step + 1) * v].copy_from_slice(next);
                row.extend_from_slice(next);
            }
        }
        Ok(Tensor::new(&[batch, h, v], preds)?)
    }
}
