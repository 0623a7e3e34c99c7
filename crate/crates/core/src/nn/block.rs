use rand::Rng;

use super::{Bound, FeedForward, LayerNorm, Linear, Lstm, MultiHeadAttention, ParamStore};
use crate::tensor::{Graph, Mask, Result, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubLayerKind {
    FeedForward,
    Lstm,
}

/// Position-wise sub-layer of a transformer block: either the usual FFN, or a
/// single-layer LSTM of width `d_model` scanning the block's sequence left to
/// right followed by a projection back to `d_model`.
#[derive(Debug, Clone)]
pub enum SubLayer {
    FeedForward(FeedForward),
    Lstm { lstm: Lstm, proj: Linear },
}

impl SubLayer {
    pub fn new<R: Rng + ?Sized>(
        kind: SubLayerKind,
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        ffn_width: usize,
    ) -> Self {
        match kind {
            SubLayerKind::FeedForward => {
                SubLayer::FeedForward(FeedForward::new(store, rng, &format!("{name}.ffn"), d_model, ffn_width))
            }
            SubLayerKind::Lstm => SubLayer::Lstm {
                lstm: Lstm::new(store, rng, &format!("{name}.lstm"), d_model, d_model, 1),
                proj: Linear::new(store, rng, &format!("{name}.lstm_proj"), d_model, d_model, true),
            },
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self {
            SubLayer::FeedForward(ffn) => ffn.forward(g, p, x),
            SubLayer::Lstm { lstm, proj } => {
                let (seq, _) = lstm.forward(g, p, x, None)?;
                proj.forward(g, p, seq)
            }
        }
    }
}

/// Pre-norm encoder block: `x += attn(norm(x))`, then `x += sub(norm(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub sub_norm: LayerNorm,
    pub sub: SubLayer,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_width: usize,
        sub: SubLayerKind,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d_model),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d_model, n_heads)?,
            sub_norm: LayerNorm::new(store, &format!("{name}.sub_norm"), d_model),
            sub: SubLayer::new(sub, store, rng, name, d_model, ffn_width),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = self.attn_norm.forward(g, p, x)?;
        let a = self.attn.forward(g, p, n, n, None)?;
        let x = g.add(x, a)?;
        let n = self.sub_norm.forward(g, p, x)?;
        let s = self.sub.forward(g, p, n)?;
        g.add(x, s)
    }
}

/// Pre-norm decoder block: masked self-attention, cross-attention onto the
/// encoder memory, then the sub-layer, each with a residual connection.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub sub_norm: LayerNorm,
    pub sub: SubLayer,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_width: usize,
        sub: SubLayerKind,
    ) -> Result<Self> {
        Ok(Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d_model),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d_model, n_heads)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d_model),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), d_model, n_heads)?,
            sub_norm: LayerNorm::new(store, &format!("{name}.sub_norm"), d_model),
            sub: SubLayer::new(sub, store, rng, name, d_model, ffn_width),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, memory: Var, mask: &Mask) -> Result<Var> {
        let n = self.self_norm.forward(g, p, x)?;
        let a = self.self_attn.forward(g, p, n, n, Some(mask))?;
        let x = g.add(x, a)?;
        let n = self.cross_norm.forward(g, p, x)?;
        let c = self.cross_attn.forward(g, p, n, memory, None)?;
        let x = g.add(x, c)?;
        let n = self.sub_norm.forward(g, p, x)?;
        let s = self.sub.forward(g, p, n)?;
        g.add(x, s)
    }
}
