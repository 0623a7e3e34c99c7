use rand::Rng;

use super::{xavier_uniform, Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Graph, Mask, Result, TensorError, Var};

/// Attention weights `softmax(Q·Kᵀ / √d_k)` over the key axis, with masked
/// positions forced to zero weight.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var, mask: Option<&Mask>) -> Result<Var> {
    let dk = *g.shape(q).last().unwrap_or(&0);
    if dk == 0 || g.shape(k).last() != Some(&dk) {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: g.shape(q).into(),
            rhs: g.shape(k).into(),
        });
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    match mask {
        Some(m) => g.masked_softmax(scores, m),
        None => {
            let axis = g.shape(scores).len() - 1;
            g.softmax(scores, axis)
        }
    }
}

/// `softmax(Q·Kᵀ / √d_k + mask) · V` for `Q: [.., Lq, d_k]`, `K: [.., Lk, d_k]`,
/// `V: [.., Lk, d_v]`.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let (ks, vs) = (g.shape(k), g.shape(v));
    if ks.len() < 2 || ks.len() != vs.len() || ks[..ks.len() - 1] != vs[..vs.len() - 1] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: ks.into(),
            rhs: vs.into(),
        });
    }
    let w = attention_weights(g, q, k, mask)?;
    g.matmul(w, v)
}

/// Per-head projections `W_q, W_k: d_model × d_k` and `W_v: d_model × d_v`.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttentionHead {
    fn project(&self, g: &mut Graph, p: &Bound, x_q: Var, x_kv: Var) -> Result<(Var, Var, Var)> {
        let q = g.matmul(x_q, p.get(self.wq))?;
        let k = g.matmul(x_kv, p.get(self.wk))?;
        let v = g.matmul(x_kv, p.get(self.wv))?;
        Ok((q, k, v))
    }
}

/// Multi-head attention: every head attends independently, the head outputs
/// are concatenated and combined by the output projection `W_o`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: Vec<AttentionHead>,
    pub wo: Linear,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(TensorError::Invalid(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let dk = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|h| {
                let mut w = |kind: &str| {
                    store.add(
                        format!("{name}.head{h}.{kind}"),
                        xavier_uniform(d_model, dk, rng),
                    )
                };
                AttentionHead {
                    wq: w("wq"),
                    wk: w("wk"),
                    wv: w("wv"),
                }
            })
            .collect();
        let wo = Linear::new(store, rng, &format!("{name}.wo"), n_heads * dk, d_model, true);
        Ok(Self { heads, wo, d_model })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Self-attention when `x_q` and `x_kv` are the same sequence,
    /// cross-attention when `x_kv` is the encoder memory.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_q: Var,
        x_kv: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, x_q, x_kv, mask)?.0)
    }

    /// As [`forward`](Self::forward), also returning each head's attention
    /// weights `[.., Lq, Lk]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_q: Var,
        x_kv: Var,
        mask: Option<&Mask>,
    ) -> Result<(Var, Vec<Var>)> {
        for x in [x_q, x_kv] {
            if g.shape(x).last() != Some(&self.d_model) {
                return Err(TensorError::Invalid(format!(
                    "attention input {:?} does not end in d_model {}",
                    g.shape(x),
                    self.d_model
                )));
            }
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (q, k, v) = head.project(g, p, x_q, x_kv)?;
            let w = attention_weights(g, q, k, mask)?;
            outs.push(g.matmul(w, v)?);
            weights.push(w);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            let axis = g.shape(outs[0]).len() - 1;
            g.concat(&outs, axis)?
        };
        Ok((self.wo.forward(g, p, joined)?, weights))
    }
}
