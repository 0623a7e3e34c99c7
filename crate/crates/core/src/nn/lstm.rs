use rand::Rng;

use super::{xavier_uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// One recurrent layer. Gate blocks are packed along the last axis in the
/// order input, forget, candidate, output: `W: d_in × 4h`, `U: h × 4h`,
/// `b: 4h`.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

/// Hidden and cell state, each `[B, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Stack of LSTM layers; layer `l + 1` consumes the hidden sequence of layer `l`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
        num_layers: usize,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let input = if l == 0 { d_in } else { hidden };
                let w = store.add(
                    format!("{name}.layer{l}.w"),
                    xavier_uniform(input, 4 * hidden, rng),
                );
                let u = store.add(
                    format!("{name}.layer{l}.u"),
                    xavier_uniform(hidden, 4 * hidden, rng),
                );
                let bias = Tensor::from_fn(&[4 * hidden], |i| {
                    if (hidden..2 * hidden).contains(&i) {
                        FORGET_BIAS
                    } else {
                        0.0
                    }
                });
                let b = store.add(format!("{name}.layer{l}.b"), bias);
                LstmLayer {
                    w,
                    u,
                    b,
                    d_in: input,
                    hidden,
                }
            })
            .collect();
        Self { layers, hidden }
    }

    /// Runs the stack over `x: [B, L, d_in]`. Missing initial states are
    /// zeros. Returns the top layer's hidden sequence `[B, L, hidden]` and the
    /// final state of every layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        init: Option<&[LstmState]>,
    ) -> Result<(Var, Vec<LstmState>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::Invalid(format!(
                "lstm expects [batch, length, features], got {shape:?}"
            )));
        }
        let (batch, len) = (shape[0], shape[1]);
        if len == 0 {
            return Err(TensorError::Invalid("lstm over an empty sequence".into()));
        }
        if let Some(init) = init {
            if init.len() != self.layers.len() {
                return Err(TensorError::Invalid(format!(
                    "{} initial states for {} layers",
                    init.len(),
                    self.layers.len()
                )));
            }
        }
        let mut seq = x;
        let mut finals = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let state = match init {
                Some(s) => s[l],
                None => {
                    let zeros = g.constant(Tensor::zeros(&[batch, self.hidden]));
                    LstmState { h: zeros, c: zeros }
                }
            };
            let (out, last) = layer.run(g, p, seq, state)?;
            seq = out;
            finals.push(last);
        }
        Ok((seq, finals))
    }
}

impl LstmLayer {
    fn run(&self, g: &mut Graph, p: &Bound, x: Var, init: LstmState) -> Result<(Var, LstmState)> {
        let (batch, len) = (g.shape(x)[0], g.shape(x)[1]);
        let h4 = 4 * self.hidden;
        let hd = self.hidden;
        let xw = g.matmul(x, p.get(self.w))?;
        let xw = g.add(xw, p.get(self.b))?;
        let mut state = init;
        let mut outputs = Vec::with_capacity(len);
        for t in 0..len {
            let xt = g.narrow(xw, 1, t, 1)?;
            let xt = g.reshape(xt, &[batch, h4])?;
            let hu = g.matmul(state.h, p.get(self.u))?;
            let gates = g.add(xt, hu)?;
            let i = g.narrow(gates, 1, 0, hd)?;
            let i = g.sigmoid(i);
            let f = g.narrow(gates, 1, hd, hd)?;
            let f = g.sigmoid(f);
            let cand = g.narrow(gates, 1, 2 * hd, hd)?;
            let cand = g.tanh(cand);
            let o = g.narrow(gates, 1, 3 * hd, hd)?;
            let o = g.sigmoid(o);
            let keep = g.mul(f, state.c)?;
            let write = g.mul(i, cand)?;
            let c = g.add(keep, write)?;
            let tc = g.tanh(c);
            let h = g.mul(o, tc)?;
            outputs.push(g.reshape(h, &[batch, 1, hd])?);
            state = LstmState { h, c };
        }
        let seq = if outputs.len() == 1 {
            outputs[0]
        } else {
            g.concat(&outputs, 1)?
        };
        Ok((seq, state))
    }
}
