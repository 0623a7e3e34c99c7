use rand::Rng;

use super::{Bound, Linear, ParamStore};
use crate::tensor::{Graph, Result, Var};

/// Position-wise `linear → ReLU → linear`, `d_model → width → d_model`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        width: usize,
    ) -> Self {
        Self {
            inner: Linear::new(store, rng, &format!("{name}.inner"), d_model, width, true),
            outer: Linear::new(store, rng, &format!("{name}.outer"), width, d_model, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, p, x)?;
        let h = g.relu(h);
        self.outer.forward(g, p, h)
    }
}
