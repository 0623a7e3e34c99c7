//! Loss and goodness-of-fit.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Result, TensorError, Var};

/// Mean of squared differences over every element.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: g.shape(pred).into(),
            rhs: g.shape(target).into(),
        });
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Plain-slice MSE used outside the graph.
pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "mse: length mismatch");
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Coefficient of determination. `value` is NaN and `zero_variance` is set
/// when the target is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RSquared {
    pub value: f64,
    pub zero_variance: bool,
}

impl RSquared {
    /// The value when defined.
    pub fn get(self) -> Option<f64> {
        (!self.zero_variance).then_some(self.value)
    }
}

pub fn r_squared(pred: &[f64], target: &[f64]) -> RSquared {
    assert_eq!(pred.len(), target.len(), "r_squared: length mismatch");
    assert!(target.len() >= 2, "r_squared needs at least two points");
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum();
    if ss_tot == 0.0 {
        return RSquared {
            value: f64::NAN,
            zero_variance: true,
        };
    }
    RSquared {
        value: 1.0 - ss_res / ss_tot,
        zero_variance: false,
    }
}
