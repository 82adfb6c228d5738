use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a named parameter map.
///
/// Adam keeps per-parameter moment buffers shaped like the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Descent step `p <- p - update(g)` on every parameter.
    ///
    /// Every parameter must have a gradient of identical shape; nothing is
    /// modified when one is missing.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, p) in params.iter_mut() {
                    let g = &grads[name];
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (name, p) in params.iter_mut() {
                    let g = &grads[name];
                    let m = self
                        .first_moment
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
                    let v = self
                        .second_moment
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let gi = g.data()[i];
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
