use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{elbo_graph, ElboReport, ObjectiveConfig, ObjectiveKind};
use crate::data::{Dataset, MultimodalBatch};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterStore};
use crate::rng::Rng;
use crate::tensor::{Graph, Optimizer, TensorError};

/// Sample-weighted means over one pass of the data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub steps: usize,
    pub samples: usize,
}

impl EpochMetrics {
    fn add(&mut self, report: &ElboReport, rows: usize) {
        let w = rows as f64;
        self.elbo += w * report.total;
        self.recon += w * report.recon_total();
        self.kl += w * report.kl;
        self.steps += 1;
        self.samples += rows;
    }

    fn finish(mut self) -> Self {
        if self.samples > 0 {
            let n = self.samples as f64;
            self.elbo /= n;
            self.recon /= n;
            self.kl /= n;
        }
        self
    }
}

fn non_finite(err: Error) -> Error {
    match err {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            term: format!("{op} in objective graph"),
        },
        other => other,
    }
}

/// One gradient-ascent step on the objective (descent on its negation).
pub fn train_step(
    config: &ModelConfig,
    params: &mut ParameterStore,
    optimizer: &mut Optimizer,
    batch: &MultimodalBatch,
    kind: ObjectiveKind,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<ElboReport> {
    let graph = Graph::new();
    let model = Model::bind(config, params, &graph, true);
    let out = elbo_graph(&graph, &model, batch, kind, cfg, rng).map_err(non_finite)?;
    let loss = out.total.neg()?;
    let grads = graph.backward(loss).map_err(|e| non_finite(e.into()))?;
    let mut grad_map = std::collections::BTreeMap::new();
    for (name, var) in &model.vars {
        let g = grads.get(*var).expect("parameter leaf");
        if !g.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: format!("gradient of {name}"),
            });
        }
        grad_map.insert(name.clone(), g);
    }
    optimizer.step(params.as_map_mut(), &grad_map)?;
    Ok(out.report)
}

/// Shuffles with `rng`, then steps through minibatches of `batch_size`
/// (the last one may be smaller).
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    config: &ModelConfig,
    params: &mut ParameterStore,
    optimizer: &mut Optimizer,
    dataset: &Dataset,
    kind: ObjectiveKind,
    cfg: &ObjectiveConfig,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<EpochMetrics> {
    if batch_size == 0 {
        return Err(Error::ConfigInvalid("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let mut metrics = EpochMetrics::default();
    for chunk in order.chunks(batch_size) {
        let batch = dataset.batch(chunk)?;
        let report = train_step(config, params, optimizer, &batch, kind, cfg, rng)?;
        metrics.add(&report, chunk.len());
    }
    Ok(metrics.finish())
}

/// Objective averaged over `dataset` in order, without updates.
pub fn evaluate(
    config: &ModelConfig,
    params: &ParameterStore,
    dataset: &Dataset,
    kind: ObjectiveKind,
    cfg: &ObjectiveConfig,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<EpochMetrics> {
    let mut metrics = EpochMetrics::default();
    let order: Vec<usize> = (0..dataset.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk)?;
        let report = super::elbo(config, params, &batch, kind, cfg, rng)?;
        metrics.add(&report, chunk.len());
    }
    Ok(metrics.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    fn toy() -> (ModelConfig, Dataset) {
        let c = ModelConfig::bernoulli(&[3, 2], 2, &[4]);
        let mut rng = seeded(5);
        let bits = |n: usize, rng: &mut Rng| -> Vec<f64> {
            (0..n).map(|_| f64::from(rand::Rng::random_bool(rng, 0.5))).collect()
        };
        let ds = Dataset::new(
            vec![
                Tensor::matrix(10, 3, bits(30, &mut rng)).unwrap(),
                Tensor::matrix(10, 2, bits(20, &mut rng)).unwrap(),
            ],
            vec![0; 10],
            1,
        )
        .unwrap();
        (c, ds)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (c, ds) = toy();
        let init = ParameterStore::init(&c, 1).unwrap();
        let mut p = init.clone();
        let mut opt = Optimizer::sgd(0.0);
        let cfg = ObjectiveConfig::default();
        train_epoch(&c, &mut p, &mut opt, &ds, ObjectiveKind::Mopoe, &cfg, 4, &mut seeded(2)).unwrap();
        assert_eq!(p, init);
    }

    #[test]
    fn epochs_are_deterministic() {
        let (c, ds) = toy();
        let run = || {
            let mut p = ParameterStore::init(&c, 1).unwrap();
            let mut opt = Optimizer::adam(1e-2);
            let cfg = ObjectiveConfig::default();
            let m = train_epoch(&c, &mut p, &mut opt, &ds, ObjectiveKind::Mopoe, &cfg, 4, &mut seeded(2))
                .unwrap();
            (m, p)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.steps, 3);
        assert_eq!(a.samples, 10);
    }
}
