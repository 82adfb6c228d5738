use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{enumerate_subsets, FusionOptions, SubsetPolicy};
use crate::model::{ModelConfig, ParameterStore};

use super::classifier::Classifier;
use super::coherence::{conditional_coherence, joint_coherence};
use super::iwae::{iwae_log_likelihood, DEFAULT_IMPORTANCE_SAMPLES};
use super::probe::{linear_probe, PROBE_TRAIN_SAMPLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub importance_samples: usize,
    /// Prior draws for joint coherence; `0` uses the test-set size.
    pub joint_samples: usize,
    pub subset_policy: SubsetPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            importance_samples: DEFAULT_IMPORTANCE_SAMPLES,
            joint_samples: 0,
            subset_policy: SubsetPolicy::AllNonempty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetric {
    pub subset: String,
    pub size: usize,
    pub value: f64,
    /// Standard error when the metric is a sample mean.
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceEntry {
    pub target: usize,
    pub subset: String,
    pub size: usize,
    /// Whether `subset` contains `target` (self-reconstruction).
    pub includes_target: bool,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub probe: Vec<SubsetMetric>,
    pub conditional_coherence: Vec<CoherenceEntry>,
    pub joint_coherence: f64,
    pub iwae: Vec<SubsetMetric>,
    pub eval_seed: u64,
    pub probe_train_samples: usize,
    pub test_samples: usize,
    pub joint_samples: usize,
    pub importance_samples: usize,
}

fn mean_by_size<'a>(items: impl Iterator<Item = (usize, f64)> + 'a) -> Vec<(usize, f64)> {
    let mut sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for (size, v) in items {
        let e = sums.entry(size).or_default();
        e.0 += v;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

impl EvalReport {
    /// Probe accuracy averaged over subsets of each size, ascending.
    pub fn probe_by_size(&self) -> Vec<(usize, f64)> {
        mean_by_size(self.probe.iter().map(|p| (p.size, p.value)))
    }

    /// Conditional coherence averaged over targets and the subsets of each
    /// size that exclude the target, ascending.
    pub fn coherence_by_size(&self) -> Vec<(usize, f64)> {
        mean_by_size(
            self.conditional_coherence
                .iter()
                .filter(|c| !c.includes_target)
                .map(|c| (c.size, c.value)),
        )
    }

    pub fn probe_for(&self, subset: &str) -> Option<f64> {
        self.probe.iter().find(|p| p.subset == subset).map(|p| p.value)
    }
}

/// All three metrics for a trained model.
pub fn evaluate_model<C: Classifier>(
    config: &ModelConfig,
    params: &ParameterStore,
    fusion: &FusionOptions,
    train: &Dataset,
    test: &Dataset,
    classifiers: &[C],
    eval: &EvalConfig,
) -> Result<EvalReport> {
    if eval.importance_samples == 0 {
        return Err(Error::ConfigInvalid("importance samples must be at least 1".into()));
    }
    let m = config.num_modalities();
    let masks = enumerate_subsets(m, &eval.subset_policy)?;

    let probe = linear_probe(config, params, train, test, &masks, fusion)?
        .into_iter()
        .map(|(mask, value)| SubsetMetric {
            subset: mask.label(),
            size: mask.len(),
            value,
            se: None,
        })
        .collect();

    let mut conditional = Vec::with_capacity(m * masks.len());
    for target in 0..m {
        for &mask in &masks {
            let value =
                conditional_coherence(config, params, classifiers, test, mask, target, fusion, eval.seed)?;
            conditional.push(CoherenceEntry {
                target,
                subset: mask.label(),
                size: mask.len(),
                includes_target: mask.contains(target),
                value,
            });
        }
    }

    let joint_samples = if eval.joint_samples == 0 {
        test.len()
    } else {
        eval.joint_samples
    };
    let joint = joint_coherence(config, params, classifiers, joint_samples, eval.seed)?;

    let iwae = iwae_log_likelihood(config, params, test, &masks, eval.importance_samples, fusion, eval.seed)?
        .into_iter()
        .map(|(mask, value, se)| SubsetMetric {
            subset: mask.label(),
            size: mask.len(),
            value,
            se: Some(se),
        })
        .collect();

    Ok(EvalReport {
        probe,
        conditional_coherence: conditional,
        joint_coherence: joint,
        iwae,
        eval_seed: eval.seed,
        probe_train_samples: PROBE_TRAIN_SAMPLES,
        test_samples: test.len(),
        joint_samples,
        importance_samples: eval.importance_samples,
    })
}
