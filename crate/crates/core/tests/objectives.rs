#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use mopoe_core::data::{Dataset, MultimodalBatch};
use mopoe_core::distributions::{recon_log_prob, DiagonalGaussian, LikelihoodSpec};
use mopoe_core::fusion::{uniform_mixture_log_prob, FusionOptions, SubsetMask, SubsetPolicy};
use mopoe_core::model::{
    load_checkpoint, save_checkpoint, Checkpoint, ModalityConfig, Model, ModelConfig, ParameterStore,
};
use mopoe_core::objectives::{
    elbo, elbo_graph, train_epoch, KlEstimator, ObjectiveConfig, ObjectiveKind,
};
use mopoe_core::oracle::verify::reduction_check;
use mopoe_core::oracle::{exact_log_marginal, standard_log_prob, LinearGaussianWorld};
use mopoe_core::rng::{seeded, Rng, RngState};
use mopoe_core::tensor::gradcheck::check_gradients;
use mopoe_core::tensor::{Graph, Optimizer, Tensor};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng as _;

const ALL_KINDS: [ObjectiveKind; 6] = [
    ObjectiveKind::Unimodal(0),
    ObjectiveKind::Poe,
    ObjectiveKind::Moe,
    ObjectiveKind::Mopoe,
    ObjectiveKind::SubsetSum,
    ObjectiveKind::Factorized,
];

struct Case {
    config: ModelConfig,
    params: ParameterStore,
    batch: MultimodalBatch,
    cfg: ObjectiveConfig,
}

/// Small random model mixing all three likelihood families, and a batch
/// with every modality present.
fn random_case(seed: u64, factorized: bool) -> Case {
    let mut rng = seeded(seed);
    let m = rng.random_range(1..=3);
    let hidden: Vec<usize> = (0..rng.random_range(0..=1)).map(|_| rng.random_range(2..=3)).collect();
    let rows = rng.random_range(1..=3);
    let mut modalities = Vec::with_capacity(m);
    let mut data = Vec::with_capacity(m);
    for _ in 0..m {
        let d = rng.random_range(1..=3);
        let (spec, values): (LikelihoodSpec, Vec<f64>) = match rng.random_range(0..3) {
            0 => (
                LikelihoodSpec::bernoulli(d).with_weight(rng.random_range(0.5..2.0)),
                (0..rows * d).map(|_| f64::from(rng.random_bool(0.5))).collect(),
            ),
            1 => (
                LikelihoodSpec::gaussian(d, rng.random_range(0.3..2.0)),
                (0..rows * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            ),
            _ => {
                let c = d + 1;
                let mut v = vec![0.0; rows * c];
                for r in 0..rows {
                    v[r * c + rng.random_range(0..c)] = 1.0;
                }
                (LikelihoodSpec::categorical(c), v)
            }
        };
        data.push(Some(Tensor::matrix(rows, spec.data_dims, values).unwrap()));
        modalities.push(ModalityConfig {
            hidden: hidden.clone(),
            likelihood: spec,
        });
    }
    let mut config = ModelConfig {
        latent_dim: rng.random_range(1..=2),
        modalities,
        factorized: false,
        style_dim: 0,
    };
    if factorized {
        config = config.with_style(rng.random_range(1..=2));
    }
    let params = ParameterStore::init(&config, rng.random()).unwrap();
    let batch = MultimodalBatch::new(data, None).unwrap();
    let estimator = if rng.random_bool(0.5) {
        KlEstimator::AvgSubsetKl
    } else {
        KlEstimator::MixtureMc
    };
    let cfg = ObjectiveConfig {
        subset_policy: SubsetPolicy::AllNonempty,
        beta: rng.random_range(0.0..3.0),
        kl_estimator: estimator,
        samples_per_component: rng.random_range(1..=2),
        factorized,
        fusion: FusionOptions {
            include_prior_component: rng.random_bool(0.3),
            poe_prior_expert: rng.random_bool(0.3),
            eval_mean: None,
        },
    };
    Case {
        config,
        params,
        batch,
        cfg,
    }
}

fn gradient_error(kind: ObjectiveKind, seed: u64) -> f64 {
    let case = random_case(seed, kind == ObjectiveKind::Factorized);
    let kind = match kind {
        ObjectiveKind::Unimodal(_) => ObjectiveKind::Unimodal(seed as usize % case.config.num_modalities()),
        k => k,
    };
    let noise = seed ^ 0x00c0_ffee;
    let report = check_gradients(case.params.as_map(), 1e-5, |g, vars| {
        let model = Model::new(&case.config, vars.clone());
        let out = elbo_graph(g, &model, &case.batch, kind, &case.cfg, &mut seeded(noise)).unwrap();
        Ok(out.total)
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn every_objective_matches_finite_differences() {
    for kind in ALL_KINDS {
        let worst = (0..100u64)
            .map(|i| gradient_error(kind, 1000 * i + 7))
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "{kind}: relative error {worst}");
    }
}

#[test]
fn special_cases_reduce_bit_identically() {
    let check = reduction_check(20, 5).unwrap();
    assert!(check.passed(), "{check:?}");
}

#[test]
fn subset_sum_is_mopoe_with_closed_form_kl() {
    for seed in 0..20 {
        let case = random_case(seed, false);
        let cfg = case.cfg.clone().with_estimator(KlEstimator::AvgSubsetKl);
        let run = |kind| {
            elbo(&case.config, &case.params, &case.batch, kind, &cfg, &mut seeded(seed))
                .unwrap()
                .total
        };
        assert_eq!(run(ObjectiveKind::SubsetSum).to_bits(), run(ObjectiveKind::Mopoe).to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn total_is_affine_in_beta(seed in 0u64..1 << 40, kind_at in 0usize..6, b1 in 0.0f64..20.0, b2 in 0.0f64..20.0) {
        let kind = ALL_KINDS[kind_at];
        let case = random_case(seed, kind == ObjectiveKind::Factorized);
        let run = |beta: f64| {
            let cfg = case.cfg.clone().with_beta(beta);
            elbo(&case.config, &case.params, &case.batch, kind, &cfg, &mut seeded(seed)).unwrap()
        };
        let (r1, r2) = (run(b1), run(b2));
        prop_assert_eq!(r1.kl.to_bits(), r2.kl.to_bits());
        prop_assert_eq!(r1.recon_total().to_bits(), r2.recon_total().to_bits());
        let slope = (r1.total - r2.total) - (b2 - b1) * r1.kl;
        prop_assert!(slope.abs() <= 1e-9 * (1.0 + r1.total.abs() + r2.total.abs()), "{}", slope);
        let zero = run(0.0);
        prop_assert!((zero.total - zero.recon_total()).abs() <= 1e-9 * (1.0 + zero.total.abs()));
    }

    #[test]
    fn absent_modalities_are_never_read(seed in 0u64..1 << 40, present_bits in 1u32..8, kind_at in 0usize..6) {
        let kind = ALL_KINDS[kind_at];
        let case = random_case(seed, kind == ObjectiveKind::Factorized);
        let m = case.config.num_modalities();
        let bits = present_bits & ((1 << m) - 1);
        prop_assume!(bits != 0);
        let keep = SubsetMask::new(bits, m).unwrap();
        let batch = case.batch.restricted(keep).unwrap();
        let kind = match kind {
            ObjectiveKind::Unimodal(_) => ObjectiveKind::Unimodal(keep.members()[0]),
            k => k,
        };
        batch.reset_reads();
        let report = elbo(&case.config, &case.params, &batch, kind, &case.cfg, &mut seeded(seed)).unwrap();
        prop_assert!(report.total.is_finite());
        prop_assert_eq!(batch.reads() & !bits, 0);
        prop_assert!(batch.reads() != 0);
        if let ObjectiveKind::Unimodal(j) = kind {
            if let Some(absent) = (0..m).find(|&i| !keep.contains(i)) {
                let err = elbo(&case.config, &case.params, &batch, ObjectiveKind::Unimodal(absent), &case.cfg, &mut seeded(seed));
                prop_assert!(err.is_err());
                prop_assert_eq!(batch.reads() & (1 << absent), 0, "{}", j);
            }
        }
    }
}

/// Linear Gaussian model that encodes each modality to its exact likelihood
/// factor and decodes with the true loadings, for a diagonal world.
fn exact_linear_model(world: &LinearGaussianWorld) -> (ModelConfig, ParameterStore) {
    let d = world.latent_dim;
    let config = ModelConfig {
        latent_dim: d,
        modalities: world
            .modalities
            .iter()
            .map(|m| ModalityConfig {
                hidden: vec![],
                likelihood: LikelihoodSpec::gaussian(d, m.noise_var),
            })
            .collect(),
        factorized: false,
        style_dim: 0,
    };
    let mut params = BTreeMap::new();
    for (j, m) in world.modalities.iter().enumerate() {
        let mut enc_w = vec![0.0; d * 2 * d];
        let mut enc_b = vec![0.0; 2 * d];
        let mut dec_w = vec![0.0; d * d];
        for i in 0..d {
            let a = m.loading[(i, i)];
            enc_w[i * 2 * d + i] = 1.0 / a;
            enc_b[d + i] = (m.noise_var / (a * a)).ln();
            dec_w[i * d + i] = a;
        }
        params.insert(format!("enc.{j}.0.weight"), Tensor::matrix(d, 2 * d, enc_w).unwrap());
        params.insert(format!("enc.{j}.0.bias"), Tensor::vector(enc_b));
        params.insert(format!("dec.{j}.0.weight"), Tensor::matrix(d, d, dec_w).unwrap());
        params.insert(format!("dec.{j}.0.bias"), Tensor::zeros(vec![d]));
    }
    (config, ParameterStore::from_map(params))
}

fn world_batch(world: &LinearGaussianWorld, rows: usize, rng: &mut Rng) -> (MultimodalBatch, Vec<Vec<DVector<f64>>>) {
    let samples: Vec<Vec<DVector<f64>>> = (0..rows).map(|_| world.sample(rng).1).collect();
    let data = (0..world.num_modalities())
        .map(|j| {
            let d = world.modalities[j].loading.nrows();
            let flat = samples.iter().flat_map(|xs| xs[j].iter().copied()).collect();
            Some(Tensor::matrix(rows, d, flat).unwrap())
        })
        .collect();
    (MultimodalBatch::new(data, None).unwrap(), samples)
}

#[test]
fn exact_encoder_attains_the_log_marginal() {
    for seed in 0..20u64 {
        let mut rng = seeded(seed);
        let d = rng.random_range(1..=2);
        let m = rng.random_range(1..=3);
        let world = LinearGaussianWorld::random_diagonal(&mut rng, d, m);
        let (config, params) = exact_linear_model(&world);
        let (batch, samples) = world_batch(&world, 8, &mut rng);
        let exact = samples.iter().map(|xs| exact_log_marginal(&world, xs).unwrap()).sum::<f64>() / 8.0;
        let cfg = ObjectiveConfig {
            samples_per_component: 4,
            fusion: FusionOptions {
                include_prior_component: false,
                poe_prior_expert: true,
                ..Default::default()
            },
            ..Default::default()
        };
        // log p(X, z) - log q(z) is constant under the exact posterior, so
        // the log-ratio estimator has no Monte Carlo error at all
        let cfg = cfg.with_estimator(KlEstimator::MixtureMc);
        let report = elbo(&config, &params, &batch, ObjectiveKind::Poe, &cfg, &mut rng).unwrap();
        assert!((report.total - exact).abs() < 1e-9, "{} vs {exact}", report.total);
        assert!(report.se.unwrap() < 1e-9);
        // the closed-form KL leaves reconstruction noise, unbiased around log p(X)
        let cfg = cfg.with_estimator(KlEstimator::AvgSubsetKl).with_samples(400);
        let report = elbo(&config, &params, &batch, ObjectiveKind::Poe, &cfg, &mut rng).unwrap();
        let se = report.se.unwrap();
        assert!((report.total - exact).abs() < 4.0 * se, "{} vs {exact} (se {se})", report.total);
    }
}

/// Recomputes the objective from the sampled latents with scalar code.
#[test]
fn mixture_estimator_matches_scalar_recomputation() {
    for seed in 0..10u64 {
        let mut rng = seeded(100 + seed);
        let world = LinearGaussianWorld::random_diagonal(&mut rng, 2, 3);
        let (config, mut params) = exact_linear_model(&world);
        // perturb so the subset posteriors are not exact
        for t in params.as_map_mut().values_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let (batch, samples) = world_batch(&world, 3, &mut rng);
        for (kind, estimator) in [
            (ObjectiveKind::Moe, KlEstimator::MixtureMc),
            (ObjectiveKind::Mopoe, KlEstimator::MixtureMc),
            (ObjectiveKind::Mopoe, KlEstimator::AvgSubsetKl),
        ] {
            let cfg = ObjectiveConfig::default().with_estimator(estimator).with_beta(1.7).with_samples(2);
            let graph = Graph::new();
            let model = Model::bind(&config, &params, &graph, false);
            let out = elbo_graph(&graph, &model, &batch, kind, &cfg, &mut seeded(seed)).unwrap();
            let mu = out.components.mu.value();
            let lv = out.components.log_var.value();
            let z = out.z.value();
            let (k, s, b, l) = (mu.shape()[0], cfg.samples_per_component, 3, 2);
            let comp = |ki: usize, bi: usize| {
                let at = (ki * b + bi) * l;
                DiagonalGaussian::new(mu.data()[at..at + l].to_vec(), lv.data()[at..at + l].to_vec()).unwrap()
            };
            let mut total = 0.0;
            for bi in 0..b {
                let comps: Vec<DiagonalGaussian> = (0..k).map(|ki| comp(ki, bi)).collect();
                for (ki, q) in comps.iter().enumerate() {
                    for si in 0..s {
                        let at = ((ki * s + si) * b + bi) * l;
                        let zv = &z.data()[at..at + l];
                        let mut recon = 0.0;
                        for (j, mc) in config.modalities.iter().enumerate() {
                            let w = params.get(&format!("dec.{j}.0.weight")).unwrap().data();
                            let bias = params.get(&format!("dec.{j}.0.bias")).unwrap().data();
                            let mean: Vec<f64> =
                                (0..l).map(|o| bias[o] + (0..l).map(|i| zv[i] * w[i * l + o]).sum::<f64>()).collect();
                            recon += recon_log_prob(&mc.likelihood, &mean, samples[bi][j].as_slice()).unwrap();
                        }
                        let kl = match estimator {
                            KlEstimator::AvgSubsetKl => q.kl_to_standard_normal(),
                            KlEstimator::MixtureMc => {
                                uniform_mixture_log_prob(&comps, zv).unwrap() - standard_log_prob(zv)
                            }
                        };
                        total += recon - cfg.beta * kl;
                    }
                }
            }
            total /= (k * s * b) as f64;
            assert!((out.report.total - total).abs() < 1e-10, "{kind}: {} vs {total}", out.report.total);
        }
    }
}

fn world_dataset(world: &LinearGaussianWorld, n: usize, rng: &mut Rng) -> Dataset {
    let (batch, _) = world_batch(world, n, rng);
    let modalities = (0..world.num_modalities()).map(|j| batch.observed(j).unwrap().clone()).collect();
    Dataset::new(modalities, vec![0; n], 1).unwrap()
}

#[test]
fn training_recovers_the_log_marginal_in_one_dimension() {
    let mut rng = seeded(3);
    let world = LinearGaussianWorld::random_diagonal(&mut rng, 1, 2);
    let train = world_dataset(&world, 400, &mut rng);
    let test = world_dataset(&world, 400, &mut rng);
    let (config, _) = exact_linear_model(&world);
    let mut params = ParameterStore::init(&config, 9).unwrap();
    let cfg = ObjectiveConfig {
        fusion: FusionOptions {
            include_prior_component: false,
            poe_prior_expert: true,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut opt = Optimizer::adam(0.02);
    for _ in 0..150 {
        train_epoch(&config, &mut params, &mut opt, &train, ObjectiveKind::Poe, &cfg, 50, &mut rng).unwrap();
    }
    let exact = (0..test.len())
        .map(|i| {
            let xs: Vec<DVector<f64>> = test.modalities.iter().map(|t| DVector::from_row_slice(t.row(i))).collect();
            exact_log_marginal(&world, &xs).unwrap()
        })
        .sum::<f64>()
        / test.len() as f64;
    let batch = test.batch(&(0..test.len()).collect::<Vec<_>>()).unwrap();
    let fitted = elbo(&config, &params, &batch, ObjectiveKind::Poe, &cfg.with_samples(50), &mut rng)
        .unwrap()
        .total;
    assert!(fitted <= exact + 0.02, "{fitted} above {exact}");
    assert!(exact - fitted < 0.1, "gap {}", exact - fitted);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let case = random_case(42, false);
    let rows = case.batch.batch_size();
    let data = (0..case.config.num_modalities())
        .map(|j| case.batch.observed(j).unwrap().clone())
        .collect();
    let ds = Dataset::new(data, vec![0; rows], 1).unwrap();
    let kind = ObjectiveKind::Mopoe;
    let step = |params: &mut ParameterStore, opt: &mut Optimizer, rng: &mut Rng| {
        train_epoch(&case.config, params, opt, &ds, kind, &case.cfg, 2, rng).unwrap();
    };

    let mut straight = case.params.clone();
    let mut opt = Optimizer::adam(0.01);
    let mut rng = seeded(1);
    for _ in 0..4 {
        step(&mut straight, &mut opt, &mut rng);
    }

    let mut first = case.params.clone();
    let mut opt = Optimizer::adam(0.01);
    let mut rng = seeded(1);
    for _ in 0..2 {
        step(&mut first, &mut opt, &mut rng);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let ckpt = Checkpoint {
        config: case.config.clone(),
        params: first,
        optimizer: Some(opt),
        rng: Some(RngState::capture(&rng)),
        step: 0,
        epoch: 2,
    };
    save_checkpoint(&path, &ckpt).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let mut resumed = loaded.params;
    let mut opt = loaded.optimizer.unwrap();
    let mut rng = loaded.rng.unwrap().restore().unwrap();
    for _ in 0..2 {
        step(&mut resumed, &mut opt, &mut rng);
    }
    assert_eq!(resumed, straight);
}
