use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Arrangement, ExperimentConfig};
use crate::adjustment::LogitMatrix;
use crate::distributions::{make_longtail_counts, split_by_prior, ClassCounts, GroupAssignment, LabelPrior, DEFAULT_FRACTIONS};
use crate::error::Result;
use crate::prior::{estimate_prior, PriorEstimate, SolverOptions};
use crate::seeds;
use crate::simkit::{
    gen_class_means, make_exposure_policy, pretrain_foundation, sample_dataset, zero_shot_logits, ClassMeans,
    ExposureKind, FactorDataset, FoundationModel,
};

/// Everything a seed's pipelines share: generative means, one foundation
/// model, balanced downstream validation/test splits and the prior
/// estimated from zero-shot validation logits.
#[derive(Clone, Debug)]
pub struct World {
    pub seed: u64,
    pub pretrain_means: ClassMeans,
    /// Downstream means, possibly drifted from the pre-training ones.
    pub means: ClassMeans,
    pub foundation: FoundationModel,
    pub val: FactorDataset,
    pub test: FactorDataset,
    pub zs_test: LogitMatrix,
    pub prior: PriorEstimate,
    pub p_groups: GroupAssignment,
}

pub fn pretrain_counts(cfg: &ExperimentConfig) -> Result<ClassCounts> {
    match &cfg.pretrain.counts {
        Some(c) => ClassCounts::new(c.clone()),
        None => make_longtail_counts(cfg.classes, cfg.pretrain.n_max, cfg.pretrain.imbalance),
    }
}

/// Samples a pre-training set and trains foundation model `model_id` on it.
pub fn build_foundation(
    cfg: &ExperimentConfig,
    means: &ClassMeans,
    exposure: ExposureKind,
    seed: u64,
    model_id: usize,
) -> Result<FoundationModel> {
    let counts = pretrain_counts(cfg)?;
    let groups = split_by_prior(&counts.to_prior()?, DEFAULT_FRACTIONS)?;
    let policy = make_exposure_policy(exposure, cfg.classes, cfg.factors, Some(&groups))?;
    let id = model_id as u64;
    let data = sample_dataset(means, &counts, &policy, cfg.noise, seeds::derive_indexed(seed, "pretrain-data", id))?;
    let mut model = pretrain_foundation(&data, cfg.hidden, &cfg.pretrain.train, seeds::derive_indexed(seed, "pretrain", id))?;
    model.model_id = model_id;
    Ok(model)
}

pub fn balanced_split(cfg: &ExperimentConfig, means: &ClassMeans, per_class: usize, seed: u64) -> Result<FactorDataset> {
    let counts = ClassCounts::new(vec![per_class; cfg.classes])?;
    let policy = make_exposure_policy(ExposureKind::Uniform, cfg.classes, cfg.factors, None)?;
    sample_dataset(means, &counts, &policy, cfg.noise, seed)
}

pub fn estimate_from_zero_shot(
    cfg: &ExperimentConfig,
    model: &FoundationModel,
    val: &FactorDataset,
    seed: u64,
) -> Result<PriorEstimate> {
    let zs = zero_shot_logits(model, &val.features)?;
    let opts = SolverOptions {
        seed: seeds::derive(seed, "prior"),
        ..cfg.solver.clone()
    };
    estimate_prior(&zs, &val.labels, &opts)
}

impl World {
    pub fn build(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let pretrain_means = gen_class_means(cfg.classes, cfg.dim, cfg.factors, cfg.signal, seeds::derive(seed, "means"))?;
        let means = pretrain_means.shifted(cfg.downstream.shift, seeds::derive(seed, "shift"))?;
        let foundation = build_foundation(cfg, &pretrain_means, cfg.pretrain.exposure, seed, 0)?;
        Self::with_foundation(cfg, seed, pretrain_means, means, foundation)
    }

    pub fn with_foundation(
        cfg: &ExperimentConfig,
        seed: u64,
        pretrain_means: ClassMeans,
        means: ClassMeans,
        foundation: FoundationModel,
    ) -> Result<Self> {
        let val = balanced_split(cfg, &means, cfg.downstream.val_per_class, seeds::derive(seed, "val"))?;
        let test = balanced_split(cfg, &means, cfg.downstream.test_per_class, seeds::derive(seed, "test"))?;
        let prior = estimate_from_zero_shot(cfg, &foundation, &val, seed)?;
        let p_groups = split_by_prior(&prior.q_hat, DEFAULT_FRACTIONS)?;
        let zs_test = zero_shot_logits(&foundation, &test.features)?;
        Ok(Self {
            seed,
            pretrain_means,
            means,
            foundation,
            val,
            test,
            zs_test,
            prior,
            p_groups,
        })
    }

    pub fn q_hat(&self) -> &LabelPrior {
        &self.prior.q_hat
    }

    /// Downstream training counts for an arrangement.
    pub fn downstream_counts(&self, cfg: &ExperimentConfig, arrangement: Arrangement) -> Result<ClassCounts> {
        downstream_counts(cfg, self.q_hat(), arrangement, self.seed)
    }

    pub fn downstream_train(&self, cfg: &ExperimentConfig, arrangement: Arrangement) -> Result<FactorDataset> {
        let counts = self.downstream_counts(cfg, arrangement)?;
        let policy = make_exposure_policy(ExposureKind::Uniform, cfg.classes, cfg.factors, None)?;
        sample_dataset(&self.means, &counts, &policy, cfg.noise, seeds::derive(self.seed, "downstream-train"))
    }
}

/// Builds downstream counts from the long-tail profile (largest first) and
/// places them on classes according to `arrangement`.
pub fn downstream_counts(
    cfg: &ExperimentConfig,
    q_hat: &LabelPrior,
    arrangement: Arrangement,
    seed: u64,
) -> Result<ClassCounts> {
    let k = cfg.classes;
    let profile = match &cfg.downstream.counts {
        Some(c) => {
            let mut sorted = c.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            ClassCounts::new(sorted)?
        }
        None => make_longtail_counts(k, cfg.downstream.n_max, cfg.downstream.imbalance)?,
    };
    match arrangement {
        Arrangement::Shuffled => {
            if cfg.downstream.counts.is_some() {
                // Explicit counts are taken as given.
                return ClassCounts::new(cfg.downstream.counts.clone().unwrap_or_default());
            }
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, "arrangement")));
            profile.assign_to(&order)
        }
        Arrangement::Consistency => profile.assign_to(&q_hat.descending_order()),
        Arrangement::Reverse => {
            let mut order = q_hat.descending_order();
            order.reverse();
            profile.assign_to(&order)
        }
        Arrangement::Balance => ClassCounts::new(vec![profile.total() / k; k]),
    }
}
