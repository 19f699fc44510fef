use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prior::SolverOptions;
use crate::simkit::{ExposureKind, FinetuneHyper, HeadInit, HeadKind, Method};
use crate::trainer::TrainConfig;

/// How downstream class counts line up with the pre-trained model's bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrangement {
    /// Seeded random assignment of the long-tail profile to classes.
    Shuffled,
    /// Largest downstream count on the class with the largest estimated prior.
    Consistency,
    /// Largest downstream count on the class with the smallest estimated prior.
    Reverse,
    /// The same total budget spread evenly.
    Balance,
}

impl Arrangement {
    pub fn name(self) -> &'static str {
        match self {
            Arrangement::Shuffled => "shuffled",
            Arrangement::Consistency => "consistency",
            Arrangement::Reverse => "reverse",
            Arrangement::Balance => "balance",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSpec {
    /// Explicit per-class counts; overrides the long-tail profile.
    pub counts: Option<Vec<usize>>,
    pub n_max: usize,
    pub imbalance: f64,
    pub exposure: ExposureKind,
    pub train: TrainConfig,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            counts: None,
            n_max: 500,
            imbalance: 100.0,
            exposure: ExposureKind::Uniform,
            train: TrainConfig::pretrain(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamSpec {
    pub counts: Option<Vec<usize>>,
    pub n_max: usize,
    pub imbalance: f64,
    pub arrangement: Arrangement,
    /// Fraction by which downstream class means drift from pre-training.
    pub shift: f64,
    pub method: Method,
    pub head: HeadKind,
    pub finetune: FinetuneHyper,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DownstreamSpec {
    fn default() -> Self {
        Self {
            counts: None,
            n_max: 100,
            imbalance: 50.0,
            arrangement: Arrangement::Shuffled,
            shift: 0.1,
            method: Method::CrossEntropy,
            head: HeadKind::Linear,
            finetune: FinetuneHyper {
                train: TrainConfig {
                    epochs: 10,
                    ..TrainConfig::finetune()
                },
                head_init: HeadInit::ZeroShot,
            },
            val_per_class: 50,
            test_per_class: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub knn_k: usize,
    pub smooth_window: usize,
    /// Adapter used for the representation probes.
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            knn_k: 10,
            smooth_window: 9,
            adapter_rank: 4,
            adapter_alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfounderSpec {
    pub per_class: usize,
    pub test_per_class: usize,
    /// Share of block-0-only samples in the A and B sets.
    pub p_a: f64,
    pub p_b: f64,
}

impl Default for ConfounderSpec {
    fn default() -> Self {
        Self {
            per_class: 100,
            test_per_class: 100,
            p_a: 0.5,
            p_b: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub classes: usize,
    pub dim: usize,
    pub factors: usize,
    pub hidden: usize,
    pub signal: f64,
    pub noise: f64,
    /// Foundation models in the fusion sweep.
    pub models: usize,
    pub pretrain: PretrainSpec,
    pub downstream: DownstreamSpec,
    pub solver: SolverOptions,
    pub eval: EvalSpec,
    pub confounder: ConfounderSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            classes: 20,
            dim: 20,
            factors: 2,
            hidden: 32,
            signal: 4.0,
            noise: 1.0,
            models: 3,
            pretrain: PretrainSpec::default(),
            downstream: DownstreamSpec::default(),
            solver: SolverOptions::default(),
            eval: EvalSpec::default(),
            confounder: ConfounderSpec::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seed list is empty"));
        }
        if self.classes < 3 {
            return Err(config_err("need at least 3 classes for group splits"));
        }
        if self.factors == 0 || self.factors > self.dim || self.factors > 32 {
            return Err(config_err(format!(
                "factors must lie in 1..=min(dim, 32), got {}",
                self.factors
            )));
        }
        if self.hidden < 2 {
            return Err(config_err("hidden width must be at least 2"));
        }
        if !(self.signal > 0.0 && self.signal.is_finite()) || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err("signal must be positive and noise nonnegative"));
        }
        if self.models == 0 {
            return Err(config_err("model count must be at least 1"));
        }
        for (name, counts) in [("pretrain", &self.pretrain.counts), ("downstream", &self.downstream.counts)] {
            if let Some(c) = counts {
                if c.len() != self.classes {
                    return Err(config_err(format!(
                        "{name} counts have {} entries for {} classes",
                        c.len(),
                        self.classes
                    )));
                }
                if c.iter().all(|&v| v == 0) {
                    return Err(config_err(format!("{name} counts are all zero")));
                }
            }
        }
        for (name, n_max, imbalance) in [
            ("pretrain", self.pretrain.n_max, self.pretrain.imbalance),
            ("downstream", self.downstream.n_max, self.downstream.imbalance),
        ] {
            if n_max == 0 || !(imbalance >= 1.0) || !imbalance.is_finite() {
                return Err(config_err(format!("{name} needs n_max >= 1 and imbalance >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.downstream.shift) {
            return Err(config_err("downstream shift must lie in [0, 1]"));
        }
        if self.downstream.val_per_class == 0 || self.downstream.test_per_class == 0 {
            return Err(config_err("validation and test splits need at least one sample per class"));
        }
        if let HeadKind::Adapter { rank, .. } = self.downstream.head {
            if rank == 0 {
                return Err(config_err("adapter rank must be at least 1"));
            }
        }
        if self.eval.adapter_rank == 0 {
            return Err(config_err("adapter rank must be at least 1"));
        }
        if self.eval.knn_k == 0 || self.eval.knn_k > self.classes * self.downstream.val_per_class {
            return Err(config_err("knn k must lie between 1 and the gallery size"));
        }
        if self.eval.smooth_window == 0 || self.eval.smooth_window % 2 == 0 {
            return Err(config_err("smoothing window must be odd"));
        }
        for p in [self.confounder.p_a, self.confounder.p_b] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err("confounder skews must lie in [0, 1]"));
            }
        }
        if self.confounder.per_class == 0 || self.confounder.test_per_class == 0 {
            return Err(config_err("confounder sets need at least one sample per class"));
        }
        for t in [&self.pretrain.train, &self.downstream.finetune.train] {
            t.validate().map_err(|e| config_err(e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), so the
    /// digest ignores field order in the source file.
    pub fn digest(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let canonical = serde_json::to_string(&value)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}
