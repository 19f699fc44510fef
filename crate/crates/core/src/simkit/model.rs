use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::FactorDataset;
use crate::adjustment::LogitMatrix;
use crate::distributions::LabelPrior;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seeds;
use crate::trainer::{train, Adapter, LossKind, Network, TrainConfig, Trainable};

/// Encoder + classifier trained on a (long-tailed) pre-training set.
///
/// Pre-training and downstream share one label space, so the classifier
/// doubles as the zero-shot head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundationModel {
    pub network: Network,
    /// Empirical label prior of the pre-training data.
    pub pretrain_prior: LabelPrior,
    /// K×F: fraction of each class's pre-training samples exposing each block.
    pub factor_bias: Matrix,
    pub model_id: usize,
}

impl FoundationModel {
    /// SHA-256 over the encoder weights' bit patterns.
    pub fn encoder_digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.network.encoder_w.as_slice().iter().chain(&self.network.encoder_b) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Trains encoder and classifier jointly with cross-entropy.
pub fn pretrain_foundation(data: &FactorDataset, h: usize, hyper: &TrainConfig, seed: u64) -> Result<FoundationModel> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.validate()?;
    let init = Network::init(data.features.cols(), h, data.classes, seeds::derive(seed, "pretrain-init"))?;
    let cfg = TrainConfig {
        seed: seeds::derive(seed, "pretrain-order"),
        ..hyper.clone()
    };
    let (network, _) = train(&init, &data.features, &data.labels, &LossKind::CrossEntropy, Trainable::ALL, &cfg)?;

    let f = data.factors();
    let counts = data.counts()?;
    let mut factor_bias = Matrix::zeros(data.classes, f);
    for n in 0..data.len() {
        for b in 0..f {
            if data.exposed(n, b) {
                let c = data.labels[n];
                factor_bias.set(c, b, factor_bias.get(c, b) + 1.0);
            }
        }
    }
    for (c, &count) in counts.counts().iter().enumerate() {
        if count > 0 {
            factor_bias.row_mut(c).iter_mut().for_each(|v| *v /= count as f64);
        }
    }
    Ok(FoundationModel {
        network,
        pretrain_prior: counts.to_prior()?,
        factor_bias,
        model_id: 0,
    })
}

/// Zero-shot logits: the pre-trained classifier on the encoder output.
pub fn zero_shot_logits(model: &FoundationModel, features: &Matrix) -> Result<LogitMatrix> {
    model.network.logits(features)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "la")]
    LogitAdjusted,
    #[serde(rename = "gla-train")]
    GlaTrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Linear head on the frozen encoder.
    Linear,
    /// Linear head plus a rank-`rank` adapter on the encoder.
    Adapter { rank: usize, alpha: f64 },
}

/// Starting point of a fine-tuned head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadInit {
    /// Copy of the zero-shot classifier.
    ZeroShot,
    /// Fresh seeded weights, zero offsets.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneHyper {
    pub train: TrainConfig,
    pub head_init: HeadInit,
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        Self {
            train: TrainConfig::finetune(),
            head_init: HeadInit::ZeroShot,
        }
    }
}

/// Frozen foundation encoder with a trained head and optional adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTunedModel {
    pub base: FoundationModel,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    pub adapter: Option<Adapter>,
    pub method: Method,
    pub head_kind: HeadKind,
    /// Label prior of the fine-tuning data.
    pub training_prior: LabelPrior,
    pub hyper: FinetuneHyper,
    /// Whether the head was re-trained with logit adjustment after fine-tuning.
    pub head_retrained: bool,
    pub loss_trace: Vec<f64>,
}

impl FineTunedModel {
    pub fn network(&self) -> Network {
        Network {
            encoder_w: self.base.network.encoder_w.clone(),
            encoder_b: self.base.network.encoder_b.clone(),
            adapter: self.adapter.clone(),
            head_w: self.head_w.clone(),
            head_b: self.head_b.clone(),
        }
    }

    pub fn logits(&self, features: &Matrix) -> Result<LogitMatrix> {
        self.network().logits(features)
    }

    /// Encoder output, including the adapter when present.
    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        self.network().embed(features)
    }
}

fn initial_head(base: &FoundationModel, init: HeadInit, seed: u64) -> (Matrix, Vec<f64>) {
    match init {
        HeadInit::ZeroShot => (base.network.head_w.clone(), base.network.head_b.clone()),
        HeadInit::Random => Network::random_head(
            base.network.hidden_dim(),
            base.network.classes(),
            seeds::derive(seed, "head-init"),
        ),
    }
}

/// Fine-tunes a head (and optionally an adapter) on frozen foundation weights.
pub fn finetune(
    base: &FoundationModel,
    data: &FactorDataset,
    method: Method,
    head_kind: HeadKind,
    q_hat: Option<&LabelPrior>,
    hyper: &FinetuneHyper,
    seed: u64,
) -> Result<FineTunedModel> {
    data.validate()?;
    if data.classes != base.network.classes() {
        return Err(Error::shape(base.network.classes(), data.classes));
    }
    let pi_s = data.counts()?.to_prior()?;
    let loss = match method {
        Method::CrossEntropy => LossKind::CrossEntropy,
        Method::LogitAdjusted => LossKind::LogitAdjusted { pi_s: pi_s.clone() },
        Method::GlaTrain => {
            let q = q_hat.ok_or_else(|| {
                Error::InvalidArgument("GLA-Train fine-tuning requires an estimated pre-training prior".into())
            })?;
            LossKind::GlaTrain {
                pi_s: pi_s.clone(),
                q_hat: q.clone(),
            }
        }
    };
    let mut net = base.network.clone();
    let (head_w, head_b) = initial_head(base, hyper.head_init, seed);
    net.head_w = head_w;
    net.head_b = head_b;
    let mask = match head_kind {
        HeadKind::Linear => Trainable::HEAD,
        HeadKind::Adapter { rank, alpha } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "adapter-init"));
            net.adapter = Some(Adapter::init(net.input_dim(), net.hidden_dim(), rank, alpha, &mut rng)?);
            Trainable::ADAPTER_AND_HEAD
        }
    };
    let cfg = TrainConfig {
        seed: seeds::derive(seed, "finetune-order"),
        ..hyper.train.clone()
    };
    let (trained, loss_trace) = train(&net, &data.features, &data.labels, &loss, mask, &cfg)?;
    Ok(FineTunedModel {
        base: base.clone(),
        head_w: trained.head_w,
        head_b: trained.head_b,
        adapter: trained.adapter,
        method,
        head_kind,
        training_prior: pi_s,
        hyper: hyper.clone(),
        head_retrained: false,
        loss_trace,
    })
}

/// Decoupled classifier re-training: resets the head to its fine-tuning
/// initialization and trains only the head with the logit-adjusted loss.
pub fn classifier_retrain(model: &FineTunedModel, data: &FactorDataset, seed: u64) -> Result<FineTunedModel> {
    data.validate()?;
    let pi_s = data.counts()?.to_prior()?;
    let mut net = model.network();
    let (head_w, head_b) = initial_head(&model.base, model.hyper.head_init, seed);
    net.head_w = head_w;
    net.head_b = head_b;
    let cfg = TrainConfig {
        seed: seeds::derive(seed, "finetune-order"),
        ..model.hyper.train.clone()
    };
    let loss = LossKind::LogitAdjusted { pi_s: pi_s.clone() };
    let (trained, loss_trace) = train(&net, &data.features, &data.labels, &loss, Trainable::HEAD, &cfg)?;
    Ok(FineTunedModel {
        head_w: trained.head_w,
        head_b: trained.head_b,
        training_prior: pi_s,
        head_retrained: true,
        loss_trace,
        ..model.clone()
    })
}
