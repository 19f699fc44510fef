//! Desk-scale simulation: factor-structured class data, long-tailed
//! pre-training and miniature foundation models.
//!
//! A sample of class `y` carries the class mean on each exposed factor
//! block and isotropic noise everywhere. Which blocks are exposed is the
//! confounder; the residual noise plays the inaccessible factor.

mod data;
mod model;

pub use data::{
    gen_class_means, make_exposure_policy, sample_dataset, BlockMap, ClassMeans, ExposureKind, ExposurePolicy,
    FactorDataset,
};
pub use model::{
    classifier_retrain, finetune, pretrain_foundation, zero_shot_logits, FineTunedModel, FinetuneHyper,
    FoundationModel, HeadInit, HeadKind, Method,
};
