use serde::{Deserialize, Serialize};

use super::config::{Arrangement, ExperimentConfig};
use super::world::{build_foundation, World};
use crate::adjustment::{backdoor_fuse, gla_ensemble, softmax_rows, EnsembleMode};
use crate::distributions::{split_by_counts, Axis, ClassCounts, Group};
use crate::error::{Error, Result};
use crate::evaluation::{
    avg_accuracy_gap, confounder_gap, evaluate, knn_accuracy, ClassGroups, ConfounderReport, EvalReport,
};
use crate::par;
use crate::seeds;
use crate::simkit::{
    classifier_retrain, finetune, gen_class_means, make_exposure_policy, pretrain_foundation, sample_dataset,
    ExposureKind, FactorDataset, FineTunedModel, FoundationModel, HeadKind, Method,
};

/// Largest model count the fusion sweep enumerates subsets for.
pub const MAX_SWEEP_MODELS: usize = 6;

fn groups_for(world: &World, train: &FactorDataset) -> Result<ClassGroups> {
    ClassGroups::new(split_by_counts(&train.counts()?), world.p_groups.clone())
}

fn tune(cfg: &ExperimentConfig, world: &World, train: &FactorDataset, method: Method, head: HeadKind) -> Result<FineTunedModel> {
    finetune(
        &world.foundation,
        train,
        method,
        head,
        Some(world.q_hat()),
        &cfg.downstream.finetune,
        seeds::derive(world.seed, "finetune"),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub arrangement: Arrangement,
    pub counts: ClassCounts,
    pub report: EvalReport,
}

/// Fine-tunes the seed's foundation model under each arrangement of the
/// downstream counts and evaluates on the balanced test split.
pub fn scenario_seed(cfg: &ExperimentConfig, seed: u64, arrangements: &[Arrangement]) -> Result<Vec<ScenarioOutcome>> {
    let world = World::build(cfg, seed)?;
    arrangements
        .iter()
        .map(|&arrangement| {
            let train = world.downstream_train(cfg, arrangement)?;
            let model = tune(cfg, &world, &train, cfg.downstream.method, cfg.downstream.head)?;
            let groups = groups_for(&world, &train)?;
            let report = evaluate(&model.logits(&world.test.features)?, &world.test.labels, &groups)?;
            Ok(ScenarioOutcome {
                arrangement,
                counts: train.counts()?,
                report,
            })
        })
        .collect()
}

/// CE against LA fine-tuning on one long-tailed split: group reports,
/// representation probes and the per-class gap between the two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutcome {
    pub groups: ClassGroups,
    pub train_counts: Vec<usize>,
    pub q_hat: Vec<f64>,
    pub zero_shot: EvalReport,
    pub ce: EvalReport,
    pub la: EvalReport,
    pub knn_ce: EvalReport,
    pub knn_la: EvalReport,
    pub ce_la_gap: f64,
}

pub fn analysis_seed(cfg: &ExperimentConfig, seed: u64) -> Result<AnalysisOutcome> {
    let world = World::build(cfg, seed)?;
    let train = world.downstream_train(cfg, Arrangement::Shuffled)?;
    let groups = groups_for(&world, &train)?;
    let head = cfg.downstream.head;
    let adapter = HeadKind::Adapter {
        rank: cfg.eval.adapter_rank,
        alpha: cfg.eval.adapter_alpha,
    };
    let x = &world.test.features;
    let y = &world.test.labels;
    let ce = evaluate(&tune(cfg, &world, &train, Method::CrossEntropy, head)?.logits(x)?, y, &groups)?;
    let la = evaluate(&tune(cfg, &world, &train, Method::LogitAdjusted, head)?.logits(x)?, y, &groups)?;
    let knn = |method| -> Result<EvalReport> {
        let model = tune(cfg, &world, &train, method, adapter)?;
        knn_accuracy(
            &model.embed(&world.val.features)?,
            &world.val.labels,
            &model.embed(x)?,
            y,
            cfg.eval.knn_k,
            &groups,
        )
    };
    let knn_ce = knn(Method::CrossEntropy)?;
    let knn_la = knn(Method::LogitAdjusted)?;
    let ce_la_gap = avg_accuracy_gap(&ce.per_class_acc, &la.per_class_acc)?;
    Ok(AnalysisOutcome {
        zero_shot: evaluate(&world.zs_test, y, &groups)?,
        q_hat: world.q_hat().probs().to_vec(),
        train_counts: train.counts()?.counts().to_vec(),
        groups,
        ce,
        la,
        knn_ce,
        knn_la,
        ce_la_gap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub full: EvalReport,
    pub zs: EvalReport,
    pub ft: EvalReport,
    pub gla_train: EvalReport,
}

pub fn ablation_seed(cfg: &ExperimentConfig, seed: u64) -> Result<AblationOutcome> {
    let world = World::build(cfg, seed)?;
    let train = world.downstream_train(cfg, Arrangement::Shuffled)?;
    let groups = groups_for(&world, &train)?;
    let x = &world.test.features;
    let y = &world.test.labels;
    let ce = tune(cfg, &world, &train, Method::CrossEntropy, cfg.downstream.head)?;
    let ft_logits = ce.logits(x)?;
    let pi_s = train.counts()?.to_prior()?;
    let eval_mode = |mode| -> Result<EvalReport> {
        let logits = gla_ensemble(&world.zs_test, &ft_logits, world.q_hat(), &pi_s, mode)?;
        evaluate(&logits, y, &groups)
    };
    let gla = tune(cfg, &world, &train, Method::GlaTrain, cfg.downstream.head)?;
    let gla = classifier_retrain(&gla, &train, seeds::derive(seed, "retrain"))?;
    Ok(AblationOutcome {
        full: eval_mode(EnsembleMode::Full)?,
        zs: eval_mode(EnsembleMode::ZsOnly)?,
        ft: eval_mode(EnsembleMode::FtOnly)?,
        gla_train: evaluate(&gla.logits(x)?, y, &groups)?,
    })
}

/// Mean of several reports' metrics for one fusion size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub subsets: usize,
    pub overall: f64,
    /// Many/Medium/Few, `None` when a group is empty.
    pub d_groups: [Option<f64>; 3],
    pub p_groups: [Option<f64>; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub singles: Vec<EvalReport>,
    pub rows: Vec<SweepRow>,
}

fn subsets_of_size(m: usize, size: usize) -> Vec<Vec<usize>> {
    (0u32..1 << m)
        .filter(|mask| mask.count_ones() as usize == size)
        .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
        .collect()
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn msweep_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SweepOutcome> {
    let m = cfg.models;
    if m < 2 {
        return Err(Error::Config("the fusion sweep needs at least 2 models".into()));
    }
    if m > MAX_SWEEP_MODELS {
        return Err(Error::Config(format!("the fusion sweep supports at most {MAX_SWEEP_MODELS} models, got {m}")));
    }
    let pretrain_means = gen_class_means(cfg.classes, cfg.dim, cfg.factors, cfg.signal, seeds::derive(seed, "means"))?;
    let means = pretrain_means.shifted(cfg.downstream.shift, seeds::derive(seed, "shift"))?;
    let ids: Vec<usize> = (0..m).collect();
    let foundations = par::map_slice(&ids, |&id| {
        build_foundation(cfg, &pretrain_means, ExposureKind::PerModelTail { model_id: id }, seed, id)
    })
    .into_iter()
    .collect::<Result<Vec<FoundationModel>>>()?;
    let world = World::with_foundation(cfg, seed, pretrain_means, means, foundations[0].clone())?;
    let train = world.downstream_train(cfg, Arrangement::Shuffled)?;
    let groups = groups_for(&world, &train)?;
    let probs = par::map_slice(&foundations, |f| -> Result<_> {
        let model = finetune(
            f,
            &train,
            Method::LogitAdjusted,
            cfg.downstream.head,
            None,
            &cfg.downstream.finetune,
            seeds::derive_indexed(seed, "finetune", f.model_id as u64),
        )?;
        Ok(softmax_rows(&model.logits(&world.test.features)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let y = &world.test.labels;
    let singles = probs.iter().map(|p| evaluate(p, y, &groups)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(m);
    for size in 1..=m {
        let reports = subsets_of_size(m, size)
            .iter()
            .map(|subset| {
                let chosen: Vec<_> = subset.iter().map(|&i| probs[i].clone()).collect();
                evaluate(&backdoor_fuse(&chosen)?, y, &groups)
            })
            .collect::<Result<Vec<_>>>()?;
        let group_means = |axis| Group::ALL.map(|g| mean_opt(reports.iter().map(|r| r.group(axis, g))));
        rows.push(SweepRow {
            size,
            subsets: reports.len(),
            overall: reports.iter().map(|r| r.overall_acc).sum::<f64>() / reports.len() as f64,
            d_groups: group_means(Axis::Data),
            p_groups: group_means(Axis::Parameter),
        });
    }
    Ok(SweepOutcome { singles, rows })
}

pub fn confounder_seed(cfg: &ExperimentConfig, seed: u64) -> Result<ConfounderReport> {
    if cfg.factors != 2 {
        return Err(Error::Config(format!("the confounder probe needs exactly 2 factors, got {}", cfg.factors)));
    }
    let k = cfg.classes;
    let spec = &cfg.confounder;
    let means = gen_class_means(k, cfg.dim, 2, cfg.signal, seeds::derive(seed, "confounder-means"))?;
    let draw = |kind: ExposureKind, per_class: usize, tag: &str| -> Result<FactorDataset> {
        let policy = make_exposure_policy(kind, k, 2, None)?;
        sample_dataset(&means, &ClassCounts::new(vec![per_class; k])?, &policy, cfg.noise, seeds::derive(seed, tag))
    };
    let a_kind = ExposureKind::Skewed { p_major: spec.p_a };
    let b_kind = ExposureKind::Skewed { p_major: spec.p_b };
    let a_train = draw(a_kind, spec.per_class, "a-train")?;
    let b_train = draw(b_kind, spec.per_class, "b-train")?;
    let tests = [draw(a_kind, spec.test_per_class, "a-test")?, draw(b_kind, spec.test_per_class, "b-test")?];
    let model_a = pretrain_foundation(&a_train, cfg.hidden, &cfg.pretrain.train, seeds::derive(seed, "a-model"))?;
    let model_b = pretrain_foundation(&b_train, cfg.hidden, &cfg.pretrain.train, seeds::derive(seed, "b-model"))?;
    let mut acc_matrix = [[0.0; 2]; 2];
    for (i, model) in [&model_a, &model_b].into_iter().enumerate() {
        for (j, test) in tests.iter().enumerate() {
            let preds = model.network.logits(&test.features)?.argmax();
            let hits = preds.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
            acc_matrix[i][j] = hits as f64 / test.len() as f64;
        }
    }
    // Block 1 is the factor B's training set under-represents.
    let skewed = draw(ExposureKind::Skewed { p_major: 0.0 }, spec.test_per_class, "probe-skewed")?;
    let balanced = draw(ExposureKind::Full, spec.test_per_class, "probe-balanced")?;
    let gap = |probe: &FactorDataset| -> Result<Vec<f64>> {
        let do_probs = softmax_rows(&model_a.network.logits(&probe.features)?);
        let obs_probs = softmax_rows(&model_b.network.logits(&probe.features)?);
        Ok(confounder_gap(&do_probs, &obs_probs, &probe.labels)?.per_sample)
    };
    let skewed_gaps = gap(&skewed)?;
    let balanced_gaps = gap(&balanced)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(ConfounderReport {
        acc_matrix,
        skewed_gap: mean(&skewed_gaps),
        balanced_gap: mean(&balanced_gaps),
        per_sample_gap: skewed_gaps.into_iter().chain(balanced_gaps).collect(),
    })
}

/// Per-class test accuracy of a model trained from scratch on the
/// downstream split and of a fine-tuned foundation model, both listed in
/// descending order of the foundation model's estimated prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScratchOutcome {
    pub q_hat: Vec<f64>,
    pub scratch: EvalReport,
    pub finetuned: EvalReport,
    pub scratch_sorted: Vec<f64>,
    pub finetuned_sorted: Vec<f64>,
}

pub fn scratch_seed(cfg: &ExperimentConfig, seed: u64) -> Result<ScratchOutcome> {
    let world = World::build(cfg, seed)?;
    let train = world.downstream_train(cfg, Arrangement::Shuffled)?;
    let groups = groups_for(&world, &train)?;
    let x = &world.test.features;
    let y = &world.test.labels;
    let scratch_model = pretrain_foundation(&train, cfg.hidden, &cfg.pretrain.train, seeds::derive(seed, "scratch"))?;
    let scratch = evaluate(&scratch_model.network.logits(x)?, y, &groups)?;
    let finetuned = evaluate(
        &tune(cfg, &world, &train, cfg.downstream.method, cfg.downstream.head)?.logits(x)?,
        y,
        &groups,
    )?;
    let order = world.q_hat().descending_order();
    let sorted = |r: &EvalReport| order.iter().map(|&c| r.per_class_acc[c].unwrap_or(f64::NAN)).collect();
    Ok(ScratchOutcome {
        q_hat: world.q_hat().probs().to_vec(),
        scratch_sorted: sorted(&scratch),
        finetuned_sorted: sorted(&finetuned),
        scratch,
        finetuned,
    })
}
