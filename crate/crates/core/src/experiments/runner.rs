use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Arrangement, ExperimentConfig};
use super::pipelines::{
    ablation_seed, analysis_seed, confounder_seed, msweep_seed, scenario_seed, scratch_seed, AblationOutcome,
    AnalysisOutcome, ScenarioOutcome, ScratchOutcome, SweepOutcome,
};
use crate::distributions::{Axis, ClassCounts, Group};
use crate::error::{Error, Result};
use crate::evaluation::{export_sorted_curve, rank_slope, ConfounderReport, EvalReport, OrderKey};
use crate::io::{fmt_f64, read_json, write_json, Table};
use crate::par;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    Partial,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    /// Paths relative to the run directory.
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub artifact_version: String,
    pub seeds: Vec<SeedRecord>,
    pub summary_files: Vec<String>,
    pub wall_clock_secs: f64,
    pub status: RunStatus,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    /// Every file the manifest lists, relative to the run directory.
    pub fn files(&self) -> impl Iterator<Item = &String> {
        self.seeds.iter().flat_map(|s| &s.files).chain(&self.summary_files)
    }
}

/// A finished run: its manifest and the in-memory per-seed outcomes.
#[derive(Debug)]
pub struct RunOutput<T> {
    pub manifest: RunManifest,
    pub outcomes: Vec<(u64, Result<T>)>,
}

impl<T> RunOutput<T> {
    pub fn successes(&self) -> Vec<(u64, &T)> {
        self.outcomes
            .iter()
            .filter_map(|(s, r)| r.as_ref().ok().map(|t| (*s, t)))
            .collect()
    }
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) if !x.is_nan() => fmt_f64(x),
        _ => "NA".into(),
    }
}

pub const REPORT_COLUMNS: [&str; 17] = [
    "overall", "d_many", "d_medium", "d_few", "p_many", "p_medium", "p_few", "cell_many_many", "cell_many_medium",
    "cell_many_few", "cell_medium_many", "cell_medium_medium", "cell_medium_few", "cell_few_many",
    "cell_few_medium", "cell_few_few",
    "n",
];

pub fn report_table(key: &str) -> Table {
    Table::new(std::iter::once(key).chain(REPORT_COLUMNS))
}

pub fn report_row(name: &str, r: &EvalReport) -> Vec<String> {
    let mut row = vec![name.to_string(), fmt_f64(r.overall_acc)];
    for axis in [Axis::Data, Axis::Parameter] {
        row.extend(Group::ALL.map(|g| opt(r.group(axis, g))));
    }
    for d in Group::ALL {
        row.extend(Group::ALL.map(|p| opt(r.cell(d, p))));
    }
    row.push(r.n_per_class.iter().sum::<usize>().to_string());
    row
}

fn mean_sd(vals: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = vals.len();
    if n == 0 {
        return (None, None);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    (Some(mean), sd)
}

/// Seed-mean and sample standard deviation of every numeric cell, keyed by
/// the first column. Rows appear in first-seen order.
pub fn summarize(tables: &[Table]) -> Table {
    let mut out = Table::new([
        tables.first().map(|t| t.header[0].as_str()).unwrap_or("key"),
        "metric",
        "mean",
        "sd",
        "seeds",
    ]);
    let Some(first) = tables.first() else {
        return out;
    };
    let mut keys: Vec<&String> = Vec::new();
    for t in tables {
        for r in &t.rows {
            if !keys.contains(&&r[0]) {
                keys.push(&r[0]);
            }
        }
    }
    for key in keys {
        for (col, metric) in first.header.iter().enumerate().skip(1) {
            let vals: Vec<f64> = tables
                .iter()
                .filter_map(|t| t.rows.iter().find(|r| &r[0] == key))
                .filter_map(|r| r.get(col)?.parse::<f64>().ok())
                .filter(|v| !v.is_nan())
                .collect();
            let (mean, sd) = mean_sd(&vals);
            out.push(vec![key.clone(), metric.clone(), opt(mean), opt(sd), vals.len().to_string()]);
        }
    }
    out
}

/// Runs `per_seed` for every configured seed (in parallel), lets each seed
/// write its own files, then writes summaries and the manifest.
pub fn run_seeds<T, F, W, S>(
    cfg: &ExperimentConfig,
    command: &str,
    out: &Path,
    per_seed: F,
    write_seed: W,
    summarize_all: S,
) -> Result<RunOutput<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
    W: Fn(u64, &T, &Path) -> Result<Vec<String>> + Sync + Send,
    S: Fn(&[(u64, &T)], &Path) -> Result<Vec<String>>,
{
    cfg.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out)?;
    let results: Vec<(Result<T>, Result<Vec<String>>)> = par::map_slice(&cfg.seeds, |&seed| {
        let outcome = per_seed(seed);
        let files = match &outcome {
            Ok(t) => write_seed(seed, t, out),
            Err(_) => Ok(Vec::new()),
        };
        (outcome, files)
    });
    let mut records = Vec::with_capacity(results.len());
    let mut outcomes = Vec::with_capacity(results.len());
    for (&seed, (outcome, files)) in cfg.seeds.iter().zip(results) {
        let (outcome, record) = match (outcome, files) {
            (Ok(t), Ok(files)) => (Ok(t), SeedRecord { seed, ok: true, error: None, files }),
            (Ok(_), Err(e)) | (Err(e), _) => {
                let msg = e.to_string();
                (Err(e), SeedRecord { seed, ok: false, error: Some(msg), files: Vec::new() })
            }
        };
        records.push(record);
        outcomes.push((seed, outcome));
    }
    let ok: Vec<(u64, &T)> = outcomes
        .iter()
        .filter_map(|(s, r)| r.as_ref().ok().map(|t| (*s, t)))
        .collect();
    let summary_files = if ok.is_empty() { Vec::new() } else { summarize_all(&ok, out)? };
    let status = match ok.len() {
        0 => RunStatus::Failed,
        n if n == records.len() => RunStatus::Complete,
        _ => RunStatus::Partial,
    };
    let manifest = RunManifest {
        command: command.into(),
        config_digest: cfg.digest()?,
        artifact_version: ARTIFACT_VERSION.into(),
        seeds: records,
        summary_files,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        status,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(RunOutput { manifest, outcomes })
}

fn write_table(out: &Path, name: String, table: &Table) -> Result<String> {
    table.write(&out.join(&name))?;
    Ok(name)
}

fn summary_of(out: &Path, name: &str, tables: Vec<Table>) -> Result<String> {
    write_table(out, name.into(), &summarize(&tables))
}

pub fn scenario_table(outcomes: &[ScenarioOutcome]) -> Table {
    let mut t = report_table("scenario");
    for o in outcomes {
        t.push(report_row(o.arrangement.name(), &o.report));
    }
    t
}

pub fn run_scenario(cfg: &ExperimentConfig, arrangements: &[Arrangement], out: &Path) -> Result<RunOutput<Vec<ScenarioOutcome>>> {
    if arrangements.is_empty() {
        return Err(Error::Config("no scenario selected".into()));
    }
    run_seeds(
        cfg,
        "scenario",
        out,
        |seed| scenario_seed(cfg, seed, arrangements),
        |seed, o, out| {
            let mut counts = Table::new(std::iter::once("class".to_string()).chain(o.iter().map(|s| s.arrangement.name().to_string())));
            for c in 0..cfg.classes {
                counts.push(std::iter::once(c.to_string()).chain(o.iter().map(|s| s.counts.counts()[c].to_string())).collect());
            }
            Ok(vec![
                write_table(out, format!("seed_{seed}.csv"), &scenario_table(o))?,
                write_table(out, format!("seed_{seed}_counts.csv"), &counts)?,
            ])
        },
        |ok, out| Ok(vec![summary_of(out, "summary.csv", ok.iter().map(|(_, o)| scenario_table(o)).collect())?]),
    )
}

pub fn analysis_table(o: &AnalysisOutcome) -> Table {
    let mut t = report_table("predictor");
    for (name, r) in [
        ("zero-shot", &o.zero_shot),
        ("ce", &o.ce),
        ("la", &o.la),
        ("knn-ce", &o.knn_ce),
        ("knn-la", &o.knn_la),
    ] {
        t.push(report_row(name, r));
    }
    t
}

fn gap_table(o: &AnalysisOutcome) -> Table {
    let mut t = Table::new(["pair", "avg_accuracy_gap"]);
    t.push(vec!["ce-la".into(), fmt_f64(o.ce_la_gap)]);
    t
}

fn analysis_curves(cfg: &ExperimentConfig, o: &AnalysisOutcome) -> Result<Table> {
    let by_counts = OrderKey::ByCounts(ClassCounts::new(o.train_counts.clone())?);
    let by_prior = OrderKey::ByPrior(crate::distributions::LabelPrior::new(o.q_hat.clone())?);
    let w = cfg.eval.smooth_window;
    let curves = [
        export_sorted_curve(&o.ce.per_class_or_nan(), &by_counts, w)?,
        export_sorted_curve(&o.la.per_class_or_nan(), &by_counts, w)?,
        export_sorted_curve(&o.ce.per_class_or_nan(), &by_prior, w)?,
        export_sorted_curve(&o.la.per_class_or_nan(), &by_prior, w)?,
    ];
    let mut t = Table::new(["rank", "ce_by_counts", "la_by_counts", "ce_by_prior", "la_by_prior"]);
    for i in 0..cfg.classes {
        let mut row = vec![i.to_string()];
        row.extend(curves.iter().map(|c| fmt_f64(c[i].1)));
        t.push(row);
    }
    Ok(t)
}

fn analysis_per_class(o: &AnalysisOutcome) -> Table {
    let mut t = Table::new([
        "class", "train_count", "d_group", "p_group", "q_hat", "zero_shot", "ce", "la", "knn_ce", "knn_la",
    ]);
    for c in 0..o.q_hat.len() {
        t.push(vec![
            c.to_string(),
            o.train_counts[c].to_string(),
            o.groups.data.group_of[c].name().into(),
            o.groups.parameter.group_of[c].name().into(),
            fmt_f64(o.q_hat[c]),
            opt(o.zero_shot.per_class_acc[c]),
            opt(o.ce.per_class_acc[c]),
            opt(o.la.per_class_acc[c]),
            opt(o.knn_ce.per_class_acc[c]),
            opt(o.knn_la.per_class_acc[c]),
        ]);
    }
    t
}

pub fn run_analysis(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput<AnalysisOutcome>> {
    run_seeds(
        cfg,
        "analyze",
        out,
        |seed| analysis_seed(cfg, seed),
        |seed, o, out| {
            Ok(vec![
                write_table(out, format!("seed_{seed}.csv"), &analysis_table(o))?,
                write_table(out, format!("seed_{seed}_gap.csv"), &gap_table(o))?,
                write_table(out, format!("seed_{seed}_per_class.csv"), &analysis_per_class(o))?,
                write_table(out, format!("seed_{seed}_curves.csv"), &analysis_curves(cfg, o)?)?,
            ])
        },
        |ok, out| {
            Ok(vec![
                summary_of(out, "summary.csv", ok.iter().map(|(_, o)| analysis_table(o)).collect())?,
                summary_of(out, "gap_summary.csv", ok.iter().map(|(_, o)| gap_table(o)).collect())?,
            ])
        },
    )
}

pub fn ablation_table(o: &AblationOutcome) -> Table {
    let mut t = report_table("predictor");
    for (name, r) in [("gla", &o.full), ("gla-zs", &o.zs), ("gla-ft", &o.ft), ("gla-train", &o.gla_train)] {
        t.push(report_row(name, r));
    }
    t
}

pub fn run_gla_ablation(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput<AblationOutcome>> {
    run_seeds(
        cfg,
        "gla-ablation",
        out,
        |seed| ablation_seed(cfg, seed),
        |seed, o, out| Ok(vec![write_table(out, format!("seed_{seed}.csv"), &ablation_table(o))?]),
        |ok, out| Ok(vec![summary_of(out, "summary.csv", ok.iter().map(|(_, o)| ablation_table(o)).collect())?]),
    )
}

pub fn sweep_table(o: &SweepOutcome) -> Table {
    let mut t = Table::new([
        "size", "subsets", "overall", "d_many", "d_medium", "d_few", "p_many", "p_medium", "p_few",
    ]);
    for r in &o.rows {
        let mut row = vec![r.size.to_string(), r.subsets.to_string(), fmt_f64(r.overall)];
        row.extend(r.d_groups.iter().map(|v| opt(*v)));
        row.extend(r.p_groups.iter().map(|v| opt(*v)));
        t.push(row);
    }
    t
}

fn singles_table(o: &SweepOutcome) -> Table {
    let mut t = report_table("model");
    for (i, r) in o.singles.iter().enumerate() {
        t.push(report_row(&format!("model_{i}"), r));
    }
    t
}

pub fn run_msweep(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput<SweepOutcome>> {
    if cfg.models < 2 || cfg.models > super::pipelines::MAX_SWEEP_MODELS {
        return Err(Error::Config(format!(
            "the fusion sweep needs 2..={} models, got {}",
            super::pipelines::MAX_SWEEP_MODELS,
            cfg.models
        )));
    }
    run_seeds(
        cfg,
        "msweep",
        out,
        |seed| msweep_seed(cfg, seed),
        |seed, o, out| {
            Ok(vec![
                write_table(out, format!("seed_{seed}.csv"), &sweep_table(o))?,
                write_table(out, format!("seed_{seed}_singles.csv"), &singles_table(o))?,
            ])
        },
        |ok, out| {
            Ok(vec![
                summary_of(out, "summary.csv", ok.iter().map(|(_, o)| sweep_table(o)).collect())?,
                summary_of(out, "singles_summary.csv", ok.iter().map(|(_, o)| singles_table(o)).collect())?,
            ])
        },
    )
}

pub fn confounder_table(r: &ConfounderReport) -> Table {
    let mut t = Table::new(["train_set", "acc_test_a", "acc_test_b"]);
    for (i, name) in ["a", "b"].into_iter().enumerate() {
        t.push(vec![name.into(), fmt_f64(r.acc_matrix[i][0]), fmt_f64(r.acc_matrix[i][1])]);
    }
    t
}

fn confounder_gap_table(r: &ConfounderReport) -> Table {
    let mut t = Table::new(["probe", "mean_gap"]);
    t.push(vec!["skewed".into(), fmt_f64(r.skewed_gap)]);
    t.push(vec!["balanced".into(), fmt_f64(r.balanced_gap)]);
    t
}

pub fn run_confounder_probe(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput<ConfounderReport>> {
    if cfg.factors != 2 {
        return Err(Error::Config(format!("the confounder probe needs exactly 2 factors, got {}", cfg.factors)));
    }
    run_seeds(
        cfg,
        "probe-confounder",
        out,
        |seed| confounder_seed(cfg, seed),
        |seed, r, out| {
            let half = r.per_sample_gap.len() / 2;
            let mut gaps = Table::new(["sample", "probe", "gap"]);
            for (i, g) in r.per_sample_gap.iter().enumerate() {
                let probe = if i < half { "skewed" } else { "balanced" };
                gaps.push(vec![i.to_string(), probe.into(), fmt_f64(*g)]);
            }
            Ok(vec![
                write_table(out, format!("seed_{seed}.csv"), &confounder_table(r))?,
                write_table(out, format!("seed_{seed}_gap.csv"), &confounder_gap_table(r))?,
                write_table(out, format!("seed_{seed}_per_sample_gap.csv"), &gaps)?,
            ])
        },
        |ok, out| {
            Ok(vec![
                summary_of(out, "summary.csv", ok.iter().map(|(_, r)| confounder_table(r)).collect())?,
                summary_of(out, "gap_summary.csv", ok.iter().map(|(_, r)| confounder_gap_table(r)).collect())?,
            ])
        },
    )
}

fn scratch_curve_table(cfg: &ExperimentConfig, o: &ScratchOutcome) -> Result<Table> {
    // The sorted sequences are already in prior order; a descending rank
    // key keeps that order.
    let k = o.scratch_sorted.len();
    let key = OrderKey::ByCounts(ClassCounts::new((0..k).map(|i| k - i).collect())?);
    let w = cfg.eval.smooth_window;
    let s = export_sorted_curve(&o.scratch_sorted, &key, w)?;
    let f = export_sorted_curve(&o.finetuned_sorted, &key, w)?;
    let mut t = Table::new(["rank", "scratch", "finetuned", "scratch_smoothed", "finetuned_smoothed"]);
    for i in 0..k {
        t.push(vec![
            i.to_string(),
            fmt_f64(o.scratch_sorted[i]),
            fmt_f64(o.finetuned_sorted[i]),
            fmt_f64(s[i].1),
            fmt_f64(f[i].1),
        ]);
    }
    Ok(t)
}

/// Slope of accuracy against prior rank for the seed-mean curves.
pub fn scratch_slopes(outcomes: &[&ScratchOutcome]) -> Result<[(f64, f64); 2]> {
    let k = outcomes.first().map(|o| o.scratch_sorted.len()).unwrap_or(0);
    let mean_curve = |f: &dyn Fn(&ScratchOutcome) -> &Vec<f64>| -> Vec<f64> {
        (0..k)
            .map(|i| outcomes.iter().map(|o| f(o)[i]).sum::<f64>() / outcomes.len() as f64)
            .collect()
    };
    Ok([
        rank_slope(&mean_curve(&|o| &o.scratch_sorted))?,
        rank_slope(&mean_curve(&|o| &o.finetuned_sorted))?,
    ])
}

fn slope_table(slopes: [(f64, f64); 2]) -> Table {
    let mut t = Table::new(["model", "slope", "stderr"]);
    for (name, (s, e)) in ["scratch", "finetuned"].into_iter().zip(slopes) {
        t.push(vec![name.into(), fmt_f64(s), fmt_f64(e)]);
    }
    t
}

pub fn run_scratch_control(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput<ScratchOutcome>> {
    run_seeds(
        cfg,
        "scratch",
        out,
        |seed| scratch_seed(cfg, seed),
        |seed, o, out| {
            Ok(vec![
                write_table(out, format!("seed_{seed}.csv"), &scratch_curve_table(cfg, o)?)?,
                write_table(out, format!("seed_{seed}_slope.csv"), &slope_table(scratch_slopes(&[o])?))?,
            ])
        },
        |ok, out| {
            let all: Vec<&ScratchOutcome> = ok.iter().map(|(_, o)| *o).collect();
            let curves = all.iter().map(|o| scratch_curve_table(cfg, o)).collect::<Result<Vec<_>>>()?;
            Ok(vec![
                summary_of(out, "summary.csv", curves)?,
                write_table(out, "slope.csv".into(), &slope_table(scratch_slopes(&all)?))?,
            ])
        },
    )
}
