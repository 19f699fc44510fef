use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dualtail::adjustment::{backdoor_fuse_logits, gla_ensemble, la_posthoc, EnsembleMode, LogitMatrix, ProbMatrix};
use dualtail::distributions::{split_by_counts, split_by_prior, ClassCounts, LabelPrior, DEFAULT_FRACTIONS};
use dualtail::evaluation::{evaluate, ClassGroups};
use dualtail::experiments::{
    balanced_split, downstream_counts, report_row, report_table, run_analysis,
    run_confounder_probe, run_gla_ablation, run_msweep, run_scenario, run_scratch_control, Arrangement,
    ExperimentConfig, RunManifest, RunOutput, RunStatus, MANIFEST_FILE,
};
use dualtail::io::{export_logits, fmt_f64, import_logits, read_json, write_json, Table};
use dualtail::prior::{estimate_prior, SolverOptions};
use dualtail::simkit::{
    classifier_retrain, finetune, gen_class_means, make_exposure_policy, sample_dataset, ExposureKind,
    FactorDataset, FineTunedModel, FoundationModel, HeadKind, Method,
};
use dualtail::{seeds, Error};

#[derive(Parser)]
#[command(name = "dualtail", version, about = "Long-tailed fine-tuning experiments under data and parameter imbalance")]
struct Cli {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Comma-separated seed list, overriding the configuration.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ce,
    La,
    GlaTrain,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ce => Method::CrossEntropy,
            MethodArg::La => Method::LogitAdjusted,
            MethodArg::GlaTrain => Method::GlaTrain,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArrangementArg {
    Shuffled,
    Consistency,
    Reverse,
    Balance,
}

impl From<ArrangementArg> for Arrangement {
    fn from(a: ArrangementArg) -> Self {
        match a {
            ArrangementArg::Shuffled => Arrangement::Shuffled,
            ArrangementArg::Consistency => Arrangement::Consistency,
            ArrangementArg::Reverse => Arrangement::Reverse,
            ArrangementArg::Balance => Arrangement::Balance,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Zs,
    Ft,
}

#[derive(Subcommand)]
enum Command {
    /// Sample pre-training, downstream, validation and test sets per seed.
    Gen {
        /// Downstream count arrangement; defaults to the configured one.
        #[arg(long, value_enum)]
        arrangement: Option<ArrangementArg>,
        /// Estimated prior (JSON) for consistency/reverse arrangements.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Train a foundation model on a dataset file.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        model_id: usize,
        /// Also write zero-shot logits on this dataset.
        #[arg(long)]
        logits_on: Option<PathBuf>,
    },
    /// Fine-tune a foundation model's head (and optional adapter).
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Adapter rank; a linear head when absent.
        #[arg(long)]
        adapter_rank: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        adapter_alpha: f64,
        /// Estimated pre-training prior, required for gla-train.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Retrain the classifier with the logit-adjusted loss afterwards.
        #[arg(long)]
        retrain: bool,
        #[arg(long)]
        logits_on: Option<PathBuf>,
    },
    /// Estimate the pre-training label prior from zero-shot logits.
    EstimatePrior {
        #[arg(long)]
        logits: PathBuf,
    },
    /// Post-hoc logit adjustment, or the generalized zero-shot + fine-tuned ensemble.
    Adjust {
        /// Fine-tuned (or any) logits.
        #[arg(long)]
        logits: PathBuf,
        /// Training prior of those logits (JSON array, counts or estimate).
        #[arg(long)]
        source_prior: PathBuf,
        /// Target prior; uniform when absent.
        #[arg(long)]
        target_prior: Option<PathBuf>,
        /// Zero-shot logits for the ensemble.
        #[arg(long, requires = "q_hat")]
        zs: Option<PathBuf>,
        #[arg(long)]
        q_hat: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
    },
    /// Average LA-balanced softmax outputs of several models.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        logits: Vec<PathBuf>,
        /// One training prior per logit file.
        #[arg(long, num_args = 1.., required = true)]
        priors: Vec<PathBuf>,
    },
    /// Accuracy report of a logit (or probability) file.
    Eval {
        #[arg(long)]
        logits: PathBuf,
        /// Downstream training counts for D-groups; evaluation counts otherwise.
        #[arg(long)]
        train_counts: Option<PathBuf>,
        /// Estimated prior for P-groups; uniform otherwise.
        #[arg(long)]
        prior: Option<PathBuf>,
    },
    /// Consistency / Reverse / Balance downstream scenarios.
    Scenario {
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ArrangementArg::Balance, ArrangementArg::Reverse, ArrangementArg::Consistency])]
        which: Vec<ArrangementArg>,
    },
    /// Fusion of 1..M per-model-tail foundation models.
    Msweep,
    /// GLA, its zero-shot and fine-tuned halves, and GLA-Train.
    GlaAblation,
    /// Skewed-factor confounder probe.
    ProbeConfounder,
    /// From-scratch control against a fine-tuned foundation model.
    Scratch,
    /// CE against LA fine-tuning: groups, nine cells, KNN probe, sorted curves.
    Analyze,
    /// Validate a logit file and write a canonical copy.
    ImportLogits {
        #[arg(long)]
        logits: PathBuf,
    },
    /// Summarize a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Config(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    fn out_file(&self, name: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Failure::Runtime(e.to_string()))?;
        Ok(self.out.join(name))
    }
}

fn load_config(path: Option<&Path>, seeds: Option<Vec<u64>>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    read_json(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Reads a prior from a JSON array of probabilities, a JSON array of
/// integer counts, or an object with a `q_hat` field.
fn read_prior(path: &Path) -> CliResult<LabelPrior> {
    let value: serde_json::Value = read(path)?;
    let value = match value.get("q_hat") {
        Some(q) => q.clone(),
        None => value,
    };
    if let Ok(counts) = serde_json::from_value::<Vec<usize>>(value.clone()) {
        return Ok(ClassCounts::new(counts)?.to_prior()?);
    }
    let probs: Vec<f64> = serde_json::from_value(value)
        .map_err(|e| Failure::Runtime(format!("{}: not a prior: {e}", path.display())))?;
    Ok(LabelPrior::new(probs)?)
}

fn load_logits(path: &Path) -> CliResult<(LogitMatrix, Vec<usize>)> {
    import_logits(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_probs(path: &Path, probs: &ProbMatrix, labels: &[usize]) -> CliResult<()> {
    let mut s = format!("K={}\n", probs.classes());
    for (i, y) in labels.iter().enumerate() {
        s.push_str(&y.to_string());
        for v in probs.row(i) {
            s.push(',');
            s.push_str(&fmt_f64(*v));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Failure::Runtime(e.to_string()))
}

fn gen(ctx: &Ctx, arrangement: Option<ArrangementArg>, prior: Option<&Path>) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let arrangement = arrangement.map(Arrangement::from).unwrap_or(cfg.downstream.arrangement);
    let q_hat = match (arrangement, prior) {
        (Arrangement::Consistency | Arrangement::Reverse, None) => {
            return Err(Failure::Config(format!(
                "the {} arrangement needs --prior",
                arrangement.name()
            )))
        }
        (_, Some(p)) => read_prior(p)?,
        (_, None) => LabelPrior::uniform(cfg.classes)?,
    };
    for &seed in &cfg.seeds {
        let dir = ctx.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(e.to_string()))?;
        let pretrain_means = gen_class_means(cfg.classes, cfg.dim, cfg.factors, cfg.signal, seeds::derive(seed, "means"))?;
        let means = pretrain_means.shifted(cfg.downstream.shift, seeds::derive(seed, "shift"))?;
        let counts = dualtail::experiments::pretrain_counts(cfg)?;
        let groups = split_by_prior(&counts.to_prior()?, DEFAULT_FRACTIONS)?;
        let policy = make_exposure_policy(cfg.pretrain.exposure, cfg.classes, cfg.factors, Some(&groups))?;
        let pretrain = sample_dataset(
            &pretrain_means,
            &counts,
            &policy,
            cfg.noise,
            seeds::derive_indexed(seed, "pretrain-data", 0),
        )?;
        let down = downstream_counts(cfg, &q_hat, arrangement, seed)?;
        let uniform = make_exposure_policy(ExposureKind::Uniform, cfg.classes, cfg.factors, None)?;
        let train = sample_dataset(&means, &down, &uniform, cfg.noise, seeds::derive(seed, "downstream-train"))?;
        let val = balanced_split(cfg, &means, cfg.downstream.val_per_class, seeds::derive(seed, "val"))?;
        let test = balanced_split(cfg, &means, cfg.downstream.test_per_class, seeds::derive(seed, "test"))?;
        for (name, data) in [("pretrain", &pretrain), ("train", &train), ("val", &val), ("test", &test)] {
            write_json(&dir.join(format!("{name}.json")), data)?;
        }
        ctx.note(format!("seed {seed}: datasets written to {}", dir.display()));
    }
    Ok(())
}

fn pretrain(ctx: &Ctx, data: &Path, model_id: usize, logits_on: Option<&Path>) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let ds: FactorDataset = read(data)?;
    let mut model = dualtail::simkit::pretrain_foundation(
        &ds,
        cfg.hidden,
        &cfg.pretrain.train,
        seeds::derive_indexed(ctx.seed(), "pretrain", model_id as u64),
    )?;
    model.model_id = model_id;
    write_json(&ctx.out_file("model.json")?, &model)?;
    if let Some(p) = logits_on {
        let target: FactorDataset = read(p)?;
        export_logits(&ctx.out_file("logits.csv")?, &model.network.logits(&target.features)?, &target.labels)?;
    }
    ctx.note(format!("foundation model written to {}", ctx.out.display()));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finetune_cmd(
    ctx: &Ctx,
    model: &Path,
    data: &Path,
    method: Option<MethodArg>,
    adapter_rank: Option<usize>,
    adapter_alpha: f64,
    prior: Option<&Path>,
    retrain: bool,
    logits_on: Option<&Path>,
) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let base: FoundationModel = read(model)?;
    let ds: FactorDataset = read(data)?;
    let q_hat = prior.map(read_prior).transpose()?;
    let method = method.map(Method::from).unwrap_or(cfg.downstream.method);
    let head = match adapter_rank {
        Some(rank) => HeadKind::Adapter {
            rank,
            alpha: adapter_alpha,
        },
        None => cfg.downstream.head,
    };
    let seed = seeds::derive(ctx.seed(), "finetune");
    let mut tuned: FineTunedModel = finetune(&base, &ds, method, head, q_hat.as_ref(), &cfg.downstream.finetune, seed)?;
    if retrain {
        tuned = classifier_retrain(&tuned, &ds, seeds::derive(ctx.seed(), "retrain"))?;
    }
    write_json(&ctx.out_file("finetuned.json")?, &tuned)?;
    if let Some(p) = logits_on {
        let target: FactorDataset = read(p)?;
        export_logits(&ctx.out_file("logits.csv")?, &tuned.logits(&target.features)?, &target.labels)?;
    }
    ctx.note(format!("fine-tuned model written to {}", ctx.out.display()));
    Ok(())
}

fn estimate(ctx: &Ctx, logits: &Path) -> CliResult<()> {
    let (z, y) = load_logits(logits)?;
    let opts = SolverOptions {
        seed: seeds::derive(ctx.seed(), "prior"),
        ..ctx.cfg.solver.clone()
    };
    let est = estimate_prior(&z, &y, &opts)?;
    write_json(&ctx.out_file("prior.json")?, &est)?;
    ctx.note(format!(
        "objective {} after {} restarts (converged: {})",
        fmt_f64(est.objective_value),
        est.restarts_used,
        est.converged
    ));
    Ok(())
}

fn adjust(
    ctx: &Ctx,
    logits: &Path,
    source: &Path,
    target: Option<&Path>,
    zs: Option<&Path>,
    q_hat: Option<&Path>,
    mode: ModeArg,
) -> CliResult<()> {
    let (f, y) = load_logits(logits)?;
    let pi_s = read_prior(source)?;
    let adjusted = match (zs, q_hat) {
        (Some(zs), Some(q)) => {
            let (z, zy) = load_logits(zs)?;
            if zy != y {
                return Err(Failure::Runtime("zero-shot and fine-tuned files disagree on labels".into()));
            }
            let mode = match mode {
                ModeArg::Full => EnsembleMode::Full,
                ModeArg::Zs => EnsembleMode::ZsOnly,
                ModeArg::Ft => EnsembleMode::FtOnly,
            };
            gla_ensemble(&z, &f, &read_prior(q)?, &pi_s, mode)?
        }
        _ => {
            let pi_t = match target {
                Some(t) => read_prior(t)?,
                None => LabelPrior::uniform(f.classes())?,
            };
            la_posthoc(&f, &pi_s, &pi_t)?
        }
    };
    export_logits(&ctx.out_file("adjusted.csv")?, &adjusted, &y)?;
    Ok(())
}

fn fuse(ctx: &Ctx, logits: &[PathBuf], priors: &[PathBuf]) -> CliResult<()> {
    if logits.len() != priors.len() {
        return Err(Failure::Config(format!(
            "{} logit files but {} priors",
            logits.len(),
            priors.len()
        )));
    }
    let mut labels: Option<Vec<usize>> = None;
    let mut models = Vec::with_capacity(logits.len());
    for (l, p) in logits.iter().zip(priors) {
        let (z, y) = load_logits(l)?;
        if labels.as_ref().is_some_and(|prev| prev != &y) {
            return Err(Failure::Runtime(format!("{}: labels differ from the first file", l.display())));
        }
        labels = Some(y);
        models.push((z, read_prior(p)?));
    }
    let fused = backdoor_fuse_logits(&models)?;
    write_probs(&ctx.out_file("fused.csv")?, &fused, &labels.unwrap_or_default())
}

fn eval_cmd(ctx: &Ctx, logits: &Path, train_counts: Option<&Path>, prior: Option<&Path>) -> CliResult<()> {
    let (z, y) = load_logits(logits)?;
    let k = z.classes();
    let counts = match train_counts {
        Some(p) => ClassCounts::new(read::<Vec<usize>>(p)?)?,
        None => ClassCounts::tally(&y, k)?,
    };
    let prior = match prior {
        Some(p) => read_prior(p)?,
        None => LabelPrior::uniform(k)?,
    };
    if k < 3 {
        return Err(Failure::Config("group reports need at least 3 classes".into()));
    }
    let groups = ClassGroups::new(split_by_counts(&counts), split_by_prior(&prior, DEFAULT_FRACTIONS)?)?;
    let report = evaluate(&z, &y, &groups)?;
    let mut table = report_table("predictor");
    table.push(report_row(&logits.file_stem().unwrap_or_default().to_string_lossy(), &report));
    table.write(&ctx.out_file("eval.csv")?)?;
    let mut per_class = Table::new(["class", "n", "accuracy"]);
    for c in 0..k {
        per_class.push(vec![
            c.to_string(),
            report.n_per_class[c].to_string(),
            report.per_class_acc[c].map(fmt_f64).unwrap_or_else(|| "NA".into()),
        ]);
    }
    per_class.write(&ctx.out_file("eval_per_class.csv")?)?;
    if !ctx.quiet {
        println!("overall accuracy {}", fmt_f64(report.overall_acc));
    }
    Ok(())
}

fn import_cmd(ctx: &Ctx, logits: &Path) -> CliResult<()> {
    let (z, y) = load_logits(logits)?;
    export_logits(&ctx.out_file("logits.csv")?, &z, &y)?;
    let counts = ClassCounts::tally(&y, z.classes()).map(|c| c.counts().to_vec()).unwrap_or_else(|_| vec![0; z.classes()]);
    let summary = serde_json::json!({ "rows": z.rows(), "classes": z.classes(), "label_counts": counts });
    write_json(&ctx.out_file("import.json")?, &summary)?;
    ctx.note(format!("{} rows, {} classes", z.rows(), z.classes()));
    Ok(())
}

fn report(ctx: &Ctx, run: &Path) -> CliResult<()> {
    let manifest = RunManifest::read(run).map_err(|e| Failure::Runtime(format!("{}: {e}", run.display())))?;
    println!(
        "{} ({:?}), {} seeds, digest {}",
        manifest.command,
        manifest.status,
        manifest.seeds.len(),
        manifest.config_digest
    );
    for s in &manifest.seeds {
        match &s.error {
            Some(e) => println!("seed {}: failed: {e}", s.seed),
            None => println!("seed {}: {} files", s.seed, s.files.len()),
        }
    }
    for f in &manifest.summary_files {
        let text = fs::read_to_string(run.join(f)).map_err(|e| Failure::Runtime(format!("{f}: {e}")))?;
        println!("\n# {f}\n{text}");
    }
    let _ = ctx;
    Ok(())
}

fn finish<T>(ctx: &Ctx, run: RunOutput<T>) -> CliResult<ExitCode> {
    let m = &run.manifest;
    for s in m.seeds.iter().filter(|s| !s.ok) {
        eprintln!("seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or("unknown error"));
    }
    ctx.note(format!(
        "{}: {:?} in {:.1}s, manifest at {}",
        m.command,
        m.status,
        m.wall_clock_secs,
        ctx.out.join(MANIFEST_FILE).display()
    ));
    Ok(match m.status {
        RunStatus::Complete => ExitCode::SUCCESS,
        RunStatus::Partial => ExitCode::from(3),
        RunStatus::Failed => ExitCode::from(2),
    })
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        quiet: cli.quiet,
    };
    let cfg = &ctx.cfg;
    let out = ctx.out.as_path();
    match cli.command {
        Command::Gen { arrangement, prior } => gen(&ctx, arrangement, prior.as_deref())?,
        Command::Pretrain {
            data,
            model_id,
            logits_on,
        } => pretrain(&ctx, &data, model_id, logits_on.as_deref())?,
        Command::Finetune {
            model,
            data,
            method,
            adapter_rank,
            adapter_alpha,
            prior,
            retrain,
            logits_on,
        } => finetune_cmd(
            &ctx,
            &model,
            &data,
            method,
            adapter_rank,
            adapter_alpha,
            prior.as_deref(),
            retrain,
            logits_on.as_deref(),
        )?,
        Command::EstimatePrior { logits } => estimate(&ctx, &logits)?,
        Command::Adjust {
            logits,
            source_prior,
            target_prior,
            zs,
            q_hat,
            mode,
        } => adjust(&ctx, &logits, &source_prior, target_prior.as_deref(), zs.as_deref(), q_hat.as_deref(), mode)?,
        Command::Fuse { logits, priors } => fuse(&ctx, &logits, &priors)?,
        Command::Eval {
            logits,
            train_counts,
            prior,
        } => eval_cmd(&ctx, &logits, train_counts.as_deref(), prior.as_deref())?,
        Command::Scenario { which } => {
            let which: Vec<Arrangement> = which.into_iter().map(Arrangement::from).collect();
            return finish(&ctx, run_scenario(cfg, &which, out)?);
        }
        Command::Msweep => return finish(&ctx, run_msweep(cfg, out)?),
        Command::GlaAblation => return finish(&ctx, run_gla_ablation(cfg, out)?),
        Command::ProbeConfounder => return finish(&ctx, run_confounder_probe(cfg, out)?),
        Command::Scratch => return finish(&ctx, run_scratch_control(cfg, out)?),
        Command::Analyze => return finish(&ctx, run_analysis(cfg, out)?),
        Command::ImportLogits { logits } => import_cmd(&ctx, &logits)?,
        Command::Report { run } => report(&ctx, &run)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
