//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dualtail::adjustment::{
    backdoor_fuse, gla_ensemble, gla_train_loss, gla_train_loss_grad, la_loss, la_loss_grad, EnsembleMode,
    LogitMatrix, ProbMatrix,
};
use dualtail::distributions::{Axis, ClassCounts, Group, LabelPrior};
use dualtail::evaluation::rank_slope;
use dualtail::experiments::*;
use dualtail::prior::{estimate_prior, grid_oracle_prior, prior_objective, SolverOptions};
use dualtail::Matrix;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_prior(rng: &mut ChaCha8Rng, k: usize) -> LabelPrior {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    LabelPrior::from_weights(&w).unwrap()
}

/// Cross-entropy written out directly, with a max shift for stability.
fn oracle_ce(z: &[f64], y: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    m + s.ln() - z[y]
}

fn imbalance_factors() -> Verdict {
    let mut places = vec![4980];
    places.extend(std::iter::repeat_n(60, 363));
    places.push(5);
    let mut inet = vec![1280];
    inet.extend(std::iter::repeat_n(100, 998));
    inet.push(5);
    let p = ClassCounts::new(places).unwrap().imbalance_factor().unwrap();
    let i = ClassCounts::new(inet).unwrap().imbalance_factor().unwrap();
    verdict(p == 996.0 && i == 256.0, format!("places {p}, imagenet {i}"))
}

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(2..12);
        let z: Vec<f64> = (0..k).map(|_| 3.0 * normal(&mut rng)).collect();
        let y = rng.random_range(0..k);
        let pi = random_prior(&mut rng, k);
        let q = random_prior(&mut rng, k);
        let shifted: Vec<f64> = z.iter().zip(pi.probs()).map(|(v, p)| v + p.ln()).collect();
        worst = worst.max((la_loss(&z, y, &pi).unwrap() - oracle_ce(&shifted, y)).abs());
        let both: Vec<f64> = shifted.iter().zip(q.probs()).map(|(v, p)| v + p.ln()).collect();
        worst = worst.max((gla_train_loss(&z, y, &pi, &q).unwrap() - oracle_ce(&both, y)).abs());
    }
    verdict(worst <= 1e-9, format!("max abs diff {worst:.3e}"))
}

/// Relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between analytic and numeric gradients.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn gradient_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(2..10);
        let z: Vec<f64> = (0..k).map(|_| 2.0 * normal(&mut rng)).collect();
        let y = rng.random_range(0..k);
        let pi = random_prior(&mut rng, k);
        let q = random_prior(&mut rng, k);
        let numeric = |f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
            (0..k)
                .map(|j| {
                    let mut p = z.clone();
                    let mut m = z.clone();
                    p[j] += eps;
                    m[j] -= eps;
                    (f(&p) - f(&m)) / (2.0 * eps)
                })
                .collect()
        };
        let (_, g) = la_loss_grad(&z, y, &pi).unwrap();
        worst = worst.max(rel_err(&g, &numeric(&|v| la_loss(v, y, &pi).unwrap())));
        let (_, g) = gla_train_loss_grad(&z, y, &pi, &q).unwrap();
        worst = worst.max(rel_err(&g, &numeric(&|v| gla_train_loss(v, y, &pi, &q).unwrap())));
    }
    verdict(worst <= 1e-4, format!("max relative error {worst:.3e}"))
}

/// Planted instance: a class-symmetric base (unit noise plus a margin on the
/// true class) shifted by `log q*`, so by symmetry `q*` minimizes the
/// population objective.
fn planted(k: usize, n: usize, q_star: &LabelPrior, seed: u64) -> (LogitMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&y| {
            (0..k)
                .map(|c| normal(&mut rng) + if c == y { 1.5 } else { 0.0 } + q_star.probs()[c].ln())
                .collect()
        })
        .collect();
    (LogitMatrix::new(Matrix::from_rows(&rows).unwrap()).unwrap(), labels)
}

fn prior_recovery() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_linf: f64 = 0.0;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut slowest: f64 = 0.0;
    let mut per_k = Vec::new();
    for (i, k) in [2, 3, 5, 10].into_iter().enumerate() {
        let q_star = random_prior(&mut rng, k);
        let (logits, labels) = planted(k, 2000, &q_star, 40 + i as u64);
        let start = Instant::now();
        let est = estimate_prior(&logits, &labels, &SolverOptions::default()).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let linf = est
            .q_hat
            .probs()
            .iter()
            .zip(q_star.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_linf = worst_linf.max(linf);
        per_k.push(format!("K={k} {linf:.4}"));
        if k <= 3 {
            let grid = grid_oracle_prior(&logits, &labels, 1e-3).unwrap();
            let gap = prior_objective(&logits, &labels, est.q_hat.probs())
                - prior_objective(&logits, &labels, grid.probs());
            worst_gap = worst_gap.max(gap);
        }
    }
    verdict(
        worst_linf <= 0.02 && worst_gap <= 1e-4 && slowest <= 10.0,
        format!("L-inf {worst_linf:.4} ({}), objective minus grid {worst_gap:.2e}, slowest {slowest:.2}s", per_k.join(", ")),
    )
}

fn ensemble_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = true;
    let mut worst_row: f64 = 0.0;
    let mut invariant = true;
    for _ in 0..50 {
        let (n, k) = (rng.random_range(1..20), rng.random_range(2..8));
        let mut mat = || {
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| 3.0 * normal(&mut rng)).collect()).collect();
            LogitMatrix::new(Matrix::from_rows(&rows).unwrap()).unwrap()
        };
        let (zs, ft) = (mat(), mat());
        let q = random_prior(&mut rng, k);
        let pi = random_prior(&mut rng, k);
        let full = gla_ensemble(&zs, &ft, &q, &pi, EnsembleMode::Full).unwrap();
        let z = gla_ensemble(&zs, &ft, &q, &pi, EnsembleMode::ZsOnly).unwrap();
        let f = gla_ensemble(&zs, &ft, &q, &pi, EnsembleMode::FtOnly).unwrap();
        for i in 0..n {
            for j in 0..k {
                exact &= full.row(i)[j] == z.row(i)[j] + f.row(i)[j];
            }
        }
        let m = rng.random_range(1..6);
        let probs: Vec<ProbMatrix> = (0..m)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
                        let s: f64 = w.iter().sum();
                        w.iter().map(|v| v / s).collect()
                    })
                    .collect();
                ProbMatrix::from_rows(&rows).unwrap()
            })
            .collect();
        let fused = backdoor_fuse(&probs).unwrap();
        let mut reversed = probs.clone();
        reversed.reverse();
        reversed.rotate_left(m / 2);
        invariant &= backdoor_fuse(&reversed).unwrap() == fused;
        for i in 0..n {
            worst_row = worst_row.max((fused.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    verdict(
        exact && invariant && worst_row <= 1e-9,
        format!("split exact {exact}, permutation invariant {invariant}, row-sum error {worst_row:.1e}"),
    )
}

fn scenario_ordering(cfg: &ExperimentConfig, dir: &Path) -> Verdict {
    let arrangements = [Arrangement::Balance, Arrangement::Reverse, Arrangement::Consistency];
    let run = run_scenario(cfg, &arrangements, dir).unwrap();
    let ok = run.successes();
    let m: Vec<f64> = (0..3).map(|i| mean(ok.iter().map(|(_, o)| o[i].report.overall_acc))).collect();
    verdict(
        ok.len() == cfg.seeds.len() && m[0] > m[1] && m[1] > m[2],
        format!("balance {:.4} > reverse {:.4} > consistency {:.4}", m[0], m[1], m[2]),
    )
}

fn lowest_cell(r: &dualtail::evaluation::EvalReport) -> (usize, usize) {
    let mut best = (f64::INFINITY, (0, 0));
    for (i, row) in r.nine_cell.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            if let Some(v) = c {
                if *v < best.0 {
                    best = (*v, (i, j));
                }
            }
        }
    }
    best.1
}

fn analysis_criteria(cfg: &ExperimentConfig, dir: &Path) -> [Verdict; 4] {
    let run = run_analysis(cfg, dir).unwrap();
    let ok = run.successes();
    let few = Group::Few.index();
    let worst = ok.iter().filter(|(_, o)| lowest_cell(&o.ce) == (few, few)).count();
    let spread = |f: &dyn Fn(&AnalysisOutcome) -> f64| mean(ok.iter().map(|(_, o)| f(o)));
    let d_ce = spread(&|o| o.ce.spread(Axis::Data).unwrap());
    let d_la = spread(&|o| o.la.spread(Axis::Data).unwrap());
    let p_ce = spread(&|o| o.ce.spread(Axis::Parameter).unwrap());
    let p_la = spread(&|o| o.la.spread(Axis::Parameter).unwrap());
    let k_ce = spread(&|o| o.knn_ce.overall_acc);
    let k_la = spread(&|o| o.knn_la.overall_acc);
    [
        verdict(worst >= 4, format!("D-Few/P-Few lowest in {worst} of {} seeds", ok.len())),
        verdict(d_la < d_ce, format!("D spread LA {d_la:.4} < CE {d_ce:.4}")),
        verdict(p_la >= 0.5 * p_ce, format!("P spread LA {p_la:.4} >= 0.5 x CE {p_ce:.4}")),
        verdict((k_ce - k_la).abs() <= 0.02, format!("KNN CE {k_ce:.4} vs LA {k_la:.4}")),
    ]
}

fn sweep_trend(cfg: &ExperimentConfig, dir: &Path) -> Verdict {
    let run = run_msweep(cfg, dir).unwrap();
    let ok = run.successes();
    let overall: Vec<f64> = (0..3).map(|i| mean(ok.iter().map(|(_, o)| o.rows[i].overall))).collect();
    let fused_few = mean(ok.iter().map(|(_, o)| o.rows[2].p_groups[Group::Few.index()].unwrap()));
    let best_single = (0..cfg.models)
        .map(|i| mean(ok.iter().map(|(_, o)| o.singles[i].group(Axis::Parameter, Group::Few).unwrap())))
        .fold(f64::NEG_INFINITY, f64::max);
    verdict(
        overall[0] <= overall[1] && overall[1] <= overall[2] && fused_few > best_single,
        format!(
            "overall m=1..3 {:.4} {:.4} {:.4}; P-Few fused {fused_few:.4} vs best single {best_single:.4}",
            overall[0], overall[1], overall[2]
        ),
    )
}

fn gla_ordering(cfg: &ExperimentConfig, dir: &Path) -> Verdict {
    let run = run_gla_ablation(cfg, dir).unwrap();
    let ok = run.successes();
    let full = mean(ok.iter().map(|(_, o)| o.full.overall_acc));
    let ft = mean(ok.iter().map(|(_, o)| o.ft.overall_acc));
    let zs = mean(ok.iter().map(|(_, o)| o.zs.overall_acc));
    verdict(full > ft && ft > zs, format!("GLA {full:.4} > GLA-FT {ft:.4} > GLA-ZS {zs:.4}"))
}

fn confounder(cfg: &ExperimentConfig, dir: &Path) -> Verdict {
    let run = run_confounder_probe(cfg, dir).unwrap();
    let ok = run.successes();
    let acc = |i: usize, j: usize| mean(ok.iter().map(|(_, r)| r.acc_matrix[i][j]));
    let skewed = mean(ok.iter().map(|(_, r)| r.skewed_gap));
    let balanced = mean(ok.iter().map(|(_, r)| r.balanced_gap));
    let b_gain = acc(1, 1) - acc(1, 0);
    let a_diff = (acc(0, 0) - acc(0, 1)).abs();
    verdict(
        b_gain > 0.0 && a_diff <= 0.02 && skewed > balanced,
        format!("B-model B-A {b_gain:.4}; A-model |A-B| {a_diff:.4}; gap skewed {skewed:.4} vs balanced {balanced:.4}"),
    )
}

fn scratch(cfg: &ExperimentConfig, dir: &Path) -> Verdict {
    let run = run_scratch_control(cfg, dir).unwrap();
    let ok: Vec<&ScratchOutcome> = run.successes().into_iter().map(|(_, o)| o).collect();
    let [(s, se), (f, fe)] = scratch_slopes(&ok).unwrap();
    // Cross-check the stored slope against a direct fit of the mean curve.
    let k = ok[0].scratch_sorted.len();
    let curve: Vec<f64> = (0..k).map(|i| mean(ok.iter().map(|o| o.scratch_sorted[i]))).collect();
    let direct = rank_slope(&curve).unwrap().0;
    verdict(
        s.abs() < 2.0 * se && f < 0.0 && (direct - s).abs() < 1e-15,
        format!("scratch slope {s:.5} (se {se:.5}); fine-tuned slope {f:.5} (se {fe:.5})"),
    )
}

fn reproducibility(dir: &Path) -> Verdict {
    fs::create_dir_all(dir).unwrap();
    let cfg_path = dir.join("repro.toml");
    fs::write(
        &cfg_path,
        "seeds = [3, 4]\nclasses = 8\ndim = 8\nhidden = 16\nmodels = 2\n\
         [pretrain]\nn_max = 80\nimbalance = 10.0\n[pretrain.train]\nepochs = 5\n\
         [downstream]\nn_max = 30\nimbalance = 5.0\nval_per_class = 10\ntest_per_class = 10\n\
         [confounder]\nper_class = 10\ntest_per_class = 10\n",
    )
    .unwrap();
    let commands = ["scenario", "msweep", "gla-ablation", "probe-confounder", "scratch", "analyze", "gen"];
    let mut mismatches = Vec::new();
    for cmd in commands {
        let mut outs = Vec::new();
        for rep in 0..2 {
            let out = dir.join(format!("{cmd}-{rep}"));
            let status = Command::new(env!("CARGO_BIN_EXE_dualtail"))
                .args(["--quiet", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out)
                .arg(cmd)
                .status()
                .unwrap();
            if !status.success() {
                mismatches.push(format!("{cmd} exited with {status}"));
            }
            outs.push(out);
        }
        let files = collect_files(&outs[0]);
        if files.is_empty() {
            mismatches.push(format!("{cmd} wrote no files"));
        }
        for f in files {
            let a = fs::read(outs[0].join(&f)).unwrap();
            let b = fs::read(outs[1].join(&f)).unwrap_or_default();
            if a != b {
                mismatches.push(format!("{cmd}/{f}"));
            }
        }
    }
    // Single-artifact commands, chained on the files written by `gen`.
    let chain: [(&str, &[&str]); 8] = [
        ("gen", &["gen"]),
        ("pt", &["pretrain", "--data", "gen/seed_3/pretrain.json", "--logits-on", "gen/seed_3/val.json"]),
        ("zs", &["pretrain", "--data", "gen/seed_3/pretrain.json", "--logits-on", "gen/seed_3/test.json"]),
        ("ep", &["estimate-prior", "--logits", "pt/logits.csv"]),
        ("ft", &["finetune", "--model", "pt/model.json", "--data", "gen/seed_3/train.json", "--method", "la", "--logits-on", "gen/seed_3/test.json"]),
        ("adj", &["adjust", "--logits", "ft/logits.csv", "--source-prior", "ep/prior.json", "--zs", "zs/logits.csv", "--q-hat", "ep/prior.json"]),
        ("fu", &["fuse", "--logits", "ft/logits.csv", "zs/logits.csv", "--priors", "ep/prior.json", "ep/prior.json"]),
        ("ev", &["eval", "--logits", "adj/adjusted.csv", "--prior", "ep/prior.json"]),
    ];
    let roots = [dir.join("chain-0"), dir.join("chain-1")];
    for root in &roots {
        fs::create_dir_all(root).unwrap();
        for (out, args) in &chain {
            let status = Command::new(env!("CARGO_BIN_EXE_dualtail"))
                .current_dir(root)
                .args(["--quiet", "--config"])
                .arg(&cfg_path)
                .args(["--out", out])
                .args(*args)
                .status()
                .unwrap();
            if !status.success() {
                mismatches.push(format!("{} exited with {status}", args[0]));
            }
        }
    }
    for f in collect_files(&roots[0]) {
        if fs::read(roots[0].join(&f)).unwrap() != fs::read(roots[1].join(&f)).unwrap_or_default() {
            mismatches.push(format!("chain/{f}"));
        }
    }
    let detail = if mismatches.is_empty() {
        format!("{} commands byte-identical", commands.len() + chain.len())
    } else {
        mismatches.join(", ")
    };
    verdict(mismatches.is_empty(), detail)
}

/// Result files under `dir`, relative; manifests are skipped since they
/// record wall-clock time.
fn collect_files(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                out.push(p.strip_prefix(dir).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

fn main() {
    // Honour `cargo test -- --list` and name filters the same way libtest
    // does for a single test called `acceptance`.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }
    // `ACCEPTANCE_ONLY=4,15` restricts the run to the listed criteria.
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |ids: &[u32]| only.as_ref().is_none_or(|o| ids.iter().any(|i| o.contains(i)));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let sub = |name: &str| tmp.path().join(name);
    let start = Instant::now();

    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut single = |id: u32, name: &'static str, f: &dyn Fn() -> Verdict| {
        if want(&[id]) {
            results.push((id, name, f()));
        }
    };
    single(1, "exact imbalance factors", &imbalance_factors);
    single(2, "loss identities", &loss_identities);
    single(3, "gradient checks", &gradient_checks);
    single(4, "prior recovery", &prior_recovery);
    single(5, "ensemble algebra", &ensemble_algebra);
    single(6, "scenario ordering", &|| scenario_ordering(&cfg, &sub("scenario")));
    single(10, "fusion size trend", &|| sweep_trend(&cfg, &sub("msweep")));
    single(12, "GLA component ordering", &|| gla_ordering(&cfg, &sub("ablation")));
    single(13, "confounder probe", &|| confounder(&cfg, &sub("confounder")));
    single(14, "scratch control", &|| scratch(&cfg, &sub("scratch")));
    single(15, "reproducibility", &|| reproducibility(&sub("repro")));
    if want(&[7, 8, 9, 11]) {
        let [c7, c8, c9, c11] = analysis_criteria(&cfg, &sub("analyze"));
        results.push((7, "tail-tail cell worst", c7));
        results.push((8, "LA narrows D-group spread", c8));
        results.push((9, "P-group spread persists under LA", c9));
        results.push((11, "KNN parity", c11));
    }
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, name, v) in &results {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {}", v.detail);
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
