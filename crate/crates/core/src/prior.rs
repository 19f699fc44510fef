//! Estimation of the pre-training label prior from zero-shot logits.
//!
//! The estimate minimizes the mean cross-entropy of `logits − log q` on a
//! balanced labeled set over the probability simplex. The simplex
//! constraint is removed by writing `q = softmax(w)`; because
//! `log softmax(w) = w − lse(w)` and cross-entropy ignores per-row
//! constants, the objective in `w` is simply `mean CE(logits − w, y)`,
//! which is convex. It is minimized by gradient descent from several
//! seeded starts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjustment::{log_sum_exp, softmax_into, LogitMatrix};
use crate::distributions::{ClassCounts, LabelPrior};
use crate::error::{Error, Result};
use crate::par;

/// Lower bound on every entry of an estimated prior.
pub const PRIOR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// An accepted step counts as stalled when it improves the objective by less than this.
    pub tolerance: f64,
    /// Consecutive stalled steps that end a restart.
    pub patience: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_iters: 2000,
            tolerance: 1e-8,
            patience: 50,
            restarts: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    pub q_hat: LabelPrior,
    /// Mean cross-entropy of `logits − log q_hat`.
    pub objective_value: f64,
    pub restarts_used: usize,
    /// Whether the winning restart met the stall criterion before `max_iters`.
    pub converged: bool,
}

/// Result of one gradient-descent run.
#[derive(Clone, Debug)]
pub struct Descent {
    pub params: Vec<f64>,
    pub objective: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub converged: bool,
}

fn validate(logits: &LogitMatrix, labels: &[usize]) -> Result<ClassCounts> {
    let k = logits.classes();
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            format!("{} labels", logits.rows()),
            labels.len(),
        ));
    }
    if labels.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need at least K={k} samples, got {}",
            labels.len()
        )));
    }
    let counts = ClassCounts::tally(labels, k)?;
    if let Some(c) = counts.counts().iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    Ok(counts)
}

/// Mean cross-entropy of `logits − log q` at the labels.
///
/// Infinite when `q` has a zero entry.
pub fn prior_objective(logits: &LogitMatrix, labels: &[usize], q: &[f64]) -> f64 {
    let log_q: Vec<f64> = q.iter().map(|p| p.ln()).collect();
    if log_q.iter().any(|l| l.is_infinite()) {
        return f64::INFINITY;
    }
    shifted_objective(logits, labels, &log_q)
}

/// `mean CE(logits − w, y)`.
fn shifted_objective(logits: &LogitMatrix, labels: &[usize], w: &[f64]) -> f64 {
    let mut z = vec![0.0; w.len()];
    let mut total = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        for ((zj, l), wj) in z.iter_mut().zip(logits.row(n)).zip(w) {
            *zj = l - wj;
        }
        total += log_sum_exp(&z) - z[y];
    }
    total / labels.len() as f64
}

/// Objective and its gradient `mean(onehot − softmax(logits − w))`.
fn objective_and_grad(logits: &LogitMatrix, labels: &[usize], w: &[f64]) -> (f64, Vec<f64>) {
    let k = w.len();
    let mut z = vec![0.0; k];
    let mut p = vec![0.0; k];
    let mut grad = vec![0.0; k];
    let mut total = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        for ((zj, l), wj) in z.iter_mut().zip(logits.row(n)).zip(w) {
            *zj = l - wj;
        }
        total += log_sum_exp(&z) - z[y];
        softmax_into(&z, &mut p);
        for (g, pj) in grad.iter_mut().zip(&p) {
            *g -= pj;
        }
        grad[y] += 1.0;
    }
    let n = labels.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}

/// Gradient descent on the unconstrained objective from `init`.
///
/// A step that would increase the objective is rejected and the step size
/// halved, so the recorded trace never increases.
pub fn descend(logits: &LogitMatrix, labels: &[usize], init: Vec<f64>, opts: &SolverOptions) -> Descent {
    let mut w = init;
    let (mut obj, mut grad) = objective_and_grad(logits, labels, &w);
    let mut trace = vec![obj];
    let mut lr = opts.learning_rate;
    let mut stalled = 0;
    let mut converged = false;
    let mut candidate = vec![0.0; w.len()];
    for _ in 0..opts.max_iters {
        for ((c, wj), g) in candidate.iter_mut().zip(&w).zip(&grad) {
            *c = wj - lr * g;
        }
        let (next_obj, next_grad) = objective_and_grad(logits, labels, &candidate);
        if next_obj <= obj {
            let improvement = obj - next_obj;
            std::mem::swap(&mut w, &mut candidate);
            obj = next_obj;
            grad = next_grad;
            trace.push(obj);
            if improvement < opts.tolerance {
                stalled += 1;
                if stalled >= opts.patience {
                    converged = true;
                    break;
                }
            } else {
                stalled = 0;
            }
        } else {
            lr *= 0.5;
            if lr < 1e-14 {
                converged = true;
                break;
            }
        }
    }
    Descent {
        params: w,
        objective: obj,
        trace,
        converged,
    }
}

/// Raises entries below `floor` to it and rescales the rest so the vector
/// still sums to one.
pub fn apply_floor(q: &[f64], floor: f64) -> Vec<f64> {
    let k = q.len();
    let mut pinned = vec![false; k];
    let mut out = q.to_vec();
    loop {
        let pinned_mass = floor * pinned.iter().filter(|&&p| p).count() as f64;
        let free_mass: f64 = q
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| !p)
            .map(|(v, _)| v)
            .sum();
        let scale = (1.0 - pinned_mass) / free_mass;
        let mut changed = false;
        for j in 0..k {
            if pinned[j] {
                out[j] = floor;
            } else {
                out[j] = q[j] * scale;
                if out[j] < floor {
                    pinned[j] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return out;
        }
    }
}

fn restart_init(seed: u64, restart: usize, k: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64 + 1);
    (0..k).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Estimates the pre-training label prior from zero-shot logits on a
/// labeled evaluation set in which every class appears.
pub fn estimate_prior(logits: &LogitMatrix, labels: &[usize], opts: &SolverOptions) -> Result<PriorEstimate> {
    validate(logits, labels)?;
    if opts.restarts == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "solver needs at least one restart and a positive learning rate".into(),
        ));
    }
    let k = logits.classes();
    let runs = par::map_range(opts.restarts, |r| {
        descend(logits, labels, restart_init(opts.seed, r, k), opts)
    });
    // Lowest objective wins; ties keep the earliest restart.
    let best = runs
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.objective < runs[b].objective { i } else { b });
    let run = &runs[best];
    let mut q = vec![0.0; k];
    softmax_into(&run.params, &mut q);
    let q = apply_floor(&q, PRIOR_FLOOR);
    let objective_value = prior_objective(logits, labels, &q);
    Ok(PriorEstimate {
        q_hat: LabelPrior::new(q)?,
        objective_value,
        restarts_used: runs.len(),
        converged: run.converged,
    })
}

/// Exhaustive search over the simplex lattice with spacing `step` (K ≤ 3).
///
/// The lattice is `{i / n}` with `n = floor(1 / step)`; points are visited
/// in lexicographic order of their leading coordinates and the first
/// minimizer is returned. When `n = 0` the lattice degenerates to the
/// barycenter.
pub fn grid_oracle_prior(logits: &LogitMatrix, labels: &[usize], step: f64) -> Result<LabelPrior> {
    let k = logits.classes();
    if !(2..=3).contains(&k) {
        return Err(Error::Unsupported(format!(
            "grid oracle enumerates K in {{2, 3}}, got K={k}"
        )));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let counts = validate(logits, labels)?;
    let n = (1.0 / step + 1e-9).floor() as usize;
    if n == 0 {
        return LabelPrior::uniform(k);
    }

    // CE(z − log q, y) = max + log Σ_j e_j / q_j − z_y + log q_y with
    // e_j = exp(z_j − max); the q-free part is dropped.
    let scaled: Vec<Vec<f64>> = (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().map(|v| (v - m).exp()).collect()
        })
        .collect();
    let freq: Vec<f64> = counts
        .counts()
        .iter()
        .map(|&c| c as f64 / labels.len() as f64)
        .collect();
    let score = |q: &[f64]| -> f64 {
        if q.iter().any(|&p| p <= 0.0) {
            return f64::INFINITY;
        }
        let inv: Vec<f64> = q.iter().map(|p| 1.0 / p).collect();
        let mut acc = 0.0;
        for e in &scaled {
            let s: f64 = e.iter().zip(&inv).map(|(a, b)| a * b).sum();
            acc += s.ln();
        }
        acc / scaled.len() as f64 + freq.iter().zip(q).map(|(f, p)| f * p.ln()).sum::<f64>()
    };

    let nf = n as f64;
    let point = |i: usize, j: usize| -> Vec<f64> {
        if k == 2 {
            vec![i as f64 / nf, (n - i) as f64 / nf]
        } else {
            vec![i as f64 / nf, j as f64 / nf, (n - i - j) as f64 / nf]
        }
    };
    // Best (score, j) for each leading index i.
    let per_i = par::map_range(n + 1, |i| {
        let j_max = if k == 2 { 0 } else { n - i };
        let mut best = (f64::INFINITY, 0usize);
        for j in 0..=j_max {
            let s = score(&point(i, j));
            if s < best.0 {
                best = (s, j);
            }
        }
        best
    });
    let (mut bi, mut bj, mut bs) = (0, 0, f64::INFINITY);
    for (i, &(s, j)) in per_i.iter().enumerate() {
        if s < bs {
            (bi, bj, bs) = (i, j, s);
        }
    }
    LabelPrior::new(point(bi, bj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use rand::Rng;

    /// Class-symmetric base logits: each row favours its label by a random
    /// margin and every class is treated identically.
    pub(crate) fn planted(k: usize, per_class: usize, q_star: &[f64], seed: u64) -> (LogitMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for y in 0..k {
            for _ in 0..per_class {
                let row: Vec<f64> = (0..k)
                    .map(|j| {
                        let base: f64 = rng.sample::<f64, _>(StandardNormal) + if j == y { 1.5 } else { 0.0 };
                        base + q_star[j].ln()
                    })
                    .collect();
                rows.push(row);
                labels.push(y);
            }
        }
        (LogitMatrix::new(Matrix::from_rows(&rows).unwrap()).unwrap(), labels)
    }

    fn linf(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn recovers_planted_prior() {
        let q_star = [0.7, 0.2, 0.1];
        let (l, y) = planted(3, 700, &q_star, 11);
        let est = estimate_prior(&l, &y, &SolverOptions::default()).unwrap();
        assert!(linf(est.q_hat.probs(), &q_star) <= 0.02, "{:?}", est.q_hat);
        assert_eq!(est.restarts_used, 8);
    }

    #[test]
    fn symmetric_logits_give_uniform() {
        let (l, y) = planted(4, 500, &[0.25; 4], 3);
        let est = estimate_prior(&l, &y, &SolverOptions::default()).unwrap();
        assert!(linf(est.q_hat.probs(), &[0.25; 4]) <= 0.02);
    }

    #[test]
    fn missing_class_is_rejected() {
        let l = LogitMatrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let r = estimate_prior(&l, &[0, 0, 1], &SolverOptions::default());
        assert!(matches!(r, Err(Error::MissingClass(2))));
    }

    #[test]
    fn objective_is_scale_free_in_q() {
        let (l, y) = planted(3, 50, &[0.5, 0.3, 0.2], 5);
        let w = [0.3, -0.4, 1.1];
        let a = shifted_objective(&l, &y, &w);
        let shifted: Vec<f64> = w.iter().map(|v| v + 2.5).collect();
        let b = shifted_objective(&l, &y, &shifted);
        assert!((a - b).abs() < 1e-12);
        let mut q = [0.0; 3];
        softmax_into(&w, &mut q);
        assert!((prior_objective(&l, &y, &q) - a).abs() < 1e-12);
    }

    #[test]
    fn descent_trace_is_monotone() {
        let (l, y) = planted(5, 80, &[0.4, 0.3, 0.15, 0.1, 0.05], 9);
        let opts = SolverOptions {
            learning_rate: 5.0,
            ..Default::default()
        };
        for r in 0..3 {
            let d = descend(&l, &y, restart_init(1, r, 5), &opts);
            assert!(d.trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (l, y) = planted(3, 100, &[0.6, 0.3, 0.1], 2);
        let opts = SolverOptions {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(estimate_prior(&l, &y, &opts).unwrap(), estimate_prior(&l, &y, &opts).unwrap());
    }

    #[test]
    fn floor_keeps_simplex() {
        let q = apply_floor(&[0.999_999_9, 5e-8, 5e-8], PRIOR_FLOOR);
        assert!(q.iter().all(|&v| v >= PRIOR_FLOOR));
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_oracle_symmetric_and_degenerate() {
        let (l, y) = planted(2, 300, &[0.5, 0.5], 4);
        let q = grid_oracle_prior(&l, &y, 0.01).unwrap();
        assert!(linf(q.probs(), &[0.5, 0.5]) <= 0.1);
        // Coarse lattices: n = 0 gives the barycenter, n = 1 only vertices.
        assert_eq!(grid_oracle_prior(&l, &y, 2.0).unwrap(), LabelPrior::uniform(2).unwrap());
        let v = grid_oracle_prior(&l, &y, 1.0).unwrap();
        assert!(v.probs().contains(&1.0));
        let (l4, y4) = planted(4, 10, &[0.25; 4], 4);
        assert!(matches!(grid_oracle_prior(&l4, &y4, 0.01), Err(Error::Unsupported(_))));
    }

    #[test]
    fn k2_matches_grid_within_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let q1: f64 = rng.random_range(0.15..0.85);
        let (l, y) = planted(2, 100, &[q1, 1.0 - q1], 78);
        let est = estimate_prior(&l, &y, &SolverOptions::default()).unwrap();
        let grid = grid_oracle_prior(&l, &y, 1e-3).unwrap();
        assert!(linf(est.q_hat.probs(), grid.probs()) <= 2e-3, "{:?} vs {:?}", est.q_hat, grid);
    }
}
