//! Deterministic mini-batch gradient descent for the encoder + head network.
//!
//! The network is `logits = relu(x·W + b + α·(x·A)·B)·V + c`, where the
//! `(A, B)` low-rank adapter is optional. Every loss is cross-entropy of
//! prior-shifted logits, so the three training objectives share one
//! backward pass.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adjustment::{log_sum_exp, loss_shift, softmax_into, LogitMatrix};
use crate::distributions::LabelPrior;
use crate::error::{Error, Result};
use crate::matrix::{vec_mat_acc, Matrix};
use crate::par;

/// Low-rank additive update of the encoder weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// d×r
    pub down: Matrix,
    /// r×h
    pub up: Matrix,
    pub alpha: f64,
}

impl Adapter {
    /// Down-projection drawn like any other weight; up-projection zero so
    /// the adapter starts as the identity update.
    pub fn init(d: usize, h: usize, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
        }
        Ok(Self {
            down: normal_matrix(d, rank, rng),
            up: Matrix::zeros(rank, h),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }
}

/// Row-vector adapter layer: `x·W + α·(x·A)·B`.
pub fn adapter_forward(w: &Matrix, a: &Matrix, b: &Matrix, alpha: f64, x: &[f64]) -> Result<Vec<f64>> {
    let (d, h, r) = (w.rows(), w.cols(), a.cols());
    if r == 0 {
        return Err(Error::InvalidArgument("adapter rank must be at least 1".into()));
    }
    if x.len() != d || a.rows() != d || b.rows() != r || b.cols() != h {
        return Err(Error::shape(
            format!("x:{d}, A:{d}x{r}, B:{r}x{h}"),
            format!(
                "x:{}, A:{}x{}, B:{}x{}",
                x.len(),
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        ));
    }
    let mut out = vec![0.0; h];
    vec_mat_acc(x, w, &mut out);
    let mut u = vec![0.0; r];
    vec_mat_acc(x, a, &mut u);
    u.iter_mut().for_each(|v| *v *= alpha);
    vec_mat_acc(&u, b, &mut out);
    Ok(out)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let scale = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// d×h
    pub encoder_w: Matrix,
    pub encoder_b: Vec<f64>,
    pub adapter: Option<Adapter>,
    /// h×K
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

/// Which parameter blocks receive updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub encoder: bool,
    pub adapter: bool,
    pub head: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        adapter: true,
        head: true,
    };
    pub const HEAD: Trainable = Trainable {
        encoder: false,
        adapter: false,
        head: true,
    };
    pub const ADAPTER_AND_HEAD: Trainable = Trainable {
        encoder: false,
        adapter: true,
        head: true,
    };

    fn any(self) -> bool {
        self.encoder || self.adapter || self.head
    }
}

/// Training objective. All are cross-entropy on `logits + shift`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    LogitAdjusted { pi_s: LabelPrior },
    GlaTrain { pi_s: LabelPrior, q_hat: LabelPrior },
}

impl LossKind {
    pub fn shift(&self, k: usize) -> Vec<f64> {
        match self {
            LossKind::CrossEntropy => vec![0.0; k],
            LossKind::LogitAdjusted { pi_s } => loss_shift(&[pi_s]),
            LossKind::GlaTrain { pi_s, q_hat } => loss_shift(&[pi_s, q_hat]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            shuffle: true,
        }
    }

    pub fn finetune() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 50,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass.
struct Activations {
    /// `α·x·A`, present with an adapter.
    low: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

/// Accumulated gradients, same layout as [`Network`].
struct Grads {
    encoder_w: Matrix,
    encoder_b: Vec<f64>,
    down: Option<Matrix>,
    up: Option<Matrix>,
    head_w: Matrix,
    head_b: Vec<f64>,
}

impl Network {
    /// Seeded normal weights with scale `1/√fan_in`, zero offsets.
    pub fn init(d: usize, h: usize, k: usize, seed: u64) -> Result<Self> {
        if d == 0 || h < 2 || k < 2 {
            return Err(Error::InvalidArgument(format!(
                "network needs d >= 1, h >= 2, K >= 2 (got d={d}, h={h}, K={k})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder_w = normal_matrix(d, h, &mut rng);
        let head_w = normal_matrix(h, k, &mut rng);
        Ok(Self {
            encoder_w,
            encoder_b: vec![0.0; h],
            adapter: None,
            head_w,
            head_b: vec![0.0; k],
        })
    }

    /// Fresh head of the same shape, drawn from `seed`.
    pub fn random_head(h: usize, k: usize, seed: u64) -> (Matrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (normal_matrix(h, k, &mut rng), vec![0.0; k])
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_w.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder_w.cols()
    }

    pub fn classes(&self) -> usize {
        self.head_w.cols()
    }

    fn forward(&self, x: &[f64]) -> Activations {
        let mut pre = self.encoder_b.clone();
        vec_mat_acc(x, &self.encoder_w, &mut pre);
        let mut low = Vec::new();
        if let Some(ad) = &self.adapter {
            low = vec![0.0; ad.rank()];
            vec_mat_acc(x, &ad.down, &mut low);
            low.iter_mut().for_each(|v| *v *= ad.alpha);
            vec_mat_acc(&low, &ad.up, &mut pre);
        }
        let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        let mut logits = self.head_b.clone();
        vec_mat_acc(&hidden, &self.head_w, &mut logits);
        Activations {
            low,
            pre,
            hidden,
            logits,
        }
    }

    fn check_width(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} feature columns", self.input_dim()),
                features.cols(),
            ));
        }
        Ok(())
    }

    /// Logits for every row of `features`.
    pub fn logits(&self, features: &Matrix) -> Result<LogitMatrix> {
        self.check_width(features)?;
        let mut out = Matrix::zeros(features.rows(), self.classes());
        let k = self.classes();
        par::for_each_row_mut(out.as_mut_slice(), k, |i, row| {
            row.copy_from_slice(&self.forward(features.row(i)).logits);
        });
        LogitMatrix::new(out)
    }

    /// Encoder output `relu(...)` for every row.
    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        self.check_width(features)?;
        let h = self.hidden_dim();
        let mut out = Matrix::zeros(features.rows(), h);
        par::for_each_row_mut(out.as_mut_slice(), h, |i, row| {
            row.copy_from_slice(&self.forward(features.row(i)).hidden);
        });
        Ok(out)
    }

    fn zero_grads(&self) -> Grads {
        Grads {
            encoder_w: Matrix::zeros(self.encoder_w.rows(), self.encoder_w.cols()),
            encoder_b: vec![0.0; self.encoder_b.len()],
            down: self
                .adapter
                .as_ref()
                .map(|a| Matrix::zeros(a.down.rows(), a.down.cols())),
            up: self.adapter.as_ref().map(|a| Matrix::zeros(a.up.rows(), a.up.cols())),
            head_w: Matrix::zeros(self.head_w.rows(), self.head_w.cols()),
            head_b: vec![0.0; self.head_b.len()],
        }
    }

    /// Adds this sample's gradient into `g` and returns its loss.
    fn backward(&self, x: &[f64], y: usize, shift: &[f64], mask: Trainable, g: &mut Grads) -> f64 {
        let act = self.forward(x);
        let z: Vec<f64> = act.logits.iter().zip(shift).map(|(a, b)| a + b).collect();
        let loss = log_sum_exp(&z) - z[y];
        let mut dz = vec![0.0; z.len()];
        softmax_into(&z, &mut dz);
        dz[y] -= 1.0;

        if mask.head {
            for (i, &hi) in act.hidden.iter().enumerate() {
                if hi != 0.0 {
                    for (gw, d) in g.head_w.row_mut(i).iter_mut().zip(&dz) {
                        *gw += hi * d;
                    }
                }
            }
            for (gb, d) in g.head_b.iter_mut().zip(&dz) {
                *gb += d;
            }
        }
        if !(mask.encoder || mask.adapter) {
            return loss;
        }
        // dL/dpre = (V·dz) ⊙ 1[pre > 0]
        let dpre: Vec<f64> = (0..self.hidden_dim())
            .map(|i| {
                if act.pre[i] > 0.0 {
                    self.head_w.row(i).iter().zip(&dz).map(|(v, d)| v * d).sum()
                } else {
                    0.0
                }
            })
            .collect();
        if mask.encoder {
            for (j, &xj) in x.iter().enumerate() {
                if xj != 0.0 {
                    for (gw, d) in g.encoder_w.row_mut(j).iter_mut().zip(&dpre) {
                        *gw += xj * d;
                    }
                }
            }
            for (gb, d) in g.encoder_b.iter_mut().zip(&dpre) {
                *gb += d;
            }
        }
        if let (true, Some(ad), Some(gd), Some(gu)) = (mask.adapter, &self.adapter, g.down.as_mut(), g.up.as_mut()) {
            // pre += low·B with low = α·x·A
            for (r, &lr) in act.low.iter().enumerate() {
                for (gb, d) in gu.row_mut(r).iter_mut().zip(&dpre) {
                    *gb += lr * d;
                }
            }
            let dlow: Vec<f64> = (0..ad.rank())
                .map(|r| ad.alpha * ad.up.row(r).iter().zip(&dpre).map(|(b, d)| b * d).sum::<f64>())
                .collect();
            for (j, &xj) in x.iter().enumerate() {
                for (ga, d) in gd.row_mut(j).iter_mut().zip(&dlow) {
                    *ga += xj * d;
                }
            }
        }
        loss
    }

    fn apply(&mut self, g: &Grads, mask: Trainable, step: f64) {
        fn sub(p: &mut [f64], g: &[f64], step: f64) {
            for (a, b) in p.iter_mut().zip(g) {
                *a -= step * b;
            }
        }
        if mask.encoder {
            sub(self.encoder_w.as_mut_slice(), g.encoder_w.as_slice(), step);
            sub(&mut self.encoder_b, &g.encoder_b, step);
        }
        if mask.adapter {
            if let (Some(ad), Some(gd), Some(gu)) = (self.adapter.as_mut(), &g.down, &g.up) {
                sub(ad.down.as_mut_slice(), gd.as_slice(), step);
                sub(ad.up.as_mut_slice(), gu.as_slice(), step);
            }
        }
        if mask.head {
            sub(self.head_w.as_mut_slice(), g.head_w.as_slice(), step);
            sub(&mut self.head_b, &g.head_b, step);
        }
    }

    /// Parameters of the masked blocks, flattened in declaration order.
    pub fn flatten(&self, mask: Trainable) -> Vec<f64> {
        let mut v = Vec::new();
        if mask.encoder {
            v.extend_from_slice(self.encoder_w.as_slice());
            v.extend_from_slice(&self.encoder_b);
        }
        if mask.adapter {
            if let Some(ad) = &self.adapter {
                v.extend_from_slice(ad.down.as_slice());
                v.extend_from_slice(ad.up.as_slice());
            }
        }
        if mask.head {
            v.extend_from_slice(self.head_w.as_slice());
            v.extend_from_slice(&self.head_b);
        }
        v
    }

    /// Inverse of [`Network::flatten`].
    pub fn with_flat(&self, mask: Trainable, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        if mask.encoder {
            take(out.encoder_w.as_mut_slice());
            take(&mut out.encoder_b);
        }
        if mask.adapter {
            if let Some(ad) = out.adapter.as_mut() {
                take(ad.down.as_mut_slice());
                take(ad.up.as_mut_slice());
            }
        }
        if mask.head {
            take(out.head_w.as_mut_slice());
            take(&mut out.head_b);
        }
        out
    }

    /// Mean loss over the dataset and its gradient w.r.t. the masked blocks.
    pub fn loss_and_grad(&self, features: &Matrix, labels: &[usize], loss: &LossKind, mask: Trainable) -> (f64, Vec<f64>) {
        let shift = loss.shift(self.classes());
        let mut g = self.zero_grads();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total += self.backward(features.row(i), y, &shift, mask, &mut g);
        }
        let n = labels.len() as f64;
        let grads = Network {
            encoder_w: g.encoder_w,
            encoder_b: g.encoder_b,
            adapter: self.adapter.as_ref().map(|a| Adapter {
                down: g.down.clone().unwrap_or_else(|| a.down.clone()),
                up: g.up.clone().unwrap_or_else(|| a.up.clone()),
                alpha: a.alpha,
            }),
            head_w: g.head_w,
            head_b: g.head_b,
        };
        let flat = grads.flatten(mask).into_iter().map(|v| v / n).collect();
        (total / n, flat)
    }
}

/// Row order used by [`train`]: by label, then lexicographically by feature
/// bit pattern. Training therefore sees the dataset as a multiset.
fn canonical_order(features: &Matrix, labels: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by(|&a, &b| {
        labels[a].cmp(&labels[b]).then_with(|| {
            features
                .row(a)
                .iter()
                .zip(features.row(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    idx
}

/// Mini-batch gradient descent on the masked blocks.
///
/// Returns the trained network and the mean per-sample loss of each epoch.
pub fn train(
    params: &Network,
    features: &Matrix,
    labels: &[usize],
    loss: &LossKind,
    mask: Trainable,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<f64>)> {
    cfg.validate()?;
    if !mask.any() {
        return Err(Error::InvalidArgument("no parameter block is trainable".into()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if features.rows() != labels.len() {
        return Err(Error::shape(format!("{} feature rows", labels.len()), features.rows()));
    }
    if features.cols() != params.input_dim() {
        return Err(Error::shape(params.input_dim(), features.cols()));
    }
    let k = params.classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label: y, classes: k });
    }

    let shift = loss.shift(k);
    let mut net = params.clone();
    let mut order = canonical_order(features, labels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = net.zero_grads();
            let mut batch_loss = 0.0;
            for &i in chunk {
                batch_loss += net.backward(features.row(i), labels[i], &shift, mask, &mut g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, batch });
            }
            epoch_loss += batch_loss;
            net.apply(&g, mask, cfg.learning_rate / chunk.len() as f64);
        }
        trace.push(epoch_loss / labels.len() as f64);
    }
    Ok((net, trace))
}

/// Largest relative error between an analytic gradient and central finite
/// differences.
///
/// Checks every coordinate, or a seeded sample of 200 when there are more.
pub fn grad_check<F>(loss_and_grad: F, params: &[f64], eps: f64, seed: u64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_and_grad(params);
    let mut coords: Vec<usize> = (0..params.len()).collect();
    if coords.len() > 200 {
        coords.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        coords.truncate(200);
        coords.sort_unstable();
    }
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = loss_and_grad(&probe).0;
        probe[i] = orig - eps;
        let minus = loss_and_grad(&probe).0;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjustment::{cross_entropy, gla_train_loss_grad, la_loss_grad};

    fn toy(seed: u64, n: usize, d: usize, k: usize) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let data = (0..n * d)
            .map(|i| rng.sample::<f64, _>(StandardNormal) + if i % d == labels[i / d] % d { 2.0 } else { 0.0 })
            .collect();
        (Matrix::from_vec(n, d, data).unwrap(), labels)
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let f = |p: &[f64]| {
            let v: f64 = p.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x).sum();
            let g = p.iter().enumerate().map(|(i, x)| 2.0 * (i as f64 + 1.0) * x).collect();
            (v, g)
        };
        assert!(grad_check(f, &[0.3, -1.2, 2.0, 0.7], 1e-5, 0) <= 1e-7);
    }

    #[test]
    fn adjusted_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let row: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..1.0)).collect();
            let q: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..1.0)).collect();
            let pi = LabelPrior::from_weights(&w).unwrap();
            let qh = LabelPrior::from_weights(&q).unwrap();
            let y = rng.random_range(0..5);
            let e1 = grad_check(|r| la_loss_grad(r, y, &pi).unwrap(), &row, 1e-5, 0);
            let e2 = grad_check(|r| gla_train_loss_grad(r, y, &pi, &qh).unwrap(), &row, 1e-5, 0);
            assert!(e1 <= 1e-4 && e2 <= 1e-4, "{e1} {e2}");
        }
    }

    #[test]
    fn shifted_gradients_equal_ce_gradient_at_shifted_logits() {
        let pi = LabelPrior::new(vec![0.5, 0.3, 0.2]).unwrap();
        let row = [0.4, -0.3, 1.1];
        let (_, g) = la_loss_grad(&row, 1, &pi).unwrap();
        let shifted: Vec<f64> = row.iter().zip(pi.probs()).map(|(f, p)| f + p.ln()).collect();
        let ce_grad = |r: &[f64]| {
            let mut p = vec![0.0; 3];
            softmax_into(r, &mut p);
            p[1] -= 1.0;
            (cross_entropy(r, 1), p)
        };
        let (_, g_ce) = ce_grad(&shifted);
        for (a, b) in g.iter().zip(&g_ce) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn network_backprop_matches_finite_differences() {
        let (x, y) = toy(1, 12, 4, 3);
        let mut net = Network::init(4, 6, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ad = Adapter::init(4, 6, 2, 0.7, &mut rng).unwrap();
        ad.up = normal_matrix(2, 6, &mut rng);
        net.adapter = Some(ad);
        net.encoder_b = vec![0.1; 6];
        let pi = LabelPrior::new(vec![0.6, 0.3, 0.1]).unwrap();
        let q = LabelPrior::new(vec![0.2, 0.5, 0.3]).unwrap();
        for loss in [
            LossKind::CrossEntropy,
            LossKind::LogitAdjusted { pi_s: pi.clone() },
            LossKind::GlaTrain { pi_s: pi.clone(), q_hat: q.clone() },
        ] {
            let mask = Trainable::ALL;
            let p0 = net.flatten(mask);
            let err = grad_check(|p| net.with_flat(mask, p).loss_and_grad(&x, &y, &loss, mask), &p0, 1e-5, 0);
            assert!(err <= 1e-4, "{loss:?}: {err}");
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (x, y) = toy(2, 30, 5, 3);
        let net = Network::init(5, 8, 3, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 4,
            batch_size: 8,
            ..TrainConfig::pretrain()
        };
        let (out, trace) = train(&net, &x, &y, &LossKind::CrossEntropy, Trainable::ALL, &cfg).unwrap();
        assert_eq!(out, net);
        // Epoch means differ only by the summation order of shuffled batches.
        assert!(trace.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-12 * w[0].abs()));
    }

    #[test]
    fn single_sample_linear_head_descends() {
        let (x, y) = toy(4, 1, 5, 3);
        let net = Network::init(5, 8, 3, 7).unwrap();
        // CE Hessian in the logits is bounded by 1/2; the head's is bounded
        // by (|h|² + 1)/2, so lr < 2 / that is stable.
        let h = net.embed(&x).unwrap();
        let bound = 4.0 / (h.row(0).iter().map(|v| v * v).sum::<f64>() + 1.0);
        let cfg = TrainConfig {
            learning_rate: 0.9 * bound,
            epochs: 30,
            batch_size: 1,
            ..TrainConfig::pretrain()
        };
        let (_, trace) = train(&net, &x, &y, &LossKind::CrossEntropy, Trainable::HEAD, &cfg).unwrap();
        assert!(trace.windows(2).all(|w| w[1] < w[0]), "{trace:?}");
    }

    #[test]
    fn deterministic_and_row_order_free() {
        let (x, y) = toy(8, 40, 4, 4);
        let net = Network::init(4, 6, 4, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            ..TrainConfig::pretrain()
        };
        let a = train(&net, &x, &y, &LossKind::CrossEntropy, Trainable::ALL, &cfg).unwrap();
        let b = train(&net, &x, &y, &LossKind::CrossEntropy, Trainable::ALL, &cfg).unwrap();
        assert_eq!(a, b);

        let full = TrainConfig {
            shuffle: false,
            batch_size: 1000,
            ..cfg
        };
        let perm: Vec<usize> = (0..40).rev().collect();
        let xp = x.select_rows(&perm);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let a = train(&net, &x, &y, &LossKind::CrossEntropy, Trainable::ALL, &full).unwrap();
        let b = train(&net, &xp, &yp, &LossKind::CrossEntropy, Trainable::ALL, &full).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_blocks_stay_frozen() {
        let (x, y) = toy(9, 20, 4, 2);
        let net = Network::init(4, 5, 2, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::finetune()
        };
        let (out, _) = train(&net, &x, &y, &LossKind::CrossEntropy, Trainable::HEAD, &cfg).unwrap();
        assert_eq!(out.encoder_w, net.encoder_w);
        assert_eq!(out.encoder_b, net.encoder_b);
        assert_ne!(out.head_w, net.head_w);
        assert!(train(&net, &x, &y, &LossKind::CrossEntropy, Trainable::default(), &cfg).is_err());
    }

    #[test]
    fn divergence_reports_position() {
        let (x, y) = toy(10, 20, 4, 2);
        let net = Network::init(4, 5, 2, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 5,
            batch_size: 4,
            ..TrainConfig::pretrain()
        };
        let r = train(&net, &x, &y, &LossKind::CrossEntropy, Trainable::ALL, &cfg);
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn adapter_layer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = normal_matrix(3, 4, &mut rng);
        let a = normal_matrix(3, 2, &mut rng);
        let b = normal_matrix(2, 4, &mut rng);
        let x = [0.5, -1.0, 2.0];
        let base = {
            let mut o = vec![0.0; 4];
            vec_mat_acc(&x, &w, &mut o);
            o
        };
        assert_eq!(adapter_forward(&w, &a, &b, 0.0, &x).unwrap(), base);
        assert_eq!(adapter_forward(&w, &Matrix::zeros(3, 2), &b, 1.5, &x).unwrap(), base);
        assert_eq!(adapter_forward(&w, &a, &Matrix::zeros(2, 4), 1.5, &x).unwrap(), base);
        let i3 = Matrix::identity(3);
        let out = adapter_forward(&Matrix::zeros(3, 3), &i3, &i3, 2.0, &x).unwrap();
        assert_eq!(out, vec![1.0, -2.0, 4.0]);
        assert!(adapter_forward(&w, &a, &b, 1.0, &[1.0, 2.0]).is_err());
        assert!(adapter_forward(&w, &Matrix::zeros(3, 0), &Matrix::zeros(0, 4), 1.0, &x).is_err());
    }
}
