//! Closed-form logit adjustments, the adjusted losses and backdoor fusion.
//!
//! All row-wise operations are independent per row, so the parallel and
//! sequential builds produce bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::distributions::LabelPrior;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;

/// Floor applied to prior entries before `ln` inside loss evaluation.
pub const LOSS_PRIOR_FLOOR: f64 = 1e-12;

/// N×K matrix of finite classifier scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct LogitMatrix(Matrix);

impl LogitMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if m.cols() < 2 {
            return Err(Error::TooFewClasses {
                min: 2,
                found: m.cols(),
            });
        }
        if let Some((row, col)) = m.find_non_finite() {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Row-wise argmax, ties to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.0.iter_rows().map(argmax).collect()
    }

    fn map_rows<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(usize, &mut [f64]) + Send + Sync,
    {
        let mut out = self.0.clone();
        let k = out.cols();
        par::for_each_row_mut(out.as_mut_slice(), k, f);
        Self::new(out)
    }
}

impl TryFrom<Matrix> for LogitMatrix {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        Self::new(m)
    }
}

impl From<LogitMatrix> for Matrix {
    fn from(l: LogitMatrix) -> Self {
        l.0
    }
}

/// N×K matrix whose rows are probability vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        for (i, row) in m.iter_rows().enumerate() {
            if let Some(j) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidArgument(format!(
                    "probability at ({i}, {j}) = {} is outside [0, 1]",
                    row[j]
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.get(r, c)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.0.iter_rows().map(argmax).collect()
    }
}

impl TryFrom<Matrix> for ProbMatrix {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        Self::new(m)
    }
}

impl From<ProbMatrix> for Matrix {
    fn from(p: ProbMatrix) -> Self {
        p.0
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `log Σ exp(row)`, max-subtracted.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Stable softmax of one row into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Cross-entropy `lse(row) - row[label]`.
pub fn cross_entropy(row: &[f64], label: usize) -> f64 {
    log_sum_exp(row) - row[label]
}

fn check_row(row: &[f64], label: usize, k: usize) -> Result<()> {
    if row.len() != k {
        return Err(Error::shape(format!("{k} logits"), row.len()));
    }
    if label >= k {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    if let Some(col) = row.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: 0, col });
    }
    Ok(())
}

/// `log[1 + Σ_{j≠y} exp(a_j)]` with `a_j = (f_j + s_j) - (f_y + s_y)`.
///
/// This is the pairwise-ratio form of the adjusted loss, evaluated without
/// forming the softmax.
fn ratio_form_loss(row: &[f64], label: usize, shift: &[f64]) -> f64 {
    let anchor = row[label] + shift[label];
    let mut m = 0.0f64;
    for j in 0..row.len() {
        if j != label {
            m = m.max(row[j] + shift[j] - anchor);
        }
    }
    let mut acc = (-m).exp();
    for j in 0..row.len() {
        if j != label {
            acc += (row[j] + shift[j] - anchor - m).exp();
        }
    }
    m + acc.ln()
}

/// Gradient of `CE(row + shift, label)` w.r.t. `row`.
fn shifted_ce_grad(row: &[f64], label: usize, shift: &[f64]) -> Vec<f64> {
    let z: Vec<f64> = row.iter().zip(shift).map(|(f, s)| f + s).collect();
    let mut g = vec![0.0; row.len()];
    softmax_into(&z, &mut g);
    g[label] -= 1.0;
    g
}

/// Prior shift used by the loss-time adjustments.
///
/// Shifts are reported relative to their maximum: adding a constant to every
/// logit leaves the loss unchanged, and a uniform prior maps to exact zeros.
pub fn loss_shift(priors: &[&LabelPrior]) -> Vec<f64> {
    let k = priors[0].len();
    let mut s = vec![0.0; k];
    for p in priors {
        for (acc, l) in s.iter_mut().zip(p.log_floored(LOSS_PRIOR_FLOOR)) {
            *acc += l;
        }
    }
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    s.iter_mut().for_each(|v| *v -= m);
    s
}

/// Post-hoc logit adjustment: `logits + log π_t − log π_s`.
pub fn la_posthoc(logits: &LogitMatrix, pi_s: &LabelPrior, pi_t: &LabelPrior) -> Result<LogitMatrix> {
    let k = logits.classes();
    if pi_s.len() != k || pi_t.len() != k {
        return Err(Error::shape(format!("{k} classes"), format!("{} / {}", pi_s.len(), pi_t.len())));
    }
    pi_s.require_positive()?;
    pi_t.require_positive()?;
    let delta: Vec<f64> = pi_t
        .probs()
        .iter()
        .zip(pi_s.probs())
        .map(|(t, s)| t.ln() - s.ln())
        .collect();
    logits.map_rows(|_, row| {
        for (v, d) in row.iter_mut().zip(&delta) {
            *v += d;
        }
    })
}

/// Logit-adjusted loss for one row under the training prior `pi_s`.
pub fn la_loss(row: &[f64], label: usize, pi_s: &LabelPrior) -> Result<f64> {
    check_row(row, label, pi_s.len())?;
    pi_s.require_positive()?;
    Ok(ratio_form_loss(row, label, &loss_shift(&[pi_s])))
}

/// [`la_loss`] and its gradient w.r.t. the logits.
pub fn la_loss_grad(row: &[f64], label: usize, pi_s: &LabelPrior) -> Result<(f64, Vec<f64>)> {
    let loss = la_loss(row, label, pi_s)?;
    Ok((loss, shifted_ce_grad(row, label, &loss_shift(&[pi_s]))))
}

/// Loss correcting both the downstream prior and the estimated pre-training prior.
pub fn gla_train_loss(row: &[f64], label: usize, pi_s: &LabelPrior, q_hat: &LabelPrior) -> Result<f64> {
    check_row(row, label, pi_s.len())?;
    if q_hat.len() != pi_s.len() {
        return Err(Error::shape(pi_s.len(), q_hat.len()));
    }
    pi_s.require_positive()?;
    q_hat.require_positive()?;
    Ok(ratio_form_loss(row, label, &loss_shift(&[pi_s, q_hat])))
}

/// [`gla_train_loss`] and its gradient w.r.t. the logits.
pub fn gla_train_loss_grad(
    row: &[f64],
    label: usize,
    pi_s: &LabelPrior,
    q_hat: &LabelPrior,
) -> Result<(f64, Vec<f64>)> {
    let loss = gla_train_loss(row, label, pi_s, q_hat)?;
    Ok((loss, shifted_ce_grad(row, label, &loss_shift(&[pi_s, q_hat]))))
}

/// Which terms of the generalized adjustment to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnsembleMode {
    /// Zero-shot and fine-tuned terms summed.
    Full,
    /// `zs − log q̂` only.
    ZsOnly,
    /// `ft − log π_s` only.
    FtOnly,
}

/// Generalized logit adjustment ensemble of zero-shot and fine-tuned logits.
pub fn gla_ensemble(
    zs: &LogitMatrix,
    ft: &LogitMatrix,
    q_hat: &LabelPrior,
    pi_s: &LabelPrior,
    mode: EnsembleMode,
) -> Result<LogitMatrix> {
    if zs.rows() != ft.rows() || zs.classes() != ft.classes() {
        return Err(Error::shape(
            format!("{}x{}", zs.rows(), zs.classes()),
            format!("{}x{}", ft.rows(), ft.classes()),
        ));
    }
    let k = zs.classes();
    if q_hat.len() != k || pi_s.len() != k {
        return Err(Error::shape(format!("{k} classes"), format!("{} / {}", q_hat.len(), pi_s.len())));
    }
    q_hat.require_positive()?;
    pi_s.require_positive()?;
    let log_q: Vec<f64> = q_hat.probs().iter().map(|p| p.ln()).collect();
    let log_s: Vec<f64> = pi_s.probs().iter().map(|p| p.ln()).collect();
    zs.map_rows(|i, row| {
        let z = zs.row(i);
        let f = ft.row(i);
        for j in 0..row.len() {
            let zs_term = z[j] - log_q[j];
            let ft_term = f[j] - log_s[j];
            row[j] = match mode {
                EnsembleMode::Full => zs_term + ft_term,
                EnsembleMode::ZsOnly => zs_term,
                EnsembleMode::FtOnly => ft_term,
            };
        }
    })
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &LogitMatrix) -> ProbMatrix {
    let mut out = logits.matrix().clone();
    let k = out.cols();
    par::for_each_row_mut(out.as_mut_slice(), k, |i, row| {
        softmax_into(logits.row(i), row);
    });
    ProbMatrix(out)
}

/// Backdoor adjustment with a uniform confounder prior: the entrywise mean
/// of `M` data-balanced probability matrices.
///
/// Each entry's terms are summed in sorted order, so the result does not
/// depend on the order of `inputs`.
pub fn backdoor_fuse(inputs: &[ProbMatrix]) -> Result<ProbMatrix> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("backdoor fusion needs at least one input".into()))?;
    let (n, k) = (first.rows(), first.classes());
    for p in inputs {
        if p.rows() != n || p.classes() != k {
            return Err(Error::shape(
                format!("{n}x{k}"),
                format!("{}x{}", p.rows(), p.classes()),
            ));
        }
    }
    if inputs.len() == 1 {
        return Ok(first.clone());
    }
    let m = inputs.len() as f64;
    let mut out = Matrix::zeros(n, k);
    par::for_each_row_mut(out.as_mut_slice(), k, |i, row| {
        let mut terms = vec![0.0; inputs.len()];
        for (j, o) in row.iter_mut().enumerate() {
            for (t, p) in terms.iter_mut().zip(inputs) {
                *t = p.get(i, j);
            }
            terms.sort_by(f64::total_cmp);
            *o = terms.iter().sum::<f64>() / m;
        }
    });
    Ok(ProbMatrix(out))
}

/// LA-adjusts each fine-tuned model's logits to a uniform target, applies
/// softmax and fuses the results.
pub fn backdoor_fuse_logits(models: &[(LogitMatrix, LabelPrior)]) -> Result<ProbMatrix> {
    let balanced = models
        .iter()
        .map(|(logits, pi_s)| {
            let uniform = LabelPrior::uniform(logits.classes())?;
            Ok(softmax_rows(&la_posthoc(logits, pi_s, &uniform)?))
        })
        .collect::<Result<Vec<_>>>()?;
    backdoor_fuse(&balanced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn prior(p: &[f64]) -> LabelPrior {
        LabelPrior::new(p.to_vec()).unwrap()
    }

    fn logits(rows: &[Vec<f64>]) -> LogitMatrix {
        LogitMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn posthoc_prefers_rare_class_on_ties() {
        let out = la_posthoc(&logits(&[vec![2.0, 2.0]]), &prior(&[0.9, 0.1]), &prior(&[0.5, 0.5])).unwrap();
        assert_eq!(out.argmax(), vec![1]);
    }

    #[test]
    fn posthoc_identity_when_priors_match() {
        let l = logits(&[vec![0.3, -1.2, 4.0], vec![1.0, 1.0, 1.0]]);
        let p = prior(&[0.2, 0.3, 0.5]);
        assert_eq!(la_posthoc(&l, &p, &p).unwrap(), l);
    }

    #[test]
    fn posthoc_scalar_oracle() {
        let out = la_posthoc(&logits(&[vec![1.0, 0.0]]), &prior(&[0.8, 0.2]), &prior(&[0.5, 0.5])).unwrap();
        // Remove the shared log 0.5 shift.
        let shift = -(0.5f64.ln());
        assert_abs_diff_eq!(out.row(0)[0] + shift, 1.22314, epsilon = 1e-5);
        assert_abs_diff_eq!(out.row(0)[1] + shift, 1.60944, epsilon = 1e-5);
        assert_eq!(out.argmax(), vec![1]);
    }

    #[test]
    fn posthoc_rejects_zero_prior() {
        let r = la_posthoc(&logits(&[vec![1.0, 0.0]]), &prior(&[1.0, 0.0]), &prior(&[0.5, 0.5]));
        assert!(matches!(r, Err(Error::ZeroPriorEntry { index: 1 })));
    }

    #[test]
    fn la_loss_values() {
        let u = prior(&[0.5, 0.5]);
        assert_abs_diff_eq!(la_loss(&[0.0, 0.0], 0, &u).unwrap(), 2f64.ln(), epsilon = 1e-12);
        let v = la_loss(&[1.0, 0.0], 0, &prior(&[0.9, 0.1])).unwrap();
        let oracle = (1.0 + (1.0 / 9.0) * (-1.0f64).exp()).ln();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.040062, epsilon = 1e-6);
        let row = [0.3, -2.0, 1.7];
        assert_abs_diff_eq!(
            la_loss(&row, 2, &LabelPrior::uniform(3).unwrap()).unwrap(),
            cross_entropy(&row, 2),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gla_loss_values() {
        let pi = prior(&[0.9, 0.1]);
        let v = gla_train_loss(&[1.0, 0.0], 0, &pi, &prior(&[0.8, 0.2])).unwrap();
        let oracle = (1.0 + (0.1 * 0.2) / (0.9 * 0.8) * (-1.0f64).exp()).ln();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.010167, epsilon = 1e-6);
        let u = prior(&[0.5, 0.5]);
        assert_abs_diff_eq!(
            gla_train_loss(&[0.4, 1.0], 1, &pi, &u).unwrap(),
            la_loss(&[0.4, 1.0], 1, &pi).unwrap(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            gla_train_loss(&[0.4, 1.0], 1, &u, &u).unwrap(),
            cross_entropy(&[0.4, 1.0], 1),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ensemble_examples() {
        let zs = logits(&[vec![1.0, 0.0]]);
        let ft = logits(&[vec![0.0, 1.0]]);
        let q = prior(&[0.8, 0.2]);
        let pi = prior(&[0.5, 0.5]);
        let full = gla_ensemble(&zs, &ft, &q, &pi, EnsembleMode::Full).unwrap();
        let c = -(0.5f64.ln());
        assert_abs_diff_eq!(full.row(0)[0] - c, 1.22314, epsilon = 1e-5);
        assert_abs_diff_eq!(full.row(0)[1] - c, 2.60944, epsilon = 1e-5);
        assert_eq!(full.argmax(), vec![1]);

        // zs all zeros with uniform q: Full = FtOnly + constant.
        let zeros = logits(&[vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let ft = logits(&[vec![0.1, 2.0, -1.0], vec![3.0, 0.0, 0.5]]);
        let u = LabelPrior::uniform(3).unwrap();
        let p = prior(&[0.6, 0.3, 0.1]);
        let full = gla_ensemble(&zeros, &ft, &u, &p, EnsembleMode::Full).unwrap();
        let ft_only = gla_ensemble(&zeros, &ft, &u, &p, EnsembleMode::FtOnly).unwrap();
        let c = 3f64.ln();
        for i in 0..2 {
            for j in 0..3 {
                assert_abs_diff_eq!(full.row(i)[j], ft_only.row(i)[j] + c, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ensemble_shape_mismatch() {
        let a = logits(&[vec![1.0, 0.0]]);
        let b = logits(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let u = LabelPrior::uniform(2).unwrap();
        assert!(gla_ensemble(&a, &b, &u, &u, EnsembleMode::Full).is_err());
    }

    #[test]
    fn fuse_examples() {
        let a = ProbMatrix::from_rows(&[vec![0.6, 0.4]]).unwrap();
        let b = ProbMatrix::from_rows(&[vec![0.2, 0.8]]).unwrap();
        assert_eq!(backdoor_fuse(&[a.clone()]).unwrap(), a);
        let f = backdoor_fuse(&[a.clone(), b.clone()]).unwrap();
        assert_abs_diff_eq!(f.row(0)[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(f.row(0)[1], 0.6, epsilon = 1e-12);
        assert_eq!(f, backdoor_fuse(&[b, a]).unwrap());
        assert!(backdoor_fuse(&[]).is_err());
        let c = ProbMatrix::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        assert!(backdoor_fuse(&[f, c]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&logits(&[vec![0.0, 0.0], vec![1f64.ln(), 3f64.ln()]]));
        assert_abs_diff_eq!(p.row(0)[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.row(1)[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.row(1)[1], 0.75, epsilon = 1e-15);
    }

    fn row_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-8.0f64..8.0, k)
    }

    fn prior_strategy(k: usize) -> impl Strategy<Value = LabelPrior> {
        proptest::collection::vec(0.01f64..1.0, k).prop_map(|w| LabelPrior::from_weights(&w).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(row in row_strategy(5), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let a = softmax_rows(&logits(&[row]));
            let b = softmax_rows(&logits(&[shifted]));
            for j in 0..5 {
                prop_assert!((a.row(0)[j] - b.row(0)[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn posthoc_argmax_invariant_to_row_constant(row in row_strategy(6), c in -20.0f64..20.0, ps in prior_strategy(6)) {
            let u = LabelPrior::uniform(6).unwrap();
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let a = la_posthoc(&logits(&[row.clone()]), &ps, &u).unwrap();
            let b = la_posthoc(&logits(&[shifted]), &ps, &u).unwrap();
            let same = la_posthoc(&logits(&[row.clone()]), &ps, &ps).unwrap();
            prop_assert_eq!(a.argmax(), b.argmax());
            prop_assert_eq!(same.argmax(), logits(&[row]).argmax());
        }

        #[test]
        fn ensemble_full_is_sum_of_parts(zs in row_strategy(4), ft in row_strategy(4), q in prior_strategy(4), p in prior_strategy(4)) {
            let zs = logits(&[zs]);
            let ft = logits(&[ft]);
            let full = gla_ensemble(&zs, &ft, &q, &p, EnsembleMode::Full).unwrap();
            let a = gla_ensemble(&zs, &ft, &q, &p, EnsembleMode::ZsOnly).unwrap();
            let b = gla_ensemble(&zs, &ft, &q, &p, EnsembleMode::FtOnly).unwrap();
            for j in 0..4 {
                prop_assert_eq!(full.row(0)[j], a.row(0)[j] + b.row(0)[j]);
            }
        }

        #[test]
        fn fusion_row_stochastic_and_idempotent(rows in proptest::collection::vec(row_strategy(4), 1..4), m in 1usize..5) {
            let p = softmax_rows(&logits(&rows));
            let copies = vec![p.clone(); m];
            let f = backdoor_fuse(&copies).unwrap();
            for i in 0..f.rows() {
                prop_assert!((f.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                for j in 0..4 {
                    prop_assert!((f.row(i)[j] - p.row(i)[j]).abs() <= 1e-12);
                }
            }
        }
    }
}
