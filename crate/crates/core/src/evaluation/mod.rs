//! Accuracy reports along the data and parameter axes, plus the probes
//! built on them.

mod knn;

pub use knn::{knn_accuracy, knn_predict};

use serde::{Deserialize, Serialize};

use crate::adjustment::{argmax, LogitMatrix, ProbMatrix};
use crate::distributions::{Axis, ClassCounts, Group, GroupAssignment, LabelPrior};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// D-groups and P-groups of the same label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGroups {
    pub data: GroupAssignment,
    pub parameter: GroupAssignment,
}

impl ClassGroups {
    pub fn new(data: GroupAssignment, parameter: GroupAssignment) -> Result<Self> {
        if data.len() != parameter.len() {
            return Err(Error::shape(data.len(), parameter.len()));
        }
        Ok(Self { data, parameter })
    }

    pub fn classes(&self) -> usize {
        self.data.len()
    }

    pub fn axis(&self, axis: Axis) -> &GroupAssignment {
        match axis {
            Axis::Data => &self.data,
            Axis::Parameter => &self.parameter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub axis: Axis,
    pub group: Group,
    /// Macro mean over member classes present in the evaluation set.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes absent from the evaluation set.
    pub per_class_acc: Vec<Option<f64>>,
    pub group_acc: Vec<GroupAccuracy>,
    pub overall_acc: f64,
    /// Rows: D-group, columns: P-group. `None` marks an empty cell.
    pub nine_cell: [[Option<f64>; 3]; 3],
    pub n_per_class: Vec<usize>,
}

impl EvalReport {
    pub fn group(&self, axis: Axis, group: Group) -> Option<f64> {
        self.group_acc
            .iter()
            .find(|g| g.axis == axis && g.group == group)
            .and_then(|g| g.accuracy)
    }

    /// Largest minus smallest non-empty group accuracy along `axis`.
    pub fn spread(&self, axis: Axis) -> Option<f64> {
        let vals: Vec<f64> = Group::ALL.iter().filter_map(|&g| self.group(axis, g)).collect();
        if vals.is_empty() {
            return None;
        }
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        Some(max - min)
    }

    pub fn cell(&self, data: Group, parameter: Group) -> Option<f64> {
        self.nine_cell[data.index()][parameter.index()]
    }

    /// Per-class accuracies with absent classes as NaN.
    pub fn per_class_or_nan(&self) -> Vec<f64> {
        self.per_class_acc.iter().map(|a| a.unwrap_or(f64::NAN)).collect()
    }
}

/// Anything that scores classes row by row.
pub trait Scores {
    fn score_matrix(&self) -> &Matrix;
}

impl Scores for Matrix {
    fn score_matrix(&self) -> &Matrix {
        self
    }
}

impl Scores for LogitMatrix {
    fn score_matrix(&self) -> &Matrix {
        self.matrix()
    }
}

impl Scores for ProbMatrix {
    fn score_matrix(&self) -> &Matrix {
        self.matrix()
    }
}

fn macro_mean(acc: &[Option<f64>], members: impl Iterator<Item = usize>) -> Option<f64> {
    let vals: Vec<f64> = members.filter_map(|c| acc[c]).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Builds a report from hard predictions.
pub fn report_from_predictions(predictions: &[usize], labels: &[usize], groups: &ClassGroups) -> Result<EvalReport> {
    let k = groups.classes();
    if predictions.len() != labels.len() {
        return Err(Error::shape(labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = vec![0usize; k];
    let mut n_per_class = vec![0usize; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        n_per_class[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let per_class_acc: Vec<Option<f64>> = hits
        .iter()
        .zip(&n_per_class)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    let overall_acc = hits.iter().sum::<usize>() as f64 / labels.len() as f64;

    let mut group_acc = Vec::with_capacity(6);
    for axis in [Axis::Data, Axis::Parameter] {
        let assignment = groups.axis(axis);
        for g in Group::ALL {
            group_acc.push(GroupAccuracy {
                axis,
                group: g,
                accuracy: macro_mean(&per_class_acc, assignment.members(g).into_iter()),
            });
        }
    }
    let mut nine_cell = [[None; 3]; 3];
    for dg in Group::ALL {
        for pg in Group::ALL {
            let members =
                (0..k).filter(|&c| groups.data.group_of[c] == dg && groups.parameter.group_of[c] == pg);
            nine_cell[dg.index()][pg.index()] = macro_mean(&per_class_acc, members);
        }
    }
    Ok(EvalReport {
        per_class_acc,
        group_acc,
        overall_acc,
        nine_cell,
        n_per_class,
    })
}

/// Argmax evaluation (ties to the lowest class) of logits or probabilities.
pub fn evaluate<S: Scores + ?Sized>(scores: &S, labels: &[usize], groups: &ClassGroups) -> Result<EvalReport> {
    let m = scores.score_matrix();
    if m.cols() != groups.classes() {
        return Err(Error::shape(format!("{} classes", groups.classes()), m.cols()));
    }
    if m.rows() != labels.len() {
        return Err(Error::shape(format!("{} rows", labels.len()), m.rows()));
    }
    let preds: Vec<usize> = m.iter_rows().map(argmax).collect();
    report_from_predictions(&preds, labels, groups)
}

/// Mean absolute per-class accuracy difference over classes present in both.
pub fn avg_accuracy_gap(acc_f: &[Option<f64>], acc_g: &[Option<f64>]) -> Result<f64> {
    if acc_f.len() != acc_g.len() {
        return Err(Error::shape(acc_f.len(), acc_g.len()));
    }
    let diffs: Vec<f64> = acc_f
        .iter()
        .zip(acc_g)
        .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
        .collect();
    if diffs.is_empty() {
        return Err(Error::InvalidArgument("no class has accuracies in both inputs".into()));
    }
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

/// Ordering used for sorted per-class curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OrderKey {
    ByCounts(ClassCounts),
    ByPrior(LabelPrior),
}

impl OrderKey {
    fn order(&self) -> Vec<usize> {
        let key: Vec<f64> = match self {
            OrderKey::ByCounts(c) => c.counts().iter().map(|&v| v as f64).collect(),
            OrderKey::ByPrior(p) => p.probs().to_vec(),
        };
        let mut idx: Vec<usize> = (0..key.len()).collect();
        idx.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
        idx
    }

    fn len(&self) -> usize {
        match self {
            OrderKey::ByCounts(c) => c.len(),
            OrderKey::ByPrior(p) => p.len(),
        }
    }
}

/// Per-class accuracy sorted by descending key, smoothed by a centered
/// moving average truncated at the edges. Returns `(rank, value)` pairs.
pub fn export_sorted_curve(per_class_acc: &[f64], key: &OrderKey, window: usize) -> Result<Vec<(usize, f64)>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("smoothing window must be odd and >= 1, got {window}")));
    }
    if key.len() != per_class_acc.len() {
        return Err(Error::shape(per_class_acc.len(), key.len()));
    }
    let sorted: Vec<f64> = key.order().into_iter().map(|c| per_class_acc[c]).collect();
    let half = window / 2;
    let n = sorted.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let vals = &sorted[lo..hi];
            (i, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect())
}

/// Ordinary least-squares slope of `values` against their index, with its
/// standard error.
pub fn rank_slope(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 3 {
        return Err(Error::InvalidArgument("slope needs at least 3 points".into()));
    }
    let nf = n as f64;
    let mean_x = (nf - 1.0) / 2.0;
    let mean_y = values.iter().sum::<f64>() / nf;
    let sxx: f64 = (0..n).map(|i| (i as f64 - mean_x).powi(2)).sum();
    let sxy: f64 = values.iter().enumerate().map(|(i, y)| (i as f64 - mean_x) * (y - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let rss: f64 = values
        .iter()
        .enumerate()
        .map(|(i, y)| (y - intercept - slope * i as f64).powi(2))
        .sum();
    let se = (rss / (nf - 2.0) / sxx).sqrt();
    Ok((slope, se))
}

/// Per-sample gap between interventional and observational probabilities
/// of the true class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderGap {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

pub fn confounder_gap(do_probs: &ProbMatrix, obs_probs: &ProbMatrix, labels: &[usize]) -> Result<ConfounderGap> {
    if do_probs.rows() != obs_probs.rows() || do_probs.classes() != obs_probs.classes() {
        return Err(Error::shape(
            format!("{}x{}", do_probs.rows(), do_probs.classes()),
            format!("{}x{}", obs_probs.rows(), obs_probs.classes()),
        ));
    }
    if labels.len() != do_probs.rows() {
        return Err(Error::shape(do_probs.rows(), labels.len()));
    }
    let k = do_probs.classes();
    let per_sample = labels
        .iter()
        .enumerate()
        .map(|(n, &y)| {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
            Ok((do_probs.get(n, y) - obs_probs.get(n, y)).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    };
    Ok(ConfounderGap { per_sample, mean })
}

/// Train-set × test-set accuracies of the confounder probe and the gap
/// between the two models' true-class probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderReport {
    /// `[train A, train B] × [test A, test B]`.
    pub acc_matrix: [[f64; 2]; 2],
    pub per_sample_gap: Vec<f64>,
    /// Mean gap on samples exposing only the factor B under-represents.
    pub skewed_gap: f64,
    /// Mean gap on samples exposing every factor.
    pub balanced_gap: f64,
}
