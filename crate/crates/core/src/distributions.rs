//! Long-tailed label distributions and Many/Medium/Few class groupings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `sum(probs) == 1`.
pub const SUM_TOL: f64 = 1e-9;

/// Probability vector over the class set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelPrior(Vec<f64>);

impl LabelPrior {
    /// Validates an already normalized probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::TooFewClasses {
                min: 2,
                found: probs.len(),
            });
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidPrior(format!(
                "entry {i} = {} is negative or non-finite",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidPrior(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidPrior(format!(
                "weight {i} = {} is negative or non-finite",
                weights[i]
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidPrior("weights sum to zero".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Errors unless every entry is strictly positive.
    pub fn require_positive(&self) -> Result<()> {
        match self.0.iter().position(|&p| p <= 0.0) {
            Some(index) => Err(Error::ZeroPriorEntry { index }),
            None => Ok(()),
        }
    }

    /// `log p` per class, floored at `floor` before the logarithm.
    pub fn log_floored(&self, floor: f64) -> Vec<f64> {
        self.0.iter().map(|&p| p.max(floor).ln()).collect()
    }

    /// Class indices ordered by descending probability, ties by ascending index.
    pub fn descending_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx
    }
}

impl TryFrom<Vec<f64>> for LabelPrior {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelPrior> for Vec<f64> {
    fn from(p: LabelPrior) -> Self {
        p.0
    }
}

/// Samples per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ClassCounts(Vec<usize>);

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::InvalidArgument(
                "class counts must contain a positive entry".into(),
            ));
        }
        Ok(Self(counts))
    }

    /// Counts of each label in `0..k`.
    pub fn tally(labels: &[usize], k: usize) -> Result<Self> {
        let mut counts = vec![0usize; k];
        for &y in labels {
            if y >= k {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: k,
                });
            }
            counts[y] += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Largest over smallest count, exact for counts below 2^53.
    pub fn imbalance_factor(&self) -> Result<f64> {
        let min = *self.0.iter().min().unwrap_or(&0);
        if min == 0 {
            return Err(Error::InfiniteImbalance);
        }
        let max = *self.0.iter().max().unwrap_or(&0);
        Ok(max as f64 / min as f64)
    }

    pub fn to_prior(&self) -> Result<LabelPrior> {
        let w: Vec<f64> = self.0.iter().map(|&c| c as f64).collect();
        LabelPrior::from_weights(&w)
    }

    /// Reorders counts so that class `order[i]` receives `self[i]`.
    pub fn assign_to(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.0.len() {
            return Err(Error::shape(self.0.len(), order.len()));
        }
        let mut out = vec![0; self.0.len()];
        for (rank, &class) in order.iter().enumerate() {
            out[class] = self.0[rank];
        }
        Self::new(out)
    }
}

impl TryFrom<Vec<usize>> for ClassCounts {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ClassCounts> for Vec<usize> {
    fn from(c: ClassCounts) -> Self {
        c.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    /// Grouping by downstream training counts (D-groups).
    Data,
    /// Grouping by (estimated) pre-training prior (P-groups).
    Parameter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Many, Group::Medium, Group::Few];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        }
    }
}

/// Many/Medium/Few label for every class along one axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub axis: Axis,
    pub group_of: Vec<Group>,
}

impl GroupAssignment {
    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    pub fn members(&self, g: Group) -> Vec<usize> {
        self.group_of
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == g)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for g in &self.group_of {
            s[g.index()] += 1;
        }
        s
    }
}

/// Ratio of the largest to the smallest prior entry.
pub fn imbalance_factor(prior: &LabelPrior) -> Result<f64> {
    let min = prior.min();
    if min <= 0.0 {
        return Err(Error::InfiniteImbalance);
    }
    Ok(prior.max() / min)
}

/// Exponential long-tail profile: `counts[c] = round(n_max * r^(-c/(K-1)))`.
pub fn make_longtail_counts(k: usize, n_max: usize, if_target: f64) -> Result<ClassCounts> {
    if k < 2 {
        return Err(Error::TooFewClasses { min: 2, found: k });
    }
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    if !(if_target >= 1.0) || !if_target.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "imbalance factor must be >= 1, got {if_target}"
        )));
    }
    if (n_max as f64 / if_target).round() < 1.0 {
        return Err(Error::EmptyTailClass);
    }
    let n = n_max as f64;
    let counts = (0..k)
        .map(|c| {
            let e = c as f64 / (k - 1) as f64;
            (n * if_target.powf(-e)).round() as usize
        })
        .collect();
    ClassCounts::new(counts)
}

/// D-groups: `> 100` Many, `20..=100` Medium, `< 20` Few.
pub fn split_by_counts(counts: &ClassCounts) -> GroupAssignment {
    let group_of = counts
        .counts()
        .iter()
        .map(|&c| match c {
            c if c > 100 => Group::Many,
            c if c >= 20 => Group::Medium,
            _ => Group::Few,
        })
        .collect();
    GroupAssignment {
        axis: Axis::Data,
        group_of,
    }
}

/// Group fractions (Many, Medium, Few) for [`split_by_prior`].
pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.3, 0.3, 0.4);

/// P-groups: rank classes by descending prior and cut by `fractions`.
///
/// Many and Medium each get `max(1, round(f * K))` classes; Few gets the rest.
pub fn split_by_prior(prior: &LabelPrior, fractions: (f64, f64, f64)) -> Result<GroupAssignment> {
    let k = prior.len();
    if k < 3 {
        return Err(Error::TooFewClasses { min: 3, found: k });
    }
    let (fm, fd, ff) = fractions;
    if [fm, fd, ff].iter().any(|f| !(*f >= 0.0)) || (fm + fd + ff - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "group fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let n_many = ((fm * k as f64).round() as usize).max(1);
    let n_med = ((fd * k as f64).round() as usize).max(1);
    if n_many + n_med >= k {
        return Err(Error::InvalidArgument(format!(
            "fractions {fractions:?} leave no Few classes for K={k}"
        )));
    }
    let mut group_of = vec![Group::Few; k];
    for (rank, class) in prior.descending_order().into_iter().enumerate() {
        group_of[class] = if rank < n_many {
            Group::Many
        } else if rank < n_many + n_med {
            Group::Medium
        } else {
            Group::Few
        };
    }
    Ok(GroupAssignment {
        axis: Axis::Parameter,
        group_of,
    })
}
