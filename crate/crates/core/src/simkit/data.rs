use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{ClassCounts, Group, GroupAssignment};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Partition of the `d` feature coordinates into contiguous factor blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMap {
    /// Half-open `[start, end)` per block.
    pub blocks: Vec<(usize, usize)>,
}

impl BlockMap {
    /// `F` nearly equal blocks; the first `d mod F` blocks get one extra coordinate.
    pub fn even(d: usize, f: usize) -> Result<Self> {
        if f == 0 || f > d {
            return Err(Error::InvalidArgument(format!(
                "cannot split {d} coordinates into {f} nonempty blocks"
            )));
        }
        if f > 32 {
            return Err(Error::Unsupported(format!("at most 32 factor blocks, got {f}")));
        }
        let (base, extra) = (d / f, d % f);
        let mut blocks = Vec::with_capacity(f);
        let mut start = 0;
        for b in 0..f {
            let len = base + usize::from(b < extra);
            blocks.push((start, start + len));
            start += len;
        }
        Ok(Self { blocks })
    }

    pub fn factors(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.1)
    }

    pub fn full_mask(&self) -> u32 {
        if self.factors() == 32 {
            u32::MAX
        } else {
            (1u32 << self.factors()) - 1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    /// K×d
    pub means: Matrix,
    pub signal_scale: f64,
    pub blocks: BlockMap,
}

impl ClassMeans {
    pub fn classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Moves every mean a fraction `shift` towards a fresh seeded draw, then
    /// restores the per-block norms. `shift = 0` returns the means unchanged.
    pub fn shifted(&self, shift: f64, seed: u64) -> Result<ClassMeans> {
        if !(0.0..=1.0).contains(&shift) {
            return Err(Error::InvalidArgument(format!("shift must lie in [0, 1], got {shift}")));
        }
        if shift == 0.0 {
            return Ok(self.clone());
        }
        let fresh = gen_class_means(self.classes(), self.dim(), self.blocks.factors(), self.signal_scale, seed)?;
        let target = self.signal_scale / (self.blocks.factors() as f64).sqrt();
        let mut means = self.means.clone();
        for c in 0..self.classes() {
            let row = means.row_mut(c);
            for (v, f) in row.iter_mut().zip(fresh.means.row(c)) {
                *v = (1.0 - shift) * *v + shift * f;
            }
            rescale_blocks(row, &self.blocks, target);
        }
        Ok(ClassMeans {
            means,
            ..self.clone()
        })
    }
}

fn rescale_blocks(row: &mut [f64], blocks: &BlockMap, target: f64) {
    for &(a, b) in &blocks.blocks {
        let norm = row[a..b].iter().map(|v| v * v).sum::<f64>().sqrt();
        // A zero draw has probability zero; fall back to a unit axis.
        if norm == 0.0 {
            row[a] = target;
        } else {
            row[a..b].iter_mut().for_each(|v| *v *= target / norm);
        }
    }
}

/// Seeded standard-normal class means with every block rescaled to norm `s/√F`.
pub fn gen_class_means(k: usize, d: usize, f: usize, s: f64, seed: u64) -> Result<ClassMeans> {
    if k < 2 {
        return Err(Error::TooFewClasses { min: 2, found: k });
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("signal scale must be positive, got {s}")));
    }
    let blocks = BlockMap::even(d, f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = s / (f as f64).sqrt();
    let mut means = Matrix::zeros(k, d);
    for c in 0..k {
        let row = means.row_mut(c);
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        rescale_blocks(row, &blocks, target);
    }
    Ok(ClassMeans {
        means,
        signal_scale: s,
        blocks,
    })
}

/// Per-class distribution over nonempty subsets of factor blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposurePolicy {
    pub factors: usize,
    /// `(block bitmask, probability)` lists, one per class.
    pub per_class: Vec<Vec<(u32, f64)>>,
}

impl ExposurePolicy {
    pub fn new(factors: usize, per_class: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        let full = BlockMap::even(factors, factors)?.full_mask();
        for (c, dist) in per_class.iter().enumerate() {
            let mut total = 0.0;
            for &(mask, p) in dist {
                if !(p >= 0.0) {
                    return Err(Error::InvalidArgument(format!("class {c}: negative exposure probability")));
                }
                if mask == 0 && p > 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "class {c}: exposure policy puts mass on the empty block set"
                    )));
                }
                if mask & !full != 0 {
                    return Err(Error::InvalidArgument(format!("class {c}: mask {mask:#b} names a missing block")));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("class {c}: exposure probabilities sum to {total}")));
            }
        }
        Ok(Self { factors, per_class })
    }

    /// Same distribution for every class.
    pub fn shared(factors: usize, k: usize, dist: Vec<(u32, f64)>) -> Result<Self> {
        Self::new(factors, vec![dist; k])
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    fn draw(&self, class: usize, rng: &mut impl Rng) -> u32 {
        let u: f64 = rng.random();
        let dist = &self.per_class[class];
        let mut acc = 0.0;
        for &(mask, p) in dist {
            acc += p;
            if u < acc {
                return mask;
            }
        }
        // Rounding slack: the last subset with positive mass.
        dist.iter().rev().find(|(_, p)| *p > 0.0).map(|(m, _)| *m).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExposureKind {
    /// Full exposure with probability 1/2, otherwise one block uniformly.
    Uniform,
    /// Block 0 alone with probability `p_major`, block 1 alone otherwise.
    Skewed { p_major: f64 },
    /// Uniform for P-Many/P-Medium classes; P-Few classes only ever show
    /// block `model_id mod F`.
    PerModelTail { model_id: usize },
    /// Every block always visible.
    Full,
}

fn uniform_dist(f: usize) -> Vec<(u32, f64)> {
    let full = BlockMap::even(f, f).expect("f >= 1").full_mask();
    if f == 1 {
        return vec![(full, 1.0)];
    }
    let mut dist = vec![(full, 0.5)];
    dist.extend((0..f).map(|b| (1u32 << b, 0.5 / f as f64)));
    dist
}

pub fn make_exposure_policy(
    kind: ExposureKind,
    k: usize,
    f: usize,
    p_groups: Option<&GroupAssignment>,
) -> Result<ExposurePolicy> {
    if f == 0 {
        return Err(Error::InvalidArgument("need at least one factor block".into()));
    }
    match kind {
        ExposureKind::Uniform => ExposurePolicy::shared(f, k, uniform_dist(f)),
        ExposureKind::Full => {
            let full = BlockMap::even(f, f)?.full_mask();
            ExposurePolicy::shared(f, k, vec![(full, 1.0)])
        }
        ExposureKind::Skewed { p_major } => {
            if f < 2 {
                return Err(Error::InvalidArgument("skewed exposure needs F >= 2".into()));
            }
            if !(0.0..=1.0).contains(&p_major) {
                return Err(Error::InvalidArgument(format!("p_major must lie in [0, 1], got {p_major}")));
            }
            ExposurePolicy::shared(f, k, vec![(0b01, p_major), (0b10, 1.0 - p_major)])
        }
        ExposureKind::PerModelTail { model_id } => {
            if f < 2 {
                return Err(Error::InvalidArgument("per-model tail exposure needs F >= 2".into()));
            }
            let groups = p_groups.ok_or_else(|| {
                Error::InvalidArgument("per-model tail exposure requires parameter-axis groups".into())
            })?;
            if groups.len() != k {
                return Err(Error::shape(k, groups.len()));
            }
            let tail = vec![(1u32 << (model_id % f), 1.0)];
            let per_class = groups
                .group_of
                .iter()
                .map(|g| if *g == Group::Few { tail.clone() } else { uniform_dist(f) })
                .collect();
            ExposurePolicy::new(f, per_class)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorDataset {
    /// N×d
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Exposed-block bitmask per sample.
    pub exposure: Vec<u32>,
    pub classes: usize,
    pub block_map: BlockMap,
}

impl FactorDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn factors(&self) -> usize {
        self.block_map.factors()
    }

    pub fn counts(&self) -> Result<ClassCounts> {
        ClassCounts::tally(&self.labels, self.classes)
    }

    /// Whether block `b` is visible in sample `n`.
    pub fn exposed(&self, n: usize, b: usize) -> bool {
        self.exposure[n] & (1 << b) != 0
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            exposure: idx.iter().map(|&i| self.exposure[i]).collect(),
            classes: self.classes,
            block_map: self.block_map.clone(),
        }
    }

    /// Indices of samples whose exposure equals `mask`.
    pub fn with_exposure(&self, mask: u32) -> Vec<usize> {
        (0..self.len()).filter(|&n| self.exposure[n] == mask).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.rows() != n || self.exposure.len() != n {
            return Err(Error::shape(n, format!("{} rows / {} masks", self.features.rows(), self.exposure.len())));
        }
        if self.block_map.dim() != self.features.cols() {
            return Err(Error::shape(self.block_map.dim(), self.features.cols()));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::LabelOutOfRange { label: y, classes: self.classes });
        }
        if let Some(i) = self.exposure.iter().position(|&m| m == 0 || m & !self.block_map.full_mask() != 0) {
            return Err(Error::InvalidArgument(format!("sample {i} has an invalid exposure mask")));
        }
        Ok(())
    }
}

/// Draws `counts[c]` samples of each class, grouped by class in ascending
/// order.
pub fn sample_dataset(
    means: &ClassMeans,
    counts: &ClassCounts,
    policy: &ExposurePolicy,
    noise_sigma: f64,
    seed: u64,
) -> Result<FactorDataset> {
    let k = means.classes();
    if counts.len() != k || policy.classes() != k {
        return Err(Error::shape(
            format!("{k} classes"),
            format!("{} counts / {} policies", counts.len(), policy.classes()),
        ));
    }
    if policy.factors != means.blocks.factors() {
        return Err(Error::shape(means.blocks.factors(), policy.factors));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise must be nonnegative, got {noise_sigma}")));
    }
    let d = means.dim();
    let n = counts.total();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut exposure = Vec::with_capacity(n);
    let mut row = 0;
    for (c, &count) in counts.counts().iter().enumerate() {
        let mean = means.means.row(c);
        for _ in 0..count {
            let mask = policy.draw(c, &mut rng);
            let out = features.row_mut(row);
            for (b, &(lo, hi)) in means.blocks.blocks.iter().enumerate() {
                if mask & (1 << b) != 0 {
                    out[lo..hi].copy_from_slice(&mean[lo..hi]);
                }
            }
            for v in out.iter_mut() {
                *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c);
            exposure.push(mask);
            row += 1;
        }
    }
    Ok(FactorDataset {
        features,
        labels,
        exposure,
        classes: k,
        block_map: means.blocks.clone(),
    })
}
