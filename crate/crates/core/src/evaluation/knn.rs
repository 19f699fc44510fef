use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;

use super::{report_from_predictions, ClassGroups, EvalReport};

fn normalized(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { row: r, col: 0 });
        }
        if norm == 0.0 {
            return Err(Error::InvalidArgument(format!("feature row {r} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Labels predicted by a `k`-nearest-neighbour vote over L2-normalized
/// features. Distance ties go to the lower gallery index, vote ties to the
/// lower class.
pub fn knn_predict(
    gallery: &Matrix,
    gallery_labels: &[usize],
    query: &Matrix,
    classes: usize,
    k: usize,
) -> Result<Vec<usize>> {
    if gallery.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if gallery_labels.len() != gallery.rows() {
        return Err(Error::shape(gallery.rows(), gallery_labels.len()));
    }
    if gallery.cols() != query.cols() {
        return Err(Error::shape(gallery.cols(), query.cols()));
    }
    if k == 0 || k > gallery.rows() {
        return Err(Error::InvalidArgument(format!(
            "k must lie in 1..={}, got {k}",
            gallery.rows()
        )));
    }
    if let Some(&label) = gallery_labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let g = normalized(gallery)?;
    let q = normalized(query)?;
    Ok(par::map_range(q.rows(), |i| {
        let x = q.row(i);
        let mut dist: Vec<(f64, usize)> = (0..g.rows())
            .map(|j| {
                let d = x.iter().zip(g.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (d, j)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let mut votes = vec![0usize; classes];
        for &(_, j) in &dist[..k] {
            votes[gallery_labels[j]] += 1;
        }
        let best = *votes.iter().max().unwrap_or(&0);
        votes.iter().position(|&v| v == best).unwrap_or(0)
    }))
}

/// Nearest-neighbour feature-quality probe, reported like [`super::evaluate`].
pub fn knn_accuracy(
    gallery: &Matrix,
    gallery_labels: &[usize],
    query: &Matrix,
    query_labels: &[usize],
    k: usize,
    groups: &ClassGroups,
) -> Result<EvalReport> {
    if query.rows() != query_labels.len() {
        return Err(Error::shape(query.rows(), query_labels.len()));
    }
    let preds = knn_predict(gallery, gallery_labels, query, groups.classes(), k)?;
    report_from_predictions(&preds, query_labels, groups)
}
