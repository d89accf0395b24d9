//! Ranking metrics for the probe.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Non-interpolated average precision of one class. Items are ranked by
/// descending score; equal scores keep their original order. Returns `None`
/// when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.is_empty() {
        return Err(Error::invalid("average precision of an empty ranking"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

/// Per-class APs and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    /// `None` for classes without positives; they do not enter the mean.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

impl MapReport {
    pub fn excluded(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .enumerate()
            .filter(|(_, ap)| ap.is_none())
            .map(|(c, _)| c)
            .collect()
    }
}

/// mAP over row-major `scores` and `labels` of shape `[n, classes]`.
pub fn mean_average_precision(scores: &[f64], labels: &[bool], classes: usize) -> Result<MapReport> {
    if classes == 0 || scores.is_empty() || scores.len() % classes != 0 {
        return Err(Error::invalid("scores must be a non-empty [n, classes] matrix"));
    }
    if labels.len() != scores.len() {
        return Err(Error::invalid("scores and labels differ in shape"));
    }
    let n = scores.len() / classes;
    let mut per_class = Vec::with_capacity(classes);
    let mut col_s = Vec::with_capacity(n);
    let mut col_l = Vec::with_capacity(n);
    for c in 0..classes {
        col_s.clear();
        col_l.clear();
        for i in 0..n {
            col_s.push(scores[i * classes + c]);
            col_l.push(labels[i * classes + c]);
        }
        per_class.push(average_precision(&col_s, &col_l)?);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("no class has a positive example"));
    }
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MapReport { per_class, map })
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the target class.
pub fn accuracy(scores: &[f64], targets: &[usize], classes: usize) -> Result<f64> {
    if classes == 0 || scores.len() != targets.len() * classes || targets.is_empty() {
        return Err(Error::invalid("scores must be [n, classes] with n targets"));
    }
    let correct = scores
        .chunks(classes)
        .zip(targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    Ok(correct as f64 / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_ranked_case() {
        let ap = average_precision(&[0.9, 0.6, 0.3], &[true, false, true]).unwrap().unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking_and_no_positives() {
        let ap = average_precision(&[0.1, 0.9, 0.8], &[false, true, true]).unwrap();
        assert_eq!(ap, Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.2], &[false, false]).unwrap(), None);
        assert!(average_precision(&[], &[]).is_err());
    }

    #[test]
    fn ties_keep_original_order() {
        // positive listed first wins the tie
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), Some(1.0));
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), Some(0.5));
    }

    #[test]
    fn map_excludes_empty_classes() {
        let scores = [0.9, 0.1, 0.2, 0.8, 0.3, 0.5];
        let labels = [true, false, false, false, true, false];
        let r = mean_average_precision(&scores, &labels, 2).unwrap();
        assert_eq!(r.per_class[1], None);
        assert_eq!(r.excluded(), alloc::vec![1]);
        assert_eq!(r.map, r.per_class[0].unwrap());
    }

    #[test]
    fn monotone_transform_keeps_map() {
        let scores = [0.3, 0.7, 0.1, 0.4, 0.9, 0.2];
        let labels = [true, false, false, true, true, true];
        let a = mean_average_precision(&scores, &labels, 2).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| s * 10.0 + 5.0).collect();
        assert_eq!(mean_average_precision(&t, &labels, 2).unwrap(), a);
    }

    #[test]
    fn accuracy_cases() {
        let s = [0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.3, 0.7];
        assert_eq!(accuracy(&s, &[0, 1, 0, 1], 2).unwrap(), 1.0);
        assert_eq!(accuracy(&s, &[0, 1, 0, 0], 2).unwrap(), 0.75);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
