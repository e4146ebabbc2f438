//! Density scoring of training samples and low-density selection.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneModel;
use crate::error::{Error, Result};
use crate::flowdensity::FlowModel;
use crate::par;
use crate::taskstream::Split;

/// Rows per scoring shard.
const SHARD: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    /// Log-density per sample, aligned with dataset order.
    pub scores: Vec<f64>,
    pub delta: f64,
    /// Ascending sample indices of the selected set.
    pub selected_indices: Vec<usize>,
    pub percentile: f64,
    /// Per-class thresholds when selection was done class by class.
    #[serde(default)]
    pub class_deltas: Option<Vec<(usize, f64)>>,
}

impl DensityReport {
    pub fn selected_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.scores.len()];
        for &i in &self.selected_indices {
            mask[i] = true;
        }
        mask
    }

    /// Fraction of selected samples whose flag in `noisy` is set.
    pub fn noise_precision(&self, noisy: &[bool]) -> f64 {
        if self.selected_indices.is_empty() {
            return 0.0;
        }
        let hits = self.selected_indices.iter().filter(|&&i| noisy[i]).count();
        hits as f64 / self.selected_indices.len() as f64
    }

    /// Writes `index,score,selected,noisy,observed_label` rows.
    pub fn write_csv(&self, path: &Path, noisy: &[bool], observed: &[usize]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "score", "selected", "noisy", "observed_label"])?;
        let mask = self.selected_mask();
        for (i, &score) in self.scores.iter().enumerate() {
            w.write_record([
                i.to_string(),
                format!("{score:.17e}"),
                u8::from(mask[i]).to_string(),
                u8::from(noisy[i]).to_string(),
                observed[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `log p(feat | label)` for precomputed features, in ordered shards.
pub fn score_features(flow: &FlowModel, feats: ArrayView2<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    let n = feats.nrows();
    let shards = par::map_chunks(n, SHARD, |r| {
        let x = feats.slice(s![r.start..r.end, ..]);
        if let Some(bad) = x.rows().into_iter().position(|row| row.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteScore { index: r.start + bad });
        }
        flow.log_prob(x, &labels[r.clone()]).map(|v| (r.start, v.to_vec()))
    });
    let mut scores = Vec::with_capacity(n);
    for shard in shards {
        let (start, v) = shard?;
        if let Some(bad) = v.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteScore { index: start + bad });
        }
        scores.extend(v);
    }
    Ok(scores)
}

/// Scores every sample of `split` under its observed label in one evaluation pass.
pub fn score_dataset(model: &BackboneModel, flow: &FlowModel, split: &Split) -> Result<Vec<f64>> {
    let n = split.len();
    let feats = par::map_chunks(n, SHARD, |r| {
        let idx: Vec<usize> = r.collect();
        model.features(split.gather(&idx).view())
    });
    let mut all = ndarray::Array2::zeros((n, model.feature_dim()));
    let mut offset = 0;
    for f in feats {
        let f = f?;
        let rows = f.nrows();
        all.slice_mut(s![offset..offset + rows, ..]).assign(&f);
        offset += rows;
    }
    score_features(flow, all.view(), &split.observed_labels)
}

fn check_scores(scores: &[f64], percentile: f64) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores to select from".into()));
    }
    if !(percentile > 0.0 && percentile < 0.5) {
        return Err(Error::InvalidArgument(format!("percentile {percentile} outside (0, 0.5)")));
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore { index });
    }
    Ok(())
}

fn by_score_then_index(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Linear-interpolation quantile at position `p·(N−1)` of the sorted scores.
pub fn quantile(scores: &[f64], p: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Indices with `score < delta`, ascending.
pub fn select_below(scores: &[f64], delta: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i] < delta).collect()
}

fn select_in(scores: &[f64], percentile: f64) -> (f64, Vec<usize>) {
    let delta = quantile(scores, percentile);
    let below = scores.iter().filter(|&&s| s < delta).count();
    let target = (percentile * scores.len() as f64).floor() as usize;
    let mut chosen: Vec<usize> = by_score_then_index(scores).into_iter().take(below.max(target)).collect();
    chosen.sort_unstable();
    (delta, chosen)
}

/// Selects the samples strictly below the `percentile` quantile, padded in
/// `(score, index)` order up to `⌊percentile·N⌋`.
pub fn select_representative(scores: &[f64], percentile: f64) -> Result<DensityReport> {
    check_scores(scores, percentile)?;
    let (delta, selected_indices) = select_in(scores, percentile);
    Ok(DensityReport {
        scores: scores.to_vec(),
        delta,
        selected_indices,
        percentile,
        class_deltas: None,
    })
}

/// Same rule applied separately within each observed label.
pub fn select_representative_per_class(scores: &[f64], labels: &[usize], percentile: f64) -> Result<DensityReport> {
    check_scores(scores, percentile)?;
    if labels.len() != scores.len() {
        return Err(Error::InvalidArgument("one label per score required".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut selected = Vec::new();
    let mut class_deltas = Vec::new();
    for c in classes {
        let members: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == c).collect();
        let sub: Vec<f64> = members.iter().map(|&i| scores[i]).collect();
        let (delta, chosen) = select_in(&sub, percentile);
        class_deltas.push((c, delta));
        selected.extend(chosen.into_iter().map(|j| members[j]));
    }
    selected.sort_unstable();
    Ok(DensityReport {
        scores: scores.to_vec(),
        delta: quantile(scores, percentile),
        selected_indices: selected,
        percentile,
        class_deltas: Some(class_deltas),
    })
}

/// Area under the ROC curve of `scores` ranking `positives` first (ties count half).
pub fn auroc(scores: &[f64], positives: &[bool]) -> f64 {
    let order = by_score_then_index(scores);
    let n = scores.len();
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = positives.iter().filter(|&&p| p).count() as f64;
    let n_neg = n as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.5;
    }
    let rank_sum: f64 = (0..n).filter(|&k| positives[k]).map(|k| ranks[k]).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_threshold_membership() {
        assert_eq!(select_below(&[0.9, 0.5, 0.1, 0.05], 0.07), vec![3]);
    }

    #[test]
    fn sort_oracle_eight_scores() {
        let scores = [3.0, -1.0, 4.0, 1.5, -9.0, 2.6, 5.0, 3.5];
        let r = select_representative(&scores, 0.25).unwrap();
        let mut sorted: Vec<usize> = (0..8).collect();
        sorted.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        let mut expect = sorted[..2].to_vec();
        expect.sort_unstable();
        assert_eq!(r.selected_indices, expect);
    }

    #[test]
    fn ties_pad_by_index() {
        let r = select_representative(&[1.0; 10], 0.3).unwrap();
        assert_eq!(r.selected_indices, vec![0, 1, 2]);
        assert_eq!(r.delta, 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(select_representative(&[], 0.1).is_err());
        assert!(select_representative(&[1.0], 0.5).is_err());
        assert!(select_representative(&[1.0], 0.0).is_err());
        assert!(matches!(
            select_representative(&[1.0, f64::NAN], 0.1),
            Err(Error::NonFiniteScore { index: 1 })
        ));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
        assert_eq!(quantile(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn auroc_extremes() {
        assert_eq!(auroc(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false]), 1.0);
        assert_eq!(auroc(&[0.0, 1.0, 2.0, 3.0], &[true, true, false, false]), 0.0);
        assert_eq!(auroc(&[1.0, 1.0], &[true, false]), 0.5);
    }

    #[test]
    fn per_class_selects_within_each_label() {
        let scores = [0.0, 10.0, 11.0, 12.0, 100.0, 101.0, 102.0, 103.0];
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let r = select_representative_per_class(&scores, &labels, 0.25).unwrap();
        assert_eq!(r.selected_indices, vec![0, 4]);
    }
}
