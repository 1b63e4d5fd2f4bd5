use std::fmt::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::fingerprint::{tanimoto, Fingerprint};
use super::metrics::regression_metrics;
use crate::error::{Error, Result};

/// Bins with fewer molecules than this report no R².
pub const MIN_BIN_FOR_R2: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityBin {
    pub lower: f64,
    pub upper: f64,
    /// Test molecules whose nearest-train similarity falls in the bin.
    pub n: usize,
    /// Of those, the ones carrying a label.
    pub labeled: usize,
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    /// Mean Tanimoto over all unordered train pairs; `None` below two molecules.
    pub mean_within_train: Option<f64>,
    /// Mean over test molecules of the maximum similarity to any train molecule.
    pub mean_train_test: Option<f64>,
    /// Per test molecule, the maximum similarity to the train set.
    pub nearest: Vec<f64>,
    pub bins: Vec<SimilarityBin>,
}

/// Bin of `s` for half-open intervals `[e_i, e_{i+1})`, the last one closed.
/// Values outside the edges go to the first or last bin.
fn bin_of(edges: &[f64], s: f64) -> usize {
    let bins = edges.len() - 1;
    (0..bins).find(|&i| s < edges[i + 1]).unwrap_or(bins - 1)
}

/// Nearest-train similarity of each test molecule, binned, with per-bin
/// accuracy of `predictions` against `labels` (unlabeled entries are `None`).
pub fn similarity_report(
    train: &[Fingerprint],
    test: &[Fingerprint],
    predictions: &[f64],
    labels: &[Option<f64>],
    edges: &[f64],
) -> Result<SimilarityReport> {
    if train.is_empty() {
        return Err(Error::EmptyInput("similarity report needs a non-empty train set".into()));
    }
    if predictions.len() != test.len() || labels.len() != test.len() {
        return Err(Error::EmptyInput(format!(
            "{} predictions and {} labels for {} test molecules",
            predictions.len(),
            labels.len(),
            test.len()
        )));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!("bin edges {edges:?} are not strictly increasing")));
    }
    let nearest: Vec<f64> = test
        .par_iter()
        .map(|t| train.iter().map(|r| tanimoto(t, r)).try_fold(0.0f64, |m, s| s.map(|s| m.max(s))))
        .collect::<Result<_>>()?;
    let pair_sums: Vec<(f64, usize)> = (0..train.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = (0.0, 0);
            for j in i + 1..train.len() {
                acc.0 += tanimoto(&train[i], &train[j])?;
                acc.1 += 1;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let (sum, pairs) = pair_sums.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let mean_within_train = (pairs > 0).then(|| sum / pairs as f64);
    let mean_train_test = (!nearest.is_empty()).then(|| nearest.iter().sum::<f64>() / nearest.len() as f64);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); edges.len() - 1];
    for (i, &s) in nearest.iter().enumerate() {
        members[bin_of(edges, s)].push(i);
    }
    let bins = members
        .iter()
        .enumerate()
        .map(|(b, idx)| {
            let (p, y): (Vec<f64>, Vec<f64>) =
                idx.iter().filter_map(|&i| labels[i].map(|y| (predictions[i], y))).unzip();
            let m = regression_metrics(&p, &y);
            SimilarityBin {
                lower: edges[b],
                upper: edges[b + 1],
                n: idx.len(),
                labeled: y.len(),
                rmse: m.map(|m| m.rmse),
                r2: m.and_then(|m| if idx.len() >= MIN_BIN_FOR_R2 { m.r2 } else { None }),
            }
        })
        .collect();
    Ok(SimilarityReport { mean_within_train, mean_train_test, nearest, bins })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl SimilarityReport {
    /// Aligned-column text table of the bins plus the two aggregates.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "mean within-train similarity  {}", cell(self.mean_within_train)).unwrap();
        writeln!(out, "mean train-test similarity    {}", cell(self.mean_train_test)).unwrap();
        writeln!(out, "{:>13}  {:>6}  {:>7}  {:>8}  {:>8}", "similarity", "n", "labeled", "rmse", "r2").unwrap();
        for b in &self.bins {
            let range = format!("[{:.2},{:.2}{}", b.lower, b.upper, if b == self.bins.last().unwrap() { "]" } else { ")" });
            writeln!(out, "{range:>13}  {:>6}  {:>7}  {:>8}  {:>8}", b.n, b.labeled, cell(b.rmse), cell(b.r2)).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(bits: &[usize]) -> Fingerprint {
        Fingerprint::from_bits(64, bits).unwrap()
    }

    #[test]
    fn identical_sets_land_in_the_top_bin() {
        let train = vec![fp(&[1, 2]), fp(&[3, 4, 5]), fp(&[9])];
        let r = similarity_report(&train, &train, &[0.0; 3], &[Some(0.0); 3], &[0.0, 0.5, 1.0]).unwrap();
        assert!(r.nearest.iter().all(|&s| s == 1.0));
        assert_eq!(r.bins[0].n, 0);
        assert_eq!(r.bins[1].n, 3);
        assert_eq!(r.mean_train_test, Some(1.0));
    }

    #[test]
    fn upper_bin_assignment() {
        // {1..7} vs {1..10}: 7/10
        let train = vec![fp(&(1..=10).collect::<Vec<_>>())];
        let test = vec![fp(&(1..=7).collect::<Vec<_>>())];
        let r = similarity_report(&train, &test, &[1.0], &[Some(1.5)], &[0.0, 0.5, 1.0]).unwrap();
        assert!((r.nearest[0] - 0.7).abs() < 1e-12);
        assert_eq!((r.bins[0].n, r.bins[1].n), (0, 1));
        assert_eq!(r.bins[1].rmse, Some(0.5));
        assert_eq!(r.bins[1].r2, None);
    }

    #[test]
    fn within_train_mean_is_the_all_pairs_average() {
        let train = vec![fp(&[1, 2, 3]), fp(&[2, 3, 4]), fp(&[7])];
        let r = similarity_report(&train, &[], &[], &[], &[0.0, 1.0]).unwrap();
        // pairs: 0.5, 0, 0
        assert!((r.mean_within_train.unwrap() - 0.5 / 3.0).abs() < 1e-15);
        assert_eq!(r.mean_train_test, None);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(similarity_report(&[], &[], &[], &[], &[0.0, 1.0]).is_err());
        assert!(similarity_report(&[fp(&[1])], &[], &[], &[], &[1.0, 0.0]).is_err());
        assert!(similarity_report(&[fp(&[1])], &[fp(&[1])], &[], &[], &[0.0, 1.0]).is_err());
    }
}
