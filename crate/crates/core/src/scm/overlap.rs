//! Empirical positivity check.
//!
//! Each treatment column is paired with a covariate (the same-index column
//! when widths agree, otherwise the covariate row mean). Covariate values are
//! cut into equal-width bins; inside every bin with enough mass the spread of
//! the treatment is compared with its marginal spread. A bin whose
//! conditional spread collapses is flagged: treatment values there are
//! close to determined by the covariate, which is what an overlap violation
//! looks like in finite samples.

use serde::{Deserialize, Serialize};

use super::panel::Panel;

/// Bins with fewer rows than this are not evaluated.
pub const MIN_BIN_COUNT: usize = 30;
/// Flag when conditional std / marginal std falls below this.
pub const DEGENERATE_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinFlag {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub spread_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnOverlap {
    pub treatment: usize,
    pub evaluated_bins: usize,
    pub skipped_bins: usize,
    pub flagged: Vec<BinFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub bins: usize,
    pub columns: Vec<ColumnOverlap>,
}

impl OverlapReport {
    pub fn flag_count(&self) -> usize {
        self.columns.iter().map(|c| c.flagged.len()).sum()
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Advisory only; never fails.
pub fn overlap_diagnostic(panel: &Panel, bins: usize) -> OverlapReport {
    let bins = bins.max(1);
    let paired = panel.n_covariates() == panel.n_treatments();
    let covariate_for = |j: usize| -> Vec<f64> {
        if paired {
            panel.x().column(j)
        } else {
            (0..panel.len())
                .map(|t| {
                    let r = panel.x().row(t);
                    r.iter().sum::<f64>() / r.len().max(1) as f64
                })
                .collect()
        }
    };

    let mut columns = Vec::new();
    for j in 0..panel.n_treatments() {
        let cov = covariate_for(j);
        let treat = panel.a().column(j);
        let mut col = ColumnOverlap {
            treatment: j,
            evaluated_bins: 0,
            skipped_bins: 0,
            flagged: Vec::new(),
        };
        if treat.is_empty() {
            columns.push(col);
            continue;
        }
        let marginal = std_dev(&treat);
        let lo = cov.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = cov.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let mut members: Vec<Vec<f64>> = vec![Vec::new(); bins];
        for (c, a) in cov.iter().zip(&treat) {
            let b = if width > 0.0 {
                (((c - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            members[b].push(*a);
        }
        for (b, m) in members.iter().enumerate() {
            if m.len() < MIN_BIN_COUNT {
                col.skipped_bins += 1;
                continue;
            }
            col.evaluated_bins += 1;
            let ratio = if marginal > 0.0 { std_dev(m) / marginal } else { 0.0 };
            if ratio < DEGENERATE_RATIO {
                col.flagged.push(BinFlag {
                    bin: b,
                    lo: lo + width * b as f64,
                    hi: lo + width * (b + 1) as f64,
                    count: m.len(),
                    spread_ratio: ratio,
                });
            }
        }
        columns.push(col);
    }
    OverlapReport { bins, columns }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn empty_bins_are_skipped_not_flagged() {
        // Covariate values only at the two extremes: all middle bins are empty.
        let t = 100;
        let x: Vec<f64> = (0..t).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let a: Vec<f64> = (0..t).map(|i| (i as f64 * 0.37).sin()).collect();
        let panel = Panel::new(
            Tensor::matrix(t, 1, x).unwrap(),
            Tensor::matrix(t, 1, a).unwrap(),
            vec![0.0; t],
            None,
        )
        .unwrap();
        let r = overlap_diagnostic(&panel, 10);
        assert_eq!(r.columns[0].evaluated_bins, 2);
        assert_eq!(r.columns[0].skipped_bins, 8);
        assert_eq!(r.flag_count(), 0);
    }
}
