//! Report emission: the token-score histogram with concentration statistics,
//! the per-class accuracy-decay table, and the adaptive-budget summary. Data
//! only; plotting is left to external tools.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sweep::{ClassRow, SweepRow};

pub const HISTOGRAM_BINS: usize = 50;

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Gini coefficient of a non-negative score mass distribution.
pub fn gini(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    let total: f64 = v.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let weighted: f64 = v
        .iter()
        .enumerate()
        .map(|(i, x)| (i as f64 + 1.0) * x)
        .sum();
    (2.0 * weighted) / (n * total) - (n + 1.0) / n
}

/// Fraction of total score mass carried by the top 20% of tokens.
pub fn top_share(values: &[f64], fraction: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = v.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let k = ((fraction * v.len() as f64).ceil() as usize).max(1);
    v[..k.min(v.len())].iter().sum::<f64>() / total
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramReport {
    pub bins: Vec<u64>,
    pub per_class: Vec<Vec<u64>>,
    pub total_tokens: usize,
    pub top20_mass_share: f64,
    pub gini: f64,
    pub mean: f64,
    pub median: f64,
}

/// 50-bin histogram over [0, 1] of all token scores, overall and per class.
pub fn report_histogram(scores_by_clip: &[(usize, &[f64])], n_classes: usize) -> HistogramReport {
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    let mut per_class = vec![vec![0u64; HISTOGRAM_BINS]; n_classes];
    let mut all = Vec::new();
    for &(class, scores) in scores_by_clip {
        for &s in scores {
            let b = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            bins[b] += 1;
            per_class[class][b] += 1;
            all.push(s);
        }
    }
    let mut sorted = all.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.is_empty() {
        0.0
    } else {
        sorted[sorted.len() / 2]
    };
    HistogramReport {
        bins,
        per_class,
        total_tokens: all.len(),
        top20_mass_share: top_share(&all, 0.2),
        gini: gini(&all),
        mean: all.iter().sum::<f64>() / all.len().max(1) as f64,
        median,
    }
}

pub fn write_histogram(report: &HistogramReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    if let Some(dir) = json_path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(json_path, serde_json::to_vec_pretty(report)?)?;
    let mut out = fs::File::create(csv_path)?;
    writeln!(out, "bin_low,bin_high,count")?;
    for (i, &c) in report.bins.iter().enumerate() {
        let lo = i as f64 / HISTOGRAM_BINS as f64;
        let hi = (i + 1) as f64 / HISTOGRAM_BINS as f64;
        writeln!(out, "{lo:.6},{hi:.6},{c}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayRow {
    pub class: usize,
    pub baseline_top1: f64,
    pub reduced_top1: f64,
    /// (baseline - reduced) / baseline, in percent.
    pub decay_percent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayReport {
    pub policy: String,
    pub reduced_rho: f64,
    pub rows: Vec<DecayRow>,
    /// Spearman correlation between baseline accuracy and negative decay;
    /// positive means easier classes decay less.
    pub spearman_base_vs_neg_decay: f64,
}

/// Per-class decay at a reduced ratio against the full-token baseline,
/// averaged over sweep seeds.
pub fn report_decay(class_rows: &[ClassRow], policy: &str, reduced_rho: f64) -> Result<DecayReport> {
    let mean_by_class = |rho: f64| -> Vec<(usize, f64)> {
        let mut acc: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for r in class_rows {
            if r.policy == policy && (r.p_ratio - rho).abs() < 1e-9 {
                let e = acc.entry(r.class).or_insert((0.0, 0));
                e.0 += r.top1;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
    };
    let base = mean_by_class(1.0);
    let reduced = mean_by_class(reduced_rho);
    if base.is_empty() {
        return Err(Error::contract(format!(
            "decay report: no {policy} rows at p_ratio 1.0 in the sweep"
        )));
    }
    if reduced.is_empty() {
        return Err(Error::contract(format!(
            "decay report: no {policy} rows at p_ratio {reduced_rho} in the sweep"
        )));
    }
    let mut rows = Vec::new();
    for ((c, b), (c2, r)) in base.iter().zip(&reduced) {
        if c != c2 {
            return Err(Error::contract("decay report: class sets disagree across ratios"));
        }
        let decay = if *b > 0.0 { 100.0 * (b - r) / b } else { 0.0 };
        rows.push(DecayRow {
            class: *c,
            baseline_top1: *b,
            reduced_top1: *r,
            decay_percent: decay,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.baseline_top1).collect();
    let ys: Vec<f64> = rows.iter().map(|r| -r.decay_percent).collect();
    Ok(DecayReport {
        policy: policy.to_string(),
        reduced_rho,
        spearman_base_vs_neg_decay: spearman(&xs, &ys),
        rows,
    })
}

pub fn write_decay(report: &DecayReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    if let Some(dir) = json_path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(json_path, serde_json::to_vec_pretty(report)?)?;
    let mut out = fs::File::create(csv_path)?;
    writeln!(out, "class,baseline_top1,reduced_top1,decay_percent")?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            r.class, r.baseline_top1, r.reduced_top1, r.decay_percent
        )?;
    }
    Ok(())
}

/// Mean top-1 over seeds for one (policy, p_ratio) cell of a sweep.
pub fn mean_top1(rows: &[SweepRow], policy: &str, rho: f64) -> Option<f64> {
    let hits: Vec<f64> = rows
        .iter()
        .filter(|r| r.policy == policy && (r.p_ratio - rho).abs() < 1e-9)
        .map(|r| r.top1)
        .collect();
    if hits.is_empty() {
        None
    } else {
        Some(hits.iter().sum::<f64>() / hits.len() as f64)
    }
}
