//! Almost Stochastic Order (ASO) dominance tests and 1-D Wasserstein
//! distances between legal-area distributions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::corpus::{distribution, CorpusError, Dataset, Dimension};
use crate::evaluator::csv_field;
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("sample {which} has {len} values, at least 2 are required")]
    SampleTooSmall { which: &'static str, len: usize },
    #[error("sample {0} contains a non-finite score")]
    NonFinite(&'static str),
    #[error("invalid ASO config: {0}")]
    Config(String),
    #[error("need at least 2 named runs, got {0}")]
    TooFewRuns(usize),
    #[error("distributions have arity {0} and {1}")]
    ArityMismatch(usize, usize),
    #[error("distribution is not normalized (sum {0})")]
    NotNormalized(f64),
    #[error("distribution has a negative or non-finite mass")]
    InvalidMass,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Quantile grid step.
const DT: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsoConfig {
    pub alpha: f64,
    pub bootstrap: usize,
    /// Values drawn from each quantile function per bootstrap iteration.
    pub resample_size: usize,
    pub bonferroni: bool,
    pub seed: u64,
}

impl Default for AsoConfig {
    fn default() -> Self {
        AsoConfig {
            alpha: 0.05,
            bootstrap: 1000,
            resample_size: 1000,
            bonferroni: true,
            seed: 1234,
        }
    }
}

impl AsoConfig {
    pub fn validate(&self) -> Result<(), StatsError> {
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(StatsError::Config(format!("alpha {} outside (0, 0.5]", self.alpha)));
        }
        if self.bootstrap < 100 {
            return Err(StatsError::Config(format!("bootstrap count {} below 100", self.bootstrap)));
        }
        if self.resample_size == 0 {
            return Err(StatsError::Config("resample size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsoResult {
    pub eps_min: f64,
    pub eps_hat: f64,
    pub dominant: bool,
}

/// Empirical quantile function over sorted scores.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = (n as f64 * p).ceil() as isize - 1;
    sorted[idx.clamp(0, n as isize - 1) as usize]
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Share of the squared quantile gap where B lies above A. `None` when the
/// quantile functions coincide.
fn violation_ratio(a_sorted: &[f64], b_sorted: &[f64]) -> Option<f64> {
    let steps = (1.0 / DT).round() as usize;
    let mut violation = 0.0;
    let mut total = 0.0;
    for k in 1..steps {
        let t = k as f64 * DT;
        let diff = quantile(b_sorted, t) - quantile(a_sorted, t);
        let sq = diff * diff * DT;
        total += sq;
        if diff > 0.0 {
            violation += sq;
        }
    }
    (total > 0.0).then(|| violation / total)
}

fn check_sample(xs: &[f64], which: &'static str) -> Result<(), StatsError> {
    if xs.len() < 2 {
        return Err(StatsError::SampleTooSmall { which, len: xs.len() });
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite(which));
    }
    Ok(())
}

/// ASO test of "A is better than B" at level `alpha` (not adjusted here).
pub fn aso_epsilon(scores_a: &[f64], scores_b: &[f64], config: &AsoConfig) -> Result<AsoResult, StatsError> {
    aso_with_alpha(scores_a, scores_b, config, config.alpha)
}

fn aso_with_alpha(scores_a: &[f64], scores_b: &[f64], config: &AsoConfig, alpha: f64) -> Result<AsoResult, StatsError> {
    config.validate()?;
    check_sample(scores_a, "A")?;
    check_sample(scores_b, "B")?;
    let a = sorted(scores_a);
    let b = sorted(scores_b);
    let Some(eps_hat) = violation_ratio(&a, &b) else {
        return Ok(AsoResult {
            eps_min: 0.5,
            eps_hat: 0.5,
            dominant: false,
        });
    };

    let mut rng = stream_rng(config.seed, "aso");
    let n = config.resample_size;
    let mut samples = Vec::with_capacity(config.bootstrap);
    let mut ra = vec![0.0; n];
    let mut rb = vec![0.0; n];
    for _ in 0..config.bootstrap {
        for x in ra.iter_mut() {
            *x = quantile(&a, rng.random::<f64>());
        }
        for x in rb.iter_mut() {
            *x = quantile(&b, rng.random::<f64>());
        }
        ra.sort_by(f64::total_cmp);
        rb.sort_by(f64::total_cmp);
        samples.push(violation_ratio(&ra, &rb).unwrap_or(0.5));
    }

    let (na, nb) = (a.len() as f64, b.len() as f64);
    let const1 = (na * nb / (na + nb)).sqrt();
    let const2 = ((n * n) as f64 / (2 * n) as f64).sqrt();
    let centred: Vec<f64> = samples.iter().map(|s| const2 * (s - eps_hat)).collect();
    let mean = centred.iter().sum::<f64>() / centred.len() as f64;
    let sigma = (centred.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / centred.len() as f64).sqrt();
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - alpha);
    let eps_min = (eps_hat - sigma / const1 * z).clamp(0.0, 1.0);
    Ok(AsoResult {
        eps_min,
        eps_hat,
        dominant: eps_min < 0.5,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsoMatrix {
    pub names: Vec<String>,
    /// `eps_min[i][j]`: ε_min of "i is better than j"; 1.0 on the diagonal.
    pub eps_min: Vec<Vec<f64>>,
    pub dominant: Vec<Vec<bool>>,
    /// Per-comparison level after any Bonferroni adjustment.
    pub alpha_used: f64,
    pub config: AsoConfig,
}

/// All ordered pairwise ASO tests, in the order given.
pub fn aso_matrix(named_runs: &[(String, Vec<f64>)], config: &AsoConfig) -> Result<AsoMatrix, StatsError> {
    config.validate()?;
    let k = named_runs.len();
    if k < 2 {
        return Err(StatsError::TooFewRuns(k));
    }
    let pairs = k * (k - 1);
    let alpha = if config.bonferroni {
        config.alpha / pairs as f64
    } else {
        config.alpha
    };
    let mut eps = vec![vec![1.0; k]; k];
    let mut dom = vec![vec![false; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let r = aso_with_alpha(&named_runs[i].1, &named_runs[j].1, config, alpha)?;
                eps[i][j] = r.eps_min;
                dom[i][j] = r.dominant;
            }
        }
    }
    Ok(AsoMatrix {
        names: named_runs.iter().map(|(n, _)| n.clone()).collect(),
        eps_min: eps,
        dominant: dom,
        alpha_used: alpha,
        config: *config,
    })
}

impl AsoMatrix {
    pub fn caption(&self) -> String {
        format!(
            "# eps_min of row over column; alpha={} bootstrap={} bonferroni={} (per-pair alpha={:.6}) seed={}",
            self.config.alpha,
            self.config.bootstrap,
            if self.config.bonferroni { "on" } else { "off" },
            self.alpha_used,
            self.config.seed
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.caption();
        out.push('\n');
        out.push_str("model");
        for n in &self.names {
            write!(out, ",{}", csv_field(n)).unwrap();
        }
        out.push('\n');
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(&csv_field(n));
            for v in &self.eps_min[i] {
                write!(out, ",{v:.2}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Boolean dominance indicators, same layout as [`AsoMatrix::to_csv`].
    pub fn dominance_csv(&self) -> String {
        let mut out = String::from("model");
        for n in &self.names {
            write!(out, ",{}", csv_field(n)).unwrap();
        }
        out.push('\n');
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(&csv_field(n));
            for d in &self.dominant[i] {
                write!(out, ",{d}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn check_distribution(p: &[f64]) -> Result<(), StatsError> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(StatsError::InvalidMass);
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(StatsError::NotNormalized(sum));
    }
    Ok(())
}

/// W1 between two distributions on support 0..K−1: Σ |CDF_p − CDF_q|.
pub fn wasserstein_1d(p: &[f64], q: &[f64]) -> Result<f64, StatsError> {
    if p.len() != q.len() {
        return Err(StatsError::ArityMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for k in 0..p.len().saturating_sub(1) {
        cp += p[k];
        cq += q[k];
        total += (cp - cq).abs();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceTable {
    /// Test sets, one per row.
    pub rows: Vec<String>,
    /// Training sets, one per column.
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Legal-area W1 between every test set (rows) and training set (columns).
pub fn distance_table<K: Ord + ToString>(
    train_sets: &BTreeMap<K, Dataset>,
    test_sets: &BTreeMap<K, Dataset>,
) -> Result<DistanceTable, StatsError> {
    let train: Vec<(String, Vec<f64>)> = train_sets
        .iter()
        .map(|(k, d)| Ok((k.to_string(), distribution(d, Dimension::LegalArea)?)))
        .collect::<Result<_, StatsError>>()?;
    let test: Vec<(String, Vec<f64>)> = test_sets
        .iter()
        .map(|(k, d)| Ok((k.to_string(), distribution(d, Dimension::LegalArea)?)))
        .collect::<Result<_, StatsError>>()?;
    let values = test
        .iter()
        .map(|(_, q)| train.iter().map(|(_, p)| wasserstein_1d(q, p)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    Ok(DistanceTable {
        rows: test.into_iter().map(|(k, _)| k).collect(),
        columns: train.into_iter().map(|(k, _)| k).collect(),
        values,
    })
}

/// Two decimals without a leading zero: `0.02` → `.02`.
pub fn format_distance(x: f64) -> String {
    let s = format!("{x:.2}");
    match s.strip_prefix("0.") {
        Some(rest) => format!(".{rest}"),
        None => s,
    }
}

impl DistanceTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("test\\train");
        for c in &self.columns {
            write!(out, ",{}", csv_field(c)).unwrap();
        }
        out.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(&csv_field(r));
            for v in &self.values[i] {
                write!(out, ",{}", format_distance(*v)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_convention() {
        let s = [1.0, 2.0, 3.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0 / 3.0), 1.0);
        assert_eq!(quantile(&s, 0.34), 2.0);
        assert_eq!(quantile(&s, 1.0), 3.0);
    }

    #[test]
    fn separated_and_identical() {
        let c = AsoConfig::default();
        let r = aso_epsilon(&[10.0, 11.0, 12.0], &[1.0, 2.0, 3.0], &c).unwrap();
        assert_eq!((r.eps_hat, r.eps_min, r.dominant), (0.0, 0.0, true));
        let r = aso_epsilon(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0], &c).unwrap();
        assert_eq!((r.eps_hat, r.eps_min, r.dominant), (1.0, 1.0, false));
        let r = aso_epsilon(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0], &c).unwrap();
        assert_eq!(r.eps_min, 0.5);
    }

    #[test]
    fn input_errors() {
        let c = AsoConfig::default();
        assert!(matches!(
            aso_epsilon(&[1.0], &[1.0, 2.0], &c),
            Err(StatsError::SampleTooSmall { which: "A", len: 1 })
        ));
        assert!(matches!(
            aso_epsilon(&[1.0, f64::NAN], &[1.0, 2.0], &c),
            Err(StatsError::NonFinite("A"))
        ));
        let bad = AsoConfig { bootstrap: 10, ..c };
        assert!(matches!(aso_epsilon(&[1.0, 2.0], &[1.0, 2.0], &bad), Err(StatsError::Config(_))));
    }

    #[test]
    fn w1_examples() {
        assert_eq!(wasserstein_1d(&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 1.0]).unwrap(), 3.0);
        assert_eq!(wasserstein_1d(&[0.25; 4], &[0.25; 4]).unwrap(), 0.0);
        assert!(matches!(wasserstein_1d(&[0.5, 0.5], &[1.0]), Err(StatsError::ArityMismatch(2, 1))));
        assert!(matches!(wasserstein_1d(&[0.5, 0.6], &[1.0, 0.0]), Err(StatsError::NotNormalized(_))));
    }

    #[test]
    fn distance_format() {
        assert_eq!(format_distance(0.0213), ".02");
        assert_eq!(format_distance(0.126), ".13");
        assert_eq!(format_distance(1.5), "1.50");
        assert_eq!(format_distance(0.0), ".00");
    }
}
