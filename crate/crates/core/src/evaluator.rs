//! Macro-F1, seed aggregation and stratified score grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dimension, Lang, LegalArea, Region};
use crate::trainer::RunResult;

/// Cells backed by fewer test examples than this are flagged.
pub const LOW_SUPPORT: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("diff needs at least 2 languages, got {0}")]
    TooFewLanguages(usize),
    #[error("prediction {id} has no {dimension} value")]
    MissingStratum { id: String, dimension: Dimension },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub gold: u8,
    pub predicted: u8,
    pub language: Lang,
    pub region: Option<Region>,
    pub legal_area: Option<LegalArea>,
}

impl Prediction {
    pub fn stratum(&self, dimension: Dimension) -> Option<&'static str> {
        match dimension {
            Dimension::Language => Some(self.language.as_str()),
            Dimension::Region => self.region.map(Region::as_str),
            Dimension::LegalArea => self.legal_area.map(LegalArea::as_str),
            Dimension::Label => Some(if self.gold == 1 { "1" } else { "0" }),
        }
    }
}

/// Unweighted mean of the two per-class F1 scores; any zero division
/// resolves to 0. Returns 0 for an empty input.
pub fn macro_f1_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> f64 {
    let mut confusion = [[0usize; 2]; 2];
    for (gold, pred) in pairs {
        confusion[gold as usize][pred as usize] += 1;
    }
    let f1 = |class: usize| {
        let tp = confusion[class][class] as f64;
        let fp = confusion[1 - class][class] as f64;
        let fn_ = confusion[class][1 - class] as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        }
    };
    (f1(0) + f1(1)) / 2.0
}

pub fn macro_f1(preds: &[Prediction]) -> f64 {
    macro_f1_pairs(preds.iter().map(|p| (p.gold, p.predicted)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 when n = 1.
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Aggregate { mean, std, n })
}

/// Best minus worst language score.
pub fn diff(language_scores: &BTreeMap<Lang, f64>) -> Result<f64, EvalError> {
    if language_scores.len() < 2 {
        return Err(EvalError::TooFewLanguages(language_scores.len()));
    }
    Ok(spread(language_scores.values().copied()))
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}

/// One decimal, half-up.
pub fn format_score(x: f64) -> String {
    let scaled = (x * 10.0 + 0.5 + 1e-9).floor() / 10.0;
    let s = format!("{scaled:.1}");
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

/// `mean ± std`, one decimal each.
pub fn format_cell(agg: &Aggregate) -> String {
    format!("{} ± {}", format_score(agg.mean), format_score(agg.std))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Macro-F1 ×100 aggregated over the seeds of the row.
    pub score: Aggregate,
    /// Smallest per-seed number of test examples in the stratum.
    pub support: usize,
}

impl Cell {
    pub fn low_support(&self) -> bool {
        self.support < LOW_SUPPORT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGrid {
    pub dimension: Dimension,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `cells[row][column]`; `None` marks an empty stratum.
    pub cells: Vec<Vec<Option<Cell>>>,
    /// Aggregate over the row's column means.
    pub all: Vec<Option<Aggregate>>,
    /// Best minus worst column mean of the row.
    pub diff: Vec<Option<f64>>,
}

fn column_order(dimension: Dimension) -> Vec<&'static str> {
    match dimension {
        Dimension::Language => Lang::ALL.iter().map(|l| l.as_str()).collect(),
        Dimension::Region => Region::ALL.iter().map(|r| r.as_str()).collect(),
        Dimension::LegalArea => LegalArea::ALL.iter().map(|a| a.as_str()).collect(),
        Dimension::Label => vec!["0", "1"],
    }
}

/// Rows are training groups (in first-appearance order), columns the
/// strata of `dimension` present in the predictions. Each cell aggregates,
/// over the row's runs, the macro-F1 on that stratum.
pub fn stratified_grid(runs: &[RunResult], dimension: Dimension) -> Result<ScoreGrid, EvalError> {
    let mut rows: Vec<String> = Vec::new();
    for run in runs {
        if !rows.contains(&run.group) {
            rows.push(run.group.clone());
        }
    }
    let mut present = std::collections::BTreeSet::new();
    for run in runs {
        for p in &run.predictions {
            let key = p.stratum(dimension).ok_or_else(|| EvalError::MissingStratum {
                id: p.id.clone(),
                dimension,
            })?;
            present.insert(key);
        }
    }
    let columns: Vec<&'static str> = column_order(dimension)
        .into_iter()
        .filter(|c| present.contains(c))
        .collect();

    let mut cells = Vec::new();
    let mut all = Vec::new();
    let mut diffs = Vec::new();
    for row in &rows {
        let row_runs: Vec<&RunResult> = runs.iter().filter(|r| &r.group == row).collect();
        let mut row_cells = Vec::new();
        for column in &columns {
            let mut scores = Vec::new();
            let mut support = usize::MAX;
            for run in &row_runs {
                let subset: Vec<(u8, u8)> = run
                    .predictions
                    .iter()
                    .filter(|p| p.stratum(dimension) == Some(column))
                    .map(|p| (p.gold, p.predicted))
                    .collect();
                if subset.is_empty() {
                    continue;
                }
                support = support.min(subset.len());
                scores.push(100.0 * macro_f1_pairs(subset));
            }
            row_cells.push(aggregate(&scores).map(|score| Cell { score, support }));
        }
        let means: Vec<f64> = row_cells.iter().flatten().map(|c| c.score.mean).collect();
        all.push(aggregate(&means));
        diffs.push((means.len() >= 2).then(|| spread(means.iter().copied())));
        cells.push(row_cells);
    }
    Ok(ScoreGrid {
        dimension,
        rows,
        columns: columns.into_iter().map(String::from).collect(),
        cells,
        all,
        diff: diffs,
    })
}

impl ScoreGrid {
    fn text_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["group".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("All".into());
        header.push("Diff".into());
        let mut body = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            let mut line = vec![row.clone()];
            for cell in &self.cells[i] {
                line.push(match cell {
                    Some(c) if c.low_support() => format!("{} †", format_cell(&c.score)),
                    Some(c) => format_cell(&c.score),
                    None => "n/a".into(),
                });
            }
            line.push(self.all[i].as_ref().map_or("n/a".into(), format_cell));
            line.push(self.diff[i].map_or("n/a".into(), |d| format!("( {} )", format_score(d))));
            body.push(line);
        }
        (header, body)
    }

    pub fn to_csv(&self) -> String {
        let (header, body) = self.text_rows();
        let mut out = String::new();
        for line in std::iter::once(header).chain(body) {
            let fields: Vec<String> = line.iter().map(|f| csv_field(f)).collect();
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let (header, body) = self.text_rows();
        let widths: Vec<usize> = (0..header.len())
            .map(|j| {
                std::iter::once(&header)
                    .chain(&body)
                    .map(|l| l[j].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |fields: &[String]| {
            let mut s = String::from("|");
            for (j, f) in fields.iter().enumerate() {
                let pad = widths[j] - f.chars().count();
                if j == 0 {
                    write!(s, " {}{} |", f, " ".repeat(pad)).unwrap();
                } else {
                    write!(s, " {}{} |", " ".repeat(pad), f).unwrap();
                }
            }
            s.push('\n');
            s
        };
        let mut out = line(&header);
        out.push('|');
        for (j, w) in widths.iter().enumerate() {
            if j == 0 {
                write!(out, " {} |", "-".repeat(*w)).unwrap();
            } else {
                write!(out, " {}: |", "-".repeat(w.saturating_sub(1))).unwrap();
            }
        }
        out.push('\n');
        for l in &body {
            out.push_str(&line(l));
        }
        if self.cells.iter().flatten().flatten().any(Cell::low_support) {
            writeln!(out, "\n† fewer than {LOW_SUPPORT} test examples").unwrap();
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
