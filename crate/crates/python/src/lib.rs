//! Python bindings: metrics, significance testing, the hierarchical
//! classifier and the prepare/run/report pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lexjudge::corpus::{load_corpus, Dimension, Lang, Split};
use lexjudge::encoder::{tokenize_blocks, EncoderConfig, HierarchicalClassifier};
use lexjudge::evaluator;
use lexjudge::pipeline::{self, PrepareOptions, RunOptions};
use lexjudge::stats::{self, AsoConfig};
use lexjudge::synthetic::SyntheticSpec;
use lexjudge::translator::{HttpBackend, MockBackend, TranslationBackend};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(value_err)
}

/// Macro-averaged F1 over the two classes.
#[pyfunction]
fn macro_f1(gold: Vec<u8>, predicted: Vec<u8>) -> PyResult<f64> {
    if gold.len() != predicted.len() {
        return Err(PyValueError::new_err("gold and predicted differ in length"));
    }
    if gold.iter().chain(&predicted).any(|l| *l > 1) {
        return Err(PyValueError::new_err("labels must be 0 or 1"));
    }
    Ok(evaluator::macro_f1_pairs(gold.into_iter().zip(predicted)))
}

/// `(mean, sample std, n)`.
#[pyfunction]
fn aggregate(values: Vec<f64>) -> PyResult<(f64, f64, usize)> {
    let a = evaluator::aggregate(&values).ok_or_else(|| PyValueError::new_err("no values"))?;
    Ok((a.mean, a.std, a.n))
}

/// `"mean ± std"` at one decimal.
#[pyfunction]
fn format_cell(values: Vec<f64>) -> PyResult<String> {
    let a = evaluator::aggregate(&values).ok_or_else(|| PyValueError::new_err("no values"))?;
    Ok(evaluator::format_cell(&a))
}

/// Best minus worst score over a `{language: score}` mapping.
#[pyfunction]
fn diff(scores: BTreeMap<String, f64>) -> PyResult<f64> {
    let by_lang = scores
        .into_iter()
        .map(|(k, v)| Ok((parse::<Lang>(&k)?, v)))
        .collect::<PyResult<BTreeMap<_, _>>>()?;
    evaluator::diff(&by_lang).map_err(value_err)
}

fn aso_config(alpha: f64, bootstrap: usize, seed: u64, bonferroni: bool) -> AsoConfig {
    AsoConfig {
        alpha,
        bootstrap,
        bonferroni,
        seed,
        ..AsoConfig::default()
    }
}

/// ASO test of "A is better than B": `(eps_min, eps_hat, dominant)`.
#[pyfunction]
#[pyo3(signature = (a, b, alpha = 0.05, bootstrap = 1000, seed = 1234))]
fn aso(a: Vec<f64>, b: Vec<f64>, alpha: f64, bootstrap: usize, seed: u64) -> PyResult<(f64, f64, bool)> {
    let r = stats::aso_epsilon(&a, &b, &aso_config(alpha, bootstrap, seed, false)).map_err(value_err)?;
    Ok((r.eps_min, r.eps_hat, r.dominant))
}

/// Pairwise ε_min matrix over named score samples, in the given order.
#[pyfunction]
#[pyo3(signature = (runs, alpha = 0.05, bootstrap = 1000, seed = 1234, bonferroni = true))]
fn aso_matrix(
    runs: Vec<(String, Vec<f64>)>,
    alpha: f64,
    bootstrap: usize,
    seed: u64,
    bonferroni: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let m = stats::aso_matrix(&runs, &aso_config(alpha, bootstrap, seed, bonferroni)).map_err(value_err)?;
    Ok(m.eps_min)
}

#[pyfunction]
fn wasserstein(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    stats::wasserstein_1d(&p, &q).map_err(value_err)
}

/// Cases of a JSONL split file as dictionaries.
#[pyfunction]
#[pyo3(signature = (path, split = "train"))]
fn load_cases<'py>(py: Python<'py>, path: PathBuf, split: &str) -> PyResult<Vec<Bound<'py, PyAny>>> {
    let data = load_corpus(&path, parse::<Split>(split)?).map_err(value_err)?;
    let json = py.import("json")?;
    data.cases
        .iter()
        .map(|c| json.call_method1("loads", (serde_json::to_string(c).map_err(runtime_err)?,)))
        .collect()
}

/// Hierarchical long-document classifier.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: HierarchicalClassifier,
}

#[pymethods]
impl PyClassifier {
    /// `config` is a JSON object of encoder settings; omitted keys keep
    /// their defaults.
    #[new]
    #[pyo3(signature = (config = None, seed = 1, adapters = false))]
    fn new(config: Option<&str>, seed: u64, adapters: bool) -> PyResult<Self> {
        let mut cfg: EncoderConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(value_err)?,
            None => EncoderConfig::default(),
        };
        cfg.adapter_enabled |= adapters;
        Ok(PyClassifier {
            inner: HierarchicalClassifier::new(cfg, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyClassifier {
            inner: HierarchicalClassifier::load(&dir).map_err(value_err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(runtime_err)
    }

    fn logits(&self, text: &str) -> PyResult<(f64, f64)> {
        let cfg = &self.inner.config;
        let row = tokenize_blocks(text, &cfg.tokenizer(), &cfg.blocking);
        let [a, b] = self.inner.logits(&row).map_err(value_err)?;
        Ok((a, b))
    }

    fn predict(&self, text: &str) -> PyResult<u8> {
        let (a, b) = self.logits(text)?;
        Ok(u8::from(b > a))
    }

    /// `(total, trainable)` scalar parameter counts.
    fn parameter_counts(&self) -> (usize, usize) {
        (self.inner.store.scalar_count(), self.inner.store.trainable_count())
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(runtime_err)
    }
}

/// Writes the synthetic corpus (if `synthetic`) and materializes the
/// augmented training data. Returns the prepare counts.
#[pyfunction]
#[pyo3(signature = (corpus, synthetic = false, mock_translator = false, targets = None, year_cutoff = None))]
fn prepare<'py>(
    py: Python<'py>,
    corpus: PathBuf,
    synthetic: bool,
    mock_translator: bool,
    targets: Option<Vec<String>>,
    year_cutoff: Option<u16>,
) -> PyResult<Bound<'py, PyDict>> {
    let backend: Arc<dyn TranslationBackend> = match HttpBackend::from_env() {
        Some(http) => Arc::new(http),
        None if mock_translator || synthetic => Arc::new(MockBackend::new()),
        None => return Err(PyValueError::new_err("no translation backend configured")),
    };
    let targets = match targets {
        Some(t) => t.iter().map(|s| parse::<Lang>(s)).collect::<PyResult<BTreeSet<_>>>()?,
        None => [Lang::De, Lang::Fr, Lang::It].into(),
    };
    let opts = PrepareOptions {
        corpus_root: corpus,
        targets,
        synthetic: synthetic.then(SyntheticSpec::default),
        backend,
        foreign_year_cutoff: year_cutoff,
    };
    let report = py.detach(|| pipeline::cmd_prepare(&opts)).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("originals", report.originals)?;
    d.set_item("augmented", report.augmented)?;
    d.set_item("foreign_translated", report.foreign_translated)?;
    d.set_item("new_translations", report.new_translations)?;
    Ok(d)
}

/// Trains every seed of an experiment config; returns the experiment
/// directory.
#[pyfunction]
#[pyo3(signature = (config, corpus, out = PathBuf::from("runs"), seeds = None))]
fn run(py: Python<'_>, config: PathBuf, corpus: PathBuf, out: PathBuf, seeds: Option<Vec<u64>>) -> PyResult<PathBuf> {
    let opts = RunOptions {
        config,
        corpus_root: corpus,
        out,
        seeds,
    };
    py.detach(|| pipeline::cmd_run(&opts)).map_err(runtime_err)
}

/// Markdown score grid over experiment directories.
#[pyfunction]
#[pyo3(signature = (runs, by = "language", seeds = None))]
fn report(runs: Vec<PathBuf>, by: &str, seeds: Option<Vec<u64>>) -> PyResult<String> {
    let dimension: Dimension = parse(by)?;
    let out = pipeline::cmd_report(&runs, dimension, seeds.as_deref(), None).map_err(runtime_err)?;
    Ok(out.markdown)
}

#[pymodule]
fn lexjudge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(format_cell, m)?)?;
    m.add_function(wrap_pyfunction!(diff, m)?)?;
    m.add_function(wrap_pyfunction!(aso, m)?)?;
    m.add_function(wrap_pyfunction!(aso_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(load_cases, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_class::<PyClassifier>()?;
    Ok(())
}
