//! Command implementations behind the `lexjudge` binary: corpus
//! preparation, experiment runs and the report, ASO and distance tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{augment, ingest_foreign, plan_translations, AugmentError};
use crate::corpus::{
    apply_filter, load_corpus, load_splits, CorpusError, Dataset, Dimension, GroupFilter, Lang, Provenance, Region,
    Split,
};
use crate::evaluator::{macro_f1, stratified_grid, EvalError, Prediction, ScoreGrid};
use crate::stats::{aso_matrix, distance_table, AsoConfig, AsoMatrix, DistanceTable, StatsError};
use crate::synthetic::SyntheticSpec;
use crate::trainer::{run_experiment, Corpora, ExperimentConfig, LrTrial, RunResult, TrainError};
use crate::translator::{CacheError, TranslationBackend, TranslationCache, Translator};

const AUGMENTED_DIR: &str = "augmented";
const MANIFEST: &str = "manifest.json";
const AUGMENTED_TRAIN: &str = "augmented/train.jsonl";
const FOREIGN_MT: &str = "augmented/foreign_mt.jsonl";
const FOREIGN_SOURCE: &str = "foreign/train.jsonl";
const CACHE_DIR: &str = "cache/mt";
const MANIFEST_FORMAT: &str = "lexjudge-augmented-v1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("augmented corpus under {root} is missing; run `prepare` first")]
    NotPrepared { root: String },
    #[error("augmented manifest {path} is invalid ({reason}); re-run `prepare`")]
    BadManifest { path: String, reason: String },
    #[error("{dir}: missing seed directories {missing:?} (expected seeds {expected:?})")]
    MissingSeeds {
        dir: String,
        expected: Vec<u64>,
        missing: Vec<u64>,
    },
    #[error("{0}: no experiment runs found")]
    NoRuns(String),
    #[error("{path}: {message}")]
    Artifact { path: String, message: String },
    #[error("no region appears in both the training and the test split")]
    NoSharedRegions,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedManifest {
    pub format: String,
    pub targets: BTreeSet<Lang>,
    pub model_tag: String,
    pub foreign_year_cutoff: Option<u16>,
    /// Relative path → SHA-256 of every input and output file.
    pub digests: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
}

pub struct PrepareOptions {
    pub corpus_root: PathBuf,
    pub targets: BTreeSet<Lang>,
    /// Write a synthetic corpus into `corpus_root` first.
    pub synthetic: Option<SyntheticSpec>,
    pub backend: Arc<dyn TranslationBackend>,
    /// Foreign cases after this year are dropped; defaults to the latest
    /// year in the Swiss training split.
    pub foreign_year_cutoff: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareReport {
    pub originals: usize,
    pub augmented: usize,
    pub foreign_translated: usize,
    /// Plan items that were not already cached.
    pub new_translations: usize,
}

pub fn write_synthetic(root: &Path, spec: &SyntheticSpec) -> Result<(), PipelineError> {
    let corpus = spec.generate();
    fs::create_dir_all(root).map_err(io_err(root))?;
    corpus.train.write(&root.join(Split::Train.file_name()))?;
    corpus.dev.write(&root.join(Split::Dev.file_name()))?;
    corpus.test.write(&root.join(Split::Test.file_name()))?;
    let foreign = root.join(FOREIGN_SOURCE);
    fs::create_dir_all(foreign.parent().unwrap()).map_err(io_err(root))?;
    corpus.foreign.write(&foreign)?;
    Ok(())
}

/// Translates the training split into every other target language (and the
/// foreign cases, when present) and materializes `augmented/` plus its
/// manifest. Completed translations persist in `cache/mt/`, so a re-run
/// after a failure resumes and a re-run with a warm cache calls no backend.
pub fn cmd_prepare(opts: &PrepareOptions) -> Result<PrepareReport, PipelineError> {
    let root = &opts.corpus_root;
    if let Some(spec) = &opts.synthetic {
        write_synthetic(root, spec)?;
    }
    let train = load_corpus(&root.join(Split::Train.file_name()), Split::Train)?;
    let cache = TranslationCache::open(&root.join(CACHE_DIR))?;
    let translator = Translator::new(opts.backend.clone(), cache);

    let swiss_plan = plan_translations(&train, &opts.targets, Some(&translator))?;
    let mut new_translations = swiss_plan.iter().filter(|p| !p.skippable).count();
    let augmented = augment(&train, &opts.targets, &translator)?;

    let foreign_path = root.join(FOREIGN_SOURCE);
    let cutoff = opts
        .foreign_year_cutoff
        .or_else(|| train.cases.iter().filter_map(|c| c.year).max());
    let foreign_mt = if foreign_path.exists() {
        let foreign = load_corpus(&foreign_path, Split::Train)?;
        let cutoff = cutoff.ok_or_else(|| AugmentError::MissingYear("<training split>".into()))?;
        let kept = apply_filter(
            &foreign,
            &GroupFilter {
                max_year: Some(cutoff),
                ..Default::default()
            },
        );
        new_translations += plan_translations(&kept, &opts.targets, Some(&translator))?
            .iter()
            .filter(|p| !p.skippable)
            .count();
        Some(ingest_foreign(&foreign, cutoff, &opts.targets, &translator)?)
    } else {
        None
    };
    translator.cache().sync()?;

    let aug_dir = root.join(AUGMENTED_DIR);
    fs::create_dir_all(&aug_dir).map_err(io_err(&aug_dir))?;
    augmented.write(&root.join(AUGMENTED_TRAIN))?;
    let mut inputs = vec![Split::Train.file_name()];
    let mut counts = BTreeMap::from([
        ("originals".to_string(), train.len()),
        ("augmented".to_string(), augmented.len()),
    ]);
    if let Some(f) = &foreign_mt {
        f.write(&root.join(FOREIGN_MT))?;
        inputs.push(FOREIGN_SOURCE.into());
        counts.insert("foreign_translated".into(), f.len());
    } else {
        let stale = root.join(FOREIGN_MT);
        if stale.exists() {
            fs::remove_file(&stale).map_err(io_err(&stale))?;
        }
    }
    let mut digests = BTreeMap::new();
    for rel in inputs.iter().map(String::as_str).chain([AUGMENTED_TRAIN]) {
        digests.insert(rel.to_string(), sha256_file(&root.join(rel))?);
    }
    if foreign_mt.is_some() {
        digests.insert(FOREIGN_MT.into(), sha256_file(&root.join(FOREIGN_MT))?);
    }
    let manifest = AugmentedManifest {
        format: MANIFEST_FORMAT.into(),
        targets: opts.targets.clone(),
        model_tag: translator.model_tag().to_string(),
        foreign_year_cutoff: foreign_mt.as_ref().and(cutoff),
        digests,
        counts,
    };
    write_file(&aug_dir.join(MANIFEST), &to_json(&manifest))?;
    log::info!(
        "prepared {} augmented cases ({} new translations)",
        augmented.len(),
        new_translations
    );
    Ok(PrepareReport {
        originals: train.len(),
        augmented: augmented.len(),
        foreign_translated: foreign_mt.as_ref().map_or(0, Dataset::len),
        new_translations,
    })
}

/// Reads the manifest and checks every recorded digest.
pub fn verify_augmented(root: &Path) -> Result<AugmentedManifest, PipelineError> {
    let path = root.join(AUGMENTED_DIR).join(MANIFEST);
    if !path.exists() {
        return Err(PipelineError::NotPrepared {
            root: root.display().to_string(),
        });
    }
    let bad = |reason: String| PipelineError::BadManifest {
        path: path.display().to_string(),
        reason,
    };
    let text = fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
    let manifest: AugmentedManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(bad(format!("unknown format {}", manifest.format)));
    }
    if !manifest.digests.contains_key(AUGMENTED_TRAIN) {
        return Err(bad(format!("no digest for {AUGMENTED_TRAIN}")));
    }
    for (rel, digest) in &manifest.digests {
        let file = root.join(rel);
        if !file.exists() {
            return Err(bad(format!("{rel} is missing")));
        }
        if &sha256_file(&file)? != digest {
            return Err(bad(format!("{rel} does not match its recorded digest")));
        }
    }
    Ok(manifest)
}

/// Loads everything a config needs from a corpus root. Translated sets are
/// read only when the config asks for them, after the manifest checks out.
pub fn load_corpora(root: &Path, config: &ExperimentConfig) -> Result<Corpora, PipelineError> {
    let splits = load_splits(root)?;
    let mut corpora = Corpora {
        train: splits.train,
        swiss_mt: None,
        foreign_mt: None,
        dev: splits.dev,
        test: splits.test,
    };
    if config.include_mt_swiss || config.include_mt_foreign {
        let manifest = verify_augmented(root)?;
        if config.include_mt_swiss {
            let all = load_corpus(&root.join(AUGMENTED_TRAIN), Split::Train)?;
            corpora.swiss_mt = Some(Dataset {
                split: Split::Train,
                cases: all.cases.into_iter().filter(|c| c.provenance == Provenance::Mt).collect(),
            });
        }
        if config.include_mt_foreign && manifest.digests.contains_key(FOREIGN_MT) {
            corpora.foreign_mt = Some(load_corpus(&root.join(FOREIGN_MT), Split::Train)?);
        }
    }
    Ok(corpora)
}

/// Per-seed run metadata written next to the predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub group: String,
    pub seed: u64,
    pub chosen_lr: f64,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub train_size: usize,
    pub optimizer: String,
    pub lr_trials: Vec<LrTrial>,
    pub experiment: ExperimentConfig,
}

/// Seeds of one experiment directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentIndex {
    pub config: String,
    pub group: String,
    pub seeds: Vec<u64>,
    pub chosen_lr: f64,
}

pub struct RunOptions {
    pub config: PathBuf,
    pub corpus_root: PathBuf,
    pub out: PathBuf,
    pub seeds: Option<Vec<u64>>,
}

pub fn optimizer_description(config: &ExperimentConfig) -> String {
    format!(
        "adam(beta1=0.9, beta2=0.999, eps=1e-8); linear warmup over the first {}% of steps, then constant; batch {}",
        config.warmup_fraction * 100.0,
        config.batch_size
    )
}

/// Runs one experiment config and writes `out/<name>/<seed>/` artifacts.
/// Returns the experiment directory.
pub fn cmd_run(opts: &RunOptions) -> Result<PathBuf, PipelineError> {
    let mut config = ExperimentConfig::load(&opts.config)?;
    if let Some(seeds) = &opts.seeds {
        config.seeds = seeds.clone();
        config.validate()?;
    }
    let corpora = load_corpora(&opts.corpus_root, &config)?;
    let outcome = run_experiment(&config, &corpora)?;
    let exp_dir = opts.out.join(&config.name);
    for run in &outcome.runs {
        let r = &run.result;
        let dir = exp_dir.join(r.seed.to_string());
        let manifest = RunManifest {
            config: r.config.clone(),
            group: r.group.clone(),
            seed: r.seed,
            chosen_lr: r.chosen_lr,
            best_epoch: r.best_epoch,
            stopped_epoch: r.stopped_epoch,
            train_size: r.train_size,
            optimizer: optimizer_description(&config),
            lr_trials: outcome.trials.clone(),
            experiment: config.clone(),
        };
        write_file(&dir.join("manifest.json"), &to_json(&manifest))?;
        write_file(&dir.join("dev_curve.json"), &to_json(&r.dev_curve))?;
        let mut lines = String::new();
        for p in &r.predictions {
            lines.push_str(&serde_json::to_string(p).expect("prediction serializes"));
            lines.push('\n');
        }
        write_file(&dir.join("predictions.jsonl"), &lines)?;
        run.model.save(&dir.join("checkpoint")).map_err(TrainError::from)?;
    }
    let index = ExperimentIndex {
        config: config.name.clone(),
        group: config.group_label().to_string(),
        seeds: config.seeds.clone(),
        chosen_lr: outcome.chosen_lr,
    };
    write_file(&exp_dir.join("experiment.json"), &to_json(&index))?;
    let results: Vec<RunResult> = outcome.runs.into_iter().map(|r| r.result).collect();
    for dim in &config.eval_strata {
        let grid = stratified_grid(&results, *dim)?;
        write_file(&exp_dir.join(format!("scores_{dim}.csv")), &grid.to_csv())?;
    }
    Ok(exp_dir)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_run(dir: &Path) -> Result<RunResult, PipelineError> {
    let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
    let dev_curve: Vec<f64> = read_json(&dir.join("dev_curve.json"))?;
    let pred_path = dir.join("predictions.jsonl");
    let text = fs::read_to_string(&pred_path).map_err(io_err(&pred_path))?;
    let predictions = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<Prediction>(l).map_err(|e| PipelineError::Artifact {
                path: pred_path.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if dev_curve.is_empty() {
        return Err(PipelineError::Artifact {
            path: dir.display().to_string(),
            message: "empty dev curve".into(),
        });
    }
    Ok(RunResult {
        config: manifest.config,
        group: manifest.group,
        seed: manifest.seed,
        chosen_lr: manifest.chosen_lr,
        dev_curve,
        best_epoch: manifest.best_epoch,
        stopped_epoch: manifest.stopped_epoch,
        train_size: manifest.train_size,
        predictions,
    })
}

/// Loads every seed run of an experiment directory. `seeds` overrides the
/// seed list recorded by `run`.
pub fn load_experiment(dir: &Path, seeds: Option<&[u64]>) -> Result<Vec<RunResult>, PipelineError> {
    let index_path = dir.join("experiment.json");
    let expected: Vec<u64> = match seeds {
        Some(s) => s.to_vec(),
        None if index_path.exists() => read_json::<ExperimentIndex>(&index_path)?.seeds,
        None => return Err(PipelineError::NoRuns(dir.display().to_string())),
    };
    let missing: Vec<u64> = expected
        .iter()
        .copied()
        .filter(|s| !dir.join(s.to_string()).join("manifest.json").exists())
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::MissingSeeds {
            dir: dir.display().to_string(),
            expected,
            missing,
        });
    }
    expected.iter().map(|s| load_run(&dir.join(s.to_string()))).collect()
}

fn load_all(run_dirs: &[PathBuf], seeds: Option<&[u64]>) -> Result<Vec<Vec<RunResult>>, PipelineError> {
    if run_dirs.is_empty() {
        return Err(PipelineError::NoRuns("report".into()));
    }
    run_dirs.iter().map(|d| load_experiment(d, seeds)).collect()
}

pub struct ReportOutput {
    pub grid: ScoreGrid,
    pub csv: String,
    pub markdown: String,
}

/// Score grid over the given experiment directories, stratified by `by`.
/// Writes `report.csv` and `report.md` into `out` when given.
pub fn cmd_report(
    run_dirs: &[PathBuf],
    by: Dimension,
    seeds: Option<&[u64]>,
    out: Option<&Path>,
) -> Result<ReportOutput, PipelineError> {
    let runs: Vec<RunResult> = load_all(run_dirs, seeds)?.into_iter().flatten().collect();
    let grid = stratified_grid(&runs, by)?;
    let csv = grid.to_csv();
    let markdown = grid.to_markdown();
    if let Some(out) = out {
        write_file(&out.join("report.csv"), &csv)?;
        write_file(&out.join("report.md"), &markdown)?;
    }
    Ok(ReportOutput { grid, csv, markdown })
}

/// Pairwise ASO over experiments; each experiment contributes its per-seed
/// test macro-F1 (×100) as the score sample. Writes `aso.csv` into `out`.
pub fn cmd_aso(
    run_dirs: &[PathBuf],
    config: &AsoConfig,
    seeds: Option<&[u64]>,
    out: Option<&Path>,
) -> Result<AsoMatrix, PipelineError> {
    let named: Vec<(String, Vec<f64>)> = load_all(run_dirs, seeds)?
        .into_iter()
        .map(|runs| {
            let name = runs[0].config.clone();
            let scores = runs.iter().map(|r| 100.0 * macro_f1(&r.predictions)).collect();
            (name, scores)
        })
        .collect();
    let matrix = aso_matrix(&named, config)?;
    if let Some(out) = out {
        write_file(&out.join("aso.csv"), &matrix.to_csv())?;
        write_file(&out.join("aso_dominance.csv"), &matrix.dominance_csv())?;
    }
    Ok(matrix)
}

/// Legal-area distances between test (rows) and training (columns) splits
/// of every origin region present in both. Writes `distances.csv`.
pub fn cmd_distances(corpus_root: &Path, out: Option<&Path>) -> Result<DistanceTable, PipelineError> {
    let splits = load_splits(corpus_root)?;
    let by_region = |d: &Dataset| -> BTreeMap<Region, Dataset> {
        let mut map: BTreeMap<Region, Vec<_>> = BTreeMap::new();
        for c in &d.cases {
            if let Some(r) = c.region {
                map.entry(r).or_default().push(c.clone());
            }
        }
        map.into_iter().map(|(r, cs)| (r, Dataset::new(d.split, cs))).collect()
    };
    let mut train = by_region(&splits.train);
    let mut test = by_region(&splits.test);
    train.retain(|r, _| test.contains_key(r));
    test.retain(|r, _| train.contains_key(r));
    if train.is_empty() {
        return Err(PipelineError::NoSharedRegions);
    }
    let table = distance_table(&train, &test)?;
    if let Some(out) = out {
        write_file(&out.join("distances.csv"), &table.to_csv())?;
    }
    Ok(table)
}
