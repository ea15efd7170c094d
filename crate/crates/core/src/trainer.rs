//! Experiment configuration, training-set composition, the training loop
//! with early stopping, and learning-rate selection on dev macro-F1.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{apply_filter, oversample, Case, CorpusError, Dataset, Dimension, GroupFilter, Split};
use crate::encoder::optim::{warmup_lr, Adam};
use crate::encoder::params::{ParamGrads, ParamStore};
use crate::encoder::{tokenize_blocks, BlockRow, EncoderConfig, EncoderError, HierarchicalClassifier};
use crate::evaluator::{macro_f1_pairs, Prediction};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid experiment config {name}: {message}")]
    Config { name: String, message: String },
    #[error("{path}: {message}")]
    ConfigFile { path: String, message: String },
    #[error("config {name} needs {corpus}, which was not provided")]
    MissingCorpus { name: String, corpus: &'static str },
    #[error("training set for {0} is empty")]
    EmptyTrainingSet(String),
    #[error("{split} set for {name} is empty")]
    EmptyEvalSet { name: String, split: Split },
    #[error("training diverged at epoch {epoch} with lr {lr:e}: non-finite loss")]
    Divergence { epoch: usize, lr: f64 },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    FullFinetune,
    Adapters,
}

impl ModelMode {
    pub fn default_lr(self) -> f64 {
        match self {
            ModelMode::FullFinetune => 1e-5,
            ModelMode::Adapters => 5e-5,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_epochs() -> usize {
    20
}

fn default_batch() -> usize {
    16
}

fn default_patience() -> usize {
    3
}

fn default_true() -> bool {
    true
}

fn default_warmup() -> f64 {
    0.1
}

fn default_strata() -> Vec<Dimension> {
    vec![Dimension::Language]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Row label in reports; defaults to `name`.
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub train_filter: GroupFilter,
    #[serde(default)]
    pub dev_filter: GroupFilter,
    #[serde(default)]
    pub test_filter: GroupFilter,
    #[serde(default)]
    pub include_mt_swiss: bool,
    #[serde(default)]
    pub include_mt_foreign: bool,
    pub model_mode: ModelMode,
    /// Empty means the mode's default learning rate.
    #[serde(default)]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs")]
    pub epochs_max: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_strata")]
    pub eval_strata: Vec<Dimension>,
    #[serde(default = "default_true")]
    pub oversample: bool,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let err = |message: String| TrainError::ConfigFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let config = Self::from_toml(&text).map_err(|e| err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn group_label(&self) -> &str {
        self.group.as_deref().unwrap_or(&self.name)
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        if self.lr_grid.is_empty() {
            vec![self.model_mode.default_lr()]
        } else {
            self.lr_grid.clone()
        }
    }

    /// Encoder settings with the adapter flag following `model_mode`.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            adapter_enabled: self.model_mode == ModelMode::Adapters,
            ..self.encoder.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |message: &str| {
            Err(TrainError::Config {
                name: self.name.clone(),
                message: message.into(),
            })
        };
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.learning_rates().iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.epochs_max == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return bad("epochs_max, batch_size and early_stop_patience must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        self.encoder_config().validate().map_err(|e| TrainError::Config {
            name: self.name.clone(),
            message: e.to_string(),
        })
    }
}

/// All inputs an experiment may draw on.
#[derive(Debug, Clone)]
pub struct Corpora {
    /// Swiss originals, training split.
    pub train: Dataset,
    /// Machine-translated copies of `train` (translations only).
    pub swiss_mt: Option<Dataset>,
    /// Machine-translated foreign cases (translations only).
    pub foreign_mt: Option<Dataset>,
    pub dev: Dataset,
    pub test: Dataset,
}

/// Filtered union of originals and the flagged translated sets, before
/// oversampling.
pub fn compose_training_set(config: &ExperimentConfig, corpora: &Corpora) -> Result<Dataset, TrainError> {
    let mut parts = vec![corpora.train.clone()];
    let missing = |corpus| TrainError::MissingCorpus {
        name: config.name.clone(),
        corpus,
    };
    if config.include_mt_swiss {
        parts.push(corpora.swiss_mt.clone().ok_or_else(|| missing("translated Swiss cases"))?);
    }
    if config.include_mt_foreign {
        parts.push(corpora.foreign_mt.clone().ok_or_else(|| missing("translated foreign cases"))?);
    }
    let union = Dataset::concat(Split::Train, parts);
    let composed = apply_filter(&union, &config.train_filter);
    if composed.is_empty() {
        return Err(TrainError::EmptyTrainingSet(config.name.clone()));
    }
    Ok(composed)
}

/// Composition followed by class-balancing oversampling (when enabled).
pub fn build_training_set(config: &ExperimentConfig, corpora: &Corpora, seed: u64) -> Result<Dataset, TrainError> {
    let composed = compose_training_set(config, corpora)?;
    if config.oversample {
        Ok(oversample(&composed, seed)?)
    } else {
        Ok(composed)
    }
}

pub fn dev_set(config: &ExperimentConfig, corpora: &Corpora) -> Result<Dataset, TrainError> {
    eval_set(config, &corpora.dev, &config.dev_filter, Split::Dev)
}

pub fn test_set(config: &ExperimentConfig, corpora: &Corpora) -> Result<Dataset, TrainError> {
    eval_set(config, &corpora.test, &config.test_filter, Split::Test)
}

fn eval_set(config: &ExperimentConfig, data: &Dataset, filter: &GroupFilter, split: Split) -> Result<Dataset, TrainError> {
    let out = apply_filter(data, filter);
    if out.is_empty() {
        return Err(TrainError::EmptyEvalSet {
            name: config.name.clone(),
            split,
        });
    }
    Ok(out)
}

/// A tokenized case.
#[derive(Debug, Clone)]
pub struct Example {
    pub row: BlockRow,
    pub label: u8,
    pub case: Case,
}

pub fn tokenize_dataset(dataset: &Dataset, encoder: &EncoderConfig) -> Vec<Example> {
    let tokenizer = encoder.tokenizer();
    dataset
        .cases
        .iter()
        .map(|c| Example {
            row: tokenize_blocks(&c.text, &tokenizer, &encoder.blocking),
            label: c.label,
            case: c.clone(),
        })
        .collect()
}

/// Patience-based early stopping on a score that should increase.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopVerdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records the score of `epoch`. Only a strict improvement resets the
    /// patience counter.
    pub fn observe(&mut self, epoch: usize, score: f64) -> StopVerdict {
        match self.best {
            Some((_, best)) if score <= best || score.is_nan() => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopVerdict::Stop
                } else {
                    StopVerdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.since_best = 0;
                StopVerdict::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: String,
    pub group: String,
    pub seed: u64,
    pub chosen_lr: f64,
    /// Dev macro-F1 after each epoch.
    pub dev_curve: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub train_size: usize,
    pub predictions: Vec<Prediction>,
}

impl RunResult {
    pub fn best_dev(&self) -> f64 {
        self.dev_curve[self.best_epoch - 1]
    }
}

/// Scores the model after an epoch (1-based).
pub type DevScoreFn<'a> = Box<dyn FnMut(usize, &HierarchicalClassifier) -> f64 + 'a>;

/// Optional hooks into [`train_once`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Replaces the dev macro-F1 of an epoch (1-based) with a scripted value.
    pub dev_score: Option<DevScoreFn<'a>>,
    /// Saves the model after every epoch under `<dir>/epoch-<n>`.
    pub epoch_checkpoints: Option<PathBuf>,
}

pub struct TrainedRun {
    pub result: RunResult,
    pub model: HierarchicalClassifier,
}

/// Tokenized train/dev/test material for one config and seed.
pub struct PreparedRun {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl PreparedRun {
    pub fn new(config: &ExperimentConfig, corpora: &Corpora, seed: u64) -> Result<Self, TrainError> {
        let enc = config.encoder_config();
        Ok(PreparedRun {
            train: tokenize_dataset(&build_training_set(config, corpora, seed)?, &enc),
            dev: tokenize_dataset(&dev_set(config, corpora)?, &enc),
            test: tokenize_dataset(&test_set(config, corpora)?, &enc),
        })
    }
}

pub fn predict_examples(model: &HierarchicalClassifier, examples: &[Example]) -> Result<Vec<Prediction>, TrainError> {
    examples
        .iter()
        .map(|e| {
            Ok(Prediction {
                id: e.case.id.clone(),
                gold: e.label,
                predicted: model.predict(&e.row)?,
                language: e.case.language,
                region: e.case.region,
                legal_area: e.case.legal_area,
            })
        })
        .collect()
}

fn all_finite(store: &ParamStore) -> bool {
    store.iter().all(|(_, p)| p.value.data.iter().all(|v| v.is_finite()))
}

/// Trains one model: per-epoch dev evaluation, early stopping, restore of
/// the best epoch, then test prediction.
pub fn train_once(
    config: &ExperimentConfig,
    data: &PreparedRun,
    seed: u64,
    lr: f64,
    hooks: &mut TrainHooks,
) -> Result<TrainedRun, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet(config.name.clone()));
    }
    let mut model = HierarchicalClassifier::new(config.encoder_config(), seed)?;
    for e in data.train.iter().chain(&data.dev).chain(&data.test) {
        model.check_row(&e.row)?;
    }
    let mut shuffle_rng = stream_rng(seed, "shuffle");
    let mut dropout_rng = stream_rng(seed, "dropout");
    let mut adam = Adam::new(&model.store);
    let mut grads = ParamGrads::new(&model.store);

    let steps_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs_max) as u64;
    let warmup = (config.warmup_fraction * total_steps as f64).ceil() as u64;

    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best_store = model.store.clone();
    let mut dev_curve = Vec::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut stopped_epoch = config.epochs_max;

    for epoch in 1..=config.epochs_max {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &data.train[i];
                let (g, loss) = model.loss_graph(&ex.row, ex.label, Some(&mut dropout_rng));
                if !g.value(loss).data[0].is_finite() {
                    return Err(TrainError::Divergence { epoch, lr });
                }
                g.backward(loss, scale, &mut grads);
            }
            let step_lr = warmup_lr(lr, adam.steps(), warmup);
            adam.step(&mut model.store, &grads, step_lr);
        }
        if !all_finite(&model.store) {
            return Err(TrainError::Divergence { epoch, lr });
        }

        let score = match hooks.dev_score.as_mut() {
            Some(f) => f(epoch, &model),
            None => {
                let preds = predict_examples(&model, &data.dev)?;
                macro_f1_pairs(preds.iter().map(|p| (p.gold, p.predicted)))
            }
        };
        log::debug!("{} seed {seed} lr {lr:e} epoch {epoch}: dev macro-F1 {score:.4}", config.name);
        dev_curve.push(score);
        if let Some(dir) = &hooks.epoch_checkpoints {
            model.save(&dir.join(format!("epoch-{epoch}")))?;
        }
        match stopper.observe(epoch, score) {
            StopVerdict::Improved => best_store.copy_values_from(&model.store),
            StopVerdict::Continue => {}
            StopVerdict::Stop => {
                stopped_epoch = epoch;
                break;
            }
        }
    }

    let (best_epoch, _) = stopper.best().expect("at least one epoch evaluated");
    model.store.copy_values_from(&best_store);
    let predictions = predict_examples(&model, &data.test)?;
    Ok(TrainedRun {
        result: RunResult {
            config: config.name.clone(),
            group: config.group_label().to_string(),
            seed,
            chosen_lr: lr,
            dev_curve,
            best_epoch,
            stopped_epoch,
            train_size: data.train.len(),
            predictions,
        },
        model,
    })
}

/// Dev outcome of one grid point: best dev macro-F1 per seed, or `None`
/// for a seed whose training diverged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTrial {
    pub lr: f64,
    pub best_dev: Vec<Option<f64>>,
}

impl LrTrial {
    pub fn mean_dev(&self) -> Option<f64> {
        let scores: Option<Vec<f64>> = self.best_dev.iter().copied().collect();
        let scores = scores?;
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

/// Highest mean dev macro-F1 across seeds; grid points with a diverged
/// seed are ineligible. Ties keep the earlier grid point.
pub fn select_learning_rate(trials: &[LrTrial]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for t in trials {
        if let Some(mean) = t.mean_dev() {
            if best.is_none_or(|(_, b)| mean > b) {
                best = Some((t.lr, mean));
            }
        }
    }
    best.map(|(lr, _)| lr)
}

pub struct ExperimentOutcome {
    pub chosen_lr: f64,
    pub trials: Vec<LrTrial>,
    /// One trained run per seed at the chosen learning rate.
    pub runs: Vec<TrainedRun>,
}

/// Grid search over learning rates for every seed, selection on mean dev
/// macro-F1, and the chosen runs' test predictions.
pub fn run_experiment(config: &ExperimentConfig, corpora: &Corpora) -> Result<ExperimentOutcome, TrainError> {
    config.validate()?;
    let prepared: Vec<(u64, PreparedRun)> = config
        .seeds
        .iter()
        .map(|&s| Ok((s, PreparedRun::new(config, corpora, s)?)))
        .collect::<Result<_, TrainError>>()?;

    let mut trials = Vec::new();
    let mut trained: BTreeMap<usize, Vec<TrainedRun>> = BTreeMap::new();
    let mut first_divergence = None;
    for (i, lr) in config.learning_rates().into_iter().enumerate() {
        let outcomes: Vec<Result<TrainedRun, TrainError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = prepared
                .iter()
                .map(|(seed, data)| {
                    scope.spawn(move || train_once(config, data, *seed, lr, &mut TrainHooks::default()))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        let mut best_dev = Vec::new();
        let mut runs = Vec::new();
        for outcome in outcomes {
            match outcome {
                Ok(run) => {
                    best_dev.push(Some(run.result.best_dev()));
                    runs.push(run);
                }
                Err(e @ TrainError::Divergence { .. }) => {
                    log::warn!("{}: {e}", config.name);
                    best_dev.push(None);
                    first_divergence.get_or_insert(e);
                }
                Err(e) => return Err(e),
            }
        }
        trials.push(LrTrial { lr, best_dev });
        trained.insert(i, runs);
    }

    let Some(chosen_lr) = select_learning_rate(&trials) else {
        return Err(first_divergence.expect("no eligible lr implies a divergence"));
    };
    let idx = trials.iter().position(|t| t.lr == chosen_lr).unwrap();
    let runs = trained.remove(&idx).unwrap();
    Ok(ExperimentOutcome {
        chosen_lr,
        trials,
        runs,
    })
}

/// Test predictions keyed by id, for parity checks.
pub fn predictions_by_id(preds: &[Prediction]) -> HashMap<&str, u8> {
    preds.iter().map(|p| (p.id.as_str(), p.predicted)).collect()
}
