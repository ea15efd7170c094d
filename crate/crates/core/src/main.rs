use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lexjudge::corpus::{Dimension, Lang};
use lexjudge::pipeline::{cmd_aso, cmd_distances, cmd_prepare, cmd_report, cmd_run, PrepareOptions, RunOptions};
use lexjudge::stats::AsoConfig;
use lexjudge::synthetic::SyntheticSpec;
use lexjudge::translator::{HttpBackend, MockBackend, TranslationBackend, ENDPOINT_ENV};

/// Cross-lingual legal judgment prediction experiments.
#[derive(Parser)]
#[command(name = "lexjudge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Translate the training split (and foreign cases) into augmented corpora.
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        /// Generate the desk-scale synthetic corpus into --corpus first.
        #[arg(long)]
        synthetic: bool,
        /// Synthetic generator settings (TOML); implies --synthetic.
        #[arg(long)]
        synthetic_spec: Option<PathBuf>,
        /// Use the deterministic mock translator instead of the HTTP service.
        #[arg(long)]
        mock_translator: bool,
        #[arg(long, value_delimiter = ',', default_value = "de,fr,it")]
        targets: Vec<Lang>,
        /// Latest year of foreign cases to ingest.
        #[arg(long)]
        year_cutoff: Option<u16>,
    },
    /// Train one experiment config for every seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Score grid (CSV and Markdown) over experiment directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "language")]
        by: Dimension,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise almost-stochastic-order matrix over experiment directories.
    Aso {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long)]
        no_bonferroni: bool,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Legal-area Wasserstein distances between regional train and test sets.
    Distances {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn backend(mock: bool) -> Result<Arc<dyn TranslationBackend>> {
    if let Some(http) = HttpBackend::from_env() {
        return Ok(Arc::new(http));
    }
    if mock {
        return Ok(Arc::new(MockBackend::new()));
    }
    bail!("no translation backend: set {ENDPOINT_ENV} or pass --mock-translator")
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Prepare {
            corpus,
            synthetic,
            synthetic_spec,
            mock_translator,
            targets,
            year_cutoff,
        } => {
            let spec = match synthetic_spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
                    Some(toml::from_str(&text).with_context(|| path.display().to_string())?)
                }
                None => synthetic.then(SyntheticSpec::default),
            };
            let backend = backend(mock_translator || spec.is_some())?;
            let report = cmd_prepare(&PrepareOptions {
                corpus_root: corpus,
                targets: targets.into_iter().collect::<BTreeSet<_>>(),
                synthetic: spec,
                backend,
                foreign_year_cutoff: year_cutoff,
            })?;
            println!(
                "originals {}  augmented {}  foreign translated {}  new translations {}",
                report.originals, report.augmented, report.foreign_translated, report.new_translations
            );
        }
        Command::Run {
            config,
            corpus,
            out,
            seeds,
        } => {
            let dir = cmd_run(&RunOptions {
                config,
                corpus_root: corpus,
                out,
                seeds,
            })?;
            println!("{}", dir.display());
        }
        Command::Report { runs, by, seeds, out } => {
            let report = cmd_report(&runs, by, seeds.as_deref(), out.as_deref())?;
            print!("{}", report.markdown);
        }
        Command::Aso {
            runs,
            alpha,
            bootstrap,
            seed,
            no_bonferroni,
            seeds,
            out,
        } => {
            let config = AsoConfig {
                alpha,
                bootstrap,
                bonferroni: !no_bonferroni,
                seed,
                ..AsoConfig::default()
            };
            let matrix = cmd_aso(&runs, &config, seeds.as_deref(), out.as_deref())?;
            print!("{}", matrix.to_csv());
        }
        Command::Distances { corpus, out } => {
            let table = cmd_distances(&corpus, out.as_deref())?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}
