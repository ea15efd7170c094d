#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use lexjudge::augment::augment;
use lexjudge::corpus::{Case, Dataset, Jurisdiction, Lang, LegalArea, Provenance, Region, Split};
use lexjudge::encoder::{tokenize_blocks, BlockRow, EncoderConfig};
use lexjudge::synthetic::SyntheticSpec;
use lexjudge::trainer::Corpora;
use lexjudge::translator::{MockBackend, TranslationCache, Translator};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn config_path(rel: &str) -> PathBuf {
    repo_root().join("configs").join(rel)
}

pub fn swiss() -> BTreeSet<Lang> {
    [Lang::De, Lang::Fr, Lang::It].into()
}

pub fn mock_translator() -> (Arc<MockBackend>, Translator) {
    let backend = Arc::new(MockBackend::new());
    let translator = Translator::new(backend.clone(), TranslationCache::in_memory());
    (backend, translator)
}

/// Small encoder used by tests that train or differentiate.
pub fn tiny_encoder(hidden: usize, vocab: usize, block_len: usize) -> EncoderConfig {
    let mut c = EncoderConfig {
        hidden,
        layers: 2,
        heads: 2,
        intermediate: 2 * hidden,
        aggregator_layers: 2,
        aggregator_heads: 2,
        vocab_size: vocab,
        ..EncoderConfig::default()
    };
    c.blocking.block_len = block_len;
    c
}

pub fn random_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| format!("w{}", rng.random_range(0..5000)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// A document of `1..=max_words` words.
pub fn random_row(rng: &mut ChaCha8Rng, config: &EncoderConfig, max_words: usize) -> BlockRow {
    let n = rng.random_range(1..=max_words);
    tokenize_blocks(&random_text(rng, n), &config.tokenizer(), &config.blocking)
}

pub fn random_case(rng: &mut ChaCha8Rng, id: String, lang: Lang) -> Case {
    let region = Region::ALL[rng.random_range(0..Region::ALL.len())];
    Case {
        text: random_text(rng, 12),
        id,
        language: lang,
        label: rng.random_range(0..2),
        year: Some(rng.random_range(2000..=2014)),
        region: Some(region),
        legal_area: Some(LegalArea::ALL[rng.random_range(0..4)]),
        jurisdiction: Jurisdiction::Ch,
        provenance: Provenance::Original,
        source_language: lang,
    }
}

pub fn foreign_case(rng: &mut ChaCha8Rng, id: String, year: u16) -> Case {
    Case {
        text: random_text(rng, 12),
        id,
        language: Lang::En,
        label: rng.random_range(0..2),
        year: Some(year),
        region: None,
        legal_area: None,
        jurisdiction: Jurisdiction::In,
        provenance: Provenance::Original,
        source_language: Lang::En,
    }
}

/// Synthetic corpora with mock-translated Swiss and foreign sets.
pub fn synthetic_corpora(spec: &SyntheticSpec) -> Corpora {
    let s = spec.generate();
    let (_, translator) = mock_translator();
    let aug = augment(&s.train, &swiss(), &translator).unwrap();
    let mt = |d: Dataset| Dataset {
        split: Split::Train,
        cases: d.cases.into_iter().filter(|c| c.provenance == Provenance::Mt).collect(),
    };
    let foreign = lexjudge::augment::ingest_foreign(&s.foreign, 2014, &swiss(), &translator).unwrap();
    Corpora {
        train: s.train,
        swiss_mt: Some(mt(aug)),
        foreign_mt: Some(foreign),
        dev: s.dev,
        test: s.test,
    }
}
