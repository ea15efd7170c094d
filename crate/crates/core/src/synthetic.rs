//! Desk-scale synthetic corpus: three pseudo-languages with disjoint filler
//! vocabularies, label-bearing tokens shared across languages, and a
//! configurable low-resource language.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Case, Dataset, Jurisdiction, Lang, LegalArea, Provenance, Region, Split};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub train_cases: usize,
    /// Per language.
    pub dev_cases: usize,
    /// Per language.
    pub test_cases: usize,
    pub foreign_cases: usize,
    pub low_resource: Lang,
    /// Share of the training split in the low-resource language.
    pub low_resource_fraction: f64,
    pub approval_rate: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub filler_vocab: usize,
    /// Label-bearing tokens per class.
    pub signal_vocab: usize,
    /// Probability that a word is label-bearing.
    pub signal_rate: f64,
    /// Probability that a label-bearing word points at the true class.
    pub signal_fidelity: f64,
    /// Insert one token that alone determines the label into every document.
    pub label_marker: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            train_cases: 600,
            dev_cases: 60,
            test_cases: 120,
            foreign_cases: 200,
            low_resource: Lang::It,
            low_resource_fraction: 0.05,
            approval_rate: 0.25,
            min_words: 16,
            max_words: 40,
            filler_vocab: 120,
            signal_vocab: 24,
            signal_rate: 0.15,
            signal_fidelity: 0.85,
            label_marker: false,
        }
    }
}

pub struct SyntheticCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    /// English cases from the foreign jurisdiction.
    pub foreign: Dataset,
}

const SWISS: [Lang; 3] = [Lang::De, Lang::Fr, Lang::It];

fn regions_for(lang: Lang) -> &'static [Region] {
    match lang {
        Lang::De => &[Region::Zh, Region::Es, Region::Cs, Region::Nws, Region::Em],
        Lang::Fr => &[Region::Rl, Region::Em],
        Lang::It => &[Region::Ti],
        Lang::En => &[],
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn weighted<T: Copy>(rng: &mut ChaCha8Rng, items: &[(T, f64)]) -> T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut x = rng.random::<f64>() * total;
    for (item, w) in items {
        if x < *w {
            return *item;
        }
        x -= w;
    }
    items[items.len() - 1].0
}

/// Legal-area mix skewed per region so that region distributions differ.
fn area_weights(region: Option<Region>) -> [(LegalArea, f64); 4] {
    let shift = region.map_or(0, |r| r.index()) as f64;
    [
        (LegalArea::Public, 3.0 + shift * 0.3),
        (LegalArea::Civil, 3.0),
        (LegalArea::Penal, 2.0 + (7.0 - shift) * 0.3),
        (LegalArea::Social, 1.5),
    ]
}

impl SyntheticSpec {
    fn text(&self, rng: &mut ChaCha8Rng, lang: Lang, label: u8) -> String {
        let n = rng.random_range(self.min_words..=self.max_words);
        let mut words = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.random::<f64>() < self.signal_rate {
                let class = if rng.random::<f64>() < self.signal_fidelity {
                    label
                } else {
                    1 - label
                };
                let k = rng.random_range(0..self.signal_vocab);
                words.push(format!("cite{class}x{k}"));
            } else {
                let k = rng.random_range(0..self.filler_vocab);
                words.push(format!("{lang}w{k}"));
            }
        }
        if self.label_marker {
            let at = rng.random_range(0..=words.len());
            words.insert(at, format!("marker{label}"));
        }
        words.join(" ")
    }

    fn swiss_case(&self, rng: &mut ChaCha8Rng, id: String, lang: Lang, years: (u16, u16)) -> Case {
        let label = u8::from(rng.random::<f64>() < self.approval_rate);
        let region = if rng.random::<f64>() < 0.05 {
            Region::Fed
        } else {
            pick(rng, regions_for(lang))
        };
        Case {
            text: self.text(rng, lang, label),
            id,
            language: lang,
            label,
            year: Some(rng.random_range(years.0..=years.1)),
            region: Some(region),
            legal_area: Some(weighted(rng, &area_weights(Some(region)))),
            jurisdiction: Jurisdiction::Ch,
            provenance: Provenance::Original,
            source_language: lang,
        }
    }

    fn train_language(&self, rng: &mut ChaCha8Rng) -> Lang {
        if rng.random::<f64>() < self.low_resource_fraction {
            return self.low_resource;
        }
        let rest: Vec<Lang> = SWISS.iter().copied().filter(|l| *l != self.low_resource).collect();
        weighted(rng, &[(rest[0], 0.6), (rest[1], 0.4)])
    }

    pub fn generate(&self) -> SyntheticCorpus {
        let mut rng = stream_rng(self.seed, "synthetic");
        let train = (0..self.train_cases)
            .map(|i| {
                let lang = self.train_language(&mut rng);
                self.swiss_case(&mut rng, format!("tr{i:05}"), lang, (2000, 2014))
            })
            .collect();
        let mut eval = |prefix: &str, per_lang: usize, years| {
            let mut cases = Vec::new();
            for lang in SWISS {
                for i in 0..per_lang {
                    cases.push(self.swiss_case(&mut rng, format!("{prefix}{lang}{i:04}"), lang, years));
                }
            }
            cases
        };
        let dev = eval("dv", self.dev_cases, (2015, 2016));
        let test = eval("te", self.test_cases, (2017, 2020));
        let foreign = (0..self.foreign_cases)
            .map(|i| {
                let label = u8::from(rng.random::<f64>() < self.approval_rate);
                Case {
                    text: self.text(&mut rng, Lang::En, label),
                    id: format!("in{i:05}"),
                    language: Lang::En,
                    label,
                    year: Some(rng.random_range(1995..=2020)),
                    region: None,
                    legal_area: None,
                    jurisdiction: Jurisdiction::In,
                    provenance: Provenance::Original,
                    source_language: Lang::En,
                }
            })
            .collect();
        SyntheticCorpus {
            train: Dataset::new(Split::Train, train),
            dev: Dataset::new(Split::Dev, dev),
            test: Dataset::new(Split::Test, test),
            foreign: Dataset::new(Split::Train, foreign),
        }
    }
}
