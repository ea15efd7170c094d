//! Translation-based augmentation: every original translated into every
//! other target language, and ingestion of translated foreign cases.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::corpus::{apply_filter, Case, Dataset, GroupFilter, Jurisdiction, Lang, Provenance};
use crate::translator::{CacheKey, Segment, TranslateError, TranslationRequest, Translator};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("case \"{0}\" is already a translation; only originals are translated")]
    NotOriginal(String),
    #[error("missing translations for {} item(s): {}", .0.len(), .0.join(", "))]
    MissingTranslations(Vec<String>),
    #[error("foreign case \"{0}\" has no year")]
    MissingYear(String),
    #[error("foreign case \"{id}\" must be English from a non-Swiss jurisdiction")]
    NotForeign { id: String },
    #[error(transparent)]
    Translate(#[from] TranslateError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PlanItem {
    pub case_id: String,
    pub source: Lang,
    pub target: Lang,
    /// Already present in the cache for the current backend.
    pub skippable: bool,
}

impl PlanItem {
    fn key(&self) -> CacheKey {
        CacheKey {
            id: self.case_id.clone(),
            source: self.source,
            target: self.target,
        }
    }
}

/// Translated texts keyed by (original case id, target language).
pub type Translations = BTreeMap<(String, Lang), String>;

/// One item per (case, target) with target different from the case language.
pub fn plan_translations(
    dataset: &Dataset,
    targets: &BTreeSet<Lang>,
    translator: Option<&Translator>,
) -> Result<Vec<PlanItem>, AugmentError> {
    let mut plan = Vec::new();
    for case in &dataset.cases {
        if case.provenance != Provenance::Original {
            return Err(AugmentError::NotOriginal(case.id.clone()));
        }
        for &target in targets {
            if target == case.language {
                continue;
            }
            let mut item = PlanItem {
                case_id: case.id.clone(),
                source: case.language,
                target,
                skippable: false,
            };
            if let Some(t) = translator {
                item.skippable = t.cache().get_fresh(&item.key(), t.model_tag()).is_some();
            }
            plan.push(item);
        }
    }
    Ok(plan)
}

/// Runs the non-skippable plan items through the translator (grouped per
/// language pair) and collects every item's text from the cache.
pub fn realize_plan(
    dataset: &Dataset,
    plan: &[PlanItem],
    translator: &Translator,
) -> Result<Translations, AugmentError> {
    let texts: BTreeMap<&str, &str> = dataset
        .cases
        .iter()
        .map(|c| (c.id.as_str(), c.text.as_str()))
        .collect();
    let mut pending: BTreeMap<(Lang, Lang), Vec<Segment>> = BTreeMap::new();
    for item in plan.iter().filter(|i| !i.skippable) {
        let text = texts
            .get(item.case_id.as_str())
            .ok_or_else(|| AugmentError::MissingTranslations(vec![item.case_id.clone()]))?;
        pending
            .entry((item.source, item.target))
            .or_default()
            .push(Segment {
                id: item.case_id.clone(),
                text: text.to_string(),
            });
    }
    for ((source, target), segments) in pending {
        log::info!("translating {} texts {source}->{target}", segments.len());
        translator.translate(&TranslationRequest {
            segments,
            source_language: source,
            target_language: target,
        })?;
    }
    let mut out = Translations::new();
    let mut missing = Vec::new();
    for item in plan {
        match translator.cache().get_fresh(&item.key(), translator.model_tag()) {
            Some(entry) => {
                out.insert((item.case_id.clone(), item.target), entry.translated_text);
            }
            None => missing.push(format!("{}:{}", item.case_id, item.target)),
        }
    }
    if !missing.is_empty() {
        return Err(AugmentError::MissingTranslations(missing));
    }
    Ok(out)
}

fn translated_copy(original: &Case, target: Lang, text: String) -> Case {
    Case {
        id: Case::translated_id(&original.id, target),
        text,
        language: target,
        provenance: Provenance::Mt,
        source_language: original.language,
        ..original.clone()
    }
}

/// Originals plus one translated copy per other target language. Copies keep
/// the original's label and metadata.
pub fn build_augmented(
    dataset: &Dataset,
    targets: &BTreeSet<Lang>,
    translations: &Translations,
) -> Result<Dataset, AugmentError> {
    let mut cases = Vec::with_capacity(dataset.len() * targets.len());
    let mut missing = Vec::new();
    for case in &dataset.cases {
        if case.provenance != Provenance::Original {
            return Err(AugmentError::NotOriginal(case.id.clone()));
        }
        cases.push(case.clone());
        for &target in targets.iter().filter(|t| **t != case.language) {
            match translations.get(&(case.id.clone(), target)) {
                Some(text) => cases.push(translated_copy(case, target, text.clone())),
                None => missing.push(format!("{}:{}", case.id, target)),
            }
        }
    }
    if !missing.is_empty() {
        return Err(AugmentError::MissingTranslations(missing));
    }
    Ok(Dataset::new(dataset.split, cases))
}

/// Plan, translate and assemble the augmented set in one go.
pub fn augment(
    dataset: &Dataset,
    targets: &BTreeSet<Lang>,
    translator: &Translator,
) -> Result<Dataset, AugmentError> {
    let plan = plan_translations(dataset, targets, Some(translator))?;
    let translations = realize_plan(dataset, &plan, translator)?;
    build_augmented(dataset, targets, &translations)
}

/// Translated copies of the foreign cases ruled up to `year_cutoff`
/// (inclusive). The English originals are not part of the output.
pub fn ingest_foreign(
    foreign: &Dataset,
    year_cutoff: u16,
    targets: &BTreeSet<Lang>,
    translator: &Translator,
) -> Result<Dataset, AugmentError> {
    for case in &foreign.cases {
        if case.jurisdiction == Jurisdiction::Ch || case.language != Lang::En {
            return Err(AugmentError::NotForeign {
                id: case.id.clone(),
            });
        }
        if case.year.is_none() {
            return Err(AugmentError::MissingYear(case.id.clone()));
        }
    }
    let kept = apply_filter(
        foreign,
        &GroupFilter {
            max_year: Some(year_cutoff),
            ..Default::default()
        },
    );
    log::info!(
        "foreign ingestion keeps {} of {} cases (year <= {year_cutoff})",
        kept.len(),
        foreign.len()
    );
    let plan = plan_translations(&kept, targets, Some(translator))?;
    let translations = realize_plan(&kept, &plan, translator)?;
    let augmented = build_augmented(&kept, targets, &translations)?;
    Ok(Dataset {
        split: augmented.split,
        cases: augmented
            .cases
            .into_iter()
            .filter(|c| c.provenance == Provenance::Mt)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::case;
    use crate::corpus::Split;
    use crate::translator::{MockBackend, TranslationCache};
    use std::sync::Arc;

    fn targets() -> BTreeSet<Lang> {
        [Lang::De, Lang::Fr, Lang::It].into()
    }

    fn mock() -> (Arc<MockBackend>, Translator) {
        let backend = Arc::new(MockBackend::new());
        (
            backend.clone(),
            Translator::new(backend, TranslationCache::in_memory()),
        )
    }

    #[test]
    fn plan_for_one_german_case() {
        let ds = Dataset::new(Split::Train, vec![case("x", Lang::De, 1)]);
        let plan = plan_translations(&ds, &targets(), None).unwrap();
        let pairs: Vec<_> = plan.iter().map(|p| (p.case_id.as_str(), p.source, p.target)).collect();
        assert_eq!(pairs, [("x", Lang::De, Lang::Fr), ("x", Lang::De, Lang::It)]);
    }

    #[test]
    fn plan_rejects_translations() {
        let mut c = case("x:fr", Lang::Fr, 1);
        c.provenance = Provenance::Mt;
        c.source_language = Lang::De;
        let ds = Dataset::new(Split::Train, vec![c]);
        assert!(matches!(
            plan_translations(&ds, &targets(), None),
            Err(AugmentError::NotOriginal(_))
        ));
    }

    #[test]
    fn cached_item_is_skippable() {
        let ds = Dataset::new(Split::Train, vec![case("x", Lang::De, 1)]);
        let (backend, t) = mock();
        t.translate(&TranslationRequest {
            segments: vec![Segment {
                id: "x".into(),
                text: "text of x".into(),
            }],
            source_language: Lang::De,
            target_language: Lang::Fr,
        })
        .unwrap();
        let plan = plan_translations(&ds, &targets(), Some(&t)).unwrap();
        assert!(plan[0].skippable && plan[0].target == Lang::Fr);
        assert!(!plan[1].skippable);
        realize_plan(&ds, &plan, &t).unwrap();
        assert_eq!(backend.texts_translated(), 2);
    }

    #[test]
    fn italian_case_gets_two_copies() {
        let mut orig = case("it1", Lang::It, 1);
        orig.region = Some(crate::corpus::Region::Ti);
        let ds = Dataset::new(Split::Train, vec![orig.clone()]);
        let (_, t) = mock();
        let out = augment(&ds, &targets(), &t).unwrap();
        assert_eq!(out.len(), 3);
        for c in &out.cases {
            assert_eq!(c.label, orig.label);
            assert_eq!(c.region, orig.region);
            assert_eq!(c.legal_area, orig.legal_area);
            assert_eq!(c.year, orig.year);
            assert_eq!(c.jurisdiction, orig.jurisdiction);
        }
        let de = out.cases.iter().find(|c| c.id == "it1:de").unwrap();
        assert_eq!(de.provenance, Provenance::Mt);
        assert_eq!(de.source_language, Lang::It);
        assert_eq!(de.text, "⟦de⟧ text of it1");
    }

    #[test]
    fn missing_translation_listed() {
        let ds = Dataset::new(Split::Train, vec![case("a", Lang::De, 0)]);
        let mut tr = Translations::new();
        tr.insert(("a".into(), Lang::Fr), "t".into());
        match build_augmented(&ds, &targets(), &tr) {
            Err(AugmentError::MissingTranslations(keys)) => assert_eq!(keys, ["a:it"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn foreign(id: &str, year: Option<u16>) -> Case {
        let mut c = case(id, Lang::En, 1);
        c.jurisdiction = Jurisdiction::In;
        c.region = None;
        c.legal_area = None;
        c.year = year;
        c
    }

    #[test]
    fn foreign_ingestion_filters_and_drops_english() {
        let ds = Dataset::new(
            Split::Train,
            vec![foreign("in1", Some(2010)), foreign("in2", Some(2016)), foreign("in3", Some(2014))],
        );
        let (_, t) = mock();
        let out = ingest_foreign(&ds, 2014, &targets(), &t).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.cases.iter().all(|c| c.provenance == Provenance::Mt
            && c.jurisdiction == Jurisdiction::In
            && c.language != Lang::En));
        assert!(!out.cases.iter().any(|c| c.id.starts_with("in2")));
    }

    #[test]
    fn foreign_without_year_is_error() {
        let ds = Dataset::new(Split::Train, vec![foreign("in1", None)]);
        let (_, t) = mock();
        assert!(matches!(
            ingest_foreign(&ds, 2014, &targets(), &t),
            Err(AugmentError::MissingYear(_))
        ));
    }
}
