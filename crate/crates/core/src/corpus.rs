//! Case corpora: loading, validation, filtering, resampling and
//! per-dimension frequency vectors.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field \"{field}\": {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: duplicate case id \"{id}\"")]
    DuplicateId { line: usize, id: String },
    #[error("oversampling needs both classes, found only label {0}")]
    SingleClass(u8),
    #[error("oversampling an empty dataset")]
    EmptyOversample,
    #[error("distribution over an empty dataset")]
    EmptyDistribution,
    #[error("case \"{id}\" has no {dimension} value")]
    MissingDimension { id: String, dimension: Dimension },
    #[error("unknown split \"{0}\"")]
    UnknownSplit(String),
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            /// Position in the fixed enum order.
            pub fn index(self) -> usize {
                Self::ALL.iter().position(|v| *v == self).unwrap()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown value \"{}\" (expected one of {})",
                        other,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

string_enum!(
    /// Text language of a case.
    Lang { De => "de", Fr => "fr", It => "it", En => "en" }
);
string_enum!(
    /// Origin region of a Swiss case.
    Region {
        Zh => "ZH", Es => "ES", Cs => "CS", Nws => "NWS",
        Em => "EM", Rl => "RL", Ti => "TI", Fed => "FED",
    }
);
string_enum!(
    /// Legal area, in the fixed order used by distributions and distances.
    LegalArea { Public => "public", Civil => "civil", Penal => "penal", Social => "social" }
);
string_enum!(Jurisdiction { Ch => "CH", In => "IN" });
string_enum!(Provenance { Original => "original", Mt => "mt" });
string_enum!(Split { Train => "train", Dev => "dev", Test => "test" });
string_enum!(
    /// Metadata dimension used for stratification and distributions.
    Dimension {
        Language => "language", Region => "region",
        LegalArea => "legal_area", Label => "label",
    }
);

impl Split {
    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

/// One court decision. Field order matches the on-disk record layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub text: String,
    pub language: Lang,
    /// 0 = dismissal, 1 = approval.
    pub label: u8,
    pub year: Option<u16>,
    pub region: Option<Region>,
    pub legal_area: Option<LegalArea>,
    pub jurisdiction: Jurisdiction,
    pub provenance: Provenance,
    pub source_language: Lang,
}

impl Case {
    /// Id of the machine-translated copy of `orig_id` in `target`.
    pub fn translated_id(orig_id: &str, target: Lang) -> String {
        format!("{orig_id}:{target}")
    }

    /// Checks the cross-field invariants; returns the offending field.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if self.label > 1 {
            return Err(("label", format!("must be 0 or 1, got {}", self.label)));
        }
        match self.provenance {
            Provenance::Original if self.source_language != self.language => {
                return Err((
                    "source_language",
                    "must equal language for original cases".into(),
                ))
            }
            Provenance::Mt if self.source_language == self.language => {
                return Err((
                    "source_language",
                    "must differ from language for translated cases".into(),
                ))
            }
            _ => {}
        }
        if self.jurisdiction == Jurisdiction::Ch {
            if self.region.is_none() {
                return Err(("region", "required for CH cases".into()));
            }
            if self.legal_area.is_none() {
                return Err(("legal_area", "required for CH cases".into()));
            }
            if self.year.is_none() {
                return Err(("year", "required for CH cases".into()));
            }
        }
        Ok(())
    }

    pub fn dimension_key(&self, dimension: Dimension) -> Option<&'static str> {
        match dimension {
            Dimension::Language => Some(self.language.as_str()),
            Dimension::Region => self.region.map(Region::as_str),
            Dimension::LegalArea => self.legal_area.map(LegalArea::as_str),
            Dimension::Label => Some(if self.label == 1 { "1" } else { "0" }),
        }
    }

    fn from_json(value: &Value, line: usize) -> Result<Case, CorpusError> {
        let schema = |field: &str, message: String| CorpusError::Schema {
            line,
            field: field.to_string(),
            message,
        };
        let obj = value
            .as_object()
            .ok_or_else(|| schema("<record>", "expected a JSON object".into()))?;
        for key in obj.keys() {
            if !FIELDS.contains(&key.as_str()) {
                return Err(schema(key, "unknown field".into()));
            }
        }
        let get = |field: &str| obj.get(field).unwrap_or(&Value::Null);
        let string = |field: &str| -> Result<String, CorpusError> {
            get(field)
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| schema(field, "expected a string".into()))
        };
        fn parse_enum<T: FromStr<Err = String>>(
            v: &Value,
            required: bool,
        ) -> Result<Option<T>, String> {
            match v {
                Value::Null if !required => Ok(None),
                Value::String(s) => s.parse().map(Some),
                _ => Err(if required {
                    "expected a string".into()
                } else {
                    "expected a string or null".into()
                }),
            }
        }
        let required = |field: &str| -> Result<&Value, CorpusError> {
            match obj.get(field) {
                Some(v) => Ok(v),
                None => Err(schema(field, "missing".into())),
            }
        };
        for field in FIELDS {
            required(field)?;
        }
        let id = string("id")?;
        if id.is_empty() {
            return Err(schema("id", "must not be empty".into()));
        }
        let text = string("text")?;
        let language = parse_enum::<Lang>(get("language"), true)
            .map_err(|m| schema("language", m))?
            .unwrap();
        let label = match get("label").as_u64() {
            Some(l @ (0 | 1)) => l as u8,
            _ => return Err(schema("label", format!("must be 0 or 1, got {}", get("label")))),
        };
        let year = match get("year") {
            Value::Null => None,
            v => match v.as_u64() {
                Some(y) if y <= u16::MAX as u64 => Some(y as u16),
                _ => return Err(schema("year", format!("expected an integer year, got {v}"))),
            },
        };
        let region = parse_enum::<Region>(get("region"), false).map_err(|m| schema("region", m))?;
        let legal_area =
            parse_enum::<LegalArea>(get("legal_area"), false).map_err(|m| schema("legal_area", m))?;
        let jurisdiction = parse_enum::<Jurisdiction>(get("jurisdiction"), true)
            .map_err(|m| schema("jurisdiction", m))?
            .unwrap();
        let provenance = parse_enum::<Provenance>(get("provenance"), true)
            .map_err(|m| schema("provenance", m))?
            .unwrap();
        let source_language = parse_enum::<Lang>(get("source_language"), true)
            .map_err(|m| schema("source_language", m))?
            .unwrap();
        let case = Case {
            id,
            text,
            language,
            label,
            year,
            region,
            legal_area,
            jurisdiction,
            provenance,
            source_language,
        };
        case.check().map_err(|(field, m)| schema(field, m))?;
        Ok(case)
    }
}

const FIELDS: [&str; 10] = [
    "id",
    "text",
    "language",
    "label",
    "year",
    "region",
    "legal_area",
    "jurisdiction",
    "provenance",
    "source_language",
];

/// An ordered collection of cases belonging to one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub cases: Vec<Case>,
}

impl Dataset {
    /// Builds a dataset, sorting cases by id.
    pub fn new(split: Split, mut cases: Vec<Case>) -> Self {
        cases.sort_by(|a, b| a.id.cmp(&b.id));
        Dataset { split, cases }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn label_counts(&self) -> [usize; 2] {
        let mut counts = [0usize; 2];
        for c in &self.cases {
            counts[c.label as usize] += 1;
        }
        counts
    }

    /// Concatenates datasets, re-sorting by id.
    pub fn concat(split: Split, parts: impl IntoIterator<Item = Dataset>) -> Dataset {
        let cases = parts.into_iter().flat_map(|d| d.cases).collect();
        Dataset::new(split, cases)
    }

    /// Parses line-delimited records. Blank lines are skipped.
    pub fn parse(split: Split, contents: &str) -> Result<Dataset, CorpusError> {
        let mut cases = Vec::new();
        let mut seen = HashSet::new();
        for (idx, raw) in contents.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(raw).map_err(|e| CorpusError::Schema {
                line,
                field: "<record>".into(),
                message: e.to_string(),
            })?;
            let case = Case::from_json(&value, line)?;
            if !seen.insert(case.id.clone()) {
                return Err(CorpusError::DuplicateId { line, id: case.id });
            }
            cases.push(case);
        }
        Ok(Dataset::new(split, cases))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for case in &self.cases {
            out.push_str(&serde_json::to_string(case).expect("case serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        let mut file = fs::File::create(&tmp).map_err(io)?;
        file.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }
}

/// Loads one split file. Cases come back sorted by id.
pub fn load_corpus(path: &Path, split: Split) -> Result<Dataset, CorpusError> {
    let contents = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let dataset = Dataset::parse(split, &contents)?;
    log::info!("loaded {} {} cases from {}", dataset.len(), split, path.display());
    Ok(dataset)
}

/// Selection of cases along the metadata dimensions. `None` means no
/// restriction on that dimension.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupFilter {
    pub languages: Option<BTreeSet<Lang>>,
    pub regions: Option<BTreeSet<Region>>,
    pub legal_areas: Option<BTreeSet<LegalArea>>,
    pub jurisdictions: Option<BTreeSet<Jurisdiction>>,
    pub provenances: Option<BTreeSet<Provenance>>,
    pub max_year: Option<u16>,
}

fn allows<T: Ord>(set: &Option<BTreeSet<T>>, value: Option<T>) -> bool {
    match (set, value) {
        (None, _) => true,
        (Some(s), Some(v)) => s.contains(&v),
        (Some(_), None) => false,
    }
}

impl GroupFilter {
    pub fn languages(langs: impl IntoIterator<Item = Lang>) -> Self {
        GroupFilter {
            languages: Some(langs.into_iter().collect()),
            ..Default::default()
        }
    }

    pub fn matches(&self, case: &Case) -> bool {
        allows(&self.languages, Some(case.language))
            && allows(&self.regions, case.region)
            && allows(&self.legal_areas, case.legal_area)
            && allows(&self.jurisdictions, Some(case.jurisdiction))
            && allows(&self.provenances, Some(case.provenance))
            && match self.max_year {
                None => true,
                Some(max) => case.year.is_some_and(|y| y <= max),
            }
    }
}

pub fn apply_filter(dataset: &Dataset, filter: &GroupFilter) -> Dataset {
    Dataset {
        split: dataset.split,
        cases: dataset
            .cases
            .iter()
            .filter(|c| filter.matches(c))
            .cloned()
            .collect(),
    }
}

/// Duplicates minority-class cases (drawn with replacement) until both
/// classes have equal counts. Originals keep their order; duplicates are
/// appended in draw order.
pub fn oversample(dataset: &Dataset, seed: u64) -> Result<Dataset, CorpusError> {
    let counts = dataset.label_counts();
    match counts {
        [0, 0] => return Err(CorpusError::EmptyOversample),
        [0, _] => return Err(CorpusError::SingleClass(1)),
        [_, 0] => return Err(CorpusError::SingleClass(0)),
        _ => {}
    }
    let minority = if counts[1] < counts[0] { 1u8 } else { 0u8 };
    let deficit = counts[1 - minority as usize] - counts[minority as usize];
    let pool: Vec<&Case> = dataset.cases.iter().filter(|c| c.label == minority).collect();
    let mut rng = stream_rng(seed, "oversample");
    let mut cases = dataset.cases.clone();
    cases.extend((0..deficit).map(|_| (*pool.choose(&mut rng).unwrap()).clone()));
    Ok(Dataset {
        split: dataset.split,
        cases,
    })
}

/// Normalized frequency vector of `dimension` in its fixed enum order.
pub fn distribution(dataset: &Dataset, dimension: Dimension) -> Result<Vec<f64>, CorpusError> {
    if dataset.is_empty() {
        return Err(CorpusError::EmptyDistribution);
    }
    let arity = dimension_arity(dimension);
    let mut counts = vec![0usize; arity];
    for case in &dataset.cases {
        let slot = match dimension {
            Dimension::Language => Some(case.language.index()),
            Dimension::Region => case.region.map(Region::index),
            Dimension::LegalArea => case.legal_area.map(LegalArea::index),
            Dimension::Label => Some(case.label as usize),
        };
        let slot = slot.ok_or_else(|| CorpusError::MissingDimension {
            id: case.id.clone(),
            dimension,
        })?;
        counts[slot] += 1;
    }
    let total = dataset.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

pub fn dimension_arity(dimension: Dimension) -> usize {
    match dimension {
        Dimension::Language => Lang::ALL.len(),
        Dimension::Region => Region::ALL.len(),
        Dimension::LegalArea => LegalArea::ALL.len(),
        Dimension::Label => 2,
    }
}

/// All three splits of a corpus root.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

pub fn load_splits(root: &Path) -> Result<CorpusSplits, CorpusError> {
    Ok(CorpusSplits {
        train: load_corpus(&root.join(Split::Train.file_name()), Split::Train)?,
        dev: load_corpus(&root.join(Split::Dev.file_name()), Split::Dev)?,
        test: load_corpus(&root.join(Split::Test.file_name()), Split::Test)?,
    })
}

/// Case counts per value of `dimension`.
pub fn counts_by(dataset: &Dataset, dimension: Dimension) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for case in &dataset.cases {
        if let Some(key) = case.dimension_key(dimension) {
            *out.entry(key).or_default() += 1;
        }
    }
    out
}
