//! Narrative corpora, reference labels, and evaluation/validation splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::seeded_rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no parseable records in corpus ({rejects} rejected lines)")]
    Empty { rejects: usize },
    #[error("narrative {0:?} has neither a CME nor an LE narrative")]
    EmptyNarrative(String),
    #[error("duplicate narrative id {0:?}")]
    DuplicateId(String),
    #[error("unknown narrative id {0:?}")]
    UnknownId(String),
    #[error("invalid variable {name:?}: {reason}")]
    InvalidVariable { name: String, reason: String },
    #[error("label {label:?} for {id:?} is not a response option of {variable}")]
    InvalidLabel { variable: String, id: String, label: String },
    #[error("insufficient class members: {}", format_deficits(.0))]
    InsufficientClass(Vec<ClassDeficit>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A class that could not supply the requested number of members.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassDeficit {
    pub class: String,
    pub available: usize,
    pub required: usize,
}

fn format_deficits(d: &[ClassDeficit]) -> String {
    d.iter()
        .map(|c| format!("class {} has {} < {}", c.class, c.available, c.required))
        .collect::<Vec<_>>()
        .join("; ")
}

/// One case record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Narrative {
    pub id: String,
    #[serde(default)]
    pub cme: String,
    #[serde(default)]
    pub le: String,
    /// Reference labels keyed by variable name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Narrative {
    pub fn new(id: impl Into<String>, cme: impl Into<String>, le: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            cme: cme.into(),
            le: le.into(),
            labels: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    /// The model input: both reports under section headers, empty sections omitted.
    pub fn concat(&self) -> Result<String, CorpusError> {
        concat_narrative(&self.id, &self.cme, &self.le)
    }
}

/// Joins the two narrative fields as `"CME Report: ..\n\nLE Report: .."`.
pub fn concat_narrative(id: &str, cme: &str, le: &str) -> Result<String, CorpusError> {
    let mut sections = Vec::with_capacity(2);
    if !cme.is_empty() {
        sections.push(format!("CME Report: {cme}"));
    }
    if !le.is_empty() {
        sections.push(format!("LE Report: {le}"));
    }
    if sections.is_empty() {
        return Err(CorpusError::EmptyNarrative(id.to_string()));
    }
    Ok(sections.join("\n\n"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Binary,
    Multiclass,
}

/// The variable being coded and its response options.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VariableKind,
    pub response_options: Vec<String>,
    /// One-line definition per response option, rendered into the options block.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub definitions: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_codebook_text: Option<String>,
}

impl Variable {
    pub fn binary(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Binary,
            response_options: vec!["0.0".into(), "1.0".into()],
            definitions: BTreeMap::new(),
            reference_codebook_text: None,
        }
    }

    pub fn multiclass(name: impl Into<String>, options: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Multiclass,
            response_options: options.iter().map(|s| s.to_string()).collect(),
            definitions: BTreeMap::new(),
            reference_codebook_text: None,
        }
    }

    /// The legal-interaction case-study variable with its three definitions.
    pub fn legal_interaction() -> Self {
        let mut v = Self::multiclass(
            "legal_interaction",
            &["no_interaction", "implicit_interaction", "explicit_interaction"],
        );
        v.definitions.insert(
            "no_interaction".into(),
            "It is not implied or explicitly stated that V had interactions with a lawyer.".into(),
        );
        v.definitions.insert(
            "implicit_interaction".into(),
            "V had an implicit interaction with a lawyer where it is implied that V had an interaction with a lawyer.".into(),
        );
        v.definitions.insert(
            "explicit_interaction".into(),
            "There are explicit mentions of V interacting with a lawyer or attorney.".into(),
        );
        v
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidVariable {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.name.trim().is_empty() {
            return Err(invalid("empty name"));
        }
        if self.response_options.len() < 2 {
            return Err(invalid("fewer than two response options"));
        }
        let distinct: BTreeSet<&String> = self.response_options.iter().collect();
        if distinct.len() != self.response_options.len() {
            return Err(invalid("duplicate response options"));
        }
        if self.kind == VariableKind::Binary && self.response_options.len() != 2 {
            return Err(invalid("binary variables have exactly two options"));
        }
        if let Some(extra) = self.definitions.keys().find(|k| !self.has_option(k)) {
            return Err(invalid(&format!("definition for unknown option {extra:?}")));
        }
        Ok(())
    }

    pub fn has_option(&self, label: &str) -> bool {
        self.response_options.iter().any(|o| o == label)
    }
}

/// Labels for one variable from one annotator (human or model).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub variable: String,
    pub annotator: String,
    pub labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<BTreeMap<String, String>>,
}

impl LabelSet {
    pub fn new(variable: impl Into<String>, annotator: impl Into<String>) -> Self {
        Self {
            variable: variable.into(),
            annotator: annotator.into(),
            ..Self::default()
        }
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn insert(&mut self, id: impl Into<String>, label: impl Into<String>) {
        self.labels.insert(id.into(), label.into());
    }

    pub fn validate(&self, variable: &Variable) -> Result<(), CorpusError> {
        for (id, label) in &self.labels {
            if !variable.has_option(label) {
                return Err(CorpusError::InvalidLabel {
                    variable: variable.name.clone(),
                    id: id.clone(),
                    label: label.clone(),
                });
            }
        }
        Ok(())
    }

    /// Ids grouped by label, each group sorted by id.
    pub fn by_class(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (id, label) in &self.labels {
            out.entry(label.clone()).or_default().push(id.clone());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    Full,
    BalancedEval,
    RandomEval,
    Validation,
    Guide,
    Upsampled,
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("role serializes");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub seed: u64,
    pub ids: Vec<String>,
}

impl DatasetSplit {
    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|i| i == id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A line that failed to ingest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Reject {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

/// An immutable collection of narratives indexed by id.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    narratives: Vec<Narrative>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and empty narratives.
    pub fn from_narratives(narratives: Vec<Narrative>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for n in narratives {
            if n.id.is_empty() {
                return Err(CorpusError::UnknownId(String::new()));
            }
            if n.cme.is_empty() && n.le.is_empty() {
                return Err(CorpusError::EmptyNarrative(n.id));
            }
            if corpus.index.contains_key(&n.id) {
                return Err(CorpusError::DuplicateId(n.id));
            }
            corpus.index.insert(n.id.clone(), corpus.narratives.len());
            corpus.narratives.push(n);
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.narratives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.narratives.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Narrative> {
        self.index.get(id).map(|&i| &self.narratives[i])
    }

    pub fn require(&self, id: &str) -> Result<&Narrative, CorpusError> {
        self.get(id).ok_or_else(|| CorpusError::UnknownId(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Narrative> {
        self.narratives.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.narratives.iter().map(|n| n.id.clone()).collect()
    }

    pub fn text(&self, id: &str) -> Result<String, CorpusError> {
        self.require(id)?.concat()
    }

    /// Reference labels for `variable` carried on the records.
    pub fn label_set(&self, variable: &str, annotator: &str) -> LabelSet {
        let mut set = LabelSet::new(variable, annotator);
        for n in &self.narratives {
            if let Some(label) = n.labels.get(variable) {
                set.insert(n.id.clone(), label.clone());
            }
        }
        set
    }

    /// Serializes to the line-delimited record format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for n in &self.narratives {
            out.push_str(&serde_json::to_string(n).expect("narrative serializes"));
            out.push('\n');
        }
        out
    }

    /// Full split over every id in corpus order.
    pub fn full_split(&self) -> DatasetSplit {
        DatasetSplit {
            role: SplitRole::Full,
            seed: 0,
            ids: self.ids(),
        }
    }
}

/// Result of [`ingest_corpus`]: the accepted records plus per-line rejects.
#[derive(Debug)]
pub struct Ingested {
    pub corpus: Corpus,
    pub rejects: Vec<Reject>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<serde_json::Value>,
    #[serde(default)]
    cme: Option<String>,
    #[serde(default)]
    le: Option<String>,
    #[serde(default)]
    labels: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

fn value_to_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Number(n) => {
            // binary labels arrive as numbers from some exporters; keep the "1.0" spelling
            match n.as_f64() {
                Some(f) if f.fract() == 0.0 && n.is_f64() => format!("{f:.1}"),
                Some(f) if n.is_i64() || n.is_u64() => format!("{f:.1}"),
                _ => n.to_string(),
            }
        }
        other => other.to_string(),
    }
}

/// Reads line-delimited corpus records, collecting per-line rejects.
pub fn ingest_corpus<R: BufRead>(reader: R) -> Result<Ingested, CorpusError> {
    let mut narratives = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut rejects = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut reject = |reason: String| rejects.push(Reject { line: line_no, reason });
        let raw: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                reject(format!("malformed record: {e}"));
                continue;
            }
        };
        let id = match raw.id.as_ref().map(value_to_string) {
            Some(id) if !id.trim().is_empty() => id,
            _ => {
                reject("missing id".into());
                continue;
            }
        };
        let cme = raw.cme.unwrap_or_default();
        let le = raw.le.unwrap_or_default();
        if cme.is_empty() && le.is_empty() {
            reject(format!("record {id:?} has empty cme and le"));
            continue;
        }
        if let Some(first) = seen.get(&id) {
            reject(format!("duplicate id {id:?} (first seen on line {first})"));
            continue;
        }
        seen.insert(id.clone(), line_no);
        narratives.push(Narrative {
            id,
            cme,
            le,
            labels: raw.labels.iter().map(|(k, v)| (k.clone(), value_to_string(v))).collect(),
            meta: raw.meta.iter().map(|(k, v)| (k.clone(), value_to_string(v))).collect(),
        });
    }
    if narratives.is_empty() {
        return Err(CorpusError::Empty {
            rejects: rejects.len(),
        });
    }
    let corpus = Corpus::from_narratives(narratives)?;
    Ok(Ingested { corpus, rejects })
}

/// Samples exactly `per_class` ids from every class present in `labels`.
///
/// Only ids present in `corpus` are eligible. Output order is a seeded
/// shuffle of the combined sample.
pub fn build_balanced_split(
    corpus: &Corpus,
    labels: &LabelSet,
    per_class: usize,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    let mut groups = labels.by_class();
    for ids in groups.values_mut() {
        ids.retain(|id| corpus.contains(id));
    }
    let deficits: Vec<ClassDeficit> = groups
        .iter()
        .filter(|(_, ids)| ids.len() < per_class)
        .map(|(class, ids)| ClassDeficit {
            class: class.clone(),
            available: ids.len(),
            required: per_class,
        })
        .collect();
    if !deficits.is_empty() {
        return Err(CorpusError::InsufficientClass(deficits));
    }
    let mut rng = seeded_rng(seed, 0x_ba1a);
    let mut out = Vec::with_capacity(per_class * groups.len());
    for ids in groups.values_mut() {
        ids.shuffle(&mut rng);
        out.extend(ids.iter().take(per_class).cloned());
    }
    out.shuffle(&mut rng);
    Ok(DatasetSplit {
        role: SplitRole::BalancedEval,
        seed,
        ids: out,
    })
}

/// Uniform sample of `size` ids, for the skewed real-world evaluation setting.
pub fn build_random_split(corpus: &Corpus, size: usize, seed: u64) -> DatasetSplit {
    let mut ids = corpus.ids();
    ids.sort();
    let mut rng = seeded_rng(seed, 0x_0a4d);
    ids.shuffle(&mut rng);
    ids.truncate(size);
    DatasetSplit {
        role: SplitRole::RandomEval,
        seed,
        ids,
    }
}

/// Takes exactly `per_class` ids per class: a seeded shuffle picks the
/// members, which are then listed by class and ascending id.
pub fn build_validation_split(
    labels: &LabelSet,
    classes: &[String],
    per_class: usize,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    let groups = labels.by_class();
    let deficits: Vec<ClassDeficit> = classes
        .iter()
        .filter_map(|class| {
            let available = groups.get(class).map_or(0, Vec::len);
            (available < per_class).then(|| ClassDeficit {
                class: class.clone(),
                available,
                required: per_class,
            })
        })
        .collect();
    if !deficits.is_empty() {
        return Err(CorpusError::InsufficientClass(deficits));
    }
    let mut rng = seeded_rng(seed, 0x_0a1d);
    let mut out = Vec::with_capacity(per_class * classes.len());
    for class in classes {
        let mut ids = groups.get(class).cloned().unwrap_or_default();
        ids.shuffle(&mut rng);
        ids.truncate(per_class);
        ids.sort();
        out.extend(ids);
    }
    Ok(DatasetSplit {
        role: SplitRole::Validation,
        seed,
        ids: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(s: &[&str]) -> std::io::Cursor<String> {
        std::io::Cursor::new(s.join("\n"))
    }

    #[test]
    fn ingest_three_valid_lines() {
        let got = ingest_corpus(lines(&[
            r#"{"id":"a","cme":"x","le":"y"}"#,
            r#"{"id":"b","cme":"x"}"#,
            r#"{"id":"c","le":"y","labels":{"V":"1.0"},"meta":{"year":"2019"}}"#,
        ]))
        .unwrap();
        assert_eq!(got.corpus.len(), 3);
        assert!(got.rejects.is_empty());
        assert_eq!(got.corpus.get("c").unwrap().labels["V"], "1.0");
    }

    #[test]
    fn ingest_reports_missing_id_line() {
        let got = ingest_corpus(lines(&[
            r#"{"id":"a","cme":"x"}"#,
            r#"{"cme":"no id"}"#,
            r#"{"id":"c","cme":"x"}"#,
        ]))
        .unwrap();
        assert_eq!(got.corpus.len(), 2);
        assert_eq!(got.rejects.len(), 1);
        assert_eq!(got.rejects[0].line, 2);
    }

    #[test]
    fn ingest_rejects_duplicate_ids() {
        let got = ingest_corpus(lines(&[r#"{"id":"n1","cme":"x"}"#, r#"{"id":"n1","cme":"y"}"#])).unwrap();
        assert_eq!(got.corpus.len(), 1);
        assert!(got.rejects[0].reason.contains("duplicate"));
    }

    #[test]
    fn ingest_without_parseable_lines_is_fatal() {
        let err = ingest_corpus(lines(&["not json", "{}"])).unwrap_err();
        assert!(matches!(err, CorpusError::Empty { rejects: 2 }));
    }

    #[test]
    fn numeric_labels_keep_float_spelling() {
        let got = ingest_corpus(lines(&[r#"{"id":"a","cme":"x","labels":{"V":1}}"#])).unwrap();
        assert_eq!(got.corpus.get("a").unwrap().labels["V"], "1.0");
    }

    #[test]
    fn concat_formats() {
        assert_eq!(concat_narrative("x", "A.", "B.").unwrap(), "CME Report: A.\n\nLE Report: B.");
        assert_eq!(concat_narrative("x", "A.", "").unwrap(), "CME Report: A.");
        assert_eq!(concat_narrative("x", "", "B.").unwrap(), "LE Report: B.");
        assert!(concat_narrative("x", "", "").is_err());
    }

    fn labelled(pairs: &[(&str, &str)]) -> (Corpus, LabelSet) {
        let narratives = pairs.iter().map(|(id, _)| Narrative::new(*id, "t", "")).collect();
        let mut set = LabelSet::new("V", "ref");
        for (id, l) in pairs {
            set.insert(*id, *l);
        }
        (Corpus::from_narratives(narratives).unwrap(), set)
    }

    #[test]
    fn balanced_split_exhaustive_case() {
        let (c, l) = labelled(&[("a", "1.0"), ("b", "0.0")]);
        let s = build_balanced_split(&c, &l, 1, 3).unwrap();
        let mut ids = s.ids.clone();
        ids.sort();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(s, build_balanced_split(&c, &l, 1, 3).unwrap());
    }

    #[test]
    fn balanced_split_names_deficient_class() {
        let mut pairs = vec![];
        let names: Vec<String> = (0..7).map(|i| format!("n{i}")).collect();
        for (i, n) in names.iter().enumerate() {
            pairs.push((n.as_str(), if i < 5 { "a" } else { "b" }));
        }
        let (c, l) = labelled(&pairs);
        let err = build_balanced_split(&c, &l, 3, 0).unwrap_err();
        assert_eq!(err.to_string(), "insufficient class members: class b has 2 < 3");
    }

    #[test]
    fn balanced_split_of_250_per_class() {
        let names: Vec<String> = (0..1200).map(|i| format!("n{i:04}")).collect();
        let pairs: Vec<(&str, &str)> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), if i % 3 == 0 { "1.0" } else { "0.0" })).collect();
        let (c, l) = labelled(&pairs);
        let s = build_balanced_split(&c, &l, 250, 11).unwrap();
        assert_eq!(s.len(), 500);
        let ones = s.ids.iter().filter(|id| l.get(id) == Some("1.0")).count();
        assert_eq!(ones, 250);
    }

    #[test]
    fn validation_split_exact_j() {
        let names: Vec<String> = (0..90).map(|i| format!("n{i:02}")).collect();
        let classes = ["x", "y", "z"];
        let pairs: Vec<(&str, &str)> = names.iter().enumerate().map(|(i, n)| (n.as_str(), classes[i % 3])).collect();
        let (_, l) = labelled(&pairs);
        let cls: Vec<String> = classes.iter().map(|s| s.to_string()).collect();
        let s = build_validation_split(&l, &cls, 20, 5).unwrap();
        assert_eq!(s.len(), 60);
        assert_eq!(s.role, SplitRole::Validation);
        for c in classes {
            assert_eq!(s.ids.iter().filter(|id| l.get(id) == Some(c)).count(), 20);
        }
    }

    #[test]
    fn validation_split_lists_deficits() {
        let (_, l) = labelled(&[("a", "x"), ("b", "y"), ("c", "x")]);
        let cls = vec!["x".to_string(), "y".to_string()];
        assert_eq!(build_validation_split(&l, &cls, 1, 0).unwrap().len(), 2);
        let err = build_validation_split(&l, &cls, 2, 0).unwrap_err();
        match err {
            CorpusError::InsufficientClass(d) => {
                assert_eq!(d, vec![ClassDeficit { class: "y".into(), available: 1, required: 2 }]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_serializes_with_role_seed_ids() {
        let s = DatasetSplit { role: SplitRole::Validation, seed: 7, ids: vec!["a".into()] };
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"{"role":"validation","seed":7,"ids":["a"]}"#);
    }

    proptest! {
        #[test]
        fn concat_is_injective(a in "[a-zA-Z .\n:]{0,12}", b in "[a-zA-Z .\n:]{0,12}",
                               c in "[a-zA-Z .\n:]{0,12}", d in "[a-zA-Z .\n:]{0,12}") {
            let x = concat_narrative("x", &a, &b);
            let y = concat_narrative("y", &c, &d);
            if let (Ok(x), Ok(y)) = (x, y) {
                if (a.as_str(), b.as_str()) != (c.as_str(), d.as_str()) {
                    prop_assert_ne!(x, y);
                }
            }
        }

        #[test]
        fn balanced_split_is_reproducible_and_uniform(seed in 0u64..1000, per in 1usize..6) {
            let names: Vec<String> = (0..40).map(|i| format!("n{i:02}")).collect();
            let pairs: Vec<(&str, &str)> = names.iter().enumerate()
                .map(|(i, n)| (n.as_str(), ["a", "b", "c"][i % 3])).collect();
            let (c, l) = labelled(&pairs);
            let s1 = build_balanced_split(&c, &l, per, seed).unwrap();
            let s2 = build_balanced_split(&c, &l, per, seed).unwrap();
            prop_assert_eq!(&s1, &s2);
            for class in ["a", "b", "c"] {
                prop_assert_eq!(s1.ids.iter().filter(|id| l.get(id) == Some(class)).count(), per);
            }
            let distinct: BTreeSet<_> = s1.ids.iter().collect();
            prop_assert_eq!(distinct.len(), s1.ids.len());
        }
    }
}
