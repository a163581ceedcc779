//! Evaluation data model, line-delimited JSON loading, and dataset statistics.
//!
//! A dataset lives in three sibling files:
//!
//! * `<stem>.jsonl`: one evaluation item per line,
//! * `<stem>.qa.jsonl`: the knowledge-QA curation file,
//! * `<stem>.meta.json`: optional free-form metadata.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::prompt::PromptSetting;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: field `{field}`: {message}")]
    InvalidField {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("{path}:{line}: duplicate {kind} id \"{id}\"")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        id: String,
    },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checklist {
    pub id: String,
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConclusion {
    pub text: String,
    /// Marks answer-strategy guidance rather than a domain fact.
    #[serde(default)]
    pub is_guidance: bool,
}

/// A passage from the training corpus. When a section title is present,
/// `text` already starts with `title + "\n"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleFact {
    pub text: String,
    pub section_title: Option<String>,
    pub mandatory: bool,
}

impl OracleFact {
    pub fn new(body: impl Into<String>, section_title: Option<String>, mandatory: bool) -> Self {
        let body = body.into();
        let text = match &section_title {
            Some(title) => format!("{title}\n{body}"),
            None => body,
        };
        Self { text, section_title, mandatory }
    }

    /// The passage without its section title.
    pub fn body(&self) -> &str {
        match &self.section_title {
            Some(title) => self
                .text
                .strip_prefix(title.as_str())
                .and_then(|rest| rest.strip_prefix('\n'))
                .unwrap_or(&self.text),
            None => &self.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub id: String,
    pub question: String,
    pub checklists: Vec<Checklist>,
    pub oracle_conclusions: Vec<OracleConclusion>,
    pub oracle_facts: Vec<OracleFact>,
}

impl EvalItem {
    /// Stable identifier of the fact at `index` (0-based), e.g. `q1/fact-1`.
    pub fn fact_id(&self, index: usize) -> String {
        fact_id(&self.id, index)
    }

    pub fn condition_count(&self) -> usize {
        self.checklists.iter().map(|c| c.conditions.len()).sum()
    }
}

pub fn fact_id(item_id: &str, index: usize) -> String {
    format!("{item_id}/fact-{}", index + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurationStatus {
    Pending,
    Approved,
    Edited,
    Deleted,
}

impl CurationStatus {
    /// Approved and edited entries count toward accuracy without extra flags.
    pub fn is_curated(self) -> bool {
        matches!(self, CurationStatus::Approved | CurationStatus::Edited)
    }
}

impl fmt::Display for CurationStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CurationStatus::Pending => "pending",
            CurationStatus::Approved => "approved",
            CurationStatus::Edited => "edited",
            CurationStatus::Deleted => "deleted",
        };
        f.write_str(s)
    }
}

/// Closed-book question answered by a single noun phrase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeQA {
    pub id: String,
    pub source_fact_id: String,
    pub question: String,
    pub answer: String,
    pub curation_status: CurationStatus,
    /// Synthesis output kept for inspection when parsing failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<EvalItem>,
    pub knowledge_qas: Vec<KnowledgeQA>,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    pub fn item(&self, id: &str) -> Option<&EvalItem> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Every fact with its stable id, in item order.
    pub fn facts(&self) -> impl Iterator<Item = (String, &OracleFact)> {
        self.items
            .iter()
            .flat_map(|item| item.oracle_facts.iter().enumerate().map(move |(i, f)| (item.fact_id(i), f)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_items: usize,
    pub avg_checklists_per_item: f64,
    pub avg_conditions_per_checklist: f64,
    pub avg_facts_per_item: f64,
    pub mandatory_fact_ratio: f64,
    pub n_knowledge_qas: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "items:                        {}", self.n_items)?;
        writeln!(f, "checklists per item:          {:.2}", self.avg_checklists_per_item)?;
        writeln!(f, "conditions per checklist:     {:.2}", self.avg_conditions_per_checklist)?;
        writeln!(f, "oracle facts per item:        {:.2}", self.avg_facts_per_item)?;
        writeln!(f, "mandatory fact ratio:         {:.2}", self.mandatory_fact_ratio)?;
        write!(f, "knowledge QAs:                {}", self.n_knowledge_qas)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Averages are pooled: conditions per checklist is total conditions over
/// total checklists.
pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let n_items = ds.items.len();
    let checklists: usize = ds.items.iter().map(|i| i.checklists.len()).sum();
    let conditions: usize = ds.items.iter().map(EvalItem::condition_count).sum();
    let facts: usize = ds.items.iter().map(|i| i.oracle_facts.len()).sum();
    let mandatory = ds
        .items
        .iter()
        .flat_map(|i| &i.oracle_facts)
        .filter(|f| f.mandatory)
        .count();
    DatasetStats {
        n_items,
        avg_checklists_per_item: ratio(checklists, n_items),
        avg_conditions_per_checklist: ratio(conditions, checklists),
        avg_facts_per_item: ratio(facts, n_items),
        mandatory_fact_ratio: ratio(mandatory, facts),
        n_knowledge_qas: ds.knowledge_qas.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationResult {
    pub valid: bool,
    pub reasons: Vec<String>,
}

/// Checks that the oracle material a setting injects is present.
pub fn validate_for_setting(item: &EvalItem, setting: PromptSetting) -> ValidationResult {
    let mut reasons = Vec::new();
    match setting {
        PromptSetting::NoOracle => {}
        PromptSetting::OracleElicitation => {
            if item.oracle_facts.is_empty() {
                reasons.push("no oracle facts".to_string());
            }
        }
        PromptSetting::OracleReasoning => {
            if item.oracle_conclusions.is_empty() {
                reasons.push("no oracle conclusions".to_string());
            }
        }
    }
    if item.checklists.is_empty() {
        reasons.push("no checklists".to_string());
    }
    ValidationResult { valid: reasons.is_empty(), reasons }
}

// On-disk records. Kept separate from the domain types so load errors can
// name the offending field and so section titles round-trip.

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    id: String,
    question: String,
    checklists: Vec<Checklist>,
    #[serde(default)]
    oracle_conclusions: Vec<OracleConclusion>,
    #[serde(default)]
    oracle_facts: Vec<FactRecord>,
}

#[derive(Serialize, Deserialize)]
struct FactRecord {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    section_title: Option<String>,
    #[serde(default)]
    mandatory: bool,
}

impl From<&EvalItem> for ItemRecord {
    fn from(item: &EvalItem) -> Self {
        ItemRecord {
            id: item.id.clone(),
            question: item.question.clone(),
            checklists: item.checklists.clone(),
            oracle_conclusions: item.oracle_conclusions.clone(),
            oracle_facts: item
                .oracle_facts
                .iter()
                .map(|f| FactRecord {
                    text: f.body().to_string(),
                    section_title: f.section_title.clone(),
                    mandatory: f.mandatory,
                })
                .collect(),
        }
    }
}

fn non_empty(field: String, value: &str) -> Result<(), (String, String)> {
    if value.trim().is_empty() {
        Err((field, "must not be empty".into()))
    } else {
        Ok(())
    }
}

impl ItemRecord {
    fn into_item(self) -> Result<EvalItem, (String, String)> {
        non_empty("id".into(), &self.id)?;
        non_empty("question".into(), &self.question)?;
        if self.checklists.is_empty() {
            return Err(("checklists".into(), "at least one checklist is required".into()));
        }
        let mut checklist_ids = HashSet::new();
        for (ci, checklist) in self.checklists.iter().enumerate() {
            non_empty(format!("checklists[{ci}].id"), &checklist.id)?;
            if !checklist_ids.insert(checklist.id.as_str()) {
                return Err((format!("checklists[{ci}].id"), format!("duplicate checklist id \"{}\"", checklist.id)));
            }
            if checklist.conditions.is_empty() {
                return Err((format!("checklists[{ci}].conditions"), "at least one condition is required".into()));
            }
            let mut condition_ids = HashSet::new();
            for (ki, cond) in checklist.conditions.iter().enumerate() {
                non_empty(format!("checklists[{ci}].conditions[{ki}].id"), &cond.id)?;
                non_empty(format!("checklists[{ci}].conditions[{ki}].text"), &cond.text)?;
                if !condition_ids.insert(cond.id.as_str()) {
                    return Err((
                        format!("checklists[{ci}].conditions[{ki}].id"),
                        format!("duplicate condition id \"{}\"", cond.id),
                    ));
                }
            }
        }
        for (i, c) in self.oracle_conclusions.iter().enumerate() {
            non_empty(format!("oracle_conclusions[{i}].text"), &c.text)?;
        }
        for (i, f) in self.oracle_facts.iter().enumerate() {
            non_empty(format!("oracle_facts[{i}].text"), &f.text)?;
        }
        Ok(EvalItem {
            id: self.id,
            question: self.question,
            checklists: self.checklists,
            oracle_conclusions: self.oracle_conclusions,
            oracle_facts: self
                .oracle_facts
                .into_iter()
                .map(|f| OracleFact::new(f.text, f.section_title, f.mandatory))
                .collect(),
        })
    }
}

/// `<dir>/<stem>.qa.jsonl` next to a dataset file.
pub fn qa_path_for(dataset_path: &Path) -> PathBuf {
    sibling(dataset_path, "qa.jsonl")
}

/// `<dir>/<stem>.meta.json` next to a dataset file.
pub fn meta_path_for(dataset_path: &Path) -> PathBuf {
    sibling(dataset_path, "meta.json")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

/// Loads the items file plus its QA and metadata siblings when present.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (line, text) in read_lines(path)? {
        let record: ItemRecord = serde_json::from_str(&text).map_err(|e| DataError::Malformed {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let item = record.into_item().map_err(|(field, message)| DataError::InvalidField {
            path: path.to_path_buf(),
            line,
            field,
            message,
        })?;
        if !seen.insert(item.id.clone()) {
            return Err(DataError::DuplicateId { path: path.to_path_buf(), line, kind: "item", id: item.id });
        }
        items.push(item);
    }
    if items.is_empty() {
        tracing::warn!(path = %path.display(), "dataset contains no items");
    }

    let qa_path = qa_path_for(path);
    let knowledge_qas = if qa_path.exists() { load_knowledge_qas(&qa_path)? } else { Vec::new() };

    let meta_path = meta_path_for(path);
    let metadata = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| DataError::io(&meta_path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Malformed {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?
    } else {
        BTreeMap::new()
    };

    Ok(Dataset { items, knowledge_qas, metadata })
}

pub fn load_knowledge_qas(path: &Path) -> Result<Vec<KnowledgeQA>, DataError> {
    let mut qas = Vec::new();
    let mut seen = HashSet::new();
    for (line, text) in read_lines(path)? {
        let qa: KnowledgeQA = serde_json::from_str(&text).map_err(|e| DataError::Malformed {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let invalid = |field: &str, message: &str| DataError::InvalidField {
            path: path.to_path_buf(),
            line,
            field: field.to_string(),
            message: message.to_string(),
        };
        if qa.id.trim().is_empty() {
            return Err(invalid("id", "must not be empty"));
        }
        if qa.answer.trim().is_empty() && qa.curation_status != CurationStatus::Deleted {
            return Err(invalid("answer", "must not be empty unless the QA is deleted"));
        }
        if !seen.insert(qa.id.clone()) {
            return Err(DataError::DuplicateId { path: path.to_path_buf(), line, kind: "knowledge QA", id: qa.id });
        }
        qas.push(qa);
    }
    Ok(qas)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<(), DataError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r).expect("records serialize"));
        out.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

pub fn save_knowledge_qas(path: &Path, qas: &[KnowledgeQA]) -> Result<(), DataError> {
    write_jsonl(path, qas)
}

/// Writes the items file and the QA curation file; metadata only when non-empty.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    write_jsonl(path, ds.items.iter().map(ItemRecord::from))?;
    save_knowledge_qas(&qa_path_for(path), &ds.knowledge_qas)?;
    if !ds.metadata.is_empty() {
        let meta_path = meta_path_for(path);
        let text = serde_json::to_string_pretty(&ds.metadata).expect("metadata serializes");
        fs::write(&meta_path, text + "\n").map_err(|e| DataError::io(&meta_path, e))?;
    }
    Ok(())
}

/// Digest of the evaluation items in their on-disk form.
pub fn dataset_digest(ds: &Dataset) -> String {
    let mut bytes = Vec::new();
    for item in &ds.items {
        bytes.extend(serde_json::to_vec(&ItemRecord::from(item)).expect("records serialize"));
        bytes.push(b'\n');
    }
    sha256_hex(&bytes)
}

pub fn knowledge_qa_digest(qas: &[KnowledgeQA]) -> String {
    let mut bytes = Vec::new();
    for qa in qas {
        bytes.extend(serde_json::to_vec(qa).expect("records serialize"));
        bytes.push(b'\n');
    }
    sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    const MINIMAL: &str = r#"{"id":"q1","question":"How?","checklists":[{"id":"A","conditions":[{"id":"c1","text":"mentions X"},{"id":"c2","text":"mentions Y"}]}]}"#;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn item(id: &str) -> EvalItem {
        EvalItem {
            id: id.into(),
            question: "q?".into(),
            checklists: vec![Checklist {
                id: "A".into(),
                conditions: vec![Condition { id: "c1".into(), text: "t".into() }],
            }],
            oracle_conclusions: vec![],
            oracle_facts: vec![],
        }
    }

    #[test]
    fn loads_minimal_item() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "d.jsonl", &format!("{MINIMAL}\n"));
        let ds = load_dataset(&path).unwrap();
        assert_eq!(dataset_stats(&ds).n_items, 1);
        assert_eq!(ds.items[0].checklists[0].conditions.len(), 2);
    }

    #[test]
    fn rejects_duplicate_item_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "d.jsonl", &format!("{MINIMAL}\n{MINIMAL}\n"));
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(&err, DataError::DuplicateId { id, line: 2, .. } if id == "q1"));
        assert!(err.to_string().contains("\"q1\""));
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "d.jsonl", "");
        let ds = load_dataset(&path).unwrap();
        assert!(ds.items.is_empty());
    }

    #[test]
    fn missing_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "d.jsonl", &format!("{MINIMAL}\n{{\"id\":\"q2\",\"checklists\":[]}}\n"));
        let err = load_dataset(&path).unwrap_err();
        match err {
            DataError::Malformed { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("question"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let bad = r#"{"id":"q1","question":"How?","checklists":[{"id":"A","conditions":[{"id":"c1","text":""}]}]}"#;
        let path = write(dir.path(), "d.jsonl", bad);
        match load_dataset(&path).unwrap_err() {
            DataError::InvalidField { line, field, .. } => {
                assert_eq!(line, 1);
                assert_eq!(field, "checklists[0].conditions[0].text");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_condition_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = r#"{"id":"q1","question":"How?","checklists":[{"id":"A","conditions":[{"id":"c1","text":"a"},{"id":"c1","text":"b"}]}]}"#;
        let path = write(dir.path(), "d.jsonl", bad);
        assert!(matches!(load_dataset(&path).unwrap_err(), DataError::InvalidField { .. }));
    }

    #[test]
    fn section_title_prepended_once() {
        let dir = tempfile::tempdir().unwrap();
        let rec = r#"{"id":"q1","question":"How?","checklists":[{"id":"A","conditions":[{"id":"c1","text":"a"}]}],"oracle_facts":[{"text":"Body text.","section_title":"ajsreport","mandatory":true}]}"#;
        let path = write(dir.path(), "d.jsonl", rec);
        let ds = load_dataset(&path).unwrap();
        let fact = &ds.items[0].oracle_facts[0];
        assert_eq!(fact.text, "ajsreport\nBody text.");
        assert_eq!(fact.body(), "Body text.");

        // Saving and reloading must not prepend the title a second time.
        save_dataset(&ds, &path).unwrap();
        let again = load_dataset(&path).unwrap();
        assert_eq!(again.items[0].oracle_facts[0].text, "ajsreport\nBody text.");
    }

    #[test]
    fn stats_examples() {
        let mut ds = Dataset::default();
        for i in 0..10 {
            let mut it = item(&format!("q{i}"));
            if i < 8 {
                it.checklists.push(Checklist { id: "B".into(), conditions: it.checklists[0].conditions.clone() });
            }
            let n_facts = if i < 6 { 5 } else { 4 };
            it.oracle_facts = (0..n_facts).map(|k| OracleFact::new(format!("f{k}"), None, false)).collect();
            ds.items.push(it);
        }
        let s = dataset_stats(&ds);
        assert_eq!(s.avg_checklists_per_item, 1.8);
        assert_eq!(s.avg_facts_per_item, 4.6);
        assert_eq!(s.mandatory_fact_ratio, 0.0);

        let empty = dataset_stats(&Dataset { items: vec![item("x")], ..Default::default() });
        assert_eq!(empty.mandatory_fact_ratio, 0.0);
        assert_eq!(empty.avg_facts_per_item, 0.0);
    }

    #[test]
    fn validation_per_setting() {
        let mut it = item("q");
        let r = validate_for_setting(&it, PromptSetting::OracleReasoning);
        assert!(!r.valid);
        assert_eq!(r.reasons, vec!["no oracle conclusions".to_string()]);
        assert!(validate_for_setting(&it, PromptSetting::NoOracle).valid);
        it.oracle_facts = (0..3).map(|k| OracleFact::new(format!("f{k}"), None, true)).collect();
        assert!(validate_for_setting(&it, PromptSetting::OracleElicitation).valid);
    }

    #[test]
    fn knowledge_qa_ids_unique() {
        let dir = tempfile::tempdir().unwrap();
        let qa = r#"{"id":"k1","source_fact_id":"q1/fact-1","question":"Q?","answer":"A","curation_status":"approved"}"#;
        let path = write(dir.path(), "d.qa.jsonl", &format!("{qa}\n{qa}\n"));
        assert!(matches!(load_knowledge_qas(&path).unwrap_err(), DataError::DuplicateId { .. }));
    }

    #[test]
    fn deleted_qa_may_lack_answer() {
        let dir = tempfile::tempdir().unwrap();
        let ok = r#"{"id":"k1","source_fact_id":"f","question":"","answer":"","curation_status":"deleted","raw_output":"junk"}"#;
        let bad = r#"{"id":"k2","source_fact_id":"f","question":"Q","answer":"","curation_status":"pending"}"#;
        let p1 = write(dir.path(), "a.qa.jsonl", ok);
        assert_eq!(load_knowledge_qas(&p1).unwrap()[0].raw_output.as_deref(), Some("junk"));
        let p2 = write(dir.path(), "b.qa.jsonl", bad);
        assert!(load_knowledge_qas(&p2).is_err());
    }
}
