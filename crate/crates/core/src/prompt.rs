//! Deterministic construction of every prompt the harness sends.
//!
//! Templates are plain UTF-8 text with `{name}` placeholders. Substitution is
//! a single pass over the parsed template, so values containing placeholder
//! syntax are inserted verbatim.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{validate_for_setting, Condition, EvalItem, OracleFact};
use crate::digest::sha256_hex;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("item {item} is not valid for {setting}: {}", reasons.join(", "))]
    InvalidForSetting {
        item: String,
        setting: PromptSetting,
        reasons: Vec<String>,
    },
    #[error("template `{name}`: {message}")]
    Template { name: String, message: String },
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("no templates for language tag \"{0}\"")]
    UnknownLanguage(String),
}

/// Which oracle material is injected into the answer prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSetting {
    NoOracle,
    OracleElicitation,
    OracleReasoning,
}

impl PromptSetting {
    pub const ALL: [PromptSetting; 3] = [
        PromptSetting::NoOracle,
        PromptSetting::OracleElicitation,
        PromptSetting::OracleReasoning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptSetting::NoOracle => "no-oracle",
            PromptSetting::OracleElicitation => "oracle-elicitation",
            PromptSetting::OracleReasoning => "oracle-reasoning",
        }
    }
}

impl fmt::Display for PromptSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptSetting::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown setting \"{s}\" (expected no-oracle, oracle-elicitation or oracle-reasoning)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

/// A parsed template whose placeholders are known up front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    source: String,
    segments: Vec<Segment>,
}

impl Template {
    /// Parses `source`, requiring each of `placeholders` exactly once and no others.
    pub fn parse(name: &str, source: &str, placeholders: &[&str]) -> Result<Self, PromptError> {
        let err = |message: String| PromptError::Template { name: name.to_string(), message };
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut rest = source;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            let slot = after
                .find('}')
                .map(|close| &after[..close])
                .filter(|s| !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_'));
            match slot {
                Some(slot) => {
                    literal.push_str(&rest[..open]);
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Slot(slot.to_string()));
                    rest = &after[slot.len() + 1..];
                }
                None => {
                    literal.push_str(&rest[..=open]);
                    rest = after;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }

        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for seg in &segments {
            if let Segment::Slot(s) = seg {
                *counts.entry(s.as_str()).or_default() += 1;
            }
        }
        for (slot, n) in &counts {
            if !placeholders.contains(slot) {
                return Err(err(format!("unexpected placeholder {{{slot}}}")));
            }
            if *n != 1 {
                return Err(err(format!("placeholder {{{slot}}} appears {n} times, expected once")));
            }
        }
        for p in placeholders {
            if !counts.contains_key(p) {
                return Err(err(format!("missing placeholder {{{p}}}")));
            }
        }
        Ok(Self { name: name.to_string(), source: source.to_string(), segments })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Single-pass substitution. Every placeholder must have a value.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.source.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(slot) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| k == slot)
                        .map(|(_, v)| *v)
                        .unwrap_or_else(|| panic!("template {} rendered without {{{slot}}}", self.name));
                    out.push_str(value);
                }
            }
        }
        out
    }
}

/// Every template used by the harness for one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    pub language_tag: String,
    pub background_header: String,
    pub knowledge_prefix: Template,
    /// Answer instruction wrapping the question; used by every setting.
    pub question: Template,
    pub strategy: Template,
    pub judge: Template,
    pub knowledge_qa: Template,
    pub qa_synthesis: Template,
    pub sft_synthesis: Template,
}

/// Template role name, file contents.
type RoleSources = BTreeMap<String, String>;

const ROLES: [&str; 8] = [
    "background_header",
    "knowledge_prefix",
    "question",
    "strategy",
    "judge",
    "knowledge_qa",
    "qa_synthesis",
    "sft_synthesis",
];

macro_rules! builtin_sources {
    ($lang:literal) => {
        [
            ("background_header", include_str!(concat!("../templates/", $lang, "/background_header.txt"))),
            ("knowledge_prefix", include_str!(concat!("../templates/", $lang, "/knowledge_prefix.txt"))),
            ("question", include_str!(concat!("../templates/", $lang, "/question.txt"))),
            ("strategy", include_str!(concat!("../templates/", $lang, "/strategy.txt"))),
            ("judge", include_str!(concat!("../templates/", $lang, "/judge.txt"))),
            ("knowledge_qa", include_str!(concat!("../templates/", $lang, "/knowledge_qa.txt"))),
            ("qa_synthesis", include_str!(concat!("../templates/", $lang, "/qa_synthesis.txt"))),
            ("sft_synthesis", include_str!(concat!("../templates/", $lang, "/sft_synthesis.txt"))),
        ]
    };
}

#[derive(Deserialize)]
struct Manifest {
    languages: BTreeMap<String, BTreeMap<String, PathBuf>>,
}

fn strip_line_end(s: &str) -> &str {
    s.trim_end_matches(['\n', '\r'])
}

impl PromptTemplateSet {
    /// Templates compiled into the binary; `ja` is the default language.
    pub fn builtin(language_tag: &str) -> Result<Self, PromptError> {
        let sources: Vec<(&str, &str)> = match language_tag {
            "ja" => builtin_sources!("ja").to_vec(),
            "en" => builtin_sources!("en").to_vec(),
            other => return Err(PromptError::UnknownLanguage(other.to_string())),
        };
        let sources = sources.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Self::from_sources(language_tag, &sources)
    }

    /// Loads the templates that `manifest_path` maps for `language_tag`.
    pub fn from_manifest(manifest_path: &Path, language_tag: &str) -> Result<Self, PromptError> {
        let manifest_err = |message: String| PromptError::Manifest { path: manifest_path.to_path_buf(), message };
        let text = std::fs::read_to_string(manifest_path).map_err(|e| manifest_err(e.to_string()))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| manifest_err(e.to_string()))?;
        let roles = manifest
            .languages
            .get(language_tag)
            .ok_or_else(|| PromptError::UnknownLanguage(language_tag.to_string()))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut sources = RoleSources::new();
        for (role, rel) in roles {
            let path = base.join(rel);
            let body = std::fs::read_to_string(&path)
                .map_err(|e| PromptError::Manifest { path: path.clone(), message: e.to_string() })?;
            sources.insert(role.clone(), body);
        }
        Self::from_sources(language_tag, &sources)
    }

    fn from_sources(language_tag: &str, sources: &RoleSources) -> Result<Self, PromptError> {
        for role in sources.keys() {
            if !ROLES.contains(&role.as_str()) {
                return Err(PromptError::Template { name: role.clone(), message: "unknown template role".into() });
            }
        }
        let get = |role: &str| {
            sources.get(role).map(String::as_str).ok_or_else(|| PromptError::Template {
                name: role.to_string(),
                message: format!("no template for role in language \"{language_tag}\""),
            })
        };
        // Fragments are joined with blank lines, so their own line ends are dropped.
        let background_header = strip_line_end(get("background_header")?).to_string();
        Template::parse("background_header", &background_header, &[])?;
        Ok(Self {
            language_tag: language_tag.to_string(),
            background_header,
            knowledge_prefix: Template::parse("knowledge_prefix", strip_line_end(get("knowledge_prefix")?), &["index"])?,
            question: Template::parse("question", strip_line_end(get("question")?), &["question"])?,
            strategy: Template::parse("strategy", strip_line_end(get("strategy")?), &["conclusions"])?,
            judge: Template::parse("judge", get("judge")?, &["generated_answer", "criteria"])?,
            knowledge_qa: Template::parse("knowledge_qa", get("knowledge_qa")?, &["question"])?,
            qa_synthesis: Template::parse("qa_synthesis", get("qa_synthesis")?, &["fact"])?,
            sft_synthesis: Template::parse("sft_synthesis", get("sft_synthesis")?, &["chunk"])?,
        })
    }

    /// Digest over every template, recorded in run manifests.
    pub fn digest(&self) -> String {
        let mut buf = String::new();
        buf.push_str(&self.language_tag);
        buf.push('\0');
        buf.push_str(&self.background_header);
        for t in [
            &self.knowledge_prefix,
            &self.question,
            &self.strategy,
            &self.judge,
            &self.knowledge_qa,
            &self.qa_synthesis,
            &self.sft_synthesis,
        ] {
            buf.push('\0');
            buf.push_str(t.name());
            buf.push('\0');
            buf.push_str(t.source());
        }
        sha256_hex(buf.as_bytes())
    }
}

fn itemize<'a>(lines: impl Iterator<Item = &'a str>) -> String {
    lines.map(|l| format!("- {l}")).collect::<Vec<_>>().join("\n")
}

/// Builds the answer prompt for `item` under `setting`.
///
/// Sections are separated by one blank line and the prompt ends with a
/// single newline. Under oracle reasoning, non-guidance conclusions are
/// itemized before the question and guidance conclusions only fill the
/// answer-strategy block after it.
pub fn build_answer_prompt(item: &EvalItem, setting: PromptSetting, templates: &PromptTemplateSet) -> Result<String, PromptError> {
    let check = validate_for_setting(item, setting);
    if !check.valid {
        return Err(PromptError::InvalidForSetting { item: item.id.clone(), setting, reasons: check.reasons });
    }
    let question = templates.question.render(&[("question", &item.question)]);
    let mut parts: Vec<String> = Vec::new();
    match setting {
        PromptSetting::NoOracle => parts.push(question),
        PromptSetting::OracleElicitation => {
            parts.push(templates.background_header.clone());
            for (i, fact) in item.oracle_facts.iter().enumerate() {
                let index = (i + 1).to_string();
                let prefix = templates.knowledge_prefix.render(&[("index", &index)]);
                parts.push(format!("{prefix}\n{}", fact.text));
            }
            parts.push(question);
        }
        PromptSetting::OracleReasoning => {
            let (guidance, facts): (Vec<_>, Vec<_>) = item.oracle_conclusions.iter().partition(|c| c.is_guidance);
            if !facts.is_empty() {
                parts.push(templates.background_header.clone());
                parts.push(itemize(facts.iter().map(|c| c.text.as_str())));
            }
            parts.push(question);
            if !guidance.is_empty() {
                let list = itemize(guidance.iter().map(|c| c.text.as_str()));
                parts.push(templates.strategy.render(&[("conclusions", &list)]));
            }
        }
    }
    let mut prompt = parts.join("\n\n");
    prompt.push('\n');
    Ok(prompt)
}

pub fn build_judge_prompt(generated_answer: &str, condition: &Condition, templates: &PromptTemplateSet) -> Result<String, PromptError> {
    if generated_answer.is_empty() {
        return Err(PromptError::EmptyInput("generated answer"));
    }
    if condition.text.trim().is_empty() {
        return Err(PromptError::EmptyInput("condition text"));
    }
    Ok(templates
        .judge
        .render(&[("generated_answer", generated_answer), ("criteria", &condition.text)]))
}

pub fn build_knowledge_qa_prompt(question: &str, templates: &PromptTemplateSet) -> Result<String, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::EmptyInput("question"));
    }
    Ok(templates.knowledge_qa.render(&[("question", question)]))
}

pub fn build_qa_synthesis_prompt(fact: &OracleFact, templates: &PromptTemplateSet) -> Result<String, PromptError> {
    if fact.text.trim().is_empty() {
        return Err(PromptError::EmptyInput("fact text"));
    }
    Ok(templates.qa_synthesis.render(&[("fact", &fact.text)]))
}

pub fn build_sft_synthesis_prompt(chunk: &str, templates: &PromptTemplateSet) -> Result<String, PromptError> {
    if chunk.trim().is_empty() {
        return Err(PromptError::EmptyInput("chunk"));
    }
    Ok(templates.sft_synthesis.render(&[("chunk", chunk)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Checklist, OracleConclusion};

    fn en() -> PromptTemplateSet {
        PromptTemplateSet::builtin("en").unwrap()
    }

    fn item() -> EvalItem {
        EvalItem {
            id: "q1".into(),
            question: "How do I count jobnets that ended normally yesterday?".into(),
            checklists: vec![Checklist {
                id: "A".into(),
                conditions: vec![Condition { id: "c1".into(), text: "mentions ajsreport".into() }],
            }],
            oracle_conclusions: vec![
                OracleConclusion { text: "Run ajsreport for the previous day.".into(), is_guidance: false },
                OracleConclusion { text: "Check NEST_EXEC_END_N_NUM.".into(), is_guidance: false },
            ],
            oracle_facts: vec![
                OracleFact::new("The ajsreport command outputs performance reports.", None, true),
                OracleFact::new("NEST_EXEC_END_N_NUM: number of nested jobnets that ended normally.", None, true),
            ],
        }
    }

    #[test]
    fn template_requires_each_placeholder_once() {
        assert!(Template::parse("t", "a {x} b", &["x"]).is_ok());
        assert!(Template::parse("t", "a b", &["x"]).is_err());
        assert!(Template::parse("t", "{x}{x}", &["x"]).is_err());
        assert!(Template::parse("t", "{x}{y}", &["x"]).is_err());
    }

    #[test]
    fn non_placeholder_braces_are_literal() {
        let t = Template::parse("t", "{ not } {Upper} {x} {}", &["x"]).unwrap();
        assert_eq!(t.render(&[("x", "v")]), "{ not } {Upper} v {}");
    }

    #[test]
    fn substitution_is_single_pass() {
        let c = Condition { id: "c".into(), text: "mentions X".into() };
        let prompt = build_judge_prompt("answer with {criteria} inside", &c, &en()).unwrap();
        assert!(prompt.contains("## Evaluation Target\nanswer with {criteria} inside\n"));
        assert!(prompt.contains("## Evaluation Criteria\nmentions X\n"));
    }

    #[test]
    fn judge_sections_in_order() {
        let c = Condition { id: "c".into(), text: "mentions X".into() };
        let prompt = build_judge_prompt("A", &c, &en()).unwrap();
        let target = prompt.find("## Evaluation Target\nA").unwrap();
        let criteria = prompt.find("## Evaluation Criteria\nmentions X").unwrap();
        assert!(target < criteria);
        assert!(prompt.ends_with("## Answer\n"));
    }

    #[test]
    fn judge_rejects_empty_condition() {
        let c = Condition { id: "c".into(), text: String::new() };
        assert!(matches!(build_judge_prompt("A", &c, &en()), Err(PromptError::EmptyInput(_))));
    }

    #[test]
    fn elicitation_numbers_facts() {
        let it = item();
        let p = build_answer_prompt(&it, PromptSetting::OracleElicitation, &en()).unwrap();
        let k1 = p.find(&format!("##### Knowledge 1\n{}", it.oracle_facts[0].text)).unwrap();
        let k2 = p.find(&format!("##### Knowledge 2\n{}", it.oracle_facts[1].text)).unwrap();
        let q = p.find(&it.question).unwrap();
        assert!(p.starts_with("## Background Knowledge\n\n"));
        assert!(k1 < k2 && k2 < q);
    }

    #[test]
    fn reasoning_without_guidance_has_no_strategy() {
        let p = build_answer_prompt(&item(), PromptSetting::OracleReasoning, &en()).unwrap();
        assert!(p.contains("## Background Knowledge"));
        assert!(p.contains("- Run ajsreport for the previous day.\n- Check NEST_EXEC_END_N_NUM."));
        assert!(!p.contains("## About the Answer Strategy"));
    }

    #[test]
    fn reasoning_guidance_goes_after_question() {
        let mut it = item();
        it.oracle_conclusions.push(OracleConclusion { text: "Explain why one command suffices.".into(), is_guidance: true });
        let p = build_answer_prompt(&it, PromptSetting::OracleReasoning, &en()).unwrap();
        let q = p.find(&it.question).unwrap();
        let s = p.find("## About the Answer Strategy").unwrap();
        assert!(q < s);
        assert!(p.contains("answer strategy.\n- Explain why one command suffices.\n"));
        // Guidance is not repeated in the background list.
        assert_eq!(p.matches("Explain why one command suffices.").count(), 1);
    }

    #[test]
    fn no_oracle_is_bare_question() {
        let p = build_answer_prompt(&item(), PromptSetting::NoOracle, &en()).unwrap();
        assert_eq!(
            p,
            "Please answer the following question.\n\n### Question\nHow do I count jobnets that ended normally yesterday?\n"
        );
    }

    #[test]
    fn invalid_setting_is_rejected() {
        let mut it = item();
        it.oracle_conclusions.clear();
        assert!(matches!(
            build_answer_prompt(&it, PromptSetting::OracleReasoning, &en()),
            Err(PromptError::InvalidForSetting { .. })
        ));
    }

    #[test]
    fn knowledge_prompt_ends_with_question_and_cue() {
        let q = "Which parameter counts nested jobnets?";
        let p = build_knowledge_qa_prompt(q, &en()).unwrap();
        assert!(p.ends_with(&format!("### Question\n{q}\n\n### Answer\n")));
        assert!(p.contains("Event acquisition filter"));
        // Few-shot questions are not deduplicated.
        let few_shot = "What is the filter called that specifies the conditions under which JP1/IM – Manager acquires JP1 events from JP1/Base (event service)?";
        let p2 = build_knowledge_qa_prompt(few_shot, &en()).unwrap();
        assert_eq!(p2.matches(few_shot).count(), 2);
        assert!(build_knowledge_qa_prompt("", &en()).is_err());
    }

    #[test]
    fn synthesis_prompts() {
        let fact = OracleFact::new("Body ### Answer inside", None, false);
        let p = build_qa_synthesis_prompt(&fact, &en()).unwrap();
        assert!(p.contains("The answer must be a single word that appears in the sentences"));
        assert!(p.ends_with("### Document\nBody ### Answer inside\n"));
        assert!(build_qa_synthesis_prompt(&OracleFact::new("", None, false), &en()).is_err());

        let chunk = "manual chunk  \t";
        let s = build_sft_synthesis_prompt(chunk, &en()).unwrap();
        assert!(s.contains("after the string Question:"));
        assert!(s.ends_with("Document:manual chunk  \t\n"));
        assert!(build_sft_synthesis_prompt("", &en()).is_err());
    }

    #[test]
    fn builtin_languages_load() {
        let ja = PromptTemplateSet::builtin("ja").unwrap();
        assert_ne!(ja.digest(), en().digest());
        assert!(matches!(PromptTemplateSet::builtin("fr"), Err(PromptError::UnknownLanguage(_))));
    }

    #[test]
    fn manifest_matches_builtin() {
        let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("templates/manifest.toml");
        for lang in ["ja", "en"] {
            let from_files = PromptTemplateSet::from_manifest(&manifest, lang).unwrap();
            assert_eq!(from_files, PromptTemplateSet::builtin(lang).unwrap());
        }
    }

    #[test]
    fn setting_names_round_trip() {
        for s in PromptSetting::ALL {
            assert_eq!(s.as_str().parse::<PromptSetting>().unwrap(), s);
        }
        assert!("oracle".parse::<PromptSetting>().is_err());
    }
}
