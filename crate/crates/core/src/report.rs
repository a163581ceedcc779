//! Series reports across model checkpoints: ASR per setting, knowledge
//! metrics, subtask gaps and bottleneck labels, rendered as canonical JSON,
//! markdown or tidy CSV.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::knowledge::KnowledgeReport;
use crate::oracle::{diagnose, AsrReport, Diagnosis};
use crate::prompt::PromptSetting;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("a report needs at least one entry")]
    Empty,
    #[error("duplicate tag \"{0}\"")]
    DuplicateTag(String),
    #[error("entries use different datasets: {first_tag} has {first_digest}, {other_tag} has {other_digest}")]
    MixedDatasets {
        first_tag: String,
        first_digest: String,
        other_tag: String,
        other_digest: String,
    },
    #[error("{0} is not a finite number")]
    NonFinite(String),
    #[error("unknown report format \"{0}\" (expected json, markdown or csv)")]
    UnknownFormat(String),
    #[error("malformed report json: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub threshold: f64,
    /// Oracle-reasoning ASR at or above this is annotated as sufficient.
    pub sufficient_threshold: f64,
    /// Tolerance for a no-oracle ASR to match the reference's oracle-elicitation ASR.
    pub match_tolerance: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { threshold: 0.05, sufficient_threshold: 0.90, match_tolerance: 0.05 }
    }
}

pub struct SeriesInput {
    pub tag: String,
    pub asr: AsrReport,
    pub knowledge: Option<KnowledgeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMember {
    pub tag: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSeries {
    pub label: String,
    pub entries: Vec<SeriesMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingAsr {
    pub setting: PromptSetting,
    pub macro_asr: f64,
    pub micro_asr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub template_digest: String,
    pub dataset_digest: String,
    pub qa_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagReport {
    pub tag: String,
    pub model_id: String,
    pub asr: Vec<SettingAsr>,
    pub mean_perplexity: Option<f64>,
    pub elicitation_accuracy: Option<f64>,
    pub diagnosis: Option<Diagnosis>,
    pub sufficient_performance: bool,
    /// Whether no-oracle ASR matches the reference's oracle-elicitation ASR;
    /// absent for the reference itself or when either value is missing.
    pub elicitation_resolved: Option<bool>,
    pub malformed_judge_outputs: usize,
    pub flagged: usize,
    pub provenance: Provenance,
}

impl TagReport {
    pub fn asr(&self, setting: PromptSetting) -> Option<f64> {
        self.asr.iter().find(|a| a.setting == setting).map(|a| a.macro_asr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub series: ModelSeries,
    pub settings: Vec<PromptSetting>,
    pub options: ReportOptions,
    pub reference_tag: String,
    pub dataset_digest: String,
    pub tags: Vec<TagReport>,
    pub notes: Vec<String>,
}

/// Rounds to six decimals through the same text form the JSON writer uses,
/// so a rendered report parses back to an equal value.
pub fn quantize(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let q: f64 = format!("{x:.6}").parse().expect("formatted float parses");
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

pub fn build_series_report(
    label: &str,
    inputs: &[SeriesInput],
    options: &ReportOptions,
) -> Result<DiagnosisReport, ReportError> {
    let first = inputs.first().ok_or(ReportError::Empty)?;
    let mut seen = BTreeSet::new();
    for input in inputs {
        if !seen.insert(input.tag.as_str()) {
            return Err(ReportError::DuplicateTag(input.tag.clone()));
        }
        if input.asr.manifest.dataset_digest != first.asr.manifest.dataset_digest {
            return Err(ReportError::MixedDatasets {
                first_tag: first.tag.clone(),
                first_digest: first.asr.manifest.dataset_digest.clone(),
                other_tag: input.tag.clone(),
                other_digest: input.asr.manifest.dataset_digest.clone(),
            });
        }
    }

    let present: BTreeSet<PromptSetting> =
        inputs.iter().flat_map(|i| i.asr.settings.iter().map(|s| s.setting)).collect();
    let settings: Vec<PromptSetting> = PromptSetting::ALL.into_iter().filter(|s| present.contains(s)).collect();

    let mut notes = Vec::new();
    let mut tags = Vec::with_capacity(inputs.len());
    for input in inputs {
        let asr: Vec<SettingAsr> = settings
            .iter()
            .filter_map(|s| input.asr.setting(*s))
            .map(|s| SettingAsr { setting: s.setting, macro_asr: quantize(s.macro_asr), micro_asr: quantize(s.micro_asr) })
            .collect();
        let get = |s: PromptSetting| asr.iter().find(|a| a.setting == s).map(|a| a.macro_asr);
        let diagnosis = match (
            get(PromptSetting::NoOracle),
            get(PromptSetting::OracleElicitation),
            get(PromptSetting::OracleReasoning),
        ) {
            (Some(n), Some(e), Some(r)) => {
                let mut d = diagnose(n, e, r, options.threshold);
                d.elicitation_gap = quantize(d.elicitation_gap);
                d.reasoning_gap = quantize(d.reasoning_gap);
                d.composing_gap = quantize(d.composing_gap);
                Some(d)
            }
            _ => None,
        };
        let sufficient = get(PromptSetting::OracleReasoning).is_some_and(|r| r >= options.sufficient_threshold);
        if sufficient {
            notes.push(format!(
                "{}: sufficient performance (oracle-reasoning ASR {:.6} >= {:.2})",
                input.tag,
                get(PromptSetting::OracleReasoning).unwrap_or_default(),
                options.sufficient_threshold
            ));
        }
        let knowledge = input.knowledge.as_ref();
        tags.push(TagReport {
            tag: input.tag.clone(),
            model_id: input.asr.manifest.answer_model.clone(),
            asr,
            mean_perplexity: knowledge.and_then(KnowledgeReport::mean_perplexity).map(quantize),
            elicitation_accuracy: knowledge.and_then(KnowledgeReport::elicitation_accuracy).map(quantize),
            diagnosis,
            sufficient_performance: sufficient,
            elicitation_resolved: None,
            malformed_judge_outputs: input.asr.malformed_judge_outputs,
            flagged: input.asr.flagged.len(),
            provenance: Provenance {
                config_digest: input.asr.manifest.config_digest.clone(),
                template_digest: input.asr.manifest.template_digest.clone(),
                dataset_digest: input.asr.manifest.dataset_digest.clone(),
                qa_digest: knowledge.and_then(|k| k.qa_digest.clone()),
            },
        });
    }

    let reference_elicitation = tags[0].asr(PromptSetting::OracleElicitation);
    for t in tags.iter_mut().skip(1) {
        t.elicitation_resolved = match (t.asr(PromptSetting::NoOracle), reference_elicitation) {
            (Some(n), Some(e)) => Some((n - e).abs() <= options.match_tolerance + 1e-12),
            _ => None,
        };
        if t.elicitation_resolved == Some(true) {
            notes.push(format!(
                "{}: no-oracle ASR matches the oracle-elicitation ASR of {} within {}",
                t.tag, first.tag, options.match_tolerance
            ));
        }
    }
    for t in &tags {
        if t.mean_perplexity.is_none() {
            notes.push(format!("{}: no perplexity available", t.tag));
        }
    }

    Ok(DiagnosisReport {
        series: ModelSeries {
            label: label.to_string(),
            entries: tags.iter().map(|t| SeriesMember { tag: t.tag.clone(), model_id: t.model_id.clone() }).collect(),
        },
        settings,
        options: *options,
        reference_tag: first.tag.clone(),
        dataset_digest: first.asr.manifest.dataset_digest.clone(),
        tags,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Markdown, ReportFormat::Csv];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

pub fn render_report(report: &DiagnosisReport, format: ReportFormat) -> Result<Vec<u8>, ReportError> {
    match format {
        ReportFormat::Json => {
            check_finite(report)?;
            let value = serde_json::to_value(report).map_err(|e| ReportError::Parse(e.to_string()))?;
            let mut out = String::new();
            write_canonical(&value, 0, "$", &mut out)?;
            out.push('\n');
            Ok(out.into_bytes())
        }
        ReportFormat::Markdown => Ok(render_markdown(report).into_bytes()),
        ReportFormat::Csv => Ok(render_csv(report).into_bytes()),
    }
}

fn check_finite(r: &DiagnosisReport) -> Result<(), ReportError> {
    let mut fields: Vec<(String, f64)> = vec![
        ("options.threshold".into(), r.options.threshold),
        ("options.sufficient_threshold".into(), r.options.sufficient_threshold),
        ("options.match_tolerance".into(), r.options.match_tolerance),
    ];
    for t in &r.tags {
        for a in &t.asr {
            fields.push((format!("{}.asr.{}", t.tag, a.setting), a.macro_asr));
            fields.push((format!("{}.micro_asr.{}", t.tag, a.setting), a.micro_asr));
        }
        fields.extend(t.mean_perplexity.map(|v| (format!("{}.mean_perplexity", t.tag), v)));
        fields.extend(t.elicitation_accuracy.map(|v| (format!("{}.elicitation_accuracy", t.tag), v)));
        if let Some(d) = &t.diagnosis {
            fields.push((format!("{}.elicitation_gap", t.tag), d.elicitation_gap));
            fields.push((format!("{}.reasoning_gap", t.tag), d.reasoning_gap));
            fields.push((format!("{}.composing_gap", t.tag), d.composing_gap));
        }
    }
    match fields.into_iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(ReportError::NonFinite(name)),
        None => Ok(()),
    }
}

pub fn parse_report_json(bytes: &[u8]) -> Result<DiagnosisReport, ReportError> {
    serde_json::from_slice(bytes).map_err(|e| ReportError::Parse(e.to_string()))
}

/// Sorted keys, two-space indent, floats at six decimals.
fn write_canonical(v: &Value, depth: usize, path: &str, out: &mut String) -> Result<(), ReportError> {
    let pad = |d: usize| "  ".repeat(d);
    match v {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&v.to_string()),
        Value::Number(n) => match (n.as_i64(), n.as_u64(), n.as_f64()) {
            (Some(i), _, _) if !n.is_f64() => write!(out, "{i}").expect("string write"),
            (_, Some(u), _) if !n.is_f64() => write!(out, "{u}").expect("string write"),
            (_, _, Some(f)) if f.is_finite() => write!(out, "{f:.6}").expect("string write"),
            _ => return Err(ReportError::NonFinite(path.to_string())),
        },
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                write_canonical(item, depth + 1, &format!("{path}[{i}]"), out)?;
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_canonical(&map[*k], depth + 1, &format!("{path}.{k}"), out)?;
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push('}');
        }
    }
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into())
}

fn render_markdown(r: &DiagnosisReport) -> String {
    let mut s = String::new();
    let title = if r.series.label.is_empty() { "Diagnosis report" } else { r.series.label.as_str() };
    writeln!(s, "# {title}\n").unwrap();
    writeln!(s, "Dataset digest: `{}`  ", r.dataset_digest).unwrap();
    writeln!(s, "Bottleneck threshold: {:.6}  ", r.options.threshold).unwrap();
    writeln!(s, "Reference tag: `{}`\n", r.reference_tag).unwrap();

    writeln!(s, "## Answer success rate (macro)\n").unwrap();
    let header: Vec<&str> = r.settings.iter().map(|x| x.as_str()).collect();
    writeln!(s, "| tag | {} |", header.join(" | ")).unwrap();
    writeln!(s, "|---|{}", "---|".repeat(r.settings.len())).unwrap();
    for t in &r.tags {
        let cells: Vec<String> = r.settings.iter().map(|x| cell(t.asr(*x))).collect();
        writeln!(s, "| {} | {} |", t.tag, cells.join(" | ")).unwrap();
    }

    writeln!(s, "\n## Knowledge\n").unwrap();
    writeln!(s, "| tag | mean perplexity | elicitation accuracy |").unwrap();
    writeln!(s, "|---|---|---|").unwrap();
    for t in &r.tags {
        writeln!(s, "| {} | {} | {} |", t.tag, cell(t.mean_perplexity), cell(t.elicitation_accuracy)).unwrap();
    }

    writeln!(s, "\n## Subtask gaps\n").unwrap();
    writeln!(s, "| tag | elicitation | reasoning | composing | bottlenecks | elicitation resolved |").unwrap();
    writeln!(s, "|---|---|---|---|---|---|").unwrap();
    for t in &r.tags {
        let resolved = match t.elicitation_resolved {
            Some(true) => "yes",
            Some(false) => "no",
            None => "n/a",
        };
        match &t.diagnosis {
            Some(d) => {
                let labels: Vec<&str> = d.bottlenecks.iter().map(|b| b.as_str()).collect();
                let labels = if labels.is_empty() { "none".to_string() } else { labels.join(", ") };
                writeln!(
                    s,
                    "| {} | {:.6} | {:.6} | {:.6} | {} | {} |",
                    t.tag, d.elicitation_gap, d.reasoning_gap, d.composing_gap, labels, resolved
                )
                .unwrap();
            }
            None => writeln!(s, "| {} | n/a | n/a | n/a | n/a | {} |", t.tag, resolved).unwrap(),
        }
    }

    if !r.notes.is_empty() {
        writeln!(s, "\n## Notes\n").unwrap();
        for n in &r.notes {
            writeln!(s, "- {n}").unwrap();
        }
    }
    s
}

/// Tidy rows `(tag, metric, setting, value)`: one per setting plus two
/// knowledge metrics per tag. Missing values are left empty.
fn render_csv(r: &DiagnosisReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tag", "metric", "setting", "value"]).expect("in-memory write");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for t in &r.tags {
        for s in &r.settings {
            w.write_record([t.tag.as_str(), "asr", s.as_str(), &fmt(t.asr(*s))]).expect("in-memory write");
        }
        w.write_record([t.tag.as_str(), "mean_perplexity", "", &fmt(t.mean_perplexity)]).expect("in-memory write");
        w.write_record([t.tag.as_str(), "elicitation_accuracy", "", &fmt(t.elicitation_accuracy)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}
