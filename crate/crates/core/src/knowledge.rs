//! Knowledge probes: memorization via paragraph perplexity of oracle facts,
//! and elicitation via closed-book QA with normalized exact match.

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use subtask_diag_gateway::{Gateway, GatewayError, GenerationRequest, TokenLogProbs};
use thiserror::Error;
use tracing::warn;

use crate::data::{CurationStatus, KnowledgeQA, OracleFact};
use crate::prompt::{build_knowledge_qa_prompt, build_qa_synthesis_prompt, PromptError, PromptTemplateSet};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("no paragraph could be scored ({unsupported} unsupported, {no_usable} without usable logprobs, {failed} failed)")]
    NothingScorable {
        unsupported: usize,
        no_usable: usize,
        failed: usize,
    },
    #[error("the endpoint does not support token scoring: {0}")]
    ScoringUnsupported(String),
    #[error("no facts to process")]
    NoFacts,
    #[error(
        "no approved or edited knowledge QAs ({pending} pending); curate the QA file or pass --allow-uncurated"
    )]
    NoCuratedQas { pending: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Splits on runs of blank lines; each paragraph is trimmed and empties are dropped.
pub fn split_paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                out.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        out.push(current.join("\n"));
    }
    out.into_iter().map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRecord {
    pub fact_id: String,
    pub paragraph_index: usize,
    pub token_count: usize,
    pub usable_logprob_count: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum ScoreSkip {
    Unsupported(String),
    NoUsableLogprobs,
    Failed(String),
}

/// exp(-mean) over the usable logprobs, or `None` when there are none.
pub fn perplexity_from_logprobs(lp: &TokenLogProbs) -> Option<f64> {
    let n = lp.usable_count();
    if n == 0 {
        return None;
    }
    let sum: f64 = lp.usable().sum();
    Some((-sum / n as f64).exp())
}

pub async fn paragraph_perplexity(
    gw: &Gateway,
    model_id: &str,
    fact_id: &str,
    paragraph_index: usize,
    paragraph: &str,
) -> Result<PerplexityRecord, ScoreSkip> {
    let lp = gw.score_tokens(model_id, paragraph).await.map_err(|e| match e {
        e if e.is_unsupported() => ScoreSkip::Unsupported(e.to_string()),
        GatewayError::InvalidRequest(m) => ScoreSkip::Failed(m),
        e => ScoreSkip::Failed(e.to_string()),
    })?;
    let perplexity = perplexity_from_logprobs(&lp).ok_or(ScoreSkip::NoUsableLogprobs)?;
    Ok(PerplexityRecord {
        fact_id: fact_id.to_string(),
        paragraph_index,
        token_count: lp.len(),
        usable_logprob_count: lp.usable_count(),
        perplexity,
    })
}

/// Mean that does not depend on the order of `values`.
pub fn order_free_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted.iter().sum::<f64>() / sorted.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactPerplexity {
    pub fact_id: String,
    pub mean_perplexity: f64,
    pub paragraphs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedParagraph {
    pub fact_id: String,
    pub paragraph_index: usize,
    pub reason: ScoreSkip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    /// Unweighted mean over all scored paragraphs.
    pub mean_perplexity: f64,
    pub per_fact: Vec<FactPerplexity>,
    pub paragraphs: Vec<PerplexityRecord>,
    pub skipped: Vec<SkippedParagraph>,
    /// Paragraphs whose first token came back without a logprob.
    pub first_token_unscored: usize,
}

/// Scores every paragraph of every fact. Fails when nothing was scorable;
/// when every skip is an unsupported endpoint the error says so directly.
pub async fn memorization_score(
    gw: &Gateway,
    facts: &[(String, &OracleFact)],
    model_id: &str,
) -> Result<MemorizationReport, KnowledgeError> {
    if facts.is_empty() {
        return Err(KnowledgeError::NoFacts);
    }
    let jobs: Vec<(String, usize, String)> = facts
        .iter()
        .flat_map(|(id, fact)| split_paragraphs(&fact.text).into_iter().enumerate().map(move |(i, p)| (id.clone(), i, p)))
        .collect();
    let results = join_all(jobs.iter().map(|(id, i, p)| async move {
        let r = paragraph_perplexity(gw, model_id, id, *i, p).await;
        (id, *i, p, r)
    }))
    .await;

    let mut paragraphs = Vec::new();
    let mut skipped = Vec::new();
    for (id, i, p, r) in results {
        match r {
            Ok(rec) => paragraphs.push(rec),
            Err(reason) => {
                warn!(fact = %id, paragraph = i, ?reason, chars = p.len(), "paragraph not scored");
                skipped.push(SkippedParagraph { fact_id: id.clone(), paragraph_index: i, reason });
            }
        }
    }
    paragraphs.sort_by(|a, b| (&a.fact_id, a.paragraph_index).cmp(&(&b.fact_id, b.paragraph_index)));
    skipped.sort_by(|a, b| (&a.fact_id, a.paragraph_index).cmp(&(&b.fact_id, b.paragraph_index)));

    let values: Vec<f64> = paragraphs.iter().map(|p| p.perplexity).collect();
    let Some(mean_perplexity) = order_free_mean(&values) else {
        let count = |f: fn(&ScoreSkip) -> bool| skipped.iter().filter(|s| f(&s.reason)).count();
        let unsupported = count(|r| matches!(r, ScoreSkip::Unsupported(_)));
        if unsupported == skipped.len() {
            if let Some(SkippedParagraph { reason: ScoreSkip::Unsupported(m), .. }) = skipped.first() {
                return Err(KnowledgeError::ScoringUnsupported(m.clone()));
            }
        }
        return Err(KnowledgeError::NothingScorable {
            unsupported,
            no_usable: count(|r| matches!(r, ScoreSkip::NoUsableLogprobs)),
            failed: count(|r| matches!(r, ScoreSkip::Failed(_))),
        });
    };

    let mut per_fact: Vec<FactPerplexity> = Vec::new();
    for chunk in paragraphs.chunk_by(|a, b| a.fact_id == b.fact_id) {
        let values: Vec<f64> = chunk.iter().map(|p| p.perplexity).collect();
        per_fact.push(FactPerplexity {
            fact_id: chunk[0].fact_id.clone(),
            mean_perplexity: order_free_mean(&values).expect("chunks are non-empty"),
            paragraphs: chunk.len(),
        });
    }
    let first_token_unscored = paragraphs.iter().filter(|p| p.usable_logprob_count < p.token_count).count();
    Ok(MemorizationReport { mean_perplexity, per_fact, paragraphs, skipped, first_token_unscored })
}

/// Question and answer from the last `### Question` / `### Answer` markers.
pub fn parse_synthesis_output(raw: &str) -> Option<(String, String)> {
    const Q: &str = "### Question";
    const A: &str = "### Answer";
    let a_pos = raw.rfind(A)?;
    let q_pos = raw[..a_pos].rfind(Q)?;
    let question = raw[q_pos + Q.len()..a_pos].trim();
    let rest = &raw[a_pos + A.len()..];
    let mut answer_lines = Vec::new();
    for (i, line) in rest.lines().enumerate() {
        if i > 0 && line.trim_start().starts_with("###") {
            break;
        }
        answer_lines.push(line);
    }
    let answer = answer_lines.join("\n").trim().to_string();
    if question.is_empty() || answer.is_empty() {
        return None;
    }
    Some((question.to_string(), answer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisFailure {
    pub fact_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthesisOutcome {
    pub qas: Vec<KnowledgeQA>,
    pub failures: Vec<SynthesisFailure>,
}

pub fn synthesized_qa_id(fact_id: &str) -> String {
    format!("{fact_id}/qa")
}

/// One greedy synthesis call per fact. Parsed QAs start pending; unparseable
/// outputs are kept as deleted entries carrying the raw text.
pub async fn synthesize_knowledge_qas(
    gw: &Gateway,
    templates: &PromptTemplateSet,
    facts: &[(String, &OracleFact)],
    model_id: &str,
    max_tokens: u32,
) -> Result<SynthesisOutcome, KnowledgeError> {
    if facts.is_empty() {
        return Err(KnowledgeError::NoFacts);
    }
    let mut requests = Vec::with_capacity(facts.len());
    for (id, fact) in facts {
        let prompt = build_qa_synthesis_prompt(fact, templates)?;
        requests.push((id, GenerationRequest::greedy(model_id, prompt, max_tokens)));
    }
    let results = join_all(requests.iter().map(|(id, req)| async move { (*id, gw.generate(req).await) })).await;
    let mut out = SynthesisOutcome::default();
    for (fact_id, r) in results {
        match r {
            Ok(gen) => {
                let (question, answer, status, raw_output) = match parse_synthesis_output(&gen.text) {
                    Some((q, a)) => (q, a, CurationStatus::Pending, None),
                    None => (String::new(), String::new(), CurationStatus::Deleted, Some(gen.text)),
                };
                out.qas.push(KnowledgeQA {
                    id: synthesized_qa_id(fact_id),
                    source_fact_id: fact_id.clone(),
                    question,
                    answer,
                    curation_status: status,
                    raw_output,
                });
            }
            Err(e) => {
                warn!(fact = %fact_id, error = %e, "synthesis failed");
                out.failures.push(SynthesisFailure { fact_id: fact_id.clone(), error: e.to_string() });
            }
        }
    }
    Ok(out)
}

const PUNCTUATION: &[char] = &[
    '.', ',', ':', ';', '!', '?', '"', '\'', '(', ')', '[', ']', '{', '}', '。', '、', '，', '：', '；', '！', '？',
    '「', '」', '『', '』', '（', '）', '・',
];

/// First line, trimmed, with punctuation removed. Idempotent.
pub fn normalize_answer(text: &str) -> String {
    let first = text.split('\n').next().unwrap_or("");
    let stripped: String = first.trim().chars().filter(|c| !PUNCTUATION.contains(c)).collect();
    stripped.trim().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaMatchRecord {
    pub qa_id: String,
    pub curation_status: CurationStatus,
    pub gold: String,
    pub raw_output: String,
    pub normalized_output: String,
    pub normalized_gold: String,
    #[serde(rename = "match")]
    pub is_match: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationReport {
    /// Matches over evaluated QAs.
    pub accuracy: f64,
    pub evaluated: usize,
    pub matches: usize,
    pub skipped_deleted: usize,
    pub skipped_pending: usize,
    pub generation_failures: usize,
    pub uncurated_included: bool,
    pub records: Vec<QaMatchRecord>,
}

/// Greedy closed-book answers to every eligible QA, scored by normalized
/// exact match. Deleted QAs never count; pending ones only with `allow_uncurated`.
pub async fn elicitation_accuracy(
    gw: &Gateway,
    templates: &PromptTemplateSet,
    qas: &[KnowledgeQA],
    model_id: &str,
    max_tokens: u32,
    allow_uncurated: bool,
) -> Result<ElicitationReport, KnowledgeError> {
    let eligible: Vec<&KnowledgeQA> = qas
        .iter()
        .filter(|q| q.curation_status.is_curated() || (allow_uncurated && q.curation_status == CurationStatus::Pending))
        .collect();
    let skipped_deleted = qas.iter().filter(|q| q.curation_status == CurationStatus::Deleted).count();
    let pending = qas.iter().filter(|q| q.curation_status == CurationStatus::Pending).count();
    if eligible.is_empty() {
        return Err(KnowledgeError::NoCuratedQas { pending });
    }
    let mut requests = Vec::with_capacity(eligible.len());
    for qa in &eligible {
        let prompt = build_knowledge_qa_prompt(&qa.question, templates)?;
        requests.push(GenerationRequest::greedy(model_id, prompt, max_tokens));
    }
    let outputs = join_all(requests.iter().map(|req| gw.generate(req))).await;

    let mut records = Vec::with_capacity(eligible.len());
    for (qa, out) in eligible.iter().zip(outputs) {
        let normalized_gold = normalize_answer(&qa.answer);
        let (raw_output, error) = match out {
            Ok(g) => (g.text, None),
            Err(e) => {
                warn!(qa = %qa.id, error = %e, "knowledge answer failed");
                (String::new(), Some(e.to_string()))
            }
        };
        let normalized_output = normalize_answer(&raw_output);
        let is_match = error.is_none() && normalized_output == normalized_gold;
        records.push(QaMatchRecord {
            qa_id: qa.id.clone(),
            curation_status: qa.curation_status,
            gold: qa.answer.clone(),
            raw_output,
            normalized_output,
            normalized_gold,
            is_match,
            error,
        });
    }
    let matches = records.iter().filter(|r| r.is_match).count();
    Ok(ElicitationReport {
        accuracy: matches as f64 / records.len() as f64,
        evaluated: records.len(),
        matches,
        skipped_deleted,
        skipped_pending: if allow_uncurated { 0 } else { pending },
        generation_failures: records.iter().filter(|r| r.error.is_some()).count(),
        uncurated_included: allow_uncurated,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KnowledgeReport {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_digest: Option<String>,
    #[serde(default)]
    pub memorization: Option<MemorizationReport>,
    #[serde(default)]
    pub elicitation: Option<ElicitationReport>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl KnowledgeReport {
    pub fn mean_perplexity(&self) -> Option<f64> {
        self.memorization.as_ref().map(|m| m.mean_perplexity)
    }

    pub fn elicitation_accuracy(&self) -> Option<f64> {
        self.elicitation.as_ref().map(|e| e.accuracy)
    }

    /// Overlays the parts present in `other`; notes are appended without duplicates.
    pub fn merge(&mut self, other: KnowledgeReport) {
        if !other.model_id.is_empty() {
            self.model_id = other.model_id;
        }
        self.dataset_digest = other.dataset_digest.or(self.dataset_digest.take());
        self.qa_digest = other.qa_digest.or(self.qa_digest.take());
        if other.memorization.is_some() {
            self.memorization = other.memorization;
        }
        if other.elicitation.is_some() {
            self.elicitation = other.elicitation;
        }
        for n in other.notes {
            if !self.notes.contains(&n) {
                self.notes.push(n);
            }
        }
    }
}

/// CSV rows `(qa_id, gold, raw_output, normalized_output, match)`.
pub fn knowledge_csv(report: &ElicitationReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["qa_id", "gold", "raw_output", "normalized_output", "match"]).expect("in-memory write");
    for r in &report.records {
        w.write_record([&r.qa_id, &r.gold, &r.raw_output, &r.normalized_output, &r.is_match.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paragraph_split_examples() {
        assert_eq!(split_paragraphs("A\n\nB"), vec!["A", "B"]);
        assert_eq!(split_paragraphs("A\nB"), vec!["A\nB"]);
        assert!(split_paragraphs("\n\n").is_empty());
        assert_eq!(split_paragraphs("  A  \n \n\n\tB\nC\n"), vec!["A", "B\nC"]);
    }

    #[test]
    fn perplexity_arithmetic() {
        let lp = |v: Vec<f64>| {
            let n = v.len();
            TokenLogProbs::new((0..n).map(|i| i.to_string()).collect(), v.into_iter().map(Some).collect()).unwrap()
        };
        assert!((perplexity_from_logprobs(&lp(vec![0.5f64.ln(); 8])).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(perplexity_from_logprobs(&lp(vec![0.0; 3])).unwrap(), 1.0);
        assert!((perplexity_from_logprobs(&lp(vec![-1.0, -3.0])).unwrap() - 7.389056).abs() < 1e-6);
        let none = TokenLogProbs::new(vec!["a".into()], vec![None]).unwrap();
        assert_eq!(perplexity_from_logprobs(&none), None);
    }

    #[test]
    fn mean_examples() {
        assert_eq!(order_free_mean(&[2.0, 4.0]), Some(3.0));
        assert_eq!(order_free_mean(&[5.0]), Some(5.0));
        assert_eq!(order_free_mean(&[]), None);
    }

    #[test]
    fn synthesis_parse() {
        assert_eq!(parse_synthesis_output("### Question\nQ?\n### Answer\nA"), Some(("Q?".into(), "A".into())));
        assert_eq!(parse_synthesis_output("### Question\nQ?\nno answer marker"), None);
        let restated = "Use this format:\n### Question\n...\n### Answer\n...\n\n### Question\nReal?\n### Answer\n Real \n### Notes\nx";
        assert_eq!(parse_synthesis_output(restated), Some(("Real?".into(), "Real".into())));
        assert_eq!(parse_synthesis_output("### Answer\nA\n### Question\nQ?"), None);
        assert_eq!(parse_synthesis_output("### Question\nQ?\n### Answer\n   "), None);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("Event acquisition filter.\nExplanation: it filters"), "Event acquisition filter");
        assert_eq!(normalize_answer("JP1/AJS3"), "JP1/AJS3");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("NEST_EXEC_END_N_NUM\n(explanation)"), "NEST_EXEC_END_N_NUM");
        assert_eq!(normalize_answer("「イベント取得フィルター」。"), "イベント取得フィルター");
        assert_eq!(normalize_answer("a-b_c"), "a-b_c");
        assert_ne!(normalize_answer("Planned Execution"), normalize_answer("planned execution"));
    }

    #[test]
    fn merge_overlays_fragments() {
        let mut base = KnowledgeReport { model_id: "m".into(), notes: vec!["x".into()], ..Default::default() };
        let frag = KnowledgeReport {
            model_id: String::new(),
            elicitation: Some(ElicitationReport {
                accuracy: 1.0,
                evaluated: 1,
                matches: 1,
                skipped_deleted: 0,
                skipped_pending: 0,
                generation_failures: 0,
                uncurated_included: false,
                records: Vec::new(),
            }),
            notes: vec!["x".into(), "y".into()],
            ..Default::default()
        };
        base.merge(frag);
        assert_eq!(base.model_id, "m");
        assert_eq!(base.elicitation_accuracy(), Some(1.0));
        assert_eq!(base.notes, vec!["x", "y"]);
    }
}
