//! Synthetic micro-domain datasets and a scripted model with independent
//! elicitation, reasoning and composing knobs.
//!
//! Each item is a chain of `hops` facts about fictional components. The
//! derived conclusion walks the chain, and the single checklist asks for every
//! component after the starting one. The scripted model decides which stages
//! remain from what the prompt contains, then flips one deterministic coin per
//! remaining stage, keyed by `(item, seed, stage)`. Because flips are shared
//! across settings, ASR(no-oracle) <= ASR(elicitation) <= ASR(reasoning) holds
//! exactly, and expected ASR is the product of the remaining probabilities.

use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtask_diag_gateway::{
    Backend, ConcurrencyProbe, DecodeMode, FinishReason, GatewayError, GenerationRequest, GenerationResult,
    TokenLogProbs,
};
use thiserror::Error;

use crate::data::{
    fact_id, Checklist, Condition, CurationStatus, Dataset, EvalItem, KnowledgeQA, OracleConclusion, OracleFact,
};
use crate::prompt::PromptSetting;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary has {available} distinct tokens but {needed} are required")]
    VocabularyTooSmall { needed: usize, available: usize },
    #[error("invalid capability spec: {0}")]
    InvalidSpec(String),
    #[error("prompt is not linked to a simulator item")]
    Unlinked,
    #[error("unknown simulator item \"{0}\"")]
    UnknownItem(String),
    #[error("judge prompt is missing the {0} section")]
    MissingSection(&'static str),
}

/// (statement verb, question form with `{s}` for the subject)
const RELATIONS: [(&str, &str); 8] = [
    ("delegates scheduling to", "Which component does {s} delegate scheduling to?"),
    ("writes its status to", "Which component does {s} write its status to?"),
    ("is monitored by", "Which component monitors {s}?"),
    ("reads its definitions from", "Which component does {s} read its definitions from?"),
    ("forwards events to", "Which component does {s} forward events to?"),
    ("depends on", "Which component does {s} depend on?"),
    ("is started by", "Which component starts {s}?"),
    ("stores its history in", "Which component does {s} store its history in?"),
];

const ITEM_MARKER: &str = "<!-- sim:item=";
const FACT_MARKER: &str = "<!-- sim:fact=";
const DISTRACTOR: &str = "an unrelated component";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_items: usize,
    /// Chain facts plus unrelated background facts; at least `hops`.
    pub facts_per_item: usize,
    /// Facts combined per conclusion.
    pub hops: usize,
    pub rng_seed: u64,
    pub vocabulary: Vec<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_items: 10,
            facts_per_item: 2,
            hops: 2,
            rng_seed: 0,
            vocabulary: default_vocabulary(),
        }
    }
}

impl SimConfig {
    pub fn new(n_items: usize, hops: usize, rng_seed: u64) -> Self {
        Self { n_items, hops, facts_per_item: hops, rng_seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_items == 0 {
            return Err(SimError::InvalidConfig("n_items must be >= 1".into()));
        }
        if self.hops == 0 {
            return Err(SimError::InvalidConfig("hops must be >= 1".into()));
        }
        if self.facts_per_item < self.hops {
            return Err(SimError::InvalidConfig(format!(
                "facts_per_item ({}) must be >= hops ({})",
                self.facts_per_item, self.hops
            )));
        }
        Ok(())
    }

    fn tokens_needed(&self) -> usize {
        self.n_items * (self.hops + 1 + 2 * (self.facts_per_item - self.hops))
    }
}

/// Fictional component names such as `ZORVEX_NET_3`.
pub fn default_vocabulary() -> Vec<String> {
    const PREFIXES: [&str; 16] = [
        "ZORVEX", "QUILLON", "MARBEK", "TESSIL", "VORNAK", "PELDRA", "KASTOR", "LUMEX", "NOVRIN", "ORTHAN", "SKELD",
        "TAVRIS", "BRENNIK", "CALDUS", "DREVAN", "FYRLO",
    ];
    const SUFFIXES: [&str; 8] = ["NET", "COND", "MGR", "AGENT", "QUEUE", "SCHED", "FILTER", "LOG"];
    let mut out = Vec::with_capacity(PREFIXES.len() * SUFFIXES.len() * 9);
    for p in PREFIXES {
        for s in SUFFIXES {
            for d in 1..=9 {
                out.push(format!("{p}_{s}_{d}"));
            }
        }
    }
    out
}

fn chain_sentence(entities: &[String], verbs: &[&str]) -> String {
    let mut s = format!("{} {} {}", entities[0], verbs[0], entities[1]);
    for (verb, e) in verbs.iter().zip(entities.iter()).skip(1).map(|(v, _)| v).zip(entities.iter().skip(2)) {
        s.push_str(&format!(", which {verb} {e}"));
    }
    s.push('.');
    s
}

/// Generates a dataset whose structure is a pure function of `cfg`.
pub fn generate_sim_dataset(cfg: &SimConfig) -> Result<Dataset, SimError> {
    cfg.validate()?;
    let mut vocab = cfg.vocabulary.clone();
    vocab.sort();
    vocab.dedup();
    let needed = cfg.tokens_needed();
    if vocab.len() < needed {
        return Err(SimError::VocabularyTooSmall { needed, available: vocab.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    vocab.shuffle(&mut rng);
    let mut tokens = vocab.into_iter();

    let mut items = Vec::with_capacity(cfg.n_items);
    let mut knowledge_qas = Vec::new();
    for i in 0..cfg.n_items {
        let id = format!("sim-{:04}", i + 1);
        let entities: Vec<String> = tokens.by_ref().take(cfg.hops + 1).collect();
        let relations: Vec<(&str, &str)> = (0..cfg.hops).map(|_| RELATIONS[rng.random_range(0..RELATIONS.len())]).collect();

        let mut facts = Vec::with_capacity(cfg.facts_per_item);
        let mut fact_questions = Vec::with_capacity(cfg.facts_per_item);
        for (h, (verb, question)) in relations.iter().enumerate() {
            let (s, o) = (&entities[h], &entities[h + 1]);
            let title = rng.random_bool(0.5).then(|| format!("About {s}"));
            facts.push(OracleFact::new(format!("{s} {verb} {o}."), title, true));
            fact_questions.push((question.replace("{s}", s), o.clone()));
        }
        for _ in cfg.hops..cfg.facts_per_item {
            let s = tokens.next().expect("vocabulary size checked");
            let o = tokens.next().expect("vocabulary size checked");
            let (verb, question) = RELATIONS[rng.random_range(0..RELATIONS.len())];
            facts.push(OracleFact::new(format!("{s} {verb} {o}."), None, false));
            fact_questions.push((question.replace("{s}", &s), o));
        }

        let verbs: Vec<&str> = relations.iter().map(|(v, _)| *v).collect();
        let conclusion = chain_sentence(&entities, &verbs);
        let question = format!(
            "Starting from {}, which components does the chain pass through, and where does it end? {ITEM_MARKER}{id} -->",
            entities[0]
        );
        let conditions = entities[1..]
            .iter()
            .enumerate()
            .map(|(k, e)| Condition { id: format!("c{}", k + 1), text: format!("The answer names \"{e}\".") })
            .collect();

        for (k, (q, answer)) in fact_questions.into_iter().enumerate() {
            let fid = fact_id(&id, k);
            knowledge_qas.push(KnowledgeQA {
                id: format!("{fid}/qa"),
                source_fact_id: fid.clone(),
                question: format!("{q} {FACT_MARKER}{fid} -->"),
                answer,
                curation_status: CurationStatus::Approved,
                raw_output: None,
            });
        }

        items.push(EvalItem {
            id,
            question,
            checklists: vec![Checklist { id: "A".into(), conditions }],
            oracle_conclusions: vec![OracleConclusion { text: conclusion, is_guidance: false }],
            oracle_facts: facts,
        });
    }
    Ok(Dataset { items, knowledge_qas, metadata: Default::default() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Elicit,
    Reason,
    Compose,
}

impl Stage {
    fn key(self) -> &'static str {
        match self {
            Stage::Elicit => "elicit",
            Stage::Reason => "reason",
            Stage::Compose => "compose",
        }
    }

    /// Stages an answer prompt leaves to the model.
    pub fn remaining(setting: PromptSetting) -> &'static [Stage] {
        match setting {
            PromptSetting::NoOracle => &[Stage::Elicit, Stage::Reason, Stage::Compose],
            PromptSetting::OracleElicitation => &[Stage::Reason, Stage::Compose],
            PromptSetting::OracleReasoning => &[Stage::Compose],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapabilitySpec {
    pub p_elicit: f64,
    pub p_reason: f64,
    pub p_compose: f64,
}

impl CapabilitySpec {
    pub fn new(p_elicit: f64, p_reason: f64, p_compose: f64) -> Result<Self, SimError> {
        let spec = Self { p_elicit, p_reason, p_compose };
        for (name, p) in [("p_elicit", p_elicit), ("p_reason", p_reason), ("p_compose", p_compose)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidSpec(format!("{name}={p} is outside [0, 1]")));
            }
        }
        Ok(spec)
    }

    pub fn perfect() -> Self {
        Self { p_elicit: 1.0, p_reason: 1.0, p_compose: 1.0 }
    }

    pub fn probability(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Elicit => self.p_elicit,
            Stage::Reason => self.p_reason,
            Stage::Compose => self.p_compose,
        }
    }

    /// Expected ASR: product of the probabilities of the remaining stages.
    pub fn expected_asr(&self, setting: PromptSetting) -> f64 {
        Stage::remaining(setting).iter().map(|s| self.probability(*s)).product()
    }
}

impl fmt::Display for CapabilitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.p_elicit, self.p_reason, self.p_compose)
    }
}

impl std::str::FromStr for CapabilitySpec {
    type Err = SimError;

    /// Parses `p_elicit,p_reason,p_compose`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SimError::InvalidSpec(format!("\"{s}\": {e}")))?;
        match parts.as_slice() {
            [e, r, c] => CapabilitySpec::new(*e, *r, *c),
            _ => Err(SimError::InvalidSpec(format!("\"{s}\": expected three comma-separated probabilities"))),
        }
    }
}

/// Uniform value in [0, 1) derived from SHA-256 of `(key, seed, stage)`.
pub fn coin(key: &str, seed: i64, stage: Stage) -> f64 {
    let digest = Sha256::digest(format!("{key}\u{1f}{seed}\u{1f}{}", stage.key()).as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn stage_succeeds(key: &str, seed: i64, stage: Stage, spec: &CapabilitySpec) -> bool {
    coin(key, seed, stage) < spec.probability(stage)
}

fn marker_value<'a>(prompt: &'a str, marker: &str) -> Option<&'a str> {
    let start = prompt.find(marker)? + marker.len();
    let end = prompt[start..].find(" -->")?;
    Some(prompt[start..start + end].trim())
}

/// Stages left to the model, judged from which oracle text the prompt carries.
pub fn remaining_stages(prompt: &str, item: &EvalItem) -> &'static [Stage] {
    if item.oracle_conclusions.iter().any(|c| prompt.contains(&c.text)) {
        Stage::remaining(PromptSetting::OracleReasoning)
    } else if item.oracle_facts.iter().any(|f| prompt.contains(&f.text)) {
        Stage::remaining(PromptSetting::OracleElicitation)
    } else {
        Stage::remaining(PromptSetting::NoOracle)
    }
}

fn required_tokens(item: &EvalItem) -> Vec<String> {
    item.checklists
        .iter()
        .flat_map(|c| &c.conditions)
        .map(|c| condition_token(&c.text).to_string())
        .collect()
}

fn start_entity(item: &EvalItem) -> &str {
    item.oracle_facts
        .first()
        .and_then(|f| f.body().split_whitespace().next())
        .unwrap_or("the starting component")
}

fn answer_sentence(start: &str, tokens: &[String]) -> String {
    format!("Starting from {start}, the chain reaches {}.", tokens.join(", then "))
}

/// Scripted answer to an answer prompt for a simulator item.
pub fn scripted_generate(prompt: &str, ds: &Dataset, spec: &CapabilitySpec, seed: i64) -> Result<String, SimError> {
    let item_id = marker_value(prompt, ITEM_MARKER).ok_or(SimError::Unlinked)?;
    let item = ds.item(item_id).ok_or_else(|| SimError::UnknownItem(item_id.to_string()))?;
    let stages = remaining_stages(prompt, item);
    let mut tokens = required_tokens(item);
    let ok = stages.iter().all(|s| stage_succeeds(&item.id, seed, *s, spec));
    if !ok && !tokens.is_empty() {
        let drop = (coin(&item.id, seed, Stage::Compose) * tokens.len() as f64) as usize % tokens.len();
        tokens[drop] = DISTRACTOR.to_string();
    }
    Ok(answer_sentence(start_entity(item), &tokens))
}

/// First quoted span in a condition (ASCII or typographic quotes), else the
/// whole trimmed text.
pub fn condition_token(criteria: &str) -> &str {
    for (open, close) in [('"', '"'), ('“', '”')] {
        if let Some(start) = criteria.find(open) {
            let body = &criteria[start + open.len_utf8()..];
            if let Some(end) = body.find(close) {
                return &body[..end];
            }
        }
    }
    criteria.trim()
}

fn is_token_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Whole-token containment: the match may not be glued to other identifier chars.
fn contains_token(haystack: &str, token: &str) -> bool {
    if token.is_empty() {
        return false;
    }
    haystack.match_indices(token).any(|(i, _)| {
        let before = haystack[..i].chars().next_back().is_none_or(|c| !is_token_char(c));
        let after = haystack[i + token.len()..].chars().next().is_none_or(|c| !is_token_char(c));
        before && after
    })
}

const TARGET_HEADERS: [&str; 2] = ["## Evaluation Target", "## 評価対象"];
const CRITERIA_HEADERS: [&str; 2] = ["## Evaluation Criteria", "## 評価基準"];
const ANSWER_HEADERS: [&str; 2] = ["## Answer", "## 回答"];

fn is_header(line: &str, headers: &[&str]) -> bool {
    headers.contains(&line.trim_end())
}

/// Splits a judge prompt into (evaluation target, criteria).
pub fn judge_sections(prompt: &str) -> Result<(String, String), SimError> {
    let lines: Vec<&str> = prompt.lines().collect();
    let target = lines
        .iter()
        .position(|l| is_header(l, &TARGET_HEADERS))
        .ok_or(SimError::MissingSection("evaluation target"))?;
    let answer = lines
        .iter()
        .rposition(|l| is_header(l, &ANSWER_HEADERS))
        .filter(|a| *a > target)
        .ok_or(SimError::MissingSection("answer"))?;
    let criteria = lines[..answer]
        .iter()
        .rposition(|l| is_header(l, &CRITERIA_HEADERS))
        .filter(|c| *c > target)
        .ok_or(SimError::MissingSection("evaluation criteria"))?;
    let join = |from: usize, to: usize| lines[from..to].join("\n").trim_end().to_string();
    Ok((join(target + 1, criteria), join(criteria + 1, answer)))
}

/// "Yes" iff the condition's token appears in the evaluated answer.
pub fn scripted_judge(prompt: &str) -> Result<String, SimError> {
    let (answer, criteria) = judge_sections(prompt)?;
    let token = condition_token(&criteria);
    Ok(if contains_token(&answer, token) { "Yes" } else { "No" }.to_string())
}

fn is_judge_prompt(prompt: &str) -> bool {
    prompt.lines().any(|l| is_header(l, &TARGET_HEADERS))
}

/// Splits a simulator fact body `S verb O.` into its question and object.
fn fact_question(fact: &OracleFact) -> Option<(String, String)> {
    let body = fact.body().trim().strip_suffix('.')?;
    RELATIONS.iter().find_map(|(verb, question)| {
        let (s, o) = body.split_once(&format!(" {verb} "))?;
        Some((question.replace("{s}", s), o.to_string()))
    })
}

/// Backend answering every prompt the harness builds for simulator data.
pub struct SimBackend {
    ds: Arc<Dataset>,
    spec: CapabilitySpec,
    logprob: Option<f64>,
    probe: Arc<ConcurrencyProbe>,
}

impl SimBackend {
    pub fn new(ds: Arc<Dataset>, spec: CapabilitySpec) -> Self {
        Self { ds, spec, logprob: None, probe: ConcurrencyProbe::new() }
    }

    /// Every whitespace token scores `logprob` when asked for token scores.
    pub fn with_logprob(mut self, logprob: f64) -> Self {
        self.logprob = Some(logprob);
        self
    }

    pub fn probe(&self) -> Arc<ConcurrencyProbe> {
        Arc::clone(&self.probe)
    }

    pub fn respond(&self, prompt: &str, seed: i64) -> Result<String, SimError> {
        if is_judge_prompt(prompt) {
            return scripted_judge(prompt);
        }
        if prompt.contains(ITEM_MARKER) {
            return scripted_generate(prompt, &self.ds, &self.spec, seed);
        }
        if let Some(fid) = marker_value(prompt, FACT_MARKER) {
            let (_, fact) = self.ds.facts().find(|(id, _)| id == fid).ok_or_else(|| SimError::UnknownItem(fid.into()))?;
            let (_, answer) = fact_question(fact).ok_or(SimError::Unlinked)?;
            return Ok(if stage_succeeds(fid, 0, Stage::Elicit, &self.spec) {
                format!("{answer}\nThis component is named in the product documentation.")
            } else {
                "I could not find that component.".to_string()
            });
        }
        // QA synthesis: the prompt embeds a fact verbatim.
        let (fid, fact) = self
            .ds
            .facts()
            .filter(|(_, f)| prompt.contains(&f.text))
            .max_by_key(|(_, f)| f.text.len())
            .ok_or(SimError::Unlinked)?;
        let (question, answer) = fact_question(fact).ok_or(SimError::Unlinked)?;
        Ok(format!("### Question\n{question} {FACT_MARKER}{fid} -->\n### Answer\n{answer}"))
    }
}

#[async_trait]
impl Backend for SimBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        let _guard = self.probe.enter();
        let seed = match req.decode_mode {
            DecodeMode::Sampled => req.seed,
            DecodeMode::Greedy => 0,
        };
        let text = self.respond(&req.prompt, seed).map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        let token_count = text.split_whitespace().count() as u32;
        Ok(GenerationResult { text, finish_reason: FinishReason::Stop, token_count, cached: false })
    }

    async fn score_tokens(&self, _model_id: &str, text: &str) -> Result<TokenLogProbs, GatewayError> {
        let _guard = self.probe.enter();
        let lp = self.logprob.ok_or_else(|| GatewayError::Unsupported("token scoring".into()))?;
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let n = tokens.len();
        TokenLogProbs::new(tokens, vec![Some(lp); n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset_stats;
    use crate::prompt::{build_answer_prompt, build_judge_prompt, PromptTemplateSet};

    fn ds(n: usize) -> Dataset {
        generate_sim_dataset(&SimConfig::new(n, 2, 0)).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimConfig::new(1, 2, 0);
        assert_eq!(generate_sim_dataset(&cfg).unwrap(), generate_sim_dataset(&cfg).unwrap());
        let other = SimConfig::new(1, 2, 1);
        assert_ne!(generate_sim_dataset(&cfg).unwrap(), generate_sim_dataset(&other).unwrap());
    }

    #[test]
    fn construction_shape() {
        let d = ds(10);
        let stats = dataset_stats(&d);
        assert_eq!(stats.n_items, 10);
        assert_eq!(stats.avg_facts_per_item, 2.0);
        assert_eq!(stats.avg_checklists_per_item, 1.0);
        for item in &d.items {
            let conclusion = &item.oracle_conclusions[0].text;
            for cond in &item.checklists[0].conditions {
                assert!(conclusion.contains(condition_token(&cond.text)), "{conclusion} / {}", cond.text);
            }
        }
    }

    #[test]
    fn background_facts_are_not_mandatory() {
        let cfg = SimConfig { facts_per_item: 4, ..SimConfig::new(3, 2, 5) };
        let d = generate_sim_dataset(&cfg).unwrap();
        let stats = dataset_stats(&d);
        assert_eq!(stats.avg_facts_per_item, 4.0);
        assert_eq!(stats.mandatory_fact_ratio, 0.5);
        assert_eq!(d.knowledge_qas.len(), 12);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(generate_sim_dataset(&SimConfig::new(1, 0, 0)), Err(SimError::InvalidConfig(_))));
        let tiny = SimConfig { vocabulary: vec!["A".into(), "B".into()], ..SimConfig::new(1, 2, 0) };
        assert_eq!(
            generate_sim_dataset(&tiny).unwrap_err(),
            SimError::VocabularyTooSmall { needed: 3, available: 2 }
        );
    }

    #[test]
    fn coin_is_uniform_enough_and_stable() {
        assert_eq!(coin("x", 1, Stage::Elicit), coin("x", 1, Stage::Elicit));
        assert_ne!(coin("x", 1, Stage::Elicit), coin("x", 1, Stage::Reason));
        let n = 10_000;
        let mean: f64 = (0..n).map(|s| coin("item", s, Stage::Compose)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn perfect_and_elicitation_deficit() {
        let d = ds(5);
        let en = PromptTemplateSet::builtin("en").unwrap();
        let perfect = CapabilitySpec::perfect();
        let no_elicit = CapabilitySpec::new(0.0, 1.0, 1.0).unwrap();
        for item in &d.items {
            let want = answer_sentence(start_entity(item), &required_tokens(item));
            for setting in PromptSetting::ALL {
                let p = build_answer_prompt(item, setting, &en).unwrap();
                assert_eq!(scripted_generate(&p, &d, &perfect, 3).unwrap(), want);
            }
            let none = build_answer_prompt(item, PromptSetting::NoOracle, &en).unwrap();
            let elic = build_answer_prompt(item, PromptSetting::OracleElicitation, &en).unwrap();
            for seed in 0..10 {
                assert_ne!(scripted_generate(&none, &d, &no_elicit, seed).unwrap(), want);
                assert_eq!(scripted_generate(&elic, &d, &no_elicit, seed).unwrap(), want);
            }
        }
    }

    #[test]
    fn distractor_misses_exactly_one_token() {
        let d = ds(3);
        let en = PromptTemplateSet::builtin("en").unwrap();
        let never = CapabilitySpec::new(0.0, 0.0, 0.0).unwrap();
        for item in &d.items {
            let p = build_answer_prompt(item, PromptSetting::NoOracle, &en).unwrap();
            let out = scripted_generate(&p, &d, &never, 0).unwrap();
            let missing = required_tokens(item).iter().filter(|t| !contains_token(&out, t)).count();
            assert_eq!(missing, 1, "{out}");
        }
    }

    #[test]
    fn unlinked_prompt_errors() {
        assert_eq!(scripted_generate("just a question", &ds(1), &CapabilitySpec::perfect(), 0), Err(SimError::Unlinked));
    }

    #[test]
    fn judge_containment() {
        for lang in ["en", "ja"] {
            let t = PromptTemplateSet::builtin(lang).unwrap();
            let cond = Condition { id: "c".into(), text: "The answer names \"WAIT_COND_7\".".into() };
            let yes = build_judge_prompt("Use WAIT_COND_7 to order jobs.", &cond, &t).unwrap();
            assert_eq!(scripted_judge(&yes).unwrap(), "Yes");
            let no = build_judge_prompt("Use an unrelated component.", &cond, &t).unwrap();
            assert_eq!(scripted_judge(&no).unwrap(), "No");
            let glued = build_judge_prompt("Use WAIT_COND_72.", &cond, &t).unwrap();
            assert_eq!(scripted_judge(&glued).unwrap(), "No");
        }
        assert!(matches!(scripted_judge("no sections here"), Err(SimError::MissingSection(_))));
    }

    #[test]
    fn spec_parsing() {
        let s: CapabilitySpec = "0.3,0.8,0.95".parse().unwrap();
        assert_eq!(s, CapabilitySpec { p_elicit: 0.3, p_reason: 0.8, p_compose: 0.95 });
        assert!("0.3,0.8".parse::<CapabilitySpec>().is_err());
        assert!("0.3,1.8,0.1".parse::<CapabilitySpec>().is_err());
        assert!((s.expected_asr(PromptSetting::NoOracle) - 0.228).abs() < 1e-12);
        assert!((s.expected_asr(PromptSetting::OracleElicitation) - 0.76).abs() < 1e-12);
        assert_eq!(s.expected_asr(PromptSetting::OracleReasoning), 0.95);
    }

    #[test]
    fn fact_questions_parse_back() {
        let d = ds(4);
        for (_, fact) in d.facts() {
            let (q, a) = fact_question(fact).unwrap();
            assert!(q.ends_with('?'));
            assert!(fact.text.contains(&a));
        }
    }
}
