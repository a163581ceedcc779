//! Oracle-injection evaluation: sample answers per setting and seed, judge
//! them against checklists, and aggregate answer success rates.

use std::collections::BTreeSet;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use subtask_diag_gateway::{FinishReason, Gateway, GenerationRequest};
use thiserror::Error;
use tracing::{info, warn};

use crate::data::{dataset_digest, validate_for_setting, Checklist, Dataset, EvalItem};
use crate::digest::json_digest;
use crate::prompt::{build_answer_prompt, build_judge_prompt, PromptError, PromptSetting, PromptTemplateSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("dataset has no items")]
    EmptyDataset,
    #[error("no item is valid for setting {0}")]
    NoValidItems(PromptSetting),
    #[error("every seed failed for item {item_id} under {setting}; last error: {last_error}")]
    AllSeedsFailed {
        item_id: String,
        setting: PromptSetting,
        last_error: String,
    },
    #[error("checklists must not be empty (item {0})")]
    NoChecklists(String),
    #[error("cannot compute ASR over zero answers")]
    NoAnswers,
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub settings: Vec<PromptSetting>,
    pub seeds: Vec<i64>,
    pub temperature: f64,
    pub answer_model: String,
    pub judge_model: String,
    pub max_tokens: u32,
    pub judge_max_tokens: u32,
    pub bottleneck_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            settings: PromptSetting::ALL.to_vec(),
            seeds: (0..10).collect(),
            temperature: 0.7,
            answer_model: "answer-model".into(),
            judge_model: "judge-model".into(),
            max_tokens: 1024,
            judge_max_tokens: 16,
            bottleneck_threshold: 0.05,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidConfig(m));
        if self.settings.is_empty() {
            return bad("settings must not be empty".into());
        }
        if self.settings.iter().collect::<BTreeSet<_>>().len() != self.settings.len() {
            return bad("settings must be distinct".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be >= 0 (got {})", self.temperature));
        }
        if self.max_tokens == 0 || self.judge_max_tokens == 0 {
            return bad("token budgets must be >= 1".into());
        }
        if self.answer_model.is_empty() || self.judge_model.is_empty() {
            return bad("model ids must not be empty".into());
        }
        if !(0.0..=1.0).contains(&self.bottleneck_threshold) {
            return bad(format!("bottleneck threshold must lie in [0, 1] (got {})", self.bottleneck_threshold));
        }
        Ok(())
    }

    /// Enabled settings in canonical order.
    pub fn ordered_settings(&self) -> Vec<PromptSetting> {
        PromptSetting::ALL.into_iter().filter(|s| self.settings.contains(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub item_id: String,
    pub setting: PromptSetting,
    pub seed: i64,
    pub answer_text: String,
    pub finish_reason: Option<FinishReason>,
    pub cached: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AnswerRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVerdict {
    pub checklist_id: String,
    pub condition_id: String,
    pub raw_judge_output: String,
    pub satisfied: bool,
    #[serde(default)]
    pub malformed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedAnswer {
    pub answer: AnswerRecord,
    pub verdicts: Vec<ConditionVerdict>,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeParse {
    Affirmative,
    Negative,
    Malformed,
}

pub fn classify_judge_output(raw: &str) -> JudgeParse {
    let t = raw.trim();
    if t.starts_with("Yes") || t.starts_with("yes") {
        JudgeParse::Affirmative
    } else if t.starts_with("No") || t.starts_with("no") {
        JudgeParse::Negative
    } else {
        JudgeParse::Malformed
    }
}

/// True iff the trimmed output begins with "Yes" or "yes".
pub fn parse_judge_output(raw: &str) -> bool {
    classify_judge_output(raw) == JudgeParse::Affirmative
}

/// OR over checklists of AND over that checklist's condition verdicts. A
/// condition without a verdict counts as unsatisfied.
pub fn checklist_correct(checklists: &[Checklist], verdicts: &[ConditionVerdict]) -> bool {
    checklists.iter().any(|cl| {
        cl.conditions.iter().all(|c| {
            verdicts
                .iter()
                .any(|v| v.checklist_id == cl.id && v.condition_id == c.id && v.satisfied)
        })
    })
}

pub fn compute_asr(judged: &[JudgedAnswer]) -> Result<f64, EvalError> {
    if judged.is_empty() {
        return Err(EvalError::NoAnswers);
    }
    let correct = judged.iter().filter(|j| j.correct).count();
    Ok(correct as f64 / judged.len() as f64)
}

/// One record per seed, sorted by seed. Per-seed failures become failed
/// records; the call errors only when every seed fails.
pub async fn sample_answers(
    gw: &Gateway,
    templates: &PromptTemplateSet,
    item: &EvalItem,
    setting: PromptSetting,
    cfg: &RunConfig,
) -> Result<Vec<AnswerRecord>, EvalError> {
    let prompt = build_answer_prompt(item, setting, templates)?;
    let calls = cfg.seeds.iter().map(|&seed| {
        let req = GenerationRequest::sampled(&cfg.answer_model, prompt.as_str(), cfg.temperature, seed, cfg.max_tokens);
        async move {
            let record = |answer_text: String, finish_reason, cached, error| AnswerRecord {
                item_id: item.id.clone(),
                setting,
                seed,
                answer_text,
                finish_reason,
                cached,
                error,
            };
            match gw.generate(&req).await {
                Ok(r) if r.finish_reason == FinishReason::Error => {
                    record(r.text, Some(r.finish_reason), r.cached, Some("endpoint reported an error finish".into()))
                }
                Ok(r) => record(r.text, Some(r.finish_reason), r.cached, None),
                Err(e) => {
                    warn!(item = %item.id, %setting, seed, error = %e, "generation failed");
                    record(String::new(), None, false, Some(e.to_string()))
                }
            }
        }
    });
    let mut records = join_all(calls).await;
    records.sort_by_key(|r| r.seed);
    if records.iter().all(AnswerRecord::failed) {
        return Err(EvalError::AllSeedsFailed {
            item_id: item.id.clone(),
            setting,
            last_error: records.last().and_then(|r| r.error.clone()).unwrap_or_default(),
        });
    }
    Ok(records)
}

/// Judges every condition of every checklist with greedy decoding.
pub async fn judge_answer(
    gw: &Gateway,
    templates: &PromptTemplateSet,
    answer: AnswerRecord,
    checklists: &[Checklist],
    cfg: &RunConfig,
) -> Result<JudgedAnswer, EvalError> {
    if checklists.is_empty() {
        return Err(EvalError::NoChecklists(answer.item_id.clone()));
    }
    if answer.failed() {
        return Ok(JudgedAnswer { answer, verdicts: Vec::new(), correct: false });
    }
    let mut prompts = Vec::new();
    for cl in checklists {
        for cond in &cl.conditions {
            prompts.push((cl, cond, build_judge_prompt(&answer.answer_text, cond, templates)));
        }
    }
    let calls = prompts.into_iter().map(|(cl, cond, prompt)| async move {
        let verdict = |raw: String, satisfied, malformed, error| ConditionVerdict {
            checklist_id: cl.id.clone(),
            condition_id: cond.id.clone(),
            raw_judge_output: raw,
            satisfied,
            malformed,
            error,
        };
        let prompt = match prompt {
            Ok(p) => p,
            Err(e) => return verdict(String::new(), false, false, Some(e.to_string())),
        };
        let req = GenerationRequest::greedy(&cfg.judge_model, prompt, cfg.judge_max_tokens);
        match gw.generate(&req).await {
            Ok(r) => {
                let parse = classify_judge_output(&r.text);
                verdict(r.text, parse == JudgeParse::Affirmative, parse == JudgeParse::Malformed, None)
            }
            Err(e) => verdict(String::new(), false, false, Some(e.to_string())),
        }
    });
    let verdicts = join_all(calls).await;
    let correct = checklist_correct(checklists, &verdicts);
    Ok(JudgedAnswer { answer, verdicts, correct })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub template_digest: String,
    pub dataset_digest: String,
    pub language_tag: String,
    pub backend: String,
    pub answer_model: String,
    pub judge_model: String,
    pub settings: Vec<PromptSetting>,
    pub seeds: Vec<i64>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemAsr {
    pub item_id: String,
    pub setting: PromptSetting,
    pub correct_count: usize,
    pub total_count: usize,
    pub asr: f64,
    pub failed_generations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub item_id: String,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: PromptSetting,
    /// Mean of per-item ASR; the headline number.
    pub macro_asr: f64,
    /// Correct answers over all answers.
    pub micro_asr: f64,
    pub n_items: usize,
    pub n_answers: usize,
    pub n_correct: usize,
    pub skipped: Vec<SkippedItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    GenerationFailed,
    Truncated,
    JudgeFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub item_id: String,
    pub setting: PromptSetting,
    pub seed: i64,
    pub kind: FlagKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_id: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    Elicitation,
    Reasoning,
    Composing,
}

impl Subtask {
    pub fn as_str(self) -> &'static str {
        match self {
            Subtask::Elicitation => "elicitation",
            Subtask::Reasoning => "reasoning",
            Subtask::Composing => "composing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub elicitation_gap: f64,
    pub reasoning_gap: f64,
    pub composing_gap: f64,
    pub threshold: f64,
    pub bottlenecks: Vec<Subtask>,
}

/// Gaps between successive oracle settings; a gap above `threshold` marks
/// that subtask as a bottleneck.
pub fn diagnose(no_oracle: f64, elicitation: f64, reasoning: f64, threshold: f64) -> Diagnosis {
    let gaps = [
        (Subtask::Elicitation, elicitation - no_oracle),
        (Subtask::Reasoning, reasoning - elicitation),
        (Subtask::Composing, 1.0 - reasoning),
    ];
    Diagnosis {
        elicitation_gap: gaps[0].1,
        reasoning_gap: gaps[1].1,
        composing_gap: gaps[2].1,
        threshold,
        bottlenecks: gaps.iter().filter(|(_, g)| *g > threshold).map(|(s, _)| *s).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrReport {
    pub manifest: RunManifest,
    pub settings: Vec<SettingSummary>,
    pub items: Vec<ItemAsr>,
    pub malformed_judge_outputs: usize,
    pub flagged: Vec<Flag>,
    pub diagnosis: Option<Diagnosis>,
    pub notes: Vec<String>,
}

impl AsrReport {
    pub fn setting(&self, setting: PromptSetting) -> Option<&SettingSummary> {
        self.settings.iter().find(|s| s.setting == setting)
    }

    /// Macro-averaged ASR for `setting`, if it was evaluated.
    pub fn asr(&self, setting: PromptSetting) -> Option<f64> {
        self.setting(setting).map(|s| s.macro_asr)
    }
}

/// Full output of a run: the report plus every judged answer.
#[derive(Debug, Clone)]
pub struct OracleRun {
    pub report: AsrReport,
    pub judged: Vec<JudgedAnswer>,
}

pub const GUIDANCE_NOTE: &str =
    "guidance conclusions are placed after the question in oracle-reasoning prompts; other conclusions precede it";

pub async fn run_oracle_eval(
    gw: &Gateway,
    templates: &PromptTemplateSet,
    ds: &Dataset,
    cfg: &RunConfig,
) -> Result<OracleRun, EvalError> {
    cfg.validate()?;
    if ds.items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let settings = cfg.ordered_settings();

    let mut plan: Vec<(PromptSetting, Vec<&EvalItem>, Vec<SkippedItem>)> = Vec::new();
    for &setting in &settings {
        let mut valid = Vec::new();
        let mut skipped = Vec::new();
        for item in &ds.items {
            let v = validate_for_setting(item, setting);
            if v.valid {
                valid.push(item);
            } else {
                warn!(item = %item.id, %setting, reasons = ?v.reasons, "skipping item");
                skipped.push(SkippedItem { item_id: item.id.clone(), reasons: v.reasons });
            }
        }
        if valid.is_empty() {
            return Err(EvalError::NoValidItems(setting));
        }
        plan.push((setting, valid, skipped));
    }

    let tasks = plan.iter().flat_map(|(setting, items, _)| {
        items.iter().map(move |item| async move {
            let answers = sample_answers(gw, templates, item, *setting, cfg).await?;
            let judged = join_all(answers.into_iter().map(|a| judge_answer(gw, templates, a, &item.checklists, cfg))).await;
            judged.into_iter().collect::<Result<Vec<_>, _>>()
        })
    });
    let results = join_all(tasks).await;
    let mut per_item = Vec::with_capacity(results.len());
    for r in results {
        per_item.push(r?);
    }

    let mut all_judged = Vec::new();
    let mut summaries = Vec::new();
    let mut flagged = Vec::new();
    let mut malformed = 0;
    let mut cursor = per_item.into_iter();
    for (setting, valid, skipped) in plan {
        let mut item_asrs = Vec::with_capacity(valid.len());
        for _ in &valid {
            let judged = cursor.next().expect("one result per planned item");
            let first = &judged[0].answer;
            let correct_count = judged.iter().filter(|j| j.correct).count();
            let failed_generations = judged.iter().filter(|j| j.answer.failed()).count();
            item_asrs.push(ItemAsr {
                item_id: first.item_id.clone(),
                setting,
                correct_count,
                total_count: judged.len(),
                asr: compute_asr(&judged)?,
                failed_generations,
            });
            for j in &judged {
                let a = &j.answer;
                let flag = |kind, condition_id, detail: String| Flag {
                    item_id: a.item_id.clone(),
                    setting,
                    seed: a.seed,
                    kind,
                    condition_id,
                    detail,
                };
                if let Some(e) = &a.error {
                    flagged.push(flag(FlagKind::GenerationFailed, None, e.clone()));
                } else if a.finish_reason == Some(FinishReason::Length) {
                    flagged.push(flag(FlagKind::Truncated, None, "answer hit the token budget".into()));
                }
                for v in &j.verdicts {
                    malformed += usize::from(v.malformed);
                    if let Some(e) = &v.error {
                        flagged.push(flag(FlagKind::JudgeFailed, Some(v.condition_id.clone()), e.clone()));
                    }
                }
            }
            all_judged.extend(judged);
        }
        let n_answers: usize = item_asrs.iter().map(|i| i.total_count).sum();
        let n_correct: usize = item_asrs.iter().map(|i| i.correct_count).sum();
        let macro_asr = item_asrs.iter().map(|i| i.asr).sum::<f64>() / item_asrs.len() as f64;
        info!(%setting, macro_asr, "setting evaluated");
        summaries.push((
            SettingSummary {
                setting,
                macro_asr,
                micro_asr: n_correct as f64 / n_answers as f64,
                n_items: item_asrs.len(),
                n_answers,
                n_correct,
                skipped,
            },
            item_asrs,
        ));
    }

    let asr_of = |s: PromptSetting| summaries.iter().find(|(x, _)| x.setting == s).map(|(x, _)| x.macro_asr);
    let diagnosis = match (
        asr_of(PromptSetting::NoOracle),
        asr_of(PromptSetting::OracleElicitation),
        asr_of(PromptSetting::OracleReasoning),
    ) {
        (Some(n), Some(e), Some(r)) => Some(diagnose(n, e, r, cfg.bottleneck_threshold)),
        _ => None,
    };

    let (settings_out, item_rows): (Vec<_>, Vec<_>) = summaries.into_iter().unzip();
    let manifest = RunManifest {
        config_digest: json_digest(cfg),
        template_digest: templates.digest(),
        dataset_digest: dataset_digest(ds),
        language_tag: templates.language_tag.clone(),
        backend: gw.backend_name().to_string(),
        answer_model: cfg.answer_model.clone(),
        judge_model: cfg.judge_model.clone(),
        settings,
        seeds: cfg.seeds.clone(),
        temperature: cfg.temperature,
    };
    let report = AsrReport {
        manifest,
        settings: settings_out,
        items: item_rows.into_iter().flatten().collect(),
        malformed_judge_outputs: malformed,
        flagged,
        diagnosis,
        notes: vec![GUIDANCE_NOTE.to_string()],
    };
    Ok(OracleRun { report, judged: all_judged })
}

/// CSV rows `(item_id, setting, seed, correct)`.
pub fn answers_csv(judged: &[JudgedAnswer]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["item_id", "setting", "seed", "correct"]).expect("in-memory write");
    for j in judged {
        let a = &j.answer;
        w.write_record([a.item_id.as_str(), a.setting.as_str(), &a.seed.to_string(), &j.correct.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Condition;

    fn cl(id: &str, conds: &[&str]) -> Checklist {
        Checklist {
            id: id.into(),
            conditions: conds.iter().map(|c| Condition { id: (*c).into(), text: format!("cond {c}") }).collect(),
        }
    }

    fn v(checklist: &str, cond: &str, satisfied: bool) -> ConditionVerdict {
        ConditionVerdict {
            checklist_id: checklist.into(),
            condition_id: cond.into(),
            raw_judge_output: if satisfied { "Yes" } else { "No" }.into(),
            satisfied,
            malformed: false,
            error: None,
        }
    }

    #[test]
    fn judge_parse_table() {
        let table = [
            ("Yes", JudgeParse::Affirmative),
            ("yes", JudgeParse::Affirmative),
            ("  Yes.\n", JudgeParse::Affirmative),
            ("yes, it does", JudgeParse::Affirmative),
            ("No", JudgeParse::Negative),
            ("no", JudgeParse::Negative),
            (" No, it does not", JudgeParse::Negative),
            ("Maybe yes", JudgeParse::Malformed),
            ("", JudgeParse::Malformed),
            ("YES", JudgeParse::Malformed),
            ("はい", JudgeParse::Malformed),
        ];
        for (raw, want) in table {
            assert_eq!(classify_judge_output(raw), want, "{raw:?}");
            assert_eq!(parse_judge_output(raw), want == JudgeParse::Affirmative);
        }
    }

    #[test]
    fn or_of_ands() {
        let lists = [cl("A", &["c1", "c2"]), cl("B", &["c3"])];
        assert!(checklist_correct(&lists, &[v("A", "c1", true), v("A", "c2", false), v("B", "c3", true)]));
        assert!(!checklist_correct(&lists, &[v("A", "c1", true), v("A", "c2", false), v("B", "c3", false)]));
        let single = [cl("A", &["c1", "c2"])];
        assert!(checklist_correct(&single, &[v("A", "c1", true), v("A", "c2", true)]));
        assert!(!checklist_correct(&single, &[v("A", "c1", true)]));
    }

    fn judged(correct: bool) -> JudgedAnswer {
        JudgedAnswer {
            answer: AnswerRecord {
                item_id: "q".into(),
                setting: PromptSetting::NoOracle,
                seed: 0,
                answer_text: String::new(),
                finish_reason: Some(FinishReason::Stop),
                cached: false,
                error: None,
            },
            verdicts: Vec::new(),
            correct,
        }
    }

    #[test]
    fn asr_arithmetic() {
        let mk = |k: usize| (0..10).map(|i| judged(i < k)).collect::<Vec<_>>();
        assert_eq!(compute_asr(&mk(4)).unwrap(), 0.4);
        assert_eq!(compute_asr(&mk(10)).unwrap(), 1.0);
        assert_eq!(compute_asr(&mk(0)).unwrap(), 0.0);
        assert!(matches!(compute_asr(&[]), Err(EvalError::NoAnswers)));
    }

    #[test]
    fn diagnosis_rules() {
        let d = diagnose(0.2, 0.6, 0.8, 0.05);
        assert!((d.elicitation_gap - 0.4).abs() < 1e-12);
        assert!((d.reasoning_gap - 0.2).abs() < 1e-12);
        assert!((d.composing_gap - 0.2).abs() < 1e-12);
        assert_eq!(d.bottlenecks, vec![Subtask::Elicitation, Subtask::Reasoning, Subtask::Composing]);
        let d = diagnose(0.9, 0.9, 0.92, 0.05);
        assert_eq!(d.bottlenecks, vec![Subtask::Composing]);
        assert!((d.composing_gap - 0.08).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = [
            RunConfig { seeds: vec![], ..Default::default() },
            RunConfig { seeds: vec![1, 1], ..Default::default() },
            RunConfig { temperature: -0.1, ..Default::default() },
            RunConfig { settings: vec![], ..Default::default() },
            RunConfig { settings: vec![PromptSetting::NoOracle; 2], ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn csv_rows() {
        let csv = answers_csv(&[judged(true), judged(false)]);
        assert_eq!(csv, "item_id,setting,seed,correct\nq,no-oracle,0,true\nq,no-oracle,0,false\n");
    }
}
