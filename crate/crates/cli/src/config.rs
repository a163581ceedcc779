//! Harness configuration: a TOML file overlaid by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use subtask_diag_core::oracle::RunConfig;
use subtask_diag_core::prompt::PromptSetting;
use subtask_diag_core::sim::CapabilitySpec;
use subtask_diag_gateway::BackendConfig;

use crate::error::CliError;

pub const API_KEY_ENV: &str = "SUBTASK_DIAG_API_KEY";
pub const BASE_URL_ENV: &str = "SUBTASK_DIAG_BASE_URL";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackendKind {
    Http,
    /// Simulator-backed model; `logprob` enables constant token scores.
    Scripted { logprob: Option<f64> },
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendKind::Http),
            "scripted" => Ok(BackendKind::Scripted { logprob: None }),
            _ => {
                let value = s
                    .strip_prefix("scripted-logprob=")
                    .ok_or_else(|| format!("unknown backend \"{s}\" (expected http, scripted or scripted-logprob=<x>)"))?;
                let lp: f64 = value.parse().map_err(|e| format!("bad logprob \"{value}\": {e}"))?;
                if !(lp <= 0.0 && lp.is_finite()) {
                    return Err(format!("logprob must be finite and <= 0 (got {lp})"));
                }
                Ok(BackendKind::Scripted { logprob: Some(lp) })
            }
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendKind::Http => f.write_str("http"),
            BackendKind::Scripted { logprob: None } => f.write_str("scripted"),
            BackendKind::Scripted { logprob: Some(lp) } => write!(f, "scripted-logprob={lp}"),
        }
    }
}

/// Parses `a..b` (inclusive) or a comma-separated list.
pub fn parse_seeds(s: &str) -> Result<Vec<i64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let start: i64 = a.trim().parse().map_err(|e| format!("bad range start \"{a}\": {e}"))?;
        let end: i64 = b.trim().parse().map_err(|e| format!("bad range end \"{b}\": {e}"))?;
        if start > end {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((start..=end).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse::<i64>().map_err(|e| format!("bad seed \"{p}\": {e}")))
        .collect()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum SeedSpec {
    Text(String),
    List(Vec<i64>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBackend {
    kind: Option<String>,
    spec: Option<String>,
    base_url: Option<String>,
    max_in_flight: Option<usize>,
    retry_limit: Option<u32>,
    timeout_secs: Option<f64>,
    backoff_secs: Option<f64>,
    cache_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRun {
    settings: Option<Vec<PromptSetting>>,
    seeds: Option<SeedSpec>,
    temperature: Option<f64>,
    answer_model: Option<String>,
    judge_model: Option<String>,
    max_tokens: Option<u32>,
    judge_max_tokens: Option<u32>,
    bottleneck_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileKnowledge {
    model: Option<String>,
    synth_model: Option<String>,
    max_tokens: Option<u32>,
    synth_max_tokens: Option<u32>,
    allow_uncurated: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    dataset: Option<PathBuf>,
    knowledge_qa: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    language: Option<String>,
    templates: Option<PathBuf>,
    #[serde(default)]
    backend: FileBackend,
    #[serde(default)]
    run: FileRun,
    #[serde(default)]
    knowledge: FileKnowledge,
}

impl FileConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.knowledge_qa, &mut cfg.output_dir, &mut cfg.templates, &mut cfg.backend.cache_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Flag values; `None` means "not given on the command line".
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub knowledge_qa: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub language: Option<String>,
    pub templates: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub spec: Option<CapabilitySpec>,
    pub base_url: Option<String>,
    pub max_in_flight: Option<usize>,
    pub retry_limit: Option<u32>,
    pub timeout_secs: Option<f64>,
    pub cache_dir: Option<PathBuf>,
    pub settings: Option<Vec<PromptSetting>>,
    pub seeds: Option<Vec<i64>>,
    pub temperature: Option<f64>,
    pub answer_model: Option<String>,
    pub judge_model: Option<String>,
    pub max_tokens: Option<u32>,
    pub judge_max_tokens: Option<u32>,
    pub threshold: Option<f64>,
    pub knowledge_model: Option<String>,
    pub knowledge_max_tokens: Option<u32>,
    pub allow_uncurated: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct KnowledgeSettings {
    pub model: String,
    pub synth_model: String,
    pub max_tokens: u32,
    pub synth_max_tokens: u32,
    pub allow_uncurated: bool,
}

/// Effective configuration of one command. Serialized into run directories;
/// the API key lives only in `backend.api_key`, which is never serialized.
#[derive(Debug, Clone, Serialize)]
pub struct HarnessConfig {
    pub dataset: Option<PathBuf>,
    pub knowledge_qa: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub language: String,
    pub templates: Option<PathBuf>,
    #[serde(serialize_with = "display")]
    pub backend_kind: BackendKind,
    pub spec: CapabilitySpec,
    pub backend: BackendConfig,
    pub run: RunConfig,
    pub knowledge: KnowledgeSettings,
}

fn display<S: serde::Serializer, T: fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn duration(secs: f64, name: &str) -> Result<Duration, CliError> {
    Duration::try_from_secs_f64(secs).map_err(|e| CliError::usage(format!("{name}: {e}")))
}

impl HarnessConfig {
    pub fn resolve(file: FileConfig, o: Overrides) -> Result<Self, CliError> {
        let defaults = RunConfig::default();
        let fb = file.backend;
        let fr = file.run;
        let fk = file.knowledge;

        let backend_kind = match (o.backend, fb.kind) {
            (Some(k), _) => k,
            (None, Some(k)) => k.parse().map_err(CliError::usage)?,
            (None, None) => BackendKind::Http,
        };
        let spec = match (o.spec, fb.spec) {
            (Some(s), _) => s,
            (None, Some(s)) => s.parse().map_err(|e| CliError::usage(format!("backend.spec: {e}")))?,
            (None, None) => CapabilitySpec::perfect(),
        };

        let mut backend = BackendConfig::default();
        if let Some(url) = o.base_url.or_else(|| std::env::var(BASE_URL_ENV).ok()).or(fb.base_url) {
            backend.base_url = url;
        }
        backend.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        backend.max_in_flight = o.max_in_flight.or(fb.max_in_flight).unwrap_or(backend.max_in_flight);
        backend.retry_limit = o.retry_limit.or(fb.retry_limit).unwrap_or(backend.retry_limit);
        if let Some(t) = o.timeout_secs.or(fb.timeout_secs) {
            backend.timeout = duration(t, "timeout")?;
        }
        if let Some(b) = fb.backoff_secs {
            backend.backoff_base = duration(b, "backoff_secs")?;
        }
        backend.cache_dir = o.cache_dir.or(fb.cache_dir);
        if backend.max_in_flight == 0 {
            return Err(CliError::usage("max_in_flight must be >= 1"));
        }

        let seeds = match (o.seeds, fr.seeds) {
            (Some(s), _) => s,
            (None, Some(SeedSpec::Text(t))) => parse_seeds(&t).map_err(|e| CliError::usage(format!("run.seeds: {e}")))?,
            (None, Some(SeedSpec::List(l))) => l,
            (None, None) => defaults.seeds.clone(),
        };
        let run = RunConfig {
            settings: o.settings.or(fr.settings).unwrap_or(defaults.settings),
            seeds,
            temperature: o.temperature.or(fr.temperature).unwrap_or(defaults.temperature),
            answer_model: o.answer_model.or(fr.answer_model).unwrap_or(defaults.answer_model),
            judge_model: o.judge_model.or(fr.judge_model).unwrap_or(defaults.judge_model),
            max_tokens: o.max_tokens.or(fr.max_tokens).unwrap_or(defaults.max_tokens),
            judge_max_tokens: o.judge_max_tokens.or(fr.judge_max_tokens).unwrap_or(defaults.judge_max_tokens),
            bottleneck_threshold: o.threshold.or(fr.bottleneck_threshold).unwrap_or(defaults.bottleneck_threshold),
        };
        run.validate().map_err(|e| CliError::usage(e.to_string()))?;

        let model = o.knowledge_model.clone().or(fk.model).unwrap_or_else(|| run.answer_model.clone());
        let knowledge = KnowledgeSettings {
            synth_model: o.knowledge_model.or(fk.synth_model).unwrap_or_else(|| run.judge_model.clone()),
            model,
            max_tokens: o.knowledge_max_tokens.or(fk.max_tokens).unwrap_or(64),
            synth_max_tokens: fk.synth_max_tokens.unwrap_or(512),
            allow_uncurated: o.allow_uncurated || fk.allow_uncurated.unwrap_or(false),
        };

        Ok(HarnessConfig {
            dataset: o.dataset.or(file.dataset),
            knowledge_qa: o.knowledge_qa.or(file.knowledge_qa),
            output_dir: o.output_dir.or(file.output_dir),
            language: o.language.or(file.language).unwrap_or_else(|| "en".into()),
            templates: o.templates.or(file.templates),
            backend_kind,
            spec,
            backend,
            run,
            knowledge,
        })
    }

    pub fn dataset_path(&self) -> Result<&Path, CliError> {
        self.dataset.as_deref().ok_or_else(|| CliError::usage("no dataset given (use --dataset or the config file)"))
    }

    pub fn output_path(&self) -> Result<&Path, CliError> {
        self.output_dir.as_deref().ok_or_else(|| CliError::usage("no output directory given (use --out or the config file)"))
    }
}
