use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use subtask_diag_core::data::{
    dataset_digest, dataset_stats, knowledge_qa_digest, load_dataset, load_knowledge_qas, qa_path_for,
    save_dataset, save_knowledge_qas, validate_for_setting, CurationStatus, Dataset, KnowledgeQA, OracleFact,
};
use subtask_diag_core::knowledge::{
    elicitation_accuracy, knowledge_csv, memorization_score, synthesize_knowledge_qas, KnowledgeError,
    KnowledgeReport,
};
use subtask_diag_core::oracle::{answers_csv, run_oracle_eval, AsrReport, ConditionVerdict, JudgedAnswer};
use subtask_diag_core::prompt::{PromptSetting, PromptTemplateSet};
use subtask_diag_core::report::{build_series_report, render_report, ReportFormat, ReportOptions, SeriesInput};
use subtask_diag_core::sim::{generate_sim_dataset, SimBackend, SimConfig};
use subtask_diag_gateway::Gateway;

use crate::config::{BackendKind, FileConfig, HarnessConfig, Overrides};
use crate::error::CliError;
use crate::{Cli, Command, KnowledgeCommand};

pub const CONFIG_FILE: &str = "config.json";
pub const DIGEST_FILE: &str = "dataset.sha256";
pub const ANSWERS_FILE: &str = "answers.jsonl";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const ASR_REPORT_FILE: &str = "asr_report.json";
pub const ASR_CSV_FILE: &str = "asr.csv";
pub const KNOWLEDGE_FILE: &str = "knowledge.json";
pub const KNOWLEDGE_CSV_FILE: &str = "knowledge_qa.csv";

pub async fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let mut o = Overrides::default();
    match cli.command {
        Command::SimGenerate(args) => sim_generate(args),
        Command::Validate(args) => {
            args.data.apply(&mut o);
            validate(&HarnessConfig::resolve(file, o)?)
        }
        Command::Eval(args) => {
            args.data.apply(&mut o);
            args.templates.apply(&mut o);
            args.backend.apply(&mut o);
            o.output_dir = args.out;
            o.settings = args.settings;
            o.seeds = args.seeds;
            o.temperature = args.temp;
            o.answer_model = args.answer_model;
            o.judge_model = args.judge_model;
            o.max_tokens = args.max_tokens;
            o.judge_max_tokens = args.judge_max_tokens;
            o.threshold = args.threshold;
            eval(&HarnessConfig::resolve(file, o)?).await
        }
        Command::Knowledge { command } => match command {
            KnowledgeCommand::Synthesize(args) => {
                args.data.apply(&mut o);
                args.templates.apply(&mut o);
                args.backend.apply(&mut o);
                o.knowledge_model = args.model;
                synthesize(&HarnessConfig::resolve(file, o)?, args.qa_out, args.force).await
            }
            KnowledgeCommand::Perplexity(args) => {
                args.data.apply(&mut o);
                args.backend.apply(&mut o);
                o.output_dir = args.out;
                o.knowledge_model = args.model;
                perplexity(&HarnessConfig::resolve(file, o)?).await
            }
            KnowledgeCommand::Accuracy(args) => {
                args.data.apply(&mut o);
                args.templates.apply(&mut o);
                args.backend.apply(&mut o);
                o.output_dir = args.out;
                o.knowledge_model = args.model;
                o.knowledge_max_tokens = args.max_tokens;
                o.allow_uncurated = args.allow_uncurated;
                accuracy(&HarnessConfig::resolve(file, o)?).await
            }
        },
        Command::Report(args) => {
            o.threshold = args.threshold;
            let cfg = HarnessConfig::resolve(file, o)?;
            let options = ReportOptions {
                threshold: cfg.run.bottleneck_threshold,
                sufficient_threshold: args.sufficient,
                match_tolerance: args.tolerance,
            };
            report(&args.runs, args.out, &args.label, &options)
        }
    }
}

fn sim_generate(args: crate::SimArgs) -> Result<(), CliError> {
    let hops = args.hops as usize;
    let cfg = SimConfig {
        n_items: args.items as usize,
        hops,
        facts_per_item: args.facts_per_item.map_or(hops, |f| f as usize),
        rng_seed: args.seed,
        ..SimConfig::default()
    };
    let ds = generate_sim_dataset(&cfg)?;
    let path = args.out.join(format!("{}.jsonl", args.name));
    save_dataset(&ds, &path)?;
    println!("wrote {} and {}", path.display(), qa_path_for(&path).display());
    println!("{}", dataset_stats(&ds));
    Ok(())
}

fn load(cfg: &HarnessConfig) -> Result<Dataset, CliError> {
    let path = cfg.dataset_path()?;
    let mut ds = load_dataset(path)?;
    if let Some(qa) = &cfg.knowledge_qa {
        ds.knowledge_qas = load_knowledge_qas(qa)?;
    }
    Ok(ds)
}

fn validate(cfg: &HarnessConfig) -> Result<(), CliError> {
    let ds = load(cfg)?;
    println!("{}", dataset_stats(&ds));
    for setting in PromptSetting::ALL {
        let invalid: Vec<String> = ds
            .items
            .iter()
            .filter_map(|item| {
                let v = validate_for_setting(item, setting);
                (!v.valid).then(|| format!("{} ({})", item.id, v.reasons.join(", ")))
            })
            .collect();
        println!("{setting}: {} of {} items valid", ds.items.len() - invalid.len(), ds.items.len());
        for line in invalid {
            println!("  skipped: {line}");
        }
    }
    let count = |s: CurationStatus| ds.knowledge_qas.iter().filter(|q| q.curation_status == s).count();
    println!(
        "knowledge QAs: {} pending, {} approved, {} edited, {} deleted",
        count(CurationStatus::Pending),
        count(CurationStatus::Approved),
        count(CurationStatus::Edited),
        count(CurationStatus::Deleted)
    );
    Ok(())
}

fn templates(cfg: &HarnessConfig) -> Result<PromptTemplateSet, CliError> {
    Ok(match &cfg.templates {
        Some(manifest) => PromptTemplateSet::from_manifest(manifest, &cfg.language)?,
        None => PromptTemplateSet::builtin(&cfg.language)?,
    })
}

fn gateway(cfg: &HarnessConfig, ds: &Arc<Dataset>) -> Result<Gateway, CliError> {
    Ok(match cfg.backend_kind {
        BackendKind::Http => Gateway::http(&cfg.backend)?,
        BackendKind::Scripted { logprob } => {
            let mut backend = SimBackend::new(Arc::clone(ds), cfg.spec);
            if let Some(lp) = logprob {
                backend = backend.with_logprob(lp);
            }
            Gateway::new(Arc::new(backend), &cfg.backend)?
        }
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> String {
    records.into_iter().map(|r| serde_json::to_string(&r).expect("record serializes") + "\n").collect()
}

#[derive(Serialize)]
struct VerdictLine<'a> {
    item_id: &'a str,
    setting: PromptSetting,
    seed: i64,
    correct: bool,
    verdicts: &'a [ConditionVerdict],
}

async fn eval(cfg: &HarnessConfig) -> Result<(), CliError> {
    let out = cfg.output_path()?.to_path_buf();
    let ds = Arc::new(load(cfg)?);
    let templates = templates(cfg)?;
    let gw = gateway(cfg, &ds)?;
    let run = run_oracle_eval(&gw, &templates, &ds, &cfg.run).await?;

    create_dir(&out)?;
    write_file(&out.join(CONFIG_FILE), pretty(cfg))?;
    write_file(&out.join(DIGEST_FILE), format!("{}\n", dataset_digest(&ds)))?;
    write_file(&out.join(ANSWERS_FILE), jsonl(run.judged.iter().map(|j| &j.answer)))?;
    write_file(
        &out.join(VERDICTS_FILE),
        jsonl(run.judged.iter().map(|j: &JudgedAnswer| VerdictLine {
            item_id: &j.answer.item_id,
            setting: j.answer.setting,
            seed: j.answer.seed,
            correct: j.correct,
            verdicts: &j.verdicts,
        })),
    )?;
    write_file(&out.join(ASR_REPORT_FILE), pretty(&run.report))?;
    write_file(&out.join(ASR_CSV_FILE), answers_csv(&run.judged))?;

    print_asr_summary(&run.report);
    if !run.report.flagged.is_empty() {
        eprintln!("{} answers or verdicts flagged; see {}", run.report.flagged.len(), out.join(ASR_REPORT_FILE).display());
    }
    if run.report.malformed_judge_outputs > 0 {
        eprintln!("{} judge outputs were neither yes nor no", run.report.malformed_judge_outputs);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn print_asr_summary(report: &AsrReport) {
    println!("{:<20} {:>10} {:>10} {:>6}", "setting", "macro_asr", "micro_asr", "items");
    for s in &report.settings {
        println!("{:<20} {:>10.6} {:>10.6} {:>6}", s.setting.as_str(), s.macro_asr, s.micro_asr, s.n_items);
        for skipped in &s.skipped {
            println!("  skipped {}: {}", skipped.item_id, skipped.reasons.join(", "));
        }
    }
    if let Some(d) = &report.diagnosis {
        let labels: Vec<&str> = d.bottlenecks.iter().map(|b| b.as_str()).collect();
        println!(
            "gaps: elicitation {:.6}, reasoning {:.6}, composing {:.6}; bottlenecks: {}",
            d.elicitation_gap,
            d.reasoning_gap,
            d.composing_gap,
            if labels.is_empty() { "none".to_string() } else { labels.join(", ") }
        );
    }
}

fn facts(ds: &Dataset) -> Vec<(String, &OracleFact)> {
    ds.facts().collect()
}

async fn synthesize(cfg: &HarnessConfig, qa_out: Option<PathBuf>, force: bool) -> Result<(), CliError> {
    let dataset_path = cfg.dataset_path()?;
    let target = qa_out.or_else(|| cfg.knowledge_qa.clone()).unwrap_or_else(|| qa_path_for(dataset_path));
    if !force && fs::metadata(&target).is_ok_and(|m| m.len() > 0) {
        return Err(CliError::usage(format!(
            "{} already has content; pass --force to overwrite it or --qa-out for a new file",
            target.display()
        )));
    }
    let ds = Arc::new(load_dataset(dataset_path)?);
    let templates = templates(cfg)?;
    let gw = gateway(cfg, &ds)?;
    let fact_list = facts(&ds);
    let outcome =
        synthesize_knowledge_qas(&gw, &templates, &fact_list, &cfg.knowledge.synth_model, cfg.knowledge.synth_max_tokens)
            .await?;
    if outcome.qas.is_empty() {
        let first = outcome.failures.first().map(|f| f.error.as_str()).unwrap_or("no output");
        return Err(CliError::backend(format!("synthesis failed for every fact: {first}")));
    }
    save_knowledge_qas(&target, &outcome.qas)?;
    let deleted = outcome.qas.iter().filter(|q| q.curation_status == CurationStatus::Deleted).count();
    println!(
        "wrote {}: {} pending, {} unparseable (deleted), {} facts failed",
        target.display(),
        outcome.qas.len() - deleted,
        deleted,
        outcome.failures.len()
    );
    for f in &outcome.failures {
        eprintln!("synthesis failed for {}: {}", f.fact_id, f.error);
    }
    println!("review the file and set curation_status to approved, edited or deleted before running accuracy");
    Ok(())
}

fn merge_knowledge(out: &Path, fragment: KnowledgeReport) -> Result<KnowledgeReport, CliError> {
    let path = out.join(KNOWLEDGE_FILE);
    let mut report = match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice::<KnowledgeReport>(&bytes)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?,
        Err(_) => KnowledgeReport::default(),
    };
    report.merge(fragment);
    create_dir(out)?;
    write_file(&path, pretty(&report))?;
    Ok(report)
}

async fn perplexity(cfg: &HarnessConfig) -> Result<(), CliError> {
    let out = cfg.output_path()?.to_path_buf();
    let ds = Arc::new(load(cfg)?);
    let gw = gateway(cfg, &ds)?;
    let fact_list = facts(&ds);
    let mut fragment = KnowledgeReport {
        model_id: cfg.knowledge.model.clone(),
        dataset_digest: Some(dataset_digest(&ds)),
        ..Default::default()
    };
    match memorization_score(&gw, &fact_list, &cfg.knowledge.model).await {
        Ok(m) => {
            println!("mean perplexity {:.6} over {} paragraphs", m.mean_perplexity, m.paragraphs.len());
            if !m.skipped.is_empty() {
                eprintln!("{} paragraphs skipped", m.skipped.len());
            }
            fragment.memorization = Some(m);
        }
        Err(KnowledgeError::ScoringUnsupported(reason)) => {
            let note = format!("perplexity skipped: the endpoint does not support token scoring ({reason})");
            eprintln!("{note}");
            fragment.notes.push(note);
        }
        Err(e) => return Err(e.into()),
    }
    merge_knowledge(&out, fragment)?;
    println!("wrote {}", out.join(KNOWLEDGE_FILE).display());
    Ok(())
}

async fn accuracy(cfg: &HarnessConfig) -> Result<(), CliError> {
    let out = cfg.output_path()?.to_path_buf();
    let ds = Arc::new(load(cfg)?);
    let templates = templates(cfg)?;
    let gw = gateway(cfg, &ds)?;
    let qas: &[KnowledgeQA] = &ds.knowledge_qas;
    let k = &cfg.knowledge;
    let report = elicitation_accuracy(&gw, &templates, qas, &k.model, k.max_tokens, k.allow_uncurated).await?;
    if k.allow_uncurated {
        let pending = qas.iter().filter(|q| q.curation_status == CurationStatus::Pending).count();
        if pending > 0 {
            eprintln!("warning: {pending} uncurated (pending) QAs included in the accuracy");
        }
    }
    println!(
        "elicitation accuracy {:.6} ({} of {} matched; {} deleted skipped, {} pending skipped)",
        report.accuracy, report.matches, report.evaluated, report.skipped_deleted, report.skipped_pending
    );
    if report.generation_failures > 0 {
        eprintln!("{} QA answers failed to generate and count as non-matches", report.generation_failures);
    }
    create_dir(&out)?;
    write_file(&out.join(KNOWLEDGE_CSV_FILE), knowledge_csv(&report))?;
    let mut notes = Vec::new();
    if report.uncurated_included {
        notes.push("accuracy includes uncurated (pending) QAs".to_string());
    }
    merge_knowledge(
        &out,
        KnowledgeReport {
            model_id: k.model.clone(),
            dataset_digest: Some(dataset_digest(&ds)),
            qa_digest: Some(knowledge_qa_digest(qas)),
            elicitation: Some(report),
            notes,
            ..Default::default()
        },
    )?;
    println!("wrote {}", out.join(KNOWLEDGE_FILE).display());
    Ok(())
}

fn parse_run(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((tag, dir)) if !tag.is_empty() => (tag.to_string(), PathBuf::from(dir)),
        _ => {
            let dir = PathBuf::from(spec);
            let tag = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (tag, dir)
        }
    }
}

fn report(runs: &[String], out: Option<PathBuf>, label: &str, options: &ReportOptions) -> Result<(), CliError> {
    let mut inputs = Vec::with_capacity(runs.len());
    let mut dirs = Vec::with_capacity(runs.len());
    for spec in runs {
        let (tag, dir) = parse_run(spec);
        let asr_path = dir.join(ASR_REPORT_FILE);
        let bytes = fs::read(&asr_path)
            .map_err(|e| CliError::data(format!("{} is not a completed run ({}: {e})", dir.display(), asr_path.display())))?;
        let asr: AsrReport =
            serde_json::from_slice(&bytes).map_err(|e| CliError::data(format!("{}: {e}", asr_path.display())))?;
        let knowledge_path = dir.join(KNOWLEDGE_FILE);
        let knowledge = match fs::read(&knowledge_path) {
            Ok(bytes) => Some(
                serde_json::from_slice::<KnowledgeReport>(&bytes)
                    .map_err(|e| CliError::data(format!("{}: {e}", knowledge_path.display())))?,
            ),
            Err(_) => None,
        };
        inputs.push(SeriesInput { tag, asr, knowledge });
        dirs.push(dir);
    }
    let out = match (out, dirs.as_slice()) {
        (Some(o), _) => o,
        (None, [only]) => only.clone(),
        (None, _) => return Err(CliError::usage("--out is required when reporting on several runs")),
    };
    let report = build_series_report(label, &inputs, options)?;
    create_dir(&out)?;
    for format in ReportFormat::ALL {
        write_file(&out.join(format!("report.{}", format.extension())), render_report(&report, format)?)?;
    }
    print!("{}", String::from_utf8_lossy(&render_report(&report, ReportFormat::Markdown)?));
    println!("\nwrote report.json, report.md and report.csv to {}", out.display());
    Ok(())
}
