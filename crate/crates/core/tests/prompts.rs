use std::fs;
use std::path::PathBuf;

use subtask_diag_core::data::{Checklist, Condition, EvalItem, OracleConclusion, OracleFact};
use subtask_diag_core::prompt::{build_answer_prompt, build_judge_prompt, PromptSetting, PromptTemplateSet};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares against the stored file; `UPDATE_GOLDEN=1` rewrites it instead.
fn check_golden(name: &str, actual: &str) {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(golden_dir()).unwrap();
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "golden mismatch for {name}");
}

fn item(with_guidance: bool) -> EvalItem {
    let mut conclusions = vec![OracleConclusion {
        text: "The jobnet waits on the condition set by WAIT_COND_7.".into(),
        is_guidance: false,
    }];
    if with_guidance {
        conclusions.push(OracleConclusion { text: "Explain the cause first, then the fix.".into(), is_guidance: true });
    }
    EvalItem {
        id: "golden-1".into(),
        question: "Why does the jobnet stay in the waiting state after the scheduler restarts?".into(),
        checklists: vec![Checklist {
            id: "A".into(),
            conditions: vec![Condition { id: "c1".into(), text: "The answer names \"WAIT_COND_7\".".into() }],
        }],
        oracle_conclusions: conclusions,
        oracle_facts: vec![
            OracleFact::new("A jobnet with a start condition waits until the condition is met.", Some("Start conditions".into()), true),
            OracleFact::new("WAIT_COND_7 is reset when the scheduler restarts.", None, true),
        ],
    }
}

#[test]
fn answer_prompts_match_goldens() {
    for lang in ["en", "ja"] {
        let t = PromptTemplateSet::builtin(lang).unwrap();
        for setting in PromptSetting::ALL {
            for (suffix, guidance) in [("", false), ("-guidance", true)] {
                let prompt = build_answer_prompt(&item(guidance), setting, &t).unwrap();
                check_golden(&format!("{lang}-{setting}{suffix}.txt"), &prompt);
            }
        }
        let cond = &item(false).checklists[0].conditions[0];
        check_golden(&format!("{lang}-judge.txt"), &build_judge_prompt("Check WAIT_COND_7.", cond, &t).unwrap());
    }
}

#[test]
fn section_presence_rules() {
    let t = PromptTemplateSet::builtin("en").unwrap();
    for guidance in [false, true] {
        let it = item(guidance);
        let none = build_answer_prompt(&it, PromptSetting::NoOracle, &t).unwrap();
        let elic = build_answer_prompt(&it, PromptSetting::OracleElicitation, &t).unwrap();
        let reas = build_answer_prompt(&it, PromptSetting::OracleReasoning, &t).unwrap();

        assert!(!none.contains("## Background Knowledge"));
        assert!(!none.contains("##### Knowledge"));
        assert!(elic.contains("## Background Knowledge"));
        assert!(elic.contains("##### Knowledge 1") && elic.contains("##### Knowledge 2"));
        assert!(!elic.contains("##### Knowledge 3"));
        assert!(reas.contains("## Background Knowledge"));
        assert!(!reas.contains("##### Knowledge"));

        for p in [&none, &elic] {
            assert!(!p.contains("Explain the cause first"));
        }
        assert_eq!(reas.contains("Explain the cause first"), guidance);
        if guidance {
            let q = reas.find("Why does the jobnet").unwrap();
            assert!(reas.find("Explain the cause first").unwrap() > q);
        }
    }
}

#[test]
fn prompts_are_byte_stable() {
    let t = PromptTemplateSet::builtin("ja").unwrap();
    for setting in PromptSetting::ALL {
        let a = build_answer_prompt(&item(true), setting, &t).unwrap();
        let b = build_answer_prompt(&item(true), setting, &PromptTemplateSet::builtin("ja").unwrap()).unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }
}
