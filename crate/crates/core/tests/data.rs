use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;
use subtask_diag_core::data::{
    dataset_digest, dataset_stats, load_dataset, qa_path_for, save_dataset, Checklist, Condition, CurationStatus,
    Dataset, EvalItem, KnowledgeQA, OracleConclusion, OracleFact,
};

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/profile.jsonl")
}

/// 250 items: 450 checklists, 1170 conditions, 1150 facts, 851 mandatory.
fn profile_dataset() -> Dataset {
    let mut items = Vec::new();
    let mut checklist_no = 0;
    let mut fact_no = 0;
    for i in 0..250 {
        let n_checklists = if i < 200 { 2 } else { 1 };
        let checklists = (0..n_checklists)
            .map(|c| {
                let n_conditions = if checklist_no < 270 { 3 } else { 2 };
                checklist_no += 1;
                Checklist {
                    id: ["A", "B"][c].into(),
                    conditions: (0..n_conditions)
                        .map(|k| Condition { id: format!("c{}", k + 1), text: format!("Mentions point {} of item {i}.", k + 1) })
                        .collect(),
                }
            })
            .collect();
        let n_facts = if i < 150 { 5 } else { 4 };
        let facts = (0..n_facts)
            .map(|f| {
                let mandatory = fact_no < 851;
                fact_no += 1;
                let title = (f == 0).then(|| format!("Section {i}"));
                OracleFact::new(format!("Fact {f} of item {i}."), title, mandatory)
            })
            .collect();
        items.push(EvalItem {
            id: format!("p{i:03}"),
            question: format!("Question {i}?"),
            checklists,
            oracle_conclusions: vec![OracleConclusion { text: format!("Conclusion {i}."), is_guidance: false }],
            oracle_facts: facts,
        });
    }
    Dataset { items, knowledge_qas: Vec::new(), metadata: BTreeMap::new() }
}

#[test]
fn profile_fixture_statistics_are_exact() {
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        save_dataset(&profile_dataset(), &fixture_path()).unwrap();
    }
    let ds = load_dataset(&fixture_path()).unwrap();
    assert_eq!(ds, profile_dataset());
    let stats = dataset_stats(&ds);
    assert_eq!(stats.avg_checklists_per_item, 1.8);
    assert_eq!(stats.avg_conditions_per_checklist, 2.6);
    assert_eq!(stats.avg_facts_per_item, 4.6);
    assert_eq!(stats.mandatory_fact_ratio, 0.74);
}

#[test]
fn save_writes_items_and_qa_files_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.jsonl");
    save_dataset(&profile_dataset(), &path).unwrap();
    let mut names: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, vec!["set.jsonl", "set.qa.jsonl"]);
    assert_eq!(qa_path_for(&path), dir.path().join("set.qa.jsonl"));
}

fn text() -> impl Strategy<Value = String> {
    "[A-Za-z0-9ぁ-んァ-ン漢字 _/.,\\-\"\\\\\n]{0,16}[A-Za-z0-9ぁ-ん]".prop_map(|s| s)
}

fn title() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ぁ-ん]{0,10}[A-Za-z]"
}

prop_compose! {
    fn fact()(body in text(), t in prop::option::of(title()), mandatory in any::<bool>()) -> OracleFact {
        OracleFact::new(body, t, mandatory)
    }
}

prop_compose! {
    fn checklist(idx: usize)(conds in prop::collection::vec(text(), 1..4)) -> Checklist {
        Checklist {
            id: format!("L{idx}"),
            conditions: conds.into_iter().enumerate().map(|(k, t)| Condition { id: format!("c{k}"), text: t }).collect(),
        }
    }
}

prop_compose! {
    fn item(idx: usize)(
        question in text(),
        n_checklists in 1usize..3,
        lists in prop::collection::vec(checklist(0), 3),
        conclusions in prop::collection::vec((text(), any::<bool>()), 0..3),
        facts in prop::collection::vec(fact(), 0..4),
    ) -> EvalItem {
        EvalItem {
            id: format!("item-{idx}"),
            question,
            checklists: lists
                .into_iter()
                .take(n_checklists)
                .enumerate()
                .map(|(i, mut c)| { c.id = format!("L{i}"); c })
                .collect(),
            oracle_conclusions: conclusions.into_iter().map(|(text, is_guidance)| OracleConclusion { text, is_guidance }).collect(),
            oracle_facts: facts,
        }
    }
}

fn dataset() -> impl Strategy<Value = Dataset> {
    (prop::collection::vec(item(0), 0..5), prop::collection::vec((text(), text(), 0usize..4), 0..4)).prop_map(
        |(items, qas)| {
            let items: Vec<EvalItem> =
                items.into_iter().enumerate().map(|(i, mut it)| { it.id = format!("item-{i}"); it }).collect();
            let statuses = [CurationStatus::Pending, CurationStatus::Approved, CurationStatus::Edited, CurationStatus::Deleted];
            let knowledge_qas = qas
                .into_iter()
                .enumerate()
                .map(|(i, (question, answer, s))| KnowledgeQA {
                    id: format!("qa-{i}"),
                    source_fact_id: format!("item-0/fact-{}", i + 1),
                    question,
                    answer,
                    curation_status: statuses[s],
                    raw_output: (s == 3).then(|| "raw\noutput".to_string()),
                })
                .collect();
            Dataset { items, knowledge_qas, metadata: BTreeMap::new() }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn load_after_save_is_identity(ds in dataset()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        prop_assert_eq!(&loaded, &ds);
        prop_assert_eq!(dataset_digest(&loaded), dataset_digest(&ds));
    }
}
