mod common;

use eipl_core::backend::Provenance;
use eipl_core::prompting::{build_fewshot_messages, build_request, Role};
use eipl_core::segmentation::{canonical_json, parse_pairs, build_mapping};

#[test]
fn bundled_bank_has_the_eight_lab_questions() {
    let bank = common::bank();
    let ids: Vec<&str> = bank.keys().map(String::as_str).collect();
    assert_eq!(ids, ["A-Q1", "A-Q2", "A-Q3", "A-Q4", "B-Q1", "B-Q2", "B-Q3", "B-Q4"]);
    let q = &bank["A-Q4"];
    assert_eq!(q.line_count(), 9);
    assert_eq!(q.snippet().substantive_line_count(), 6);
    assert!(bank.values().all(|q| q.max_attempts == 20));
}

#[test]
fn every_exemplar_parses_back_cleanly() {
    for q in common::bank().values() {
        let msgs = build_fewshot_messages(q);
        for (ex, pair) in q.few_shot.iter().zip(msgs.chunks(2)) {
            assert_eq!(pair[0].role, Role::User);
            assert_eq!(pair[1].role, Role::Assistant);
            let pairs = parse_pairs(&pair[1].content).unwrap();
            assert_eq!(canonical_json(&pairs), pair[1].content);
            let m = build_mapping(&pairs, q.snippet(), &ex.explanation, Provenance::mock());
            assert!(m.warnings.is_empty(), "{}: {:?}", q.id, m.warnings);
            assert!(m.groups.iter().all(|g| g.portion_verified && g.lines_verified));
        }
    }
}

#[test]
fn relational_exemplars_cover_the_whole_function() {
    for q in common::bank().values() {
        for ex in q.few_shot.iter().filter(|e| e.intended_level == eipl_core::Level::Relational) {
            let m = build_mapping(&ex.expected_mapping, q.snippet(), &ex.explanation, Provenance::mock());
            assert_eq!(m.groups.len(), 1, "{}", q.id);
            assert_eq!(m.groups[0].resolved_lines.len(), q.line_count(), "{}", q.id);
        }
    }
}

#[test]
fn requests_are_byte_stable() {
    let bank = common::bank();
    let q = &bank["A-Q4"];
    let a = build_request(q, common::SUMMARY_EXPLANATION).unwrap().to_json();
    let b = build_request(q, common::SUMMARY_EXPLANATION).unwrap().to_json();
    assert_eq!(a, b);
    assert!(a.contains("\"role\":\"system\""));
}
