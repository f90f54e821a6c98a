use emotionic::conversation::{Conversation, Utterance};
use emotionic::io::{emit_dataset, format_dataset, ingest, parse_dataset, Dataset};
use proptest::prelude::*;

fn dataset() -> impl Strategy<Value = Dataset> {
    (1usize..5, 1usize..4).prop_flat_map(|(k, d)| {
        let utterance = (
            "[A-Za-z][A-Za-z0-9 _\"\\\\é]{0,6}",
            prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, d),
            prop::option::of(0..k),
        )
            .prop_map(|(s, f, l)| Utterance::new(s, f, l));
        let conversation = ("[a-z0-9-]{1,8}", prop::collection::vec(utterance, 1..6))
            .prop_map(move |(id, utts)| Conversation::new(id, utts, k));
        prop::collection::vec(conversation, 0..5).prop_map(move |conversations| Dataset {
            labels: (0..k).map(|i| format!("label {i}")).collect(),
            conversations,
        })
    })
}

proptest! {
    #[test]
    fn format_then_parse_is_identity(ds in dataset()) {
        let parsed = parse_dataset(&format_dataset(&ds).unwrap()).unwrap();
        if ds.conversations.is_empty() {
            prop_assert!(parsed.conversations.is_empty());
        } else {
            prop_assert_eq!(parsed, ds);
        }
    }
}

#[test]
fn emit_then_ingest_through_a_file() {
    let ds = Dataset {
        labels: vec!["neutral".into(), "joy".into()],
        conversations: vec![Conversation::new(
            "c",
            vec![
                Utterance::new("A", vec![0.1, 1e-300], Some(1)),
                Utterance::new("B", vec![-2.5e17, 1.0 / 3.0], None),
            ],
            2,
        )],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    emit_dataset(&path, &ds).unwrap();
    assert_eq!(ingest(&path).unwrap(), ds);
    // No temporary sibling is left behind.
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn labels_space_must_agree_across_lines() {
    let a = r#"{"id":"a","labels_space":["x","y"],"utterances":[{"speaker":"A","features":[1.0]}]}"#;
    let b = r#"{"id":"b","labels_space":["y","x"],"utterances":[{"speaker":"A","features":[1.0]}]}"#;
    assert!(parse_dataset(&format!("{a}\n{b}\n")).is_err());
}
