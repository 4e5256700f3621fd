use std::collections::BTreeMap;
use std::io::Cursor;

use proptest::prelude::*;

use capcur_core::dataset::parse_dataset;
use capcur_core::{read_dataset, write_dataset, CapabilityTag, DatasetError, Sample};

fn capability() -> impl Strategy<Value = CapabilityTag> {
    prop_oneof![
        Just(CapabilityTag::Perception),
        Just(CapabilityTag::TextReasoning),
        Just(CapabilityTag::VisualReasoning),
    ]
}

fn sample(i: usize) -> impl Strategy<Value = Sample> {
    (
        capability(),
        "\\PC{0,40}",
        "\\PC{1,12}",
        proptest::option::of("\\PC{1,60}"),
        proptest::option::of("[a-z0-9/._-]{1,20}"),
        proptest::option::of(proptest::collection::vec(-1e12f64..1e12, 0..8)),
        proptest::option::of(0.0f64..=1.0),
        proptest::collection::btree_map("[a-z_]{1,8}", "\\PC{0,10}", 0..3),
    )
        .prop_map(move |(c, q, a, caption, image_ref, features, difficulty, meta)| {
            let mut s = Sample::new(format!("s-{i}"), c, q, a);
            s.caption = caption;
            s.image_ref = image_ref;
            s.features = features;
            s.difficulty = difficulty;
            s.meta = meta;
            s
        })
}

fn samples() -> impl Strategy<Value = Vec<Sample>> {
    (0usize..20).prop_flat_map(|n| (0..n).map(sample).collect::<Vec<_>>())
}

proptest! {
    #[test]
    fn write_then_read_is_identity(xs in samples()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&xs, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        prop_assert_eq!(back, xs);
    }
}

#[test]
fn unknown_keys_fold_into_meta() {
    let line = r#"{"id":"x","capability":"perception","question":"q","answer":"a","source":"web","n":3}"#;
    let got = parse_dataset(Cursor::new(line)).unwrap();
    let expected: BTreeMap<String, String> = [("n".to_string(), "3".to_string()), ("source".into(), "web".into())].into();
    assert_eq!(got[0].meta, expected);
}

#[test]
fn errors_carry_line_numbers_and_duplicates_are_rejected() {
    let text = "{\"id\":\"a\",\"capability\":\"perception\",\"question\":\"q\",\"answer\":\"1\"}\n\nnot json\n";
    match parse_dataset(Cursor::new(text)) {
        Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let dup = "{\"id\":\"a\",\"capability\":\"perception\",\"question\":\"q\",\"answer\":\"1\"}\n".repeat(2);
    assert!(matches!(parse_dataset(Cursor::new(dup)), Err(DatasetError::DuplicateId(id)) if id == "a"));
    let mut bad = Sample::new("b", CapabilityTag::Perception, "q", "1");
    bad.difficulty = Some(1.5);
    let dir = tempfile::tempdir().unwrap();
    assert!(write_dataset(&[bad], dir.path().join("x.jsonl")).is_err());
    assert!(!dir.path().join("x.jsonl").exists());
}
