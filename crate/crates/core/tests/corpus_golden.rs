use std::fs;
use std::io::BufReader;
use std::path::PathBuf;

use threadsum_core::corpus::{build_corpus, read_instances, write_instances, CorpusOptions, MASK_TOKEN};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus").join(name)
}

#[test]
fn six_post_fixture_matches_golden_output() {
    let posts = fs::read(fixture("posts.jsonl")).unwrap();
    let mut out = Vec::new();
    let stats = build_corpus(&posts[..], None, &CorpusOptions::default(), |inst| {
        out.push(inst.clone());
        Ok(())
    })
    .unwrap();
    let mut bytes = Vec::new();
    write_instances(&mut bytes, &out).unwrap();
    assert_eq!(String::from_utf8(bytes).unwrap(), fs::read_to_string(fixture("expected.jsonl")).unwrap());

    let inst = &out[0];
    assert_eq!(inst.tree.utterances()[0].text, MASK_TOKEN);
    assert_eq!(inst.summary, "How do I fix my bike? Check the chain tension first: [URL]");

    let expected: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixture("expected_stats.json")).unwrap()).unwrap();
    assert_eq!(serde_json::to_value(&stats).unwrap(), expected);
}

#[test]
fn chunk_size_does_not_change_output() {
    let posts = fs::read(fixture("posts.jsonl")).unwrap();
    let run = |chunk_size| {
        let opts = CorpusOptions {
            chunk_size,
            ..CorpusOptions::default()
        };
        let mut out = Vec::new();
        build_corpus(&posts[..], None, &opts, |inst| {
            out.push(inst.to_json_line());
            Ok(())
        })
        .unwrap();
        out
    };
    assert_eq!(run(1), run(256));
}

#[test]
fn hundred_instance_shard_reserialises_byte_for_byte() {
    let original = fs::read_to_string(fixture("shard-100.jsonl")).unwrap();
    let instances: Vec<_> = read_instances(BufReader::new(original.as_bytes()))
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(instances.len(), 100);
    let mut bytes = Vec::new();
    write_instances(&mut bytes, &instances).unwrap();
    assert_eq!(String::from_utf8(bytes).unwrap(), original);
}
