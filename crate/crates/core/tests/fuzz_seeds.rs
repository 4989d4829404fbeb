//! Replays the checked-in fuzz seed corpora through the same properties the
//! fuzz targets assert, so they also run on stable.

use std::fs;
use std::path::PathBuf;

use threadsum_core::config::{parse_config_str, parse_override, resolve};
use threadsum_core::corpus::{
    build_corpus, build_instance, extract_threads, parse_merges, CorpusOptions, FilterConfig, RawPost, Tokenizer,
    TrainingInstance,
};
use threadsum_tensor::Checkpoint;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut paths: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    assert!(!paths.is_empty(), "no seeds for {target}");
    paths.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn raw_post_seeds() {
    let mut parsed = 0;
    for data in seeds("raw_post") {
        let Ok(post) = RawPost::from_json_line(std::str::from_utf8(&data).unwrap()) else { continue };
        parsed += 1;
        let extraction = extract_threads(&post);
        let placed: usize = extraction.threads.iter().map(|t| t.len()).sum();
        assert_eq!(placed + extraction.skipped, post.comments.len());
        for thread in &extraction.threads {
            if let Ok(inst) = build_instance(&post, thread, &FilterConfig { min_comments: 1 }) {
                inst.check_pretraining().unwrap();
            }
        }
    }
    assert!(parsed >= 6);
}

#[test]
fn instance_line_seeds() {
    let mut ok = 0;
    for data in seeds("instance_line") {
        let Ok(inst) = TrainingInstance::from_json_line(std::str::from_utf8(&data).unwrap()) else { continue };
        ok += 1;
        assert_eq!(TrainingInstance::from_json_line(&inst.to_json_line()).unwrap(), inst);
    }
    assert!(ok >= 3);
}

#[test]
fn checkpoint_seeds() {
    for data in seeds("checkpoint_decode") {
        let ckpt = Checkpoint::decode(&data).unwrap();
        assert_eq!(ckpt.encode(), data);
        for cut in 0..data.len() {
            let _ = Checkpoint::decode(&data[..cut]);
        }
    }
}

#[test]
fn tokenizer_seeds() {
    let tok = Tokenizer::from_dir(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/vocab")).unwrap();
    for data in seeds("tokenizer") {
        let text = std::str::from_utf8(&data).unwrap();
        let _ = parse_merges(text);
        let ids = tok.encode(text).unwrap();
        assert!(ids.iter().all(|&i| i < tok.vocab_size()));
        tok.decode(&ids).unwrap();
    }
}

#[test]
fn config_seeds() {
    for data in seeds("config") {
        let text = std::str::from_utf8(&data).unwrap();
        if let Ok(file) = parse_config_str(text) {
            let _ = resolve(&file, &[]);
        }
        if let Ok(flag) = parse_override(text) {
            let _ = resolve(&Default::default(), &[flag]);
        }
    }
}

#[test]
fn corpus_pipeline_seeds() {
    let opts = CorpusOptions {
        filter: FilterConfig { min_comments: 2 },
        chunk_size: 3,
        ..CorpusOptions::default()
    };
    for data in seeds("corpus_pipeline") {
        let mut emitted = 0;
        let stats = build_corpus(&data[..], None, &opts, |inst| {
            inst.check_pretraining()?;
            emitted += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(stats.instances, emitted);
    }
}
