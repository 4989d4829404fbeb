#![no_main]

use std::collections::HashMap;
use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use threadsum_core::corpus::{parse_merges, SpecialTokens, Tokenizer};

fn fixture() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(|| {
        let vocab: HashMap<String, usize> =
            serde_json::from_str(include_str!("../../crates/core/tests/fixtures/vocab/vocab.json")).unwrap();
        let merges = parse_merges(include_str!("../../crates/core/tests/fixtures/vocab/merges.txt")).unwrap();
        Tokenizer::new(vocab, merges, SpecialTokens::default()).unwrap()
    })
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_merges(text);
    let tok = fixture();
    if let Ok(ids) = tok.encode(text) {
        assert!(ids.iter().all(|&i| i < tok.vocab_size()));
        let _ = tok.decode(&ids);
    }
});
