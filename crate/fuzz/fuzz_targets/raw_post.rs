#![no_main]

use libfuzzer_sys::fuzz_target;
use threadsum_core::corpus::{build_instance, extract_threads, FilterConfig, RawPost};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let Ok(post) = RawPost::from_json_line(line) else { return };
    let extraction = extract_threads(&post);
    let placed: usize = extraction.threads.iter().map(|t| t.len()).sum();
    assert_eq!(placed + extraction.skipped, post.comments.len());
    for thread in &extraction.threads {
        if let Ok(inst) = build_instance(&post, thread, &FilterConfig { min_comments: 1 }) {
            inst.check_pretraining().unwrap();
        }
    }
});
