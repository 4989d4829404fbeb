#![no_main]

use libfuzzer_sys::fuzz_target;
use threadsum_core::corpus::{build_corpus, CorpusOptions, FilterConfig};

fuzz_target!(|data: &[u8]| {
    let opts = CorpusOptions {
        filter: FilterConfig { min_comments: 2 },
        chunk_size: 3,
        ..CorpusOptions::default()
    };
    let mut emitted = 0;
    if let Ok(stats) = build_corpus(data, None, &opts, |inst| {
        inst.check_pretraining()?;
        emitted += 1;
        Ok(())
    }) {
        assert_eq!(stats.instances, emitted);
    }
});
