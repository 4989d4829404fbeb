#![no_main]

use libfuzzer_sys::fuzz_target;
use threadsum_core::config::{parse_config_str, parse_override, resolve};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_config_str(text) {
        let _ = resolve(&file, &[]);
    }
    if let Ok(flag) = parse_override(text) {
        let _ = resolve(&Default::default(), &[flag]);
    }
});
