#![no_main]

use libfuzzer_sys::fuzz_target;
use threadsum_core::corpus::TrainingInstance;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    let Ok(inst) = TrainingInstance::from_json_line(line) else { return };
    let again = TrainingInstance::from_json_line(&inst.to_json_line()).expect("own output parses");
    assert_eq!(again, inst);
});
