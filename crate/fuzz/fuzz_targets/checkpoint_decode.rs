#![no_main]

use libfuzzer_sys::fuzz_target;
use threadsum_tensor::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = Checkpoint::decode(data) else { return };
    let again = Checkpoint::decode(&ckpt.encode()).expect("own output decodes");
    assert_eq!(again.encode(), ckpt.encode());
});
