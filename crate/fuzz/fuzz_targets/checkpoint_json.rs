#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = advtrain::data::decode_checkpoint(data) {
        // anything that decodes must either rebuild into a net or fail cleanly
        let _ = ckpt.to_net();
    }
});
