#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = advtrain::data::parse_idx_images(data) {
        // a successful parse must be internally consistent
        assert_eq!(images.pixels.len(), images.count * images.rows * images.cols);
    }
});
