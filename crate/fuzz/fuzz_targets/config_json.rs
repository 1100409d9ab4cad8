#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = advtrain::config::TrainConfig::from_json(data) {
        // accepted configs must echo through JSON losslessly
        let echoed = cfg.to_json_value().to_string();
        let back = advtrain::config::TrainConfig::from_json(echoed.as_bytes()).unwrap();
        assert_eq!(back, cfg);
    }
});
