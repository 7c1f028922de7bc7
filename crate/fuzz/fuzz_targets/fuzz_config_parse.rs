#![no_main]

use libfuzzer_sys::fuzz_target;
use mobiforge::config::{config_hash, parse_config};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let hash = config_hash(text);
    assert_eq!(hash.len(), 16);
    if let Ok(cfg) = parse_config(text) {
        assert_eq!(cfg.hash, hash);
        cfg.validate().expect("accepted config must validate");
    }
});
