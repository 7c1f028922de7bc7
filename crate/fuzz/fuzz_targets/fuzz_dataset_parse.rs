#![no_main]

use libfuzzer_sys::fuzz_target;
use mobiforge::dataset::Dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = Dataset::parse_jsonl(text) {
        // accepted inputs must survive a serialize/parse cycle unchanged
        let out = ds.to_jsonl();
        let back = Dataset::parse_jsonl(&out).expect("re-parse of serialized dataset");
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl(), out);
    }
});
