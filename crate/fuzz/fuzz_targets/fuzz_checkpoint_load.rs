#![no_main]

use libfuzzer_sys::fuzz_target;
use mobiforge::checkpoint::{load_bytes, save_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok((header, model)) = load_bytes(data) {
        // one save canonicalizes; it must then be a byte-exact fixed point
        let bytes = save_bytes(&model, &header);
        let (h2, m2) = load_bytes(&bytes).expect("re-load of saved checkpoint");
        assert_eq!(h2, header);
        assert_eq!(m2, model);
        assert_eq!(save_bytes(&m2, &h2), bytes);
    }
});
