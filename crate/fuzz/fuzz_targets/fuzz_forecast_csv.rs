#![no_main]

use libfuzzer_sys::fuzz_target;
use mobiforge::report::{forecast_doc_to_string, parse_forecast_csv, plotdata_to_string};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = parse_forecast_csv(text) {
        let out = forecast_doc_to_string(&doc);
        let back = parse_forecast_csv(&out).expect("re-parse of serialized forecast");
        assert_eq!(back, doc);
        // the plot reshape must succeed on anything the parser accepts
        let _ = plotdata_to_string(&doc);
    }
});
