#![no_main]

use corner_expand::einstein::ExpansionRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(rec) = ExpansionRecord::from_json(text) else { return };
    // validated records must rebuild a jet without panicking
    let _ = rec.to_jet();
});
