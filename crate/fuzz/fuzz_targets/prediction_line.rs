//! Prediction lines come from files a user may hand-edit: parsing must be
//! total, and accepted records must survive a serialize/parse round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

use changecap_core::trainer::parse_prediction_line;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(record) = parse_prediction_line(line) {
        let json = serde_json::to_string(&record).expect("record serializes");
        let again = parse_prediction_line(&json).expect("round trip parses");
        assert_eq!(record, again);
    }
});
