//! Manifest lines are attacker-ambivalent JSON from disk: parsing must be
//! total, and accepted records must survive a serialize/parse round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

use changecap_core::dataset::parse_manifest_line;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(record) = parse_manifest_line(line) {
        let json = serde_json::to_string(&record).expect("record serializes");
        let again = parse_manifest_line(&json).expect("round trip parses");
        assert_eq!(record, again);
    }
});
