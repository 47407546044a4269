//! Training-config parsing must be total over arbitrary text, and any
//! validated config must round-trip through its canonical text form.

#![no_main]

use libfuzzer_sys::fuzz_target;

use changecap_core::config::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::parse(text) {
        if cfg.validate().is_ok() {
            let echoed = TrainConfig::parse(&cfg.canonical_text()).expect("canonical text parses");
            assert_eq!(cfg, echoed);
        }
    }
});
