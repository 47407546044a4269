//! Checkpoint decoding must reject arbitrary bytes without panicking or
//! overallocating, and anything accepted must be stable under a
//! re-serialize/decode cycle (compared at the byte level, so NaN payloads
//! cannot hide).

#![no_main]

use libfuzzer_sys::fuzz_target;

use changecap_core::checkpoint::{from_bytes, to_bytes};
use changecap_core::tensor::Tensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(decoded) = from_bytes(data) {
        let refs: Vec<(&str, &Tensor)> =
            decoded.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let bytes = to_bytes(&refs);
        let again = from_bytes(&bytes).expect("re-serialized checkpoint decodes");
        let refs_again: Vec<(&str, &Tensor)> =
            again.iter().map(|(n, t)| (n.as_str(), t)).collect();
        assert_eq!(bytes, to_bytes(&refs_again));
    }
});
