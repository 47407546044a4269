//! Caption analysis is total over arbitrary text: classification,
//! template stripping, tokenization, and vocabulary encode/decode must
//! never panic, and encoding against a vocabulary built from the same
//! text must always succeed with in-range indices.

#![no_main]

use libfuzzer_sys::fuzz_target;

use changecap_core::caption::{parse_change_type, strip_template, tokenize};
use changecap_core::vocab::{Vocabulary, BOS, EOS};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (_ty, _unparsed) = parse_change_type(text);
    let _ = strip_template(text);
    let tokens = tokenize(text);
    let vocab = Vocabulary::build(std::iter::once(text));
    let encoded = vocab.encode(text, 64).expect("own vocabulary covers the caption");
    assert!(encoded.len() >= 2 && encoded.len() <= 64);
    assert_eq!(encoded.first(), Some(&BOS));
    assert_eq!(encoded.last(), Some(&EOS));
    assert!(encoded.iter().all(|&t| t < vocab.len()));
    let decoded = vocab.decode(&encoded).expect("indices are in range");
    assert_eq!(decoded.split_whitespace().count(), tokens.len().min(62));
});
