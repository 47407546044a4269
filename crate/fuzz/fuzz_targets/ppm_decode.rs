//! The pixmap decoder must reject arbitrary bytes without panicking, and
//! anything it accepts must re-encode to a decodable image.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = changecap_core::ppm::decode_p6(data) {
        assert_eq!(image.samples.len(), image.width * image.height * 3);
        assert!(image.samples.iter().all(|v| (0.0..=1.0).contains(v)));
        let bytes = changecap_core::ppm::encode_p6(&image);
        let again = changecap_core::ppm::decode_p6(&bytes).expect("re-encoded image decodes");
        assert_eq!(again.width, image.width);
        assert_eq!(again.height, image.height);
    }
});
