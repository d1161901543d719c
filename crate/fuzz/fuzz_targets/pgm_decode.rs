#![no_main]

use gncprior::io::{decode_pgm, encode_pgm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // a decoded image survives a re-encode unchanged
        let bytes = encode_pgm(&img).unwrap();
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }
});
