#![no_main]

use gncprior::experiments::ExperimentSpec;
use libfuzzer_sys::fuzz_target;

// Decoding only: running an experiment would touch the file system.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = ExperimentSpec::from_json(text) {
        let _ = spec.parse();
    }
});
