#![no_main]

use gncprior::gmm::GaussianMixture;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(gmm) = GaussianMixture::from_json(text) {
        let x = vec![0.0; gmm.dim()];
        let _ = gmm.smoothed_energy(&x, 1.0);
    }
});
