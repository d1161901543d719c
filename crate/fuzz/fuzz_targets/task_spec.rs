#![no_main]

use gncprior::solve::TaskSpec;
use gncprior::tensor::ImageTensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(task) = TaskSpec::from_json(text) {
        let clean = ImageTensor::filled(1, 4, 4, 0.5);
        task.degrade(&clean).unwrap();
    }
});
