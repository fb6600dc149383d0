#![no_main]

use libfuzzer_sys::fuzz_target;
use telecnot::tomography::PauliTransferMatrix;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ptm) = PauliTransferMatrix::from_json(text) {
        let back = PauliTransferMatrix::from_json(&ptm.to_json().unwrap()).unwrap();
        assert_eq!(back, ptm);
    }
});
