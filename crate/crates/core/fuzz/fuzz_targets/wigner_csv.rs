#![no_main]

use libfuzzer_sys::fuzz_target;
use telecnot::tomography::wigner::read_wigner_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_wigner_csv(data);
});
