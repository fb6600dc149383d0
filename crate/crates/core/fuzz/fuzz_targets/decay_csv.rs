#![no_main]

use libfuzzer_sys::fuzz_target;
use telecnot::formats::read_decay_csv;
use telecnot::tomography::rb_fit;

fuzz_target!(|data: &[u8]| {
    if let Ok(points) = read_decay_csv(data) {
        let _ = rb_fit(&points);
    }
});
