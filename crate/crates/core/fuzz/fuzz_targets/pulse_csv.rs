#![no_main]

use libfuzzer_sys::fuzz_target;
use telecnot::formats::{read_pulse_csv, write_pulse_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(drives) = read_pulse_csv(data) {
        let mut buf = Vec::new();
        write_pulse_csv(&drives, &mut buf).unwrap();
        let back = read_pulse_csv(&buf[..]).unwrap();
        for (a, b) in back.iter().zip(&drives) {
            assert_eq!(a.samples, b.samples);
        }
    }
});
