#![no_main]

use libfuzzer_sys::fuzz_target;
use telecnot::formats::{read_records, write_records};

fuzz_target!(|data: &[u8]| {
    if let Ok(lines) = read_records(data) {
        let mut buf = Vec::new();
        write_records(&lines, &mut buf).unwrap();
        assert_eq!(read_records(&buf[..]).unwrap(), lines);
    }
});
