#![no_main]

use appo_core::env::{read_dataset, write_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(instances) = read_dataset(data) {
        let mut buf = Vec::new();
        write_dataset(&instances, &mut buf).expect("accepted dataset serializes");
        assert_eq!(read_dataset(buf.as_slice()).expect("round trip parses"), instances);
    }
});
