#![no_main]

use appo_core::trace::{group_to_line, parse_trace_line, read_trace_bytes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything accepted must survive a write/read round trip unchanged.
    if let Ok(groups) = read_trace_bytes(data) {
        for g in &groups {
            let line = group_to_line(g).expect("accepted group serializes");
            assert_eq!(&parse_trace_line(&line, 1).expect("round trip parses"), g);
        }
    }
});
