#![no_main]

use appo_core::policy::{checkpoint_from_str, checkpoint_to_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(params) = checkpoint_from_str(text) {
        assert!(params.is_finite());
        let again = checkpoint_from_str(&checkpoint_to_string(&params)).expect("round trip parses");
        assert_eq!(again, params);
    }
});
