#![no_main]

use battformer::data::{decode_dataset, encode_dataset};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(split) = decode_dataset(data) {
        let bytes = encode_dataset(&split);
        let again = decode_dataset(&bytes).expect("re-encoded cache decodes");
        assert_eq!(encode_dataset(&again), bytes);
    }
});
