#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| docqa_fuzz::lexical_json(data));
