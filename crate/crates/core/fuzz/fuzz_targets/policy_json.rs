#![no_main]

use libfuzzer_sys::fuzz_target;
use minpro_lab::io::{policy_from_json, policy_to_json};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = policy_from_json(text) {
        let encoded = policy_to_json(&p).expect("decoded policy encodes");
        let back = policy_from_json(&encoded).expect("encoded policy decodes");
        assert_eq!(p, back);
    }
});
