#![no_main]

use libfuzzer_sys::fuzz_target;
use minpro_lab::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_toml_str(text) {
        // Anything accepted must echo and re-parse to the same value.
        let echoed = cfg.to_toml_string().expect("resolved config serializes");
        let again = ExperimentConfig::from_toml_str(&echoed).expect("echoed config parses");
        assert_eq!(cfg, again);
    }
});
