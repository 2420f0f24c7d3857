#![no_main]

use dfa_cli::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text) {
        let echoed = cfg.to_toml();
        let again = ExperimentConfig::parse(&echoed).expect("echoed config parses");
        assert_eq!(again.to_toml(), echoed);
    }
});
