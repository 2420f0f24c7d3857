#![no_main]

use dfa::trainer::{parse_log, write_log};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(log) = parse_log(text) {
        assert_eq!(parse_log(&write_log(&log)).expect("written log parses"), log);
    }
});
