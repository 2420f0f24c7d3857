#![no_main]

use dfa::data::snapshot::{parse_domain, write_domain};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((header, dataset)) = parse_domain(text) {
        let again = parse_domain(&write_domain(header, &dataset)).expect("written snapshot parses");
        assert_eq!(again, (header, dataset));
    }
});
