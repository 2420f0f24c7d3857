#![no_main]

use dfa::trainer::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ckpt) = Checkpoint::parse(text) {
        let state = ckpt.state().expect("parsed checkpoint restores");
        assert!(state.is_finite());
    }
});
