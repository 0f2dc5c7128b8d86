#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // The config parser must never panic on any input; invalid configs are
    // reported as structured errors.
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = mfbsde::config::parse_config(text);
    }
});
