#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // The binary bundle decoder handles untrusted bytes: it must never
    // panic, over-allocate from a forged header, or accept trailing data.
    let _ = mfbsde::paths::read_bundle(data);
});
