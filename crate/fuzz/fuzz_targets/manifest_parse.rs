//! Framing + JSON manifest decoding alone, without payload validation.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = dlo::io::parse_manifest(data);
});
