//! Full checkpoint decoding from arbitrary bytes. Must never panic,
//! overflow, or read out of bounds; malformed input returns `Err`.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = dlo::io::load_bytes::<f32>(data);
    let _ = dlo::io::load_bytes::<f64>(data);
});
