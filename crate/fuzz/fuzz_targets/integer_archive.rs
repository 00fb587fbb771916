#![no_main]

use libfuzzer_sys::fuzz_target;
use qnet::archive::decode_integer;

fuzz_target!(|data: &[u8]| {
    let (manifest, blob) = split(data);
    let _ = decode_integer(manifest, blob);
});

/// Inputs are `u32 LE manifest length ‖ manifest ‖ blob`.
fn split(data: &[u8]) -> (&[u8], &[u8]) {
    if data.len() < 4 {
        return (data, &[]);
    }
    let n = (u32::from_le_bytes(data[..4].try_into().unwrap()) as usize).min(data.len() - 4);
    data[4..].split_at(n)
}
