#![no_main]

use libfuzzer_sys::fuzz_target;
use mzm_braid::Protocol;

// Accepted protocols must survive a save/load round trip bit for bit.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = Protocol::from_json(text, "fuzz") {
        let again = Protocol::from_json(&p.to_json(), "fuzz").expect("re-parse of own output");
        assert_eq!(p, again);
    }
});
