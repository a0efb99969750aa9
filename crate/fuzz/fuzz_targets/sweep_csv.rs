#![no_main]

use libfuzzer_sys::fuzz_target;
use mzm_braid::experiments::SweepResult;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = SweepResult::read_csv(data, "fuzz") {
        let mut buf = Vec::new();
        s.write_csv(&mut buf).expect("write to memory");
        let again = SweepResult::read_csv(buf.as_slice(), "fuzz").expect("re-parse of own output");
        assert_eq!(s.rows.len(), again.rows.len());
    }
});
