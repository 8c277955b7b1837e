#![no_main]

use dyndecouple::mask::Mask;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Mask::from_pgm(data) {
        assert_eq!(m.data().len(), m.height() * m.width());
        assert_eq!(Mask::from_pgm(&m.to_pgm()).unwrap(), m);
    }
});
