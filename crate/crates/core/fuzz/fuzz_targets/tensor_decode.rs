#![no_main]

use dyndecouple::tensor::TensorMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = TensorMap::decode(data) {
        let bytes = t.encode().expect("decoded tensor re-encodes");
        assert_eq!(bytes.len(), t.encoded_len());
        let again = TensorMap::decode(&bytes).expect("re-encoded tensor decodes");
        assert_eq!(again.encode().unwrap(), bytes);
    }
});
