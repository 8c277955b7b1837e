#![no_main]

use dyndecouple::pipeline::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<PipelineConfig>(data) {
        if c.validate().is_ok() {
            let bytes = serde_json::to_vec(&c).unwrap();
            let back: PipelineConfig = serde_json::from_slice(&bytes).unwrap();
            back.validate().unwrap();
        }
    }
});
