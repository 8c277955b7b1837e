#![no_main]

use dyndecouple::synth::SceneSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = SceneSpec::from_json_slice(data) {
        let bytes = serde_json::to_vec(&s).unwrap();
        SceneSpec::from_json_slice(&bytes).expect("accepted spec round-trips");
    }
});
