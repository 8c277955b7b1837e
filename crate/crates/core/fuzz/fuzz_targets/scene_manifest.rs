#![no_main]

use dyndecouple::scene::SceneManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = SceneManifest::from_json_slice(data) {
        let bytes = serde_json::to_vec(&m).unwrap();
        SceneManifest::from_json_slice(&bytes).expect("accepted manifest round-trips");
    }
});
