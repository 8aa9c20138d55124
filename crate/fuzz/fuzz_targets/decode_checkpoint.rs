#![no_main]

use libfuzzer_sys::fuzz_target;
use tspo_core::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((agent, state)) = decode_checkpoint(text) {
        let again = encode_checkpoint(&agent, &state);
        let (agent2, state2) = decode_checkpoint(&again).expect("re-encoded checkpoint parses");
        assert_eq!(agent, agent2);
        assert_eq!(state.params, state2.params);
        assert_eq!(encode_checkpoint(&agent2, &state2), again);
    }
});
