#![no_main]

use libfuzzer_sys::fuzz_target;
use spk::checkpoint::{Archive, CheckpointState};

// Checkpoint archives come from disk and may be truncated or corrupted by
// interrupted writes, so the decoder must reject arbitrary bytes without
// panicking. When the bytes do decode, re-encoding must round-trip.
fuzz_target!(|data: &[u8]| {
    let Ok(archive) = Archive::decode(data) else {
        return;
    };
    let encoded = archive.encode();
    let again = Archive::decode(&encoded).expect("re-encoded archive must decode");
    assert_eq!(archive.section_names(), again.section_names());
    let _ = CheckpointState::from_archive(&archive);
});
