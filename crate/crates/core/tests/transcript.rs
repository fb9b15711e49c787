mod common;

use adapedit::backend::protocol::Message;
use adapedit::backend::remote::RemoteBackend;
use adapedit::controller::{run_edit, EditParams};
use common::*;

pub const C: &str = "a dog standing on the grass";
pub const C_STAR: &str = "a dog sitting on the grass";

fn params() -> EditParams {
    EditParams {
        steps: 3,
        seed: 7,
        ..EditParams::default()
    }
}

/// Regenerates the recorded transcript: `cargo test --test transcript -- --ignored`.
#[test]
#[ignore]
fn record_transcript() {
    let (addr, host) = recording_host(2);
    run_edit(C, C_STAR, &params(), &mut RemoteBackend::new(addr.to_string())).unwrap();
    let sessions = host.join().unwrap();
    save_transcript(&transcript_path(), &sessions).unwrap();
}

#[test]
fn client_requests_match_the_recording() {
    let sessions = load_transcript(&transcript_path()).unwrap();
    let expected: usize = sessions.iter().map(|s| split_frames(&s.client).len()).sum();
    let (addr, host) = replay_host(sessions);
    let remote = run_edit(C, C_STAR, &params(), &mut RemoteBackend::new(addr.to_string())).unwrap();
    let report = host.join().unwrap();
    assert_eq!(report.mismatch, None);
    assert_eq!(report.frames_checked, expected);

    let local = run_edit(C, C_STAR, &params(), &mut MiniBackend::default()).unwrap();
    assert_eq!(remote.original, local.original);
    assert_eq!(remote.edited, local.edited);
    assert_eq!(remote.map_divergence, local.map_divergence);
}

#[test]
fn recorded_frames_reencode_byte_identically() {
    let sessions = load_transcript(&transcript_path()).unwrap();
    let mut types = Vec::new();
    for s in &sessions {
        for frame in split_frames(&s.client).into_iter().chain(split_frames(&s.host)) {
            let m = Message::decode(&frame).unwrap();
            assert_eq!(m.encode(), frame);
            types.push(m.msg_type());
        }
    }
    for t in [0x01, 0x81, 0x02, 0x82, 0x03, 0x83, 0x0F, 0x8F] {
        assert!(types.contains(&t), "transcript lacks message type {t:#04x}");
    }
}

#[test]
fn recording_is_reproducible() {
    let (addr, host) = recording_host(2);
    run_edit(C, C_STAR, &params(), &mut RemoteBackend::new(addr.to_string())).unwrap();
    let fresh = host.join().unwrap();
    assert_eq!(fresh, load_transcript(&transcript_path()).unwrap());
}
