mod common;

use carm_sim::config::SimConfig;
use carm_sim::replay::{parse_log, read_log, replay, replay_log, ReplayError, SessionRecorder};
use carm_sim::session::{CommandMessage, Session, SessionState, Verb};
use serde_json::json;

fn record(config: &SimConfig, commands: &[CommandMessage]) -> (Session, Vec<u8>) {
    let mut session = Session::new(config.clone());
    let mut rec = SessionRecorder::new(Vec::new(), Some(config)).unwrap();
    for c in commands {
        rec.apply(&mut session, c).unwrap();
    }
    (session, rec.into_inner())
}

#[test]
fn empty_log_gives_initial_state() {
    let log = parse_log(&b""[..]).unwrap();
    let cfg = SimConfig::default();
    let session = replay(&log, &cfg);
    assert_eq!(session.state(), &SessionState::initial(&cfg));
}

#[test]
fn replay_of_random_commands_is_bit_exact() {
    let cfg = SimConfig {
        depth_noise_sigma: 1.0,
        seed: 42,
        ..SimConfig::default()
    };
    let commands = common::random_commands(5, 100);
    for verb in Verb::ALL {
        assert!(commands.iter().any(|c| c.verb == verb.as_str()), "no {verb:?} in the mix");
    }
    let (mut live, bytes) = record(&cfg, &commands);
    assert!(live.state().seq > 50, "too few accepted commands: {}", live.state().seq);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.jsonl");
    std::fs::write(&path, &bytes).unwrap();
    // The header's config must win over the fallback.
    let mut replayed = replay_log(&path, &SimConfig::default()).unwrap();

    assert_eq!(replayed.state(), live.state());
    let a = serde_json::to_string(&live.snapshot()).unwrap();
    let b = serde_json::to_string(&replayed.snapshot()).unwrap();
    assert!(a == b, "terminal snapshots differ");
}

#[test]
fn log_without_header_uses_fallback_config() {
    let cfg = SimConfig {
        seed: 3,
        ..SimConfig::default()
    };
    let mut rec = SessionRecorder::new(Vec::new(), None).unwrap();
    let mut s = Session::new(cfg.clone());
    rec.apply(&mut s, &CommandMessage::new(Verb::SaveView, json!({ "name": "a" }))).unwrap();
    let log = parse_log(&rec.into_inner()[..]).unwrap();
    assert!(log.config.is_none());
    assert_eq!(replay(&log, &cfg).state(), s.state());
}

#[test]
fn malformed_entry_is_reported_with_its_line() {
    let cfg = SimConfig::default();
    let commands = common::random_commands(1, 5);
    let (_, bytes) = record(&cfg, &commands);
    let mut lines: Vec<String> = String::from_utf8(bytes).unwrap().lines().map(str::to_string).collect();
    // Line 1 is the config header; corrupt the fourth line.
    lines[3] = r#"{"type":"cmd","verb":"save_view","args":"#.to_string();
    let text = lines.join("\n");
    match parse_log(text.as_bytes()) {
        Err(ReplayError::Corrupt { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a corrupt-entry error, got {other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"type\":\"cmd\",\"verb\":\"hide_view\",\"args\":null,\"request_id\":null}\nnot json\n").unwrap();
    let err = read_log(&path).unwrap_err();
    assert!(err.to_string().starts_with("line 2"), "{err}");
}

#[test]
fn header_after_commands_is_rejected() {
    let cfg = SimConfig::default();
    let mut rec = SessionRecorder::new(Vec::new(), None).unwrap();
    rec.record(&CommandMessage::new(Verb::HideView, serde_json::Value::Null)).unwrap();
    let mut bytes = rec.into_inner();
    let header = SessionRecorder::new(Vec::new(), Some(&cfg)).unwrap().into_inner();
    bytes.extend_from_slice(&header);
    match parse_log(&bytes[..]) {
        Err(ReplayError::Corrupt { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a corrupt-entry error, got {other:?}"),
    }
}
