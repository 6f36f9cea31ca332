mod common;

use common::*;
use futures_util::{SinkExt, StreamExt};
use mentalsim_core::harness::{NeemSink, World};
use mentalsim_core::wire::{canonical, format_float, serve, Hub, Mode};
use proptest::prelude::*;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

#[test]
fn protocol_transcripts_replay_exactly() {
    let all = transcripts(PROTOCOL_DOC);
    assert!(all.len() >= 2, "expected sim and belief transcripts");
    for t in &all {
        if let Some((line, want, got)) = first_difference(t, &replay(t)) {
            panic!("line {line}\nexpected: {want}\n     got: {got}");
        }
    }
}

fn kitchen_hub(mode: Mode) -> Hub {
    Hub::new(World::kitchen().simulation(0, "serve", &NeemSink::Memory).unwrap(), mode)
}

#[test]
fn malformed_frames_get_one_error_each() {
    let mut hub = kitchen_hub(Mode::Sim);
    let conn = hub.connect();
    for raw in ["", "{", "[]", "null", "42", "{\"op\":7}", "{\"op\":\"subscribe\"}", "\u{0}"] {
        let replies = hub.handle_text(conn, raw);
        assert_eq!(replies.len(), 1, "{raw:?} -> {replies:?}");
        let v: Value = serde_json::from_str(&replies[0]).unwrap();
        assert_eq!(v["op"], "status");
        assert_eq!(v["level"], "error");
    }
}

#[test]
fn websocket_server_answers_like_the_hub() {
    let frames = [
        r#"{"op":"call_service","service":"/sim/get_object_pose","args":{"name":"milk"},"id":"c1"}"#,
        r#"{"op":"subscribe","topic":"/nope","id":"s1"}"#,
    ];
    let mut local = kitchen_hub(Mode::Sim);
    let conn = local.connect();
    // Service calls are answered on the next tick.
    let mut want: Vec<String> = local.handle_text(conn, frames[0]);
    want.extend(local.tick().into_iter().map(|(_, f)| f));
    want.extend(local.handle_text(conn, frames[1]));

    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let got = rt.block_on(async {
        // Slow clock so the milk cannot move between the two hubs.
        let server = serve(kitchen_hub(Mode::Sim), "127.0.0.1:0", 0.01).await.unwrap();
        let url = format!("ws://{}", server.local_addr);
        let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        let mut got = Vec::new();
        for f in frames {
            ws.send(Message::text(f)).await.unwrap();
            let msg = tokio::time::timeout(std::time::Duration::from_secs(10), ws.next())
                .await
                .expect("reply in time")
                .unwrap()
                .unwrap();
            got.push(msg.into_text().unwrap().to_string());
        }
        ws.close(None).await.unwrap();
        server.shutdown().await;
        got
    });
    assert_eq!(got, want);
}

#[test]
fn bind_failure_is_reported() {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let first = serve(kitchen_hub(Mode::Sim), "127.0.0.1:0", 1.0).await.unwrap();
        let taken = first.local_addr.to_string();
        assert!(serve(kitchen_hub(Mode::Sim), &taken, 1.0).await.is_err());
        first.shutdown().await;
    });
}

fn arb_json() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(|i| json!(i)),
        (-1e12..1e12f64).prop_map(|f| json!(f)),
        (-1e-3..1e-3f64).prop_map(|f| json!(f)),
        "[a-zA-Z0-9 \"\\\\/\u{e9}]{0,6}".prop_map(Value::String),
    ];
    leaf.prop_recursive(4, 32, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..5).prop_map(Value::Array),
            prop::collection::btree_map("[a-z]{1,4}", inner, 0..5)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

/// Significant digits of a plain or scientific decimal literal.
fn significant_digits(s: &str) -> usize {
    let mantissa = s.split(['e', 'E']).next().unwrap();
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let trimmed = digits.trim_start_matches('0').trim_end_matches('0');
    trimmed.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn canonical_is_idempotent(v in arb_json()) {
        let once = canonical(&v);
        let back: Value = serde_json::from_str(&once).unwrap();
        prop_assert_eq!(canonical(&back), once);
    }

    #[test]
    fn floats_keep_nine_significant_digits(f in prop_oneof![-1e15..1e15f64, -1.0..1.0f64, -1e-7..1e-7f64]) {
        let s = format_float(f);
        let back: f64 = s.parse().unwrap();
        // Oracle: rounding to 9 significant digits through the standard formatter.
        let want: f64 = format!("{f:.8e}").parse().unwrap();
        prop_assert_eq!(back, want, "{} -> {}", f, s);
        prop_assert!(significant_digits(&s) <= 9, "{}", s);
        prop_assert!(s.contains('.') || s.contains('e'), "{}", s);
    }
}

#[test]
fn float_format_fixtures() {
    let cases = [
        (0.0, "0.0"),
        (1.0, "1.0"),
        (-2.5, "-2.5"),
        (0.1 + 0.2, "0.3"),
        (1.0 / 3.0, "0.333333333"),
        (123456789.0, "123456789.0"),
        (1234567890.0, "1.23456789e9"),
        (0.00001, "0.00001"),
        (0.000001, "1.0e-6"),
        (f64::NAN, "null"),
    ];
    for (f, want) in cases {
        assert_eq!(format_float(f), want, "{f}");
    }
    assert_eq!(canonical(&json!({"b": 1, "a": [1.5, null, "x"]})), r#"{"a":[1.5,null,"x"],"b":1}"#);
}
