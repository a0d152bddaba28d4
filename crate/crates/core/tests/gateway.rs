use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use hybridgen::demos::Interval;
use hybridgen::gateway::*;
use hybridgen::pipeline::plan_request;
use hybridgen::simenv::builtin;
use proptest::prelude::*;

mod common;
use common::*;

/// One request as the stub saw it.
#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<String>,
    body: serde_json::Value,
}

/// Serves one canned answer per connection, in order, then stops.
fn stub(answers: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/generate", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in answers {
            let (mut sock, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(sock.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                headers,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            sock.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn http(url: &str, token_env: &str) -> HttpTransport {
    let mut t = HttpTransport::new(url);
    t.backoff_base = Duration::from_millis(20);
    t.timeout = Duration::from_secs(5);
    t.token_env = token_env.into();
    t
}

fn ok_body(text: &str) -> String {
    serde_json::json!({ "text": text }).to_string()
}

const SAMPLE: &str = "```json\n[\n{\"start\": 2, \"end\": 4},\n{\"start\": 7, \"end\": 11}\n]\n```";

#[test]
fn two_server_errors_then_success() {
    let (url, seen) = stub(vec![
        (500, "boom".into()),
        (503, "busy".into()),
        (200, ok_body(SAMPLE)),
    ]);
    // a variable only this test sets
    std::env::set_var("HYBRIDGEN_TEST_TOKEN_RETRY", "s3cret");
    let t = Transport::Http(http(&url, "HYBRIDGEN_TEST_TOKEN_RETRY"));
    let req = VlmRequest::video_analysis("square", "demo_000");
    let start = Instant::now();
    let resp = fetch(&req, &t).unwrap();
    // backoff 20 ms then 40 ms
    assert!(start.elapsed() >= Duration::from_millis(60));
    assert!(resp.valid);
    assert_eq!(resp.intervals().unwrap().len(), 2);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    for s in seen.iter() {
        assert!(s.headers.iter().any(|h| h == "Authorization: Bearer s3cret" || h == "authorization: Bearer s3cret"));
        assert_eq!(s.body["prompt"], req.prompt);
        assert_eq!(s.body["attachments"], serde_json::json!(["demo_000"]));
        assert_eq!(s.body["kind"], "video_analysis");
    }
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = stub(vec![(404, "no such model".into()), (200, ok_body(SAMPLE))]);
    let t = http(&url, "HYBRIDGEN_TEST_TOKEN_UNSET");
    let err = t.fetch_text(&VlmRequest::video_analysis("square", "d")).unwrap_err();
    match err {
        TransportError::Status { status, attempts, body } => {
            assert_eq!((status, attempts), (404, 1));
            assert_eq!(body, "no such model");
        }
        e => panic!("{e:?}"),
    }
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert!(!seen[0].headers.iter().any(|h| h.to_ascii_lowercase().starts_with("authorization")));
}

#[test]
fn persistent_server_errors_give_up_after_three_attempts() {
    let (url, seen) = stub(vec![(500, "a".into()), (500, "b".into()), (500, "c".into())]);
    let err = http(&url, "HYBRIDGEN_TEST_TOKEN_UNSET")
        .fetch_text(&VlmRequest::video_analysis("square", "d"))
        .unwrap_err();
    assert!(matches!(err, TransportError::Status { status: 500, attempts: 3, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn unreachable_endpoint_is_a_connection_error() {
    // bind then drop to get a port nobody listens on
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut t = http(&format!("http://127.0.0.1:{port}/"), "HYBRIDGEN_TEST_TOKEN_UNSET");
    t.max_attempts = 2;
    let err = t.fetch_text(&VlmRequest::video_analysis("square", "d")).unwrap_err();
    assert!(matches!(err, TransportError::Connection { attempts: 2, .. }), "{err:?}");
}

#[test]
fn non_json_reply_is_a_bad_response() {
    let (url, _) = stub(vec![(200, "plain words".into())]);
    let err = http(&url, "HYBRIDGEN_TEST_TOKEN_UNSET")
        .fetch_text(&VlmRequest::video_analysis("square", "d"))
        .unwrap_err();
    assert!(matches!(err, TransportError::BadResponse(_)));
}

#[test]
fn prompt_example_parses_and_re_renders() {
    let p = parse_intervals(SAMPLE);
    assert!(p.valid);
    let expected = vec![Interval { start: 2.0, end: 4.0 }, Interval { start: 7.0, end: 11.0 }];
    assert_eq!(p.intervals, expected);
    let again = render_intervals(&p.intervals);
    assert_eq!(parse_intervals(&again).intervals, expected);
    assert_eq!(render_intervals(&parse_intervals(&again).intervals), again);
    // the same list appears verbatim in the rendered prompt
    let prompt = render_prompt(RequestKind::VideoAnalysis, "square");
    assert!(prompt.contains("{\"start\": 2, \"end\": 4}"));
    assert!(prompt.contains("{\"start\": 7, \"end\": 11}"));
}

#[test]
fn prompts_substitute_the_task_and_nothing_else() {
    let a = render_prompt(RequestKind::ConstraintProposal, "AAA");
    let b = render_prompt(RequestKind::ConstraintProposal, "BBB");
    assert_eq!(a.replace("AAA", "BBB"), b);
    assert!(a.contains("sub-goal constraints"));
    assert!(a.contains("num_stages"));
    assert_ne!(render_prompt(RequestKind::VideoAnalysis, "x"), render_prompt(RequestKind::ConstraintProposal, "x"));
}

#[test]
fn proposal_without_image_is_rejected_before_transport() {
    let mut req = VlmRequest::constraint_proposal("t", "img", None);
    req.attachments.clear();
    let t = Transport::recorded("/nonexistent");
    assert!(matches!(fetch(&req, &t), Err(FetchError::Request(MissingImage))));
}

#[test]
fn committed_recordings_resolve_deterministically() {
    for name in ["square", "threading"] {
        let task = builtin(name).unwrap();
        let t = Transport::recorded(recordings(name));
        for f in std::fs::read_dir(recordings(name)).unwrap() {
            let f = f.unwrap().file_name().into_string().unwrap();
            assert!(f.len() == 64 + 5 && f.ends_with(".json"), "{f}");
        }
        let req = plan_request(&task);
        let a = fetch(&req, &t).unwrap();
        assert_eq!(a, fetch(&req, &t).unwrap());
        assert!(a.valid, "{:?}", a.violations);
        assert_eq!(a.plan(), Some(&task.expert.plan));
    }
}

#[test]
fn missing_recording_names_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let req = VlmRequest::video_analysis("square", "nope");
    let err = Transport::recorded(dir.path()).fetch_text(&req).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("recording not found"));
    assert!(msg.contains(&req.hash()));

    // a recording of the wrong kind under the right name is refused
    let rec = RecordedTransport::new(dir.path());
    std::fs::write(
        rec.path_for(&req),
        serde_json::to_string(&Recording {
            kind: RequestKind::ConstraintProposal,
            attachments: vec![],
            response: String::new(),
        })
        .unwrap(),
    )
    .unwrap();
    assert!(matches!(rec.fetch_text(&req), Err(TransportError::InvalidRecording { .. })));
    std::fs::write(rec.path_for(&req), "{").unwrap();
    assert!(matches!(rec.fetch_text(&req), Err(TransportError::InvalidRecording { .. })));
}

#[test]
fn transport_specs() {
    assert!(matches!("recorded:fixtures/x".parse::<Transport>(), Ok(Transport::Recorded(_))));
    match "http:http://localhost:8080/gen".parse::<Transport>() {
        Ok(Transport::Http(h)) => {
            assert_eq!(h.endpoint, "http://localhost:8080/gen");
            assert_eq!(h.max_attempts, 3);
            assert_eq!(h.backoff_base, Duration::from_secs(1));
            assert_eq!(h.in_flight_limit(), 2);
            assert_eq!(h.token_env, TOKEN_ENV);
        }
        other => panic!("{other:?}"),
    }
    for bad in ["recorded:", "http:ftp://x", "ftp://x", "", "carrier-pigeon:coop"] {
        assert!(matches!(bad.parse::<Transport>(), Err(TransportError::BadSpec(_))), "{bad}");
    }
}

#[test]
fn plan_response_checks_the_python_skeleton() {
    let plan = builtin("square").unwrap().expert.plan;
    let text = render_plan_response(&plan);
    let p = parse_constraint_plan(&text);
    assert!(p.valid, "{:?}", p.violations);
    assert_eq!(p.plan.as_ref(), Some(&plan));

    let tampered = text.replace("num_stages = 2", "num_stages = 3");
    let p = parse_constraint_plan(&tampered);
    assert!(!p.valid);
    assert!(p.violations.iter().any(|v| v.contains("num_stages")));

    let p = parse_constraint_plan("I could not decide.");
    assert!(!p.valid && p.plan.is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn parsers_never_panic_on_noise(s in ".{0,300}") {
        let a = parse_intervals(&s);
        prop_assert!(a.valid == a.violations.is_empty());
        let b = parse_constraint_plan(&s);
        prop_assert!(b.valid == b.violations.is_empty());
        let _ = s.parse::<Transport>();
    }

    #[test]
    fn parsers_never_panic_inside_fences(s in "[\\[\\]{}\":,0-9a-z. \\n-]{0,200}") {
        let text = format!("```json\n{s}\n```");
        let a = parse_intervals(&text);
        prop_assert!(a.valid == a.violations.is_empty());
        let b = parse_constraint_plan(&text);
        prop_assert!(b.valid == b.violations.is_empty());
    }

    #[test]
    fn rendered_intervals_round_trip(raw in prop::collection::vec((0u32..500, 1u32..50, 0u32..4), 0..10)) {
        // disjoint, sorted, quarter-second resolution
        let mut t = 0.0;
        let mut ivs = Vec::new();
        for (gap, len, frac) in raw {
            let start = t + gap as f64 * 0.25 + frac as f64 * 0.25;
            let end = start + len as f64 * 0.25;
            ivs.push(Interval { start, end });
            t = end;
        }
        let p = parse_intervals(&render_intervals(&ivs));
        prop_assert!(p.valid);
        prop_assert_eq!(p.intervals, ivs);
    }
}
