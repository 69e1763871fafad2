//! Fault-injection tests for the remote teacher client, driven by a
//! scripted in-process HTTP stub: server errors, timeouts, dropped
//! connections, and malformed payloads. The client must retry within
//! its budget, never abort a batch, and account every skip.

mod stub;

use std::time::Duration;

use dyncot::corpus::Post;
use dyncot::cotgen::{
    read_sidecar_lines, remote_generate, remote_records, write_sidecar, SkipRecord, TeacherError,
    TeacherKind, TeacherRequest,
};
use stub::{endpoint, Behavior, StubServer};

fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::new()
}

fn post(id: &str, text: &str, kps: &[&str]) -> Post {
    Post {
        id: id.into(),
        text: text.into(),
        image_tokens: vec!["<img:0>".into()],
        keyphrases: kps.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn success_returns_think_and_sends_model_prompt_and_bearer_token() {
    let server = StubServer::start(vec![Behavior::Ok("users tag snowy roads for reach")]);
    let mut ep = endpoint(&server);
    ep.token = Some("sekrit".into());
    let req = TeacherRequest::new("p0", "why hashtag UNIQUE-MARKER-42?");
    let reply = remote_generate(&client(), &req, &ep).expect("success");
    assert_eq!(reply.think, "users tag snowy roads for reach");
    assert_eq!(reply.attempts, 1);
    assert_eq!(server.request_count(), 1);
    let (headers, body) = server.request(0);
    assert!(
        headers.to_ascii_lowercase().contains("authorization: bearer sekrit"),
        "missing bearer token in:\n{headers}"
    );
    let parsed: serde_json::Value = serde_json::from_str(&body).expect("request body is JSON");
    assert_eq!(parsed["model"], "stub-model");
    assert_eq!(parsed["messages"][0]["role"], "user");
    assert!(parsed["messages"][0]["content"]
        .as_str()
        .unwrap()
        .contains("UNIQUE-MARKER-42"));
}

#[test]
fn server_errors_are_retried_until_one_succeeds() {
    let server = StubServer::start(vec![
        Behavior::Status(500, "boom"),
        Behavior::Status(500, "boom again"),
        Behavior::Ok("fine after hiccups"),
    ]);
    let ep = endpoint(&server);
    let reply = remote_generate(&client(), &TeacherRequest::new("p0", "prompt"), &ep).expect("retries succeed");
    assert_eq!(reply.think, "fine after hiccups");
    assert_eq!(reply.attempts, 3);
    assert_eq!(server.request_count(), 3);
}

#[test]
fn exhausted_budget_reports_the_last_error() {
    let server = StubServer::start(vec![Behavior::Status(503, "overloaded")]);
    let ep = endpoint(&server);
    let failure = remote_generate(&client(), &TeacherRequest::new("p0", "prompt"), &ep).unwrap_err();
    assert_eq!(failure.attempts, 3);
    match &failure.error {
        TeacherError::BudgetExhausted { budget, last } => {
            assert_eq!(*budget, 3);
            assert!(last.contains("503"), "last error was: {last}");
        }
        other => panic!("expected BudgetExhausted, got {other:?}"),
    }
    assert_eq!(server.request_count(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::start(vec![Behavior::Status(404, "no such route")]);
    let ep = endpoint(&server);
    let failure = remote_generate(&client(), &TeacherRequest::new("p0", "prompt"), &ep).unwrap_err();
    assert_eq!(failure.attempts, 1);
    assert!(
        matches!(failure.error, TeacherError::Status { status: 404, ref body } if body.contains("no such route"))
    );
    assert_eq!(server.request_count(), 1);
}

#[test]
fn rate_limiting_is_retried() {
    let server = StubServer::start(vec![Behavior::Status(429, "slow down"), Behavior::Ok("ok now")]);
    let ep = endpoint(&server);
    let reply = remote_generate(&client(), &TeacherRequest::new("p0", "prompt"), &ep).expect("429 retried");
    assert_eq!(reply.attempts, 2);
}

#[test]
fn timeouts_consume_the_whole_budget() {
    let server = StubServer::start(vec![Behavior::Hang(1500)]);
    let mut ep = endpoint(&server);
    ep.timeout = Duration::from_millis(40);
    ep.retry_budget = 2;
    let failure = remote_generate(&client(), &TeacherRequest::new("p0", "prompt"), &ep).unwrap_err();
    assert_eq!(failure.attempts, 2);
    match &failure.error {
        TeacherError::BudgetExhausted { budget, last } => {
            assert_eq!(*budget, 2);
            assert!(last.contains("timed out"), "last error was: {last}");
        }
        other => panic!("expected BudgetExhausted, got {other:?}"),
    }
}

#[test]
fn malformed_json_is_retried_then_exhausts() {
    let server = StubServer::start(vec![Behavior::Raw("{this is not json")]);
    let mut ep = endpoint(&server);
    ep.retry_budget = 2;
    let failure = remote_generate(&client(), &TeacherRequest::new("p0", "prompt"), &ep).unwrap_err();
    assert_eq!(failure.attempts, 2);
    match &failure.error {
        TeacherError::BudgetExhausted { last, .. } => {
            assert!(last.contains("malformed teacher response"), "last error was: {last}");
        }
        other => panic!("expected BudgetExhausted, got {other:?}"),
    }
    assert_eq!(server.request_count(), 2);
}

#[test]
fn empty_choices_and_empty_content_are_malformed() {
    let server = StubServer::start(vec![
        Behavior::Raw(r#"{"choices":[]}"#),
        Behavior::Ok("   "),
    ]);
    let mut ep = endpoint(&server);
    ep.retry_budget = 1;
    let no_choices = remote_generate(&client(), &TeacherRequest::new("p0", "prompt"), &ep).unwrap_err();
    assert_eq!(no_choices.attempts, 1);
    let msg = no_choices.error.to_string();
    assert!(msg.contains("no choices"), "unexpected error: {msg}");
    let blank = remote_generate(&client(), &TeacherRequest::new("p1", "prompt"), &ep).unwrap_err();
    let msg = blank.error.to_string();
    assert!(msg.contains("empty"), "unexpected error: {msg}");
}

#[test]
fn dropped_connections_are_transport_errors_and_retryable() {
    let server = StubServer::start(vec![Behavior::Drop, Behavior::Ok("recovered")]);
    let ep = endpoint(&server);
    let reply = remote_generate(&client(), &TeacherRequest::new("p0", "prompt"), &ep).expect("recovers");
    assert_eq!(reply.think, "recovered");
    assert_eq!(reply.attempts, 2);
}

#[test]
fn per_request_budget_overrides_the_endpoint_default() {
    let server = StubServer::start(vec![Behavior::Status(500, "boom")]);
    let ep = endpoint(&server);
    let mut req = TeacherRequest::new("p0", "prompt");
    req.retry_budget = Some(1);
    let failure = remote_generate(&client(), &req, &ep).unwrap_err();
    assert_eq!(failure.attempts, 1);
    assert_eq!(server.request_count(), 1);
}

#[test]
fn batch_survives_every_fault_and_accounts_each_skip_in_the_sidecar() {
    // Five posts, sequential fetch (parallel = 1):
    //   b0 succeeds; b1 hits two 500s and exhausts a budget of 2;
    //   b2's trace sanitizes to nothing; b3 times out twice; b4 has no
    //   gold keyphrases so no request is even sent.
    let server = StubServer::start(vec![
        Behavior::Ok("tags travel further on fresh snow mornings"),
        Behavior::Status(500, "boom"),
        Behavior::Status(500, "boom"),
        Behavior::Ok("<think> </think>"),
        Behavior::Hang(1500),
        Behavior::Hang(1500),
    ]);
    let mut ep = endpoint(&server);
    ep.retry_budget = 2;
    ep.timeout = Duration::from_millis(40);
    let posts = vec![
        post("b0", "fresh snow on the road", &["snow day"]),
        post("b1", "coffee before the drive", &["coffee"]),
        post("b2", "red sky at dawn", &["weather lore"]),
        post("b3", "harbor lights at dusk", &["harbor"]),
        post("b4", "a post with no gold labels", &[]),
    ];
    let (records, skips) = remote_records(&posts, &ep, "2026-08-14T00:00:00Z").expect("batch never aborts");

    assert_eq!(records.len(), 1);
    assert_eq!(records[0].post_id, "b0");
    assert_eq!(records[0].think, "tags travel further on fresh snow mornings");
    assert_eq!(records[0].teacher, TeacherKind::Remote);
    assert_eq!(records[0].created_at, "2026-08-14T00:00:00Z");
    assert_eq!(records[0].answer_keyphrases, vec!["snow day".to_string()]);

    assert_eq!(
        skips.iter().map(|s| s.post_id.as_str()).collect::<Vec<_>>(),
        vec!["b1", "b2", "b3", "b4"],
        "skips must come back in post order"
    );
    assert!(skips[0].reason.contains("retry budget of 2"), "{}", skips[0].reason);
    assert_eq!(skips[0].attempts, 2);
    assert!(skips[1].reason.contains("empty after sanitization"), "{}", skips[1].reason);
    assert_eq!(skips[1].attempts, 1);
    assert!(skips[2].reason.contains("timed out"), "{}", skips[2].reason);
    assert_eq!(skips[2].attempts, 2);
    assert!(skips[3].reason.contains("keyphrases"), "{}", skips[3].reason);
    assert_eq!(skips[3].attempts, 0);

    let dir = tempfile::tempdir().unwrap();
    let sidecar = dir.path().join("skips.jsonl");
    write_sidecar(&skips, &sidecar).unwrap();
    let reloaded: Vec<SkipRecord> = read_sidecar_lines(&sidecar).unwrap();
    assert_eq!(reloaded, skips, "sidecar must round-trip every skip");
}
