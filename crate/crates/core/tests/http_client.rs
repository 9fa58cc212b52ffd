#![cfg(feature = "http")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use cdrbench::llm::{
    build_gateway, Clock, CompletionRequest, Gateway, HttpProvider, LlmError, ProviderConfig, ProviderKind, RetryPolicy,
    VirtualClock,
};

struct Recorded {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serve one scripted `(status, body)` per connection, recording requests.
fn serve(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Recorded>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut raw = vec![0; length];
            reader.read_exact(&mut raw).unwrap();
            log.lock().unwrap().push(Recorded {
                path: request_line.split_whitespace().nth(1).unwrap().to_string(),
                auth,
                body: serde_json::from_slice(&raw).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn ok_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn provider(endpoint: &str) -> HttpProvider {
    HttpProvider::new(endpoint, "gpt-test", 0.0, Some("sk-local".into()), Duration::from_secs(5)).unwrap()
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (endpoint, seen) = serve(vec![
        (500, "{}".into()),
        (429, "{}".into()),
        (200, ok_body("Halo 3\nPortal")),
    ]);
    let clock = Arc::new(VirtualClock::default());
    let gateway = Gateway::new(Arc::new(provider(&endpoint)), "gpt-test", 0.0)
        .with_clock(clock.clone())
        .with_retry(RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(60),
        });
    let c = gateway.complete(&CompletionRequest::plain("rank these")).unwrap();
    assert_eq!(c.raw_text, "Halo 3\nPortal");
    assert_eq!(c.attempts, 3);
    assert_eq!(gateway.provider_calls(), 3);
    assert!(clock.now() >= Duration::from_secs(3));

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let r = &seen[2];
    assert_eq!(r.path, "/v1/chat/completions");
    assert_eq!(r.auth.as_deref(), Some("Bearer sk-local"));
    assert_eq!(r.body["model"], "gpt-test");
    assert_eq!(r.body["temperature"], 0.0);
    assert_eq!(r.body["messages"][0]["role"], "user");
    assert_eq!(r.body["messages"][0]["content"], "rank these");
}

#[test]
fn client_errors_are_not_retried() {
    let (endpoint, seen) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let gateway = Gateway::new(Arc::new(provider(&endpoint)), "gpt-test", 0.0).with_clock(Arc::new(VirtualClock::default()));
    match gateway.complete(&CompletionRequest::plain("x")) {
        Err(LlmError::Http { status: 401, body }) => assert!(body.contains("bad key")),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn exhausted_retries_report_the_last_error() {
    let (endpoint, _) = serve(vec![(503, "{}".into()), (503, "{}".into())]);
    let gateway = Gateway::new(Arc::new(provider(&endpoint)), "gpt-test", 0.0)
        .with_clock(Arc::new(VirtualClock::default()))
        .with_retry(RetryPolicy {
            max_retries: 1,
            ..RetryPolicy::default()
        });
    match gateway.complete(&CompletionRequest::plain("x")) {
        Err(LlmError::Exhausted { attempts: 2, last }) => {
            assert!(matches!(*last, LlmError::Http { status: 503, .. }))
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_body_is_reported() {
    let (endpoint, _) = serve(vec![(200, r#"{"choices": []}"#.into())]);
    let p = provider(&endpoint);
    let gateway = Gateway::new(Arc::new(p), "gpt-test", 0.0);
    assert!(matches!(
        gateway.complete(&CompletionRequest::plain("x")),
        Err(LlmError::Malformed(_))
    ));
}

#[test]
fn cached_completion_skips_the_network() {
    let (endpoint, seen) = serve(vec![(200, ok_body("Portal"))]);
    let dir = tempfile::tempdir().unwrap();
    let config = ProviderConfig {
        kind: ProviderKind::Http,
        endpoint: Some(endpoint),
        model: Some("gpt-test".into()),
        cache_dir: Some(dir.path().to_path_buf()),
        api_key_env: "CDRBENCH_TEST_UNSET_KEY".into(),
        ..ProviderConfig::default()
    };
    let first = build_gateway(&config).unwrap();
    assert!(!first.complete(&CompletionRequest::plain("p")).unwrap().cached);
    let second = build_gateway(&config).unwrap();
    let hit = second.complete(&CompletionRequest::plain("p")).unwrap();
    assert!(hit.cached);
    assert_eq!(hit.raw_text, "Portal");
    assert_eq!(second.provider_calls(), 0);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].auth, None);
}
