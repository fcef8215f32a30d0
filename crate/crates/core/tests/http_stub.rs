use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use knowrec_core::encoder::{RemoteEncoder, TextEncoder};
use knowrec_core::gateway::{
    Backend, ChatRequest, HttpBackend, HttpConfig, RetryPolicy, Slots, TemplateId, TemplateSet,
};
use knowrec_core::Error;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: Value,
}

/// Serves `replies` in order, one per connection, then stops.
fn stub(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => authorization = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                authorization,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn config(url: String) -> HttpConfig {
    HttpConfig {
        url,
        timeout_ms: 5_000,
        retry: RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 1,
            max_delay_ms: 2,
        },
        ..Default::default()
    }
}

fn request() -> ChatRequest {
    let slots: Slots = [("hist", "- Alien (rated 5/5)"), ("item", "Heat")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    ChatRequest::from_template(
        &TemplateSet::default(),
        TemplateId::UserReason,
        slots,
        "actor-7b",
        0.0,
        Some(4),
    )
    .unwrap()
}

fn chat(content: &str) -> String {
    json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
}

#[test]
fn three_server_errors_exhaust_three_attempts() {
    let replies = vec![(500, "{}".to_string()); 3];
    let (url, seen, handle) = stub(replies);
    let backend = HttpBackend::new(config(url)).unwrap();
    match backend.complete(&request()) {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
    handle.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn recovers_after_transient_failures() {
    let replies = vec![
        (503, "{}".to_string()),
        (200, "not json".to_string()),
        (200, chat("PREDICTION: yes\nKNOWLEDGE: likes thrillers")),
    ];
    let (url, seen, handle) = stub(replies);
    let backend = HttpBackend::new(config(url)).unwrap();
    let reply = backend.complete(&request()).unwrap();
    assert_eq!(reply, "PREDICTION: yes\nKNOWLEDGE: likes thrillers");
    handle.join().unwrap();

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    let body = &seen[2].body;
    assert_eq!(body["model"], "actor-7b");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["seed"], 4);
    assert_eq!(body["messages"][0]["role"], "user");
    assert!(body["messages"][0]["content"]
        .as_str()
        .unwrap()
        .contains("Heat"));
    assert!(seen[2].authorization.is_none());
}

#[test]
fn bearer_token_comes_from_named_variable() {
    std::env::set_var("KNOWREC_STUB_TEST_KEY", "sk-test-123");
    let (url, seen, handle) = stub(vec![(200, chat("VERDICT: Reasonable"))]);
    let cfg = HttpConfig {
        api_key_env: Some("KNOWREC_STUB_TEST_KEY".into()),
        ..config(url)
    };
    HttpBackend::new(cfg).unwrap().complete(&request()).unwrap();
    handle.join().unwrap();
    assert_eq!(
        seen.lock().unwrap()[0].authorization.as_deref(),
        Some("Bearer sk-test-123")
    );
}

#[test]
fn missing_key_variable_is_a_validation_error() {
    let cfg = HttpConfig {
        api_key_env: Some("KNOWREC_STUB_TEST_UNSET".into()),
        ..config("http://127.0.0.1:9/".into())
    };
    assert!(matches!(HttpBackend::new(cfg), Err(Error::Validation(_))));
}

#[test]
fn remote_encoder_batches_in_order() {
    let batch = |vs: &[[f64; 2]]| {
        json!({ "data": vs.iter().map(|v| json!({ "embedding": v })).collect::<Vec<_>>() })
            .to_string()
    };
    let replies = vec![
        (200, batch(&[[1.0, 0.0], [0.0, 1.0]])),
        (200, batch(&[[0.5, 0.5]])),
    ];
    let (url, seen, handle) = stub(replies);
    let enc = RemoteEncoder::new(config(url), 2, 2).unwrap();
    let out = enc.encode_batch(&["a", "b", "c"]).unwrap();
    handle.join().unwrap();
    let values: Vec<Vec<f64>> = out.into_iter().map(|v| v.values).collect();
    assert_eq!(values, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].body, json!({ "input": ["a", "b"] }));
    assert_eq!(seen[1].body, json!({ "input": ["c"] }));
}

#[test]
fn remote_encoder_names_the_bad_index() {
    let reply =
        json!({ "data": [{ "embedding": [1.0, 2.0] }, { "embedding": [1.0] }] }).to_string();
    let (url, _, handle) = stub(vec![(200, reply)]);
    let enc = RemoteEncoder::new(config(url), 2, 8).unwrap();
    match enc.encode_batch(&["a", "b"]) {
        Err(Error::Shape(msg)) => assert!(msg.contains("index 1"), "{msg}"),
        other => panic!("expected shape error, got {other:?}"),
    }
    handle.join().unwrap();

    let reply = json!({ "data": [{ "embedding": [1.0, 2.0] }] }).to_string();
    let (url, _, handle) = stub(vec![(200, reply)]);
    let enc = RemoteEncoder::new(config(url), 2, 8).unwrap();
    assert!(matches!(
        enc.encode_batch(&["a", "b"]),
        Err(Error::Shape(_))
    ));
    handle.join().unwrap();
}
