use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use adapt_core::llm::{
    build_instruction, fixture_key, map_concepts, ChatBackend, FixtureBackend, HttpBackend, LlmError,
    DEFAULT_MODEL,
};

fn fixtures() -> FixtureBackend {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/llm");
    FixtureBackend::new(dir, DEFAULT_MODEL)
}

fn pairs(prompt: &str) -> Vec<(String, String, String)> {
    map_concepts(prompt, &fixtures())
        .unwrap()
        .pairs()
        .iter()
        .map(|p| {
            (
                p.rare_phrase().to_string(),
                p.frequent_phrase().to_string(),
                p.attribute_text().to_string(),
            )
        })
        .collect()
}

fn triple(r: &str, f: &str, a: &str) -> (String, String, String) {
    (r.into(), f.into(), a.into())
}

#[test]
fn fixture_files_are_keyed_by_model_and_prompt() {
    let dir = fixtures().dir;
    for prompt in ["A hairy frog", "A peach made of glass", "A horned lion and a hairy frog"] {
        assert!(dir.join(format!("{}.json", fixture_key(prompt, DEFAULT_MODEL))).exists());
    }
}

#[test]
fn single_concept_prompts() {
    assert_eq!(pairs("A hairy frog"), vec![triple("A hairy frog", "A hairy animal", "a hairy")]);
    assert_eq!(
        pairs("A peach made of glass"),
        vec![triple("A peach made of glass", "A pink sphere made of glass", "made of glass")]
    );
    assert_eq!(pairs("A horned frog"), vec![triple("A horned frog", "A horned animal", "a horned")]);
}

#[test]
fn two_concept_prompt_reconstructs() {
    let plan = map_concepts("A horned lion and a hairy frog", &fixtures()).unwrap();
    assert_eq!(
        pairs("A horned lion and a hairy frog"),
        vec![
            triple("A horned lion", "A horned animal", "horned"),
            triple("A hairy frog", "A hairy animal", "a hairy"),
        ]
    );
    assert_eq!(plan.reconstruct(&BTreeSet::new()).unwrap(), "A horned animal and a hairy animal");
    assert_eq!(
        plan.reconstruct(&BTreeSet::from([1, 2])).unwrap(),
        "A horned lion and a hairy frog"
    );
    assert_eq!(plan.reconstruct(&BTreeSet::from([1])).unwrap(), "A horned lion and a hairy animal");
}

#[test]
fn prompt_without_rare_concepts() {
    let plan = map_concepts("A cat sitting on a sofa", &fixtures()).unwrap();
    assert_eq!(plan.m(), 0);
    assert_eq!(plan.target(), "A cat sitting on a sofa");
    assert_eq!(plan.frequent(), plan.target());
}

#[test]
fn inconsistent_reply_is_a_structured_error() {
    let err = map_concepts("A glass frog", &fixtures()).unwrap_err();
    assert_eq!(err.code(), "InconsistentCount");
    assert!(err.to_string().contains("raw response"));
}

#[test]
fn missing_fixture_and_empty_prompt() {
    let err = map_concepts("Never recorded", &fixtures()).unwrap_err();
    assert!(matches!(err, LlmError::FixtureMissing { .. }));
    assert!(matches!(map_concepts("", &fixtures()), Err(LlmError::EmptyPrompt)));
}

struct Captured {
    request_line: String,
    headers: Vec<String>,
    body: serde_json::Value,
}

/// Serves one canned HTTP reply and hands back what it received.
fn fake_server(status: &'static str, body: String) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut request_line = String::new();
        reader.read_line(&mut request_line).unwrap();
        let mut headers = Vec::new();
        let mut length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end().to_string();
            if line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
            headers.push(line);
        }
        let mut buf = vec![0u8; length];
        reader.read_exact(&mut buf).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        stream.flush().unwrap();
        tx.send(Captured {
            request_line: request_line.trim_end().to_string(),
            headers,
            body: serde_json::from_slice(&buf).unwrap(),
        })
        .unwrap();
    });
    (url, rx)
}

#[test]
fn http_backend_round_trip_and_cache() {
    let reply = "Num Rare Concepts: 1\nContext: a hairy\nFinal Prompt Sequence: A hairy animal BREAK A hairy frog";
    let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": reply}}]});
    let (url, rx) = fake_server("200 OK", body.to_string());
    let cache = tempfile::tempdir().unwrap();

    std::env::set_var("ADAPT_TEST_HTTP_KEY", "sk-test");
    let mut backend = HttpBackend::new(url, "test-model");
    backend.api_key_env = Some("ADAPT_TEST_HTTP_KEY".into());
    backend.cache_dir = Some(cache.path().to_path_buf());
    backend.timeout = Duration::from_secs(5);

    let plan = map_concepts("A hairy frog", &backend).unwrap();
    assert_eq!(plan.pair(1).unwrap().frequent_phrase(), "A hairy animal");

    let seen = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert!(seen.request_line.starts_with("POST /v1/chat/completions"));
    assert!(seen.headers.iter().any(|h| h == "Authorization: Bearer sk-test"));
    assert_eq!(seen.body["model"], "test-model");
    assert_eq!(seen.body["temperature"], 0);
    let instruction = build_instruction("A hairy frog").unwrap();
    assert_eq!(seen.body["messages"][0]["role"], "system");
    assert_eq!(seen.body["messages"][0]["content"], instruction.system);
    assert_eq!(seen.body["messages"][1]["content"], instruction.user);
    assert!(instruction.user.ends_with("Input: A hairy frog"));

    // The cached reply replays without the network.
    let replay = FixtureBackend::new(cache.path(), "test-model");
    assert_eq!(replay.complete("A hairy frog", &instruction).unwrap(), reply);
}

#[test]
fn http_status_error() {
    let (url, _rx) = fake_server("500 Internal Server Error", "{\"error\":\"boom\"}".into());
    let mut backend = HttpBackend::new(url, DEFAULT_MODEL);
    backend.api_key_env = None;
    let err = map_concepts("A hairy frog", &backend).unwrap_err();
    assert!(matches!(err, LlmError::BackendStatus { status: 500, .. }), "{err:?}");
}

#[test]
fn unreachable_backend() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut backend = HttpBackend::new(format!("http://127.0.0.1:{port}/v1"), DEFAULT_MODEL);
    backend.timeout = Duration::from_secs(2);
    let err = map_concepts("A hairy frog", &backend).unwrap_err();
    assert_eq!(err.code(), "BackendUnavailable");
}
