//! The http completion backend against a local canned server.

use fvp_core::data::{Language, MangaRecord};
use fvp_core::mcot::{annotate, HttpClient, LlmClient, RetryPolicy};
use std::io::{Read, Write};
use std::net::TcpListener;

fn record() -> MangaRecord {
    MangaRecord {
        id: "h1".to_string(),
        lang: Language::En,
        source_dialogues: vec![vec!["look".into(), "a".into(), "storm".into()]],
        target: vec!["we".into(), "take".into(), "shelter".into(), "now".into()],
        feature_path: "features/h1.mfv".to_string(),
        mcot: None,
    }
}

/// Serves `responses` one request at a time, then stops.
fn serve_canned(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for response in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 65536];
            let mut read = 0;
            // read until the json body closes; requests are small
            loop {
                let n = stream.read(&mut buf[read..]).unwrap();
                read += n;
                let text = String::from_utf8_lossy(&buf[..read]);
                if let Some(body_at) = text.find("\r\n\r\n") {
                    let header = &text[..body_at];
                    let length: usize = header
                        .lines()
                        .find(|l| l.to_ascii_lowercase().starts_with("content-length"))
                        .and_then(|l| l.split(':').nth(1))
                        .and_then(|v| v.trim().parse().ok())
                        .unwrap_or(0);
                    if read >= body_at + 4 + length {
                        bodies.push(text[body_at + 4..].to_string());
                        break;
                    }
                }
            }
            let payload = response.as_bytes();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                payload.len()
            )
            .unwrap();
            stream.write_all(payload).unwrap();
        }
        bodies
    });
    (format!("http://{}/v1/completions", addr), handle)
}

#[test]
fn http_client_round_trips_three_hops() {
    let responses = vec![
        r#"{"completion": "a gathering storm"}"#.to_string(),
        r#"{"choices": [{"text": "they are worried"}]}"#.to_string(),
        r#"{"choices": [{"message": {"content": "they find shelter"}}]}"#.to_string(),
    ];
    let (url, server) = serve_canned(responses);
    let client = HttpClient::new(url, "test-model").unwrap();
    let annotation = annotate(&record(), &client, RetryPolicy::default()).unwrap();
    assert_eq!(annotation.theme, "a gathering storm");
    assert_eq!(annotation.opinion, "they are worried");
    assert_eq!(annotation.future, "they find shelter");
    assert_eq!(annotation.provenance.model, "test-model");

    let bodies = server.join().unwrap();
    assert_eq!(bodies.len(), 3);
    for body in &bodies {
        let value: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(value["model"], "test-model");
        assert!(value["prompt"].as_str().unwrap().contains("look a storm"));
    }
    // hop threading went over the wire
    let second: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
    assert!(second["prompt"]
        .as_str()
        .unwrap()
        .contains("a gathering storm"));
}

#[test]
fn http_client_rejects_non_http_and_unreachable() {
    assert!(HttpClient::new("https://example.com", "m").is_err());
    let client = HttpClient::new("http://127.0.0.1:1/v1", "m").unwrap();
    let err = client.complete("hello").unwrap_err();
    assert!(err.to_string().contains("llm endpoint"), "{}", err);
}
