//! Three-hop chain-of-thought annotation: theme, then opinion, then a
//! likely future event, each hop fed the answers before it. Annotations
//! are stored on the record as data; whether they enter the model input
//! is a separate encoding decision.

use crate::data::MangaRecord;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

/// Bumped whenever a hop template changes, so runs can cite the exact
/// prompt wording they were produced with.
pub const TEMPLATE_VERSION: &str = "mcot-v1";

const HOP1_TEMPLATE: &str = "Step 1 of 3. Read the story dialogues below and state the \
overall theme in one short sentence.\n\nDialogues:\n{dialogues}\n\nTheme:";

const HOP2_TEMPLATE: &str = "Step 2 of 3. Given the dialogues and the theme, state the \
characters' opinion or stance in one short sentence.\n\nDialogues:\n{dialogues}\n\n\
Theme: {theme}\n\nOpinion:";

const HOP3_TEMPLATE: &str = "Step 3 of 3. Given the dialogues, the theme and the opinion, \
state the most likely future event in one short sentence.\n\nDialogues:\n{dialogues}\n\n\
Theme: {theme}\nOpinion: {opinion}\n\nFuture:";

/// Completed three-hop annotation. Either all three hops are present or
/// the record carries no annotation at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McotAnnotation {
    pub theme: String,
    pub opinion: String,
    pub future: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub template_version: String,
    pub timestamp: String,
    pub hop_prompts: Vec<String>,
}

/// Completion backend. The mock implementation is a pure function of the
/// prompt, so annotation runs with it are reproducible to the byte.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
    fn model_name(&self) -> String;
    /// Timestamp recorded in provenance. Deterministic backends return a
    /// fixed value so reruns produce identical files.
    fn timestamp(&self) -> String {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        format!("unix:{}", secs)
    }
}

fn dialogues_block(record: &MangaRecord) -> String {
    record
        .source_dialogues
        .iter()
        .map(|d| format!("- {}", d.join(" ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Prompt for hop 1, 2 or 3. Later hops embed every prior answer.
pub fn build_hop_prompt(hop: u8, record: &MangaRecord, prior: &[String]) -> Result<String> {
    let dialogues = dialogues_block(record);
    match hop {
        1 => Ok(HOP1_TEMPLATE.replace("{dialogues}", &dialogues)),
        2 => {
            let theme = prior
                .first()
                .ok_or_else(|| Error::usage("hop 2 needs the hop 1 answer"))?;
            Ok(HOP2_TEMPLATE
                .replace("{dialogues}", &dialogues)
                .replace("{theme}", theme))
        }
        3 => {
            if prior.len() < 2 {
                return Err(Error::usage("hop 3 needs the hop 1 and hop 2 answers"));
            }
            Ok(HOP3_TEMPLATE
                .replace("{dialogues}", &dialogues)
                .replace("{theme}", &prior[0])
                .replace("{opinion}", &prior[1]))
        }
        other => Err(Error::usage(format!("hop must be 1..=3, got {}", other))),
    }
}

/// Retry with exponential backoff; `max_attempts` counts the first try.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(50),
        }
    }
}

fn complete_with_retry(
    client: &dyn LlmClient,
    prompt: &str,
    policy: RetryPolicy,
) -> Result<String> {
    let mut delay = policy.base_delay;
    let mut last_err = None;
    for attempt in 0..policy.max_attempts.max(1) {
        match client.complete(prompt) {
            Ok(text) => return Ok(text),
            Err(e) => {
                last_err = Some(e);
                if attempt + 1 < policy.max_attempts {
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
            }
        }
    }
    Err(last_err.unwrap_or_else(|| Error::data("llm client: no attempts made")))
}

/// Runs the three hops in order, threading answers forward. Any hop
/// failing (after retries) aborts the whole annotation so no partial
/// annotation is ever produced.
pub fn annotate(
    record: &MangaRecord,
    client: &dyn LlmClient,
    policy: RetryPolicy,
) -> Result<McotAnnotation> {
    let mut answers: Vec<String> = Vec::with_capacity(3);
    let mut prompts: Vec<String> = Vec::with_capacity(3);
    for hop in 1..=3u8 {
        let prompt = build_hop_prompt(hop, record, &answers)?;
        let answer = complete_with_retry(client, &prompt, policy)
            .map_err(|e| Error::data(format!("record {}: hop {} failed: {}", record.id, hop, e)))?;
        prompts.push(prompt);
        answers.push(answer);
    }
    let future = answers.pop().expect("three answers");
    let opinion = answers.pop().expect("two answers");
    let theme = answers.pop().expect("one answer");
    Ok(McotAnnotation {
        theme,
        opinion,
        future,
        provenance: Provenance {
            model: client.model_name(),
            template_version: TEMPLATE_VERSION.to_string(),
            timestamp: client.timestamp(),
            hop_prompts: prompts,
        },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AnnotateSummary {
    pub ok: usize,
    pub failed: usize,
    pub skipped: usize,
}

/// Annotates a whole corpus, preserving record order. Records that
/// already carry an annotation are skipped without any client call, which
/// makes reruns idempotent and partial runs resumable from their own
/// output. Failed records pass through unchanged.
pub fn annotate_corpus(
    records: &[MangaRecord],
    client: &dyn LlmClient,
    concurrency: usize,
    policy: RetryPolicy,
) -> (Vec<MangaRecord>, AnnotateSummary) {
    let workers = concurrency.max(1).min(records.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<McotAnnotation>>>> =
        Mutex::new((0..records.len()).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= records.len() {
                    break;
                }
                if records[i].mcot.is_some() {
                    continue;
                }
                let outcome = annotate(&records[i], client, policy);
                results.lock().expect("results lock")[i] = Some(outcome);
            });
        }
    });

    let mut summary = AnnotateSummary::default();
    let mut out = Vec::with_capacity(records.len());
    let results = results.into_inner().expect("results lock");
    for (record, outcome) in records.iter().zip(results) {
        let mut record = record.clone();
        match outcome {
            None => summary.skipped += 1,
            Some(Ok(annotation)) => {
                record.mcot = Some(annotation);
                summary.ok += 1;
            }
            Some(Err(e)) => {
                eprintln!("mcot: {}", e);
                summary.failed += 1;
            }
        }
        out.push(record);
    }
    (out, summary)
}

/// Deterministic offline backend: each answer is a tagged hash of the
/// prompt, so hop threading and reproducibility are fully testable
/// without a live endpoint.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockClient;

fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl LlmClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let tag = if prompt.starts_with("Step 1") {
            "T:"
        } else if prompt.starts_with("Step 2") {
            "O:"
        } else if prompt.starts_with("Step 3") {
            "F:"
        } else {
            "R:"
        };
        Ok(format!("{}{:016x}", tag, fnv1a(prompt)))
    }

    fn model_name(&self) -> String {
        "mock".to_string()
    }

    fn timestamp(&self) -> String {
        "unix:0".to_string()
    }
}

/// Minimal HTTP/1.1 JSON client for completion endpoints reachable over
/// plain http (local inference servers). Sends {"model", "prompt"} and
/// accepts {"completion"}, {"choices":[{"text"}]} or
/// {"choices":[{"message":{"content"}}]} responses.
#[derive(Debug, Clone)]
pub struct HttpClient {
    pub url: String,
    pub model: String,
    pub timeout: Duration,
}

impl HttpClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Result<Self> {
        let url = url.into();
        if !url.starts_with("http://") {
            return Err(Error::config(format!(
                "llm endpoint must be plain http://, got {}",
                url
            )));
        }
        Ok(HttpClient {
            url,
            model: model.into(),
            timeout: Duration::from_secs(60),
        })
    }

    fn split_url(&self) -> Result<(String, String)> {
        let rest = &self.url["http://".len()..];
        let (host_port, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, "/"),
        };
        let host_port = if host_port.contains(':') {
            host_port.to_string()
        } else {
            format!("{}:80", host_port)
        };
        Ok((host_port, path.to_string()))
    }

    fn post(&self, body: &str) -> Result<String> {
        use std::io::{Read, Write};
        let (host_port, path) = self.split_url()?;
        let stream = std::net::TcpStream::connect(&host_port)
            .map_err(|e| Error::data(format!("llm endpoint {}: {}", host_port, e)))?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        let mut stream = std::io::BufWriter::new(stream);
        write!(
            stream,
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            path,
            host_port,
            body.len(),
            body
        )?;
        stream.flush()?;
        let mut stream = stream.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let mut response = Vec::new();
        stream.read_to_end(&mut response)?;
        let response = String::from_utf8_lossy(&response).into_owned();
        let (head, payload) = response
            .split_once("\r\n\r\n")
            .ok_or_else(|| Error::data("llm endpoint: malformed http response"))?;
        let status = head.lines().next().unwrap_or("");
        if !status.contains(" 200") {
            return Err(Error::data(format!("llm endpoint: {}", status)));
        }
        Ok(payload.to_string())
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({ "model": self.model, "prompt": prompt }).to_string();
        let payload = self.post(&body)?;
        let value: serde_json::Value = serde_json::from_str(payload.trim())
            .map_err(|e| Error::data(format!("llm endpoint: bad json: {}", e)))?;
        let text = value
            .get("completion")
            .and_then(|v| v.as_str())
            .or_else(|| {
                value
                    .get("choices")
                    .and_then(|c| c.get(0))
                    .and_then(|c| c.get("text").and_then(|t| t.as_str()))
            })
            .or_else(|| {
                value
                    .get("choices")
                    .and_then(|c| c.get(0))
                    .and_then(|c| c.get("message"))
                    .and_then(|m| m.get("content"))
                    .and_then(|t| t.as_str())
            })
            .ok_or_else(|| Error::data("llm endpoint: no completion text in response"))?;
        Ok(text.to_string())
    }

    fn model_name(&self) -> String {
        self.model.clone()
    }
}
