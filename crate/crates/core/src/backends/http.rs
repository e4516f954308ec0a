//! JSON-over-HTTP client for remote seq2seq services.
//!
//! Request:  `POST <endpoint>` with
//! `{"input": str, "beam_size": int, "n_best": int, "max_tokens": int, "seed": int}`.
//! Reply:    `{"beams": [{"text": str, "score": number}, ...]}`.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use super::{sort_beams, BackendDescriptor, BackendError, Beam, GenerationRequest, Generator};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Serialize)]
struct WireRequest<'a> {
    input: &'a str,
    beam_size: usize,
    n_best: usize,
    max_tokens: usize,
    seed: u64,
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit,
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend {
    endpoint: String,
    timeout: Duration,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            timeout,
            agent,
            in_flight: InFlight::new(max_in_flight.max(1)),
        }
    }

    pub(super) fn from_descriptor(desc: &BackendDescriptor) -> Result<Self, BackendError> {
        let secs: f64 = desc.parsed("timeout_secs", DEFAULT_TIMEOUT.as_secs_f64())?;
        let max_in_flight = desc.parsed("max_in_flight", DEFAULT_MAX_IN_FLIGHT)?;
        Ok(Self::new(
            desc.required("endpoint")?,
            Duration::from_secs_f64(secs),
            max_in_flight,
        ))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn schema_error(&self, field: impl Into<String>, detail: impl Into<String>) -> BackendError {
        BackendError::Schema {
            endpoint: self.endpoint.clone(),
            field: field.into(),
            detail: detail.into(),
        }
    }

    fn post(&self, body: Vec<u8>) -> Result<(u16, String), BackendError> {
        let _permit = self.in_flight.acquire();
        let result = self
            .agent
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .send(&body[..]);
        let mut response = result.map_err(|e| self.transport_error(e))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| self.transport_error(e))?;
        Ok((status, text))
    }

    fn transport_error(&self, err: ureq::Error) -> BackendError {
        match err {
            ureq::Error::Timeout(_) => BackendError::Timeout {
                endpoint: self.endpoint.clone(),
                timeout: self.timeout,
            },
            other => BackendError::Transport {
                endpoint: self.endpoint.clone(),
                cause: other.to_string(),
            },
        }
    }

    pub fn parse_reply(&self, body: &str) -> Result<Vec<Beam>, BackendError> {
        let value: Value =
            serde_json::from_str(body).map_err(|e| self.schema_error("<body>", e.to_string()))?;
        let beams = value
            .get("beams")
            .ok_or_else(|| self.schema_error("beams", "missing"))?
            .as_array()
            .ok_or_else(|| self.schema_error("beams", "not an array"))?;
        beams
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let text = b
                    .get("text")
                    .ok_or_else(|| self.schema_error(format!("beams[{i}].text"), "missing"))?
                    .as_str()
                    .ok_or_else(|| self.schema_error(format!("beams[{i}].text"), "not a string"))?;
                let score = b
                    .get("score")
                    .ok_or_else(|| self.schema_error(format!("beams[{i}].score"), "missing"))?
                    .as_f64()
                    .ok_or_else(|| {
                        self.schema_error(format!("beams[{i}].score"), "not a number")
                    })?;
                Ok(Beam::new(text, score))
            })
            .collect()
    }
}

impl Generator for HttpBackend {
    fn name(&self) -> String {
        format!("http({})", self.endpoint)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<Beam>, BackendError> {
        request.validate()?;
        let wire = WireRequest {
            input: &request.input_text,
            beam_size: request.beam_size,
            n_best: request.n_best,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let body = serde_json::to_vec(&wire).expect("wire request serializes");
        let (status, text) = self.post(body)?;
        if !(200..300).contains(&status) {
            let mut excerpt = text;
            excerpt.truncate(512);
            return Err(BackendError::Status {
                endpoint: self.endpoint.clone(),
                status,
                body: excerpt,
            });
        }
        let mut beams = self.parse_reply(&text)?;
        sort_beams(&mut beams);
        beams.truncate(request.n_best);
        Ok(beams)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    /// Serves one canned reply per connection and forwards request bodies.
    fn canned_server(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                }
                let mut req_body = vec![0; content_length];
                reader.read_exact(&mut req_body).unwrap();
                tx.send(String::from_utf8(req_body).unwrap()).ok();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/generate"), rx)
    }

    fn request() -> GenerationRequest {
        GenerationRequest::new("u1: hi")
            .with_beams(3, 3)
            .with_seed(42)
    }

    #[test]
    fn posts_wire_request_and_sorts() {
        let reply = r#"{"beams":[{"text":"low","score":0.1},{"text":"high","score":0.9},{"text":"mid","score":0.5}]}"#;
        let (url, bodies) = canned_server(vec![(200, reply.into())]);
        let backend = HttpBackend::new(&url, Duration::from_secs(5), 2);
        let beams = backend.generate(&request()).unwrap();
        let texts: Vec<_> = beams.iter().map(|b| b.text.as_str()).collect();
        assert_eq!(texts, ["high", "mid", "low"]);
        let sent: Value = serde_json::from_str(&bodies.recv().unwrap()).unwrap();
        assert_eq!(
            sent,
            serde_json::json!({"input": "u1: hi", "beam_size": 3, "n_best": 3, "max_tokens": 256, "seed": 42})
        );
    }

    #[test]
    fn resorts_two_beams_and_caps_n_best() {
        let reply = r#"{"beams":[{"text":"a","score":0.1},{"text":"b","score":0.9}]}"#;
        let (url, _) = canned_server(vec![(200, reply.into()), (200, reply.into())]);
        let backend = HttpBackend::new(&url, Duration::from_secs(5), 1);
        let beams = backend.generate(&request()).unwrap();
        assert_eq!(
            beams.iter().map(|b| b.score).collect::<Vec<_>>(),
            [0.9, 0.1]
        );
        let one = backend.generate(&request().with_beams(3, 1)).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn missing_beams_is_schema_error() {
        let (url, _) = canned_server(vec![(200, r#"{"results":[]}"#.into())]);
        let err = HttpBackend::new(&url, Duration::from_secs(5), 1)
            .generate(&request())
            .unwrap_err();
        match err {
            BackendError::Schema {
                field, endpoint, ..
            } => {
                assert_eq!(field, "beams");
                assert_eq!(endpoint, url);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_score_names_field() {
        let backend = HttpBackend::new("http://unused", DEFAULT_TIMEOUT, 1);
        let err = backend
            .parse_reply(r#"{"beams":[{"text":"x","score":1},{"text":"y"}]}"#)
            .unwrap_err();
        assert!(err.to_string().contains("beams[1].score"), "{err}");
        assert!(backend.parse_reply("not json").is_err());
    }

    #[test]
    fn non_2xx_is_status_error() {
        let (url, _) = canned_server(vec![(503, r#"{"error":"busy"}"#.into())]);
        let err = HttpBackend::new(&url, Duration::from_secs(5), 1)
            .generate(&request())
            .unwrap_err();
        assert!(
            matches!(err, BackendError::Status { status: 503, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn connection_refused_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        drop(listener);
        let err = HttpBackend::new(&url, Duration::from_secs(2), 1)
            .generate(&request())
            .unwrap_err();
        assert!(matches!(err, BackendError::Transport { .. }), "{err:?}");
        assert!(err.to_string().contains(&url));
    }

    #[test]
    fn slow_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let (_stream, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(800));
        });
        let err = HttpBackend::new(&url, Duration::from_millis(200), 1)
            .generate(&request())
            .unwrap_err();
        assert!(matches!(err, BackendError::Timeout { .. }), "{err:?}");
        handle.join().unwrap();
    }

    #[test]
    fn in_flight_gate_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let gate = Arc::new(InFlight::new(2));
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (gate, current, peak) = (gate.clone(), current.clone(), peak.clone());
                thread::spawn(move || {
                    let _p = gate.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(10));
                    current.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
