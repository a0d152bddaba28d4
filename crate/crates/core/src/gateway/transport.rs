//! Where model responses come from: committed recordings or an HTTP endpoint.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::VlmRequest;

pub const TOKEN_ENV: &str = "HYBRIDGEN_VLM_TOKEN";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("recording not found for request {hash} (expected {})", path.display())]
    RecordingNotFound { hash: String, path: PathBuf },
    #[error("recording {} is invalid: {message}", path.display())]
    InvalidRecording { path: PathBuf, message: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("endpoint answered HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Connection { attempts: u32, message: String },
    #[error("malformed endpoint response: {0}")]
    BadResponse(String),
    #[error("invalid transport spec '{0}' (expected recorded:<dir> or http:<url>)")]
    BadSpec(String),
}

/// On-disk form of a recorded response, stored as `<sha256>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub kind: super::RequestKind,
    #[serde(default)]
    pub attachments: Vec<String>,
    pub response: String,
}

#[derive(Debug, Clone)]
pub struct RecordedTransport {
    pub dir: PathBuf,
}

impl RecordedTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RecordedTransport { dir: dir.into() }
    }

    pub fn path_for(&self, request: &VlmRequest) -> PathBuf {
        self.dir.join(format!("{}.json", request.hash()))
    }

    pub fn fetch_text(&self, request: &VlmRequest) -> Result<String, TransportError> {
        let hash = request.hash();
        let path = self.dir.join(format!("{hash}.json"));
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(TransportError::RecordingNotFound { hash, path })
            }
            Err(e) => {
                return Err(TransportError::InvalidRecording {
                    path,
                    message: e.to_string(),
                })
            }
        };
        let rec: Recording = serde_json::from_str(&text).map_err(|e| TransportError::InvalidRecording {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if rec.kind != request.kind {
            return Err(TransportError::InvalidRecording {
                path,
                message: format!("recorded kind {:?} does not match request kind {:?}", rec.kind, request.kind),
            });
        }
        Ok(rec.response)
    }

    /// Writes a recording for `request`; returns its path.
    pub fn record(&self, request: &VlmRequest, response: &str) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.path_for(request);
        let rec = Recording {
            kind: request.kind,
            attachments: request.attachments.clone(),
            response: response.to_string(),
        };
        std::fs::write(&path, crate::jsonfmt::to_string(&rec, 1).expect("recording serializes"))?;
        Ok(path)
    }
}

/// Counting semaphore bounding concurrent HTTP requests.
#[derive(Debug)]
struct InFlight {
    count: Mutex<usize>,
    cv: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub endpoint: String,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub token_env: String,
    in_flight: Arc<InFlight>,
}

#[derive(Serialize)]
struct HttpBody<'a> {
    kind: super::RequestKind,
    prompt: &'a str,
    attachments: &'a [String],
}

#[derive(Deserialize)]
struct HttpReply {
    text: String,
}

enum Failure {
    Retry(TransportError),
    Fatal(TransportError),
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpTransport {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            backoff_base: Duration::from_secs(1),
            token_env: TOKEN_ENV.to_string(),
            in_flight: Arc::new(InFlight {
                count: Mutex::new(0),
                cv: Condvar::new(),
                limit: 2,
            }),
        }
    }

    pub fn with_in_flight_limit(mut self, limit: usize) -> Self {
        self.in_flight = Arc::new(InFlight {
            count: Mutex::new(0),
            cv: Condvar::new(),
            limit: limit.max(1),
        });
        self
    }

    pub fn in_flight_limit(&self) -> usize {
        self.in_flight.limit
    }

    fn attempt(&self, agent: &ureq::Agent, request: &VlmRequest, attempt: u32) -> Result<String, Failure> {
        let body = HttpBody {
            kind: request.kind,
            prompt: &request.prompt,
            attachments: &request.attachments,
        };
        let mut req = agent.post(&self.endpoint);
        if let Ok(token) = std::env::var(&self.token_env) {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Failure::Retry(TransportError::Timeout { attempts: attempt })),
            Err(e) => {
                return Err(Failure::Retry(TransportError::Connection {
                    attempts: attempt,
                    message: e.to_string(),
                }))
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(Failure::Retry(TransportError::Timeout { attempts: attempt })),
            Err(e) => {
                return Err(Failure::Retry(TransportError::Connection {
                    attempts: attempt,
                    message: e.to_string(),
                }))
            }
        };
        if !(200..300).contains(&status) {
            let err = TransportError::Status {
                status,
                attempts: attempt,
                body: text.chars().take(200).collect(),
            };
            return Err(if status >= 500 { Failure::Retry(err) } else { Failure::Fatal(err) });
        }
        serde_json::from_str::<HttpReply>(&text)
            .map(|r| r.text)
            .map_err(|e| Failure::Fatal(TransportError::BadResponse(e.to_string())))
    }

    /// POSTs the request, retrying transport failures and 5xx answers with
    /// exponential backoff.
    pub fn fetch_text(&self, request: &VlmRequest) -> Result<String, TransportError> {
        let _permit = self.in_flight.acquire();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut delay = self.backoff_base;
        let mut last = None;
        for attempt in 1..=self.max_attempts.max(1) {
            match self.attempt(&agent, request, attempt) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(e)) => last = Some(e),
            }
            if attempt < self.max_attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[derive(Debug, Clone)]
pub enum Transport {
    Recorded(RecordedTransport),
    Http(HttpTransport),
}

impl Transport {
    pub fn recorded(dir: impl AsRef<Path>) -> Self {
        Transport::Recorded(RecordedTransport::new(dir.as_ref()))
    }

    pub fn fetch_text(&self, request: &VlmRequest) -> Result<String, TransportError> {
        match self {
            Transport::Recorded(r) => r.fetch_text(request),
            Transport::Http(h) => h.fetch_text(request),
        }
    }
}

impl std::str::FromStr for Transport {
    type Err = TransportError;

    /// `recorded:<dir>`, `http:<url>`, or a bare `http(s)://` URL.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(dir) = s.strip_prefix("recorded:") {
            if dir.is_empty() {
                return Err(TransportError::BadSpec(s.into()));
            }
            return Ok(Transport::recorded(dir));
        }
        if let Some(rest) = s.strip_prefix("http:") {
            let url = if rest.starts_with("http://") || rest.starts_with("https://") {
                rest
            } else if rest.starts_with("//") {
                s
            } else {
                return Err(TransportError::BadSpec(s.into()));
            };
            return Ok(Transport::Http(HttpTransport::new(url)));
        }
        if s.starts_with("https://") {
            return Ok(Transport::Http(HttpTransport::new(s)));
        }
        Err(TransportError::BadSpec(s.into()))
    }
}
