//! Client for classifiers served by another process.
//!
//! Wire format, one JSON object per request and per reply:
//!
//! ```text
//! request: {"image": [x_0, ..., x_{n-1}], "shape": [h, w, c]}
//! reply:   {"logits": [z_0, ..., z_{k-1}]}   or   {"error": "..."}
//! ```
//!
//! Over HTTP the request is POSTed as the body; over a pipe each message is
//! a single line on the child's stdin/stdout. Each round trip is one query.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::Shape;

use super::{check_input, Classifier};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireRequest {
    pub image: Vec<f64>,
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transport", rename_all = "lowercase")]
pub enum Endpoint {
    Http { url: String },
    /// Program and arguments of a child process speaking the line protocol.
    Pipe { command: Vec<String> },
}

fn default_timeout() -> f64 {
    30.0
}

fn default_concurrency() -> usize {
    1
}

/// Everything needed to open a connection to a remote classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteSpec {
    #[serde(flatten)]
    pub endpoint: Endpoint,
    pub shape: Shape,
    pub num_classes: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

impl RemoteSpec {
    pub fn connect(&self) -> Result<RemoteOracle> {
        RemoteOracle::connect(self, Arc::new(Limiter::new(self.max_concurrency)))
    }
}

/// Caps in-flight requests across connections sharing it.
#[derive(Debug)]
pub struct Limiter {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    pub fn new(max: usize) -> Self {
        Self {
            slots: Mutex::new(max.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        while *slots == 0 {
            slots = self.freed.wait(slots).unwrap_or_else(|e| e.into_inner());
        }
        *slots -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut slots = self.limiter.slots.lock().unwrap_or_else(|e| e.into_inner());
        *slots += 1;
        self.limiter.freed.notify_one();
    }
}

struct PipeChild {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for PipeChild {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

enum Transport {
    Http { agent: ureq::Agent, url: String },
    Pipe(Mutex<PipeChild>),
}

pub struct RemoteOracle {
    spec: RemoteSpec,
    transport: Transport,
    limiter: Arc<Limiter>,
}

impl std::fmt::Debug for RemoteOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteOracle").field("spec", &self.spec).finish()
    }
}

impl RemoteOracle {
    fn connect(spec: &RemoteSpec, limiter: Arc<Limiter>) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::Config("remote oracle needs at least 2 classes".into()));
        }
        if !(spec.timeout_secs > 0.0) {
            return Err(Error::Config("timeout must be positive".into()));
        }
        let transport = match &spec.endpoint {
            Endpoint::Http { url } => {
                let agent: ureq::Agent = ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_secs_f64(spec.timeout_secs)))
                    .build()
                    .into();
                Transport::Http {
                    agent,
                    url: url.clone(),
                }
            }
            Endpoint::Pipe { command } => {
                let (program, args) = command
                    .split_first()
                    .ok_or_else(|| Error::Config("empty pipe command".into()))?;
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Oracle(format!("cannot start `{program}`: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                let (tx, rx) = mpsc::channel();
                std::thread::spawn(move || {
                    for line in BufReader::new(stdout).lines() {
                        if tx.send(line).is_err() {
                            break;
                        }
                    }
                });
                Transport::Pipe(Mutex::new(PipeChild {
                    child,
                    stdin,
                    lines: rx,
                }))
            }
        };
        Ok(Self {
            spec: spec.clone(),
            transport,
            limiter,
        })
    }

    /// A second connection to the same endpoint, sharing the concurrency cap.
    pub fn reconnect(&self) -> Result<Self> {
        Self::connect(&self.spec, Arc::clone(&self.limiter))
    }

    pub fn spec(&self) -> &RemoteSpec {
        &self.spec
    }

    fn round_trip(&self, request: &WireRequest) -> Result<WireReply> {
        let _slot = self.limiter.acquire();
        match &self.transport {
            Transport::Http { agent, url } => {
                let mut response = agent
                    .post(url)
                    .send_json(request)
                    .map_err(|e| Error::Oracle(format!("{url}: {e}")))?;
                response
                    .body_mut()
                    .read_json::<WireReply>()
                    .map_err(|e| Error::Oracle(format!("{url}: malformed reply: {e}")))
            }
            Transport::Pipe(pipe) => {
                let mut pipe = pipe.lock().unwrap_or_else(|e| e.into_inner());
                let mut line = serde_json::to_string(request)
                    .map_err(|e| Error::Oracle(format!("cannot encode request: {e}")))?;
                line.push('\n');
                pipe.stdin
                    .write_all(line.as_bytes())
                    .and_then(|_| pipe.stdin.flush())
                    .map_err(|e| Error::Oracle(format!("pipe write failed: {e}")))?;
                let timeout = Duration::from_secs_f64(self.spec.timeout_secs);
                let reply = match pipe.lines.recv_timeout(timeout) {
                    Ok(Ok(reply)) => reply,
                    Ok(Err(e)) => return Err(Error::Oracle(format!("pipe read failed: {e}"))),
                    Err(RecvTimeoutError::Timeout) => {
                        return Err(Error::Oracle(format!(
                            "no reply within {} s",
                            self.spec.timeout_secs
                        )))
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(Error::Oracle("oracle process closed its output".into()))
                    }
                };
                serde_json::from_str(&reply)
                    .map_err(|e| Error::Oracle(format!("malformed reply: {e}")))
            }
        }
    }
}

impl Classifier for RemoteOracle {
    fn input_shape(&self) -> Shape {
        self.spec.shape
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(self.spec.shape, x)?;
        let s = self.spec.shape;
        let request = WireRequest {
            image: x.to_vec(),
            shape: [s.height, s.width, s.channels],
        };
        let reply = self.round_trip(&request)?;
        if let Some(message) = reply.error {
            return Err(Error::Oracle(format!("remote error: {message}")));
        }
        let logits = reply
            .logits
            .ok_or_else(|| Error::Oracle("reply has no `logits`".into()))?;
        validate_logits(&logits, self.spec.num_classes)?;
        Ok(logits)
    }
}

fn validate_logits(logits: &[f64], num_classes: usize) -> Result<()> {
    if logits.len() != num_classes {
        return Err(Error::Oracle(format!(
            "reply has {} logits, expected {num_classes}",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Oracle("reply contains non-finite logits".into()));
    }
    Ok(())
}

/// Answers one request against a local model.
pub fn answer(model: &dyn Classifier, request: &WireRequest) -> WireReply {
    let s = model.input_shape();
    if request.shape != [s.height, s.width, s.channels] {
        return WireReply {
            logits: None,
            error: Some(format!("model expects shape {s}, request has {:?}", request.shape)),
        };
    }
    match model.logits(&request.image) {
        Ok(z) => WireReply {
            logits: Some(z),
            error: None,
        },
        Err(e) => WireReply {
            logits: None,
            error: Some(e.to_string()),
        },
    }
}

/// Serves `model` over the line protocol until `input` closes.
pub fn serve_pipe(
    model: &dyn Classifier,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    let stdio = |e| Error::io("<pipe>", e);
    for line in input.lines() {
        let line = line.map_err(stdio)?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<WireRequest>(&line) {
            Ok(request) => answer(model, &request),
            Err(e) => WireReply {
                logits: None,
                error: Some(format!("bad request: {e}")),
            },
        };
        let text = serde_json::to_string(&reply).expect("reply serialises");
        writeln!(output, "{text}").map_err(stdio)?;
        output.flush().map_err(stdio)?;
    }
    Ok(())
}
