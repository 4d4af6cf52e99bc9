//! Line-delimited JSON wire protocol for external scorers and verifiers.
//!
//! Every request is one JSON object on one line; the peer answers with
//! exactly one response line per request, in order. Two transports are
//! supported: a child process spoken to over stdin/stdout (`cmd:<shell
//! command>`) and HTTP, where each request line is the body of a POST
//! (`http://...`).
//!
//! Scorer:   `{"id":"<batch>","texts":["...",...]}` -> `{"id":"<batch>","scores":[0.93,...]}`
//! Verifier: `{"id":"<id>","claim":"...","evidence":"..."}` -> `{"id":"<id>","label":"SUPPORTS"}`
//!
//! A peer may answer `{"id":null,"error":"..."}` for a request it cannot
//! parse.

use std::fmt;
use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::VerdictLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: Option<String>,
    #[serde(default)]
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub id: String,
    pub claim: String,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub id: Option<String>,
    #[serde(default)]
    pub label: Option<VerdictLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Request/response exchange of single lines (without the newline).
pub trait LineTransport: Send {
    fn exchange(&mut self, line: &str) -> io::Result<String>;
}

/// Where an external component lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Shell command run once and kept alive for the whole session.
    Command(String),
    Http(String),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(cmd) = s.strip_prefix("cmd:") {
            if cmd.trim().is_empty() {
                return Err(Error::Config("empty command endpoint".into()));
            }
            Ok(Endpoint::Command(cmd.trim().to_string()))
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Endpoint::Http(s.to_string()))
        } else {
            Err(Error::Config(format!(
                "endpoint {s:?} must start with `cmd:` or `http(s)://`"
            )))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Command(c) => write!(f, "cmd:{c}"),
            Endpoint::Http(u) => f.write_str(u),
        }
    }
}

impl Endpoint {
    pub fn connect(&self) -> Result<Box<dyn LineTransport>> {
        match self {
            Endpoint::Command(cmd) => Ok(Box::new(StdioTransport::spawn(cmd)?)),
            Endpoint::Http(url) => Ok(Box::new(HttpTransport::new(url.clone()))),
        }
    }
}

pub struct StdioTransport {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl StdioTransport {
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::protocol("connect", format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }
}

impl LineTransport for StdioTransport {
    fn exchange(&mut self, line: &str) -> io::Result<String> {
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        let mut response = String::new();
        if self.stdout.read_line(&mut response)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "peer closed its output"));
        }
        Ok(response.trim_end_matches(['\n', '\r']).to_string())
    }
}

impl Drop for StdioTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
}

impl HttpTransport {
    pub fn new(url: String) -> Self {
        Self {
            agent: ureq::Agent::new_with_defaults(),
            url,
        }
    }
}

impl LineTransport for HttpTransport {
    fn exchange(&mut self, line: &str) -> io::Result<String> {
        let mut response = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(line)
            .map_err(io::Error::other)?;
        let body = response.body_mut().read_to_string().map_err(io::Error::other)?;
        Ok(body.trim_end_matches(['\n', '\r']).to_string())
    }
}

/// Sends one scoring batch and validates the answer.
pub fn request_scores(transport: &mut dyn LineTransport, id: &str, texts: &[String]) -> Result<Vec<f64>> {
    let request = serde_json::to_string(&ScoreRequest {
        id: id.to_string(),
        texts: texts.to_vec(),
    })
    .expect("request serializes");
    let line = transport
        .exchange(&request)
        .map_err(|e| Error::protocol(id, format!("transport failed: {e}")))?;
    let response: ScoreResponse =
        serde_json::from_str(&line).map_err(|e| Error::protocol(id, format!("malformed response {line:?}: {e}")))?;
    if let Some(message) = response.error {
        return Err(Error::protocol(id, format!("peer reported: {message}")));
    }
    if response.id.as_deref() != Some(id) {
        return Err(Error::protocol(
            id,
            format!("response id {:?} does not match", response.id),
        ));
    }
    if response.scores.len() != texts.len() {
        return Err(Error::protocol(
            id,
            format!("expected {} scores, got {}", texts.len(), response.scores.len()),
        ));
    }
    if let Some(bad) = response.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::protocol(id, format!("score {bad} outside [0, 1]")));
    }
    Ok(response.scores)
}

/// Sends one verification request and validates the answer.
pub fn request_verdict(
    transport: &mut dyn LineTransport,
    id: &str,
    claim: &str,
    evidence: &str,
) -> Result<VerdictLabel> {
    let request = serde_json::to_string(&VerifyRequest {
        id: id.to_string(),
        claim: claim.to_string(),
        evidence: evidence.to_string(),
    })
    .expect("request serializes");
    let line = transport
        .exchange(&request)
        .map_err(|e| Error::protocol(id, format!("transport failed: {e}")))?;
    let response: VerifyResponse =
        serde_json::from_str(&line).map_err(|e| Error::protocol(id, format!("malformed response {line:?}: {e}")))?;
    if let Some(message) = response.error {
        return Err(Error::protocol(id, format!("peer reported: {message}")));
    }
    if response.id.as_deref() != Some(id) {
        return Err(Error::protocol(
            id,
            format!("response id {:?} does not match", response.id),
        ));
    }
    response
        .label
        .ok_or_else(|| Error::protocol(id, "response carries no label"))
}

#[derive(Serialize)]
struct ErrorResponse {
    id: Option<String>,
    error: String,
}

fn serve<Req, Resp, R, W, F>(input: R, mut output: W, mut answer: F) -> io::Result<()>
where
    Req: serde::de::DeserializeOwned,
    Resp: Serialize,
    R: BufRead,
    W: Write,
    F: FnMut(Req) -> Resp,
{
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Req>(&line) {
            Ok(req) => serde_json::to_string(&answer(req)),
            Err(e) => serde_json::to_string(&ErrorResponse {
                id: None,
                error: e.to_string(),
            }),
        }
        .map_err(io::Error::other)?;
        output.write_all(reply.as_bytes())?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

/// Answers scoring requests line by line until `input` ends. Malformed
/// lines get an error response and do not stop the loop.
pub fn serve_scores<R: BufRead, W: Write>(
    input: R,
    output: W,
    mut score: impl FnMut(&[String]) -> Vec<f64>,
) -> io::Result<()> {
    serve(input, output, |req: ScoreRequest| ScoreResponse {
        scores: score(&req.texts),
        id: Some(req.id),
        error: None,
    })
}

/// Answers verification requests line by line until `input` ends.
pub fn serve_verdicts<R: BufRead, W: Write>(
    input: R,
    output: W,
    mut verify: impl FnMut(&str, &str) -> VerdictLabel,
) -> io::Result<()> {
    serve(input, output, |req: VerifyRequest| VerifyResponse {
        label: Some(verify(&req.claim, &req.evidence)),
        id: Some(req.id),
        error: None,
    })
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// In-process peer driven by a closure over request lines.
    pub struct FnTransport<F>(pub F);

    impl<F: FnMut(&str) -> String + Send> LineTransport for FnTransport<F> {
        fn exchange(&mut self, line: &str) -> io::Result<String> {
            Ok((self.0)(line))
        }
    }
}
