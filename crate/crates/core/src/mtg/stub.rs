//! Minimal in-process HTTP server speaking the generation protocol.
//!
//! Useful for offline runs and tests: the handler decides every reply, so
//! outputs are fully deterministic.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use super::{parse_llm_prompt, GenerateRequest, GenerateResponse, PARAPHRASE_PREFIX};
use crate::pairminer::single_edit;

/// Deterministic stand-in for a language model. Edit prompts get short
/// texts naming the added (or removed) token, one phrasing per requested
/// completion; paraphrase prompts are echoed back unchanged.
pub fn describe_edit(req: &GenerateRequest) -> StubReply {
    if let Some(sentence) = req.prompt.strip_prefix(PARAPHRASE_PREFIX) {
        return StubReply::Completions(vec![sentence.to_owned(); req.n]);
    }
    let Some((a, b)) = parse_llm_prompt(&req.prompt) else {
        return StubReply::Status(422, "unrecognized prompt".into());
    };
    let ta: Vec<&str> = a.split_whitespace().collect();
    let tb: Vec<&str> = b.split_whitespace().collect();
    let Some(edit) = single_edit(&ta, &tb) else {
        return StubReply::Status(422, "captions are not one edit apart".into());
    };
    let added = edit.index_b.map(|i| tb[i]);
    let removed = edit.index_a.map(|i| ta[i]);
    let phrasings: Vec<String> = match (added, removed) {
        (Some(w), _) => vec![format!("Change it to {w}"), format!("Make it {w}"), format!("Show {w} instead")],
        (None, Some(w)) => vec![format!("Remove the {w}"), format!("Without {w}"), format!("Take away the {w}")],
        (None, None) => vec!["Keep it the same".to_owned()],
    };
    StubReply::Completions((0..req.n).map(|k| phrasings[k % phrasings.len()].clone()).collect())
}

/// What the stub sends back for one request.
#[derive(Debug, Clone, PartialEq)]
pub enum StubReply {
    Completions(Vec<String>),
    Status(u16, String),
}

type Handler = dyn Fn(&GenerateRequest) -> StubReply + Send + Sync;

pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<AtomicUsize>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Bind to an ephemeral localhost port and serve until dropped.
    pub fn spawn<F>(handler: F) -> std::io::Result<Self>
    where
        F: Fn(&GenerateRequest) -> StubReply + Send + Sync + 'static,
    {
        Self::bind("127.0.0.1:0", handler)
    }

    pub fn bind<F>(addr: &str, handler: F) -> std::io::Result<Self>
    where
        F: Fn(&GenerateRequest) -> StubReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let thread = {
            let stop = stop.clone();
            let requests = requests.clone();
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let handler = handler.clone();
                    let requests = requests.clone();
                    std::thread::spawn(move || {
                        if let Err(e) = serve_connection(conn, &*handler, &requests) {
                            log::debug!("stub connection error: {e}");
                        }
                    });
                }
            })
        };
        Ok(StubServer { addr, stop, requests, thread: Some(thread) })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Number of generation requests answered so far.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Block until the server thread exits (never, unless dropped elsewhere).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_connection(conn: TcpStream, handler: &Handler, requests: &AtomicUsize) -> std::io::Result<()> {
    conn.set_nodelay(true)?;
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut conn = conn;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line)? == 0 {
            return Ok(());
        }
        let mut content_length = 0usize;
        let mut close = false;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Ok(());
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((name, value)) = line.split_once(':') {
                let name = name.trim().to_ascii_lowercase();
                let value = value.trim();
                if name == "content-length" {
                    content_length = value.parse().unwrap_or(0);
                } else if name == "connection" && value.eq_ignore_ascii_case("close") {
                    close = true;
                }
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body)?;

        let mut parts = request_line.split_whitespace();
        let method = parts.next().unwrap_or("");
        let path = parts.next().unwrap_or("");
        let (status, payload) = if method != "POST" || path != "/v1/generate" {
            (404, "not found".to_owned())
        } else {
            match serde_json::from_slice::<GenerateRequest>(&body) {
                Err(e) => (400, format!("bad request: {e}")),
                Ok(req) => {
                    requests.fetch_add(1, Ordering::SeqCst);
                    match handler(&req) {
                        StubReply::Completions(completions) => {
                            let json = serde_json::to_string(&GenerateResponse { completions })
                                .expect("serializable");
                            (200, json)
                        }
                        StubReply::Status(code, msg) => (code, msg),
                    }
                }
            }
        };
        let content_type = if status == 200 { "application/json" } else { "text/plain" };
        let response = format!(
            "HTTP/1.1 {status} {}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\n\r\n{payload}",
            reason(status),
            payload.len()
        );
        conn.write_all(response.as_bytes())?;
        conn.flush()?;
        if close {
            return Ok(());
        }
    }
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}
