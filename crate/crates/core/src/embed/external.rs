//! Client side of the embedder protocol.

use std::io::{self, Write};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::Value;

use super::protocol::{self, Request};
use super::{EmbedError, Embedder, ImageItem, TextItem};
use crate::data::encode_png;

struct Connection {
    writer: Option<Box<dyn Write + Send>>,
    replies: Receiver<io::Result<Vec<u8>>>,
    child: Option<Child>,
    server: Option<JoinHandle<()>>,
    /// Set once the stream can no longer be trusted (timeout, exit, desync).
    broken: Option<String>,
}

impl Connection {
    fn exit_description(&mut self) -> String {
        match self.child.as_mut().map(Child::try_wait) {
            Some(Ok(Some(status))) => format!("process exited with {status}"),
            Some(Ok(None)) => "process closed its output".to_owned(),
            Some(Err(e)) => format!("process state unknown: {e}"),
            None => "peer closed the stream".to_owned(),
        }
    }

    fn round_trip(&mut self, request: &Request, timeout: Duration) -> Result<Value, EmbedError> {
        if let Some(reason) = &self.broken {
            return Err(EmbedError::ProcessExited(reason.clone()));
        }
        let writer = self.writer.as_mut().expect("writer present until shutdown");
        if let Err(e) = protocol::write_json(writer, request) {
            let reason = format!("{} ({e})", self.exit_description());
            self.broken = Some(reason.clone());
            return Err(EmbedError::ProcessExited(reason));
        }
        let frame = match self.replies.recv_timeout(timeout) {
            Ok(Ok(frame)) => frame,
            Ok(Err(e)) => {
                self.broken = Some(e.to_string());
                return Err(EmbedError::Malformed(format!("unreadable frame: {e}")));
            }
            Err(RecvTimeoutError::Timeout) => {
                self.broken = Some(format!("timed out after {timeout:?}"));
                return Err(EmbedError::Timeout(timeout));
            }
            Err(RecvTimeoutError::Disconnected) => {
                let reason = self.exit_description();
                self.broken = Some(reason.clone());
                return Err(EmbedError::ProcessExited(reason));
            }
        };
        let value: Value =
            serde_json::from_slice(&frame).map_err(|e| EmbedError::Malformed(format!("reply is not JSON: {e}")))?;
        if let Some(msg) = value.get("error") {
            return Err(EmbedError::Remote(
                msg.as_str().map_or_else(|| msg.to_string(), str::to_owned),
            ));
        }
        Ok(value)
    }

    fn close(&mut self, grace: Duration) -> Option<ExitStatus> {
        if let Some(mut w) = self.writer.take() {
            if self.broken.is_none() {
                let _ = protocol::write_json(&mut w, &Request::Shutdown);
            }
        }
        if let Some(server) = self.server.take() {
            let _ = server.join();
        }
        let mut child = self.child.take()?;
        let deadline = Instant::now() + grace;
        loop {
            match child.try_wait() {
                Ok(Some(status)) => return Some(status),
                Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(10)),
                _ => {
                    let _ = child.kill();
                    return child.wait().ok();
                }
            }
        }
    }
}

/// An embedder living on the other end of a protocol stream.
///
/// Requests are serialised through a mutex: one request in flight at a time.
pub struct ExternalEmbedder {
    name: String,
    dim: usize,
    timeout: Duration,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for ExternalEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEmbedder")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ExternalEmbedder {
    /// Start `command` (argv) and complete the `hello` handshake.
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self, EmbedError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| EmbedError::Spec("empty embedder command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| EmbedError::Spawn {
                command: command.join(" "),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::connect(
            Box::new(stdin),
            protocol::spawn_frame_reader(stdout),
            Some(child),
            None,
            timeout,
        )
    }

    /// Serve `embedder` on a thread and connect to it through OS pipes.
    pub fn loopback(embedder: Arc<dyn Embedder>, timeout: Duration) -> Result<Self, EmbedError> {
        let (req_rx, req_tx) = io::pipe()?;
        let (resp_rx, resp_tx) = io::pipe()?;
        let server = std::thread::Builder::new()
            .name("loopback-embedder".into())
            .spawn(move || {
                if let Err(e) = protocol::serve(embedder.as_ref(), req_rx, resp_tx) {
                    log::warn!("loopback embedder stopped: {e}");
                }
            })?;
        Self::connect(
            Box::new(req_tx),
            protocol::spawn_frame_reader(resp_rx),
            None,
            Some(server),
            timeout,
        )
    }

    fn connect(
        writer: Box<dyn Write + Send>,
        replies: Receiver<io::Result<Vec<u8>>>,
        child: Option<Child>,
        server: Option<JoinHandle<()>>,
        timeout: Duration,
    ) -> Result<Self, EmbedError> {
        let mut conn = Connection {
            writer: Some(writer),
            replies,
            child,
            server,
            broken: None,
        };
        let hello = match conn.round_trip(&Request::Hello, timeout) {
            Ok(v) => v,
            Err(e) => {
                conn.broken = Some("handshake failed".into());
                conn.close(Duration::from_millis(200));
                return Err(e);
            }
        };
        let name = hello.get("name").and_then(Value::as_str).map(str::to_owned);
        let dim = hello.get("dim").and_then(Value::as_u64).filter(|&d| d > 0);
        let (Some(name), Some(dim)) = (name, dim) else {
            conn.close(Duration::from_millis(200));
            return Err(EmbedError::Malformed(format!("bad hello reply {hello}")));
        };
        log::info!("external embedder {name:?} ready, dim {dim}");
        Ok(Self {
            name,
            dim: dim as usize,
            timeout,
            conn: Mutex::new(conn),
        })
    }

    fn request_embedding(&self, request: Request, id: &str) -> Result<Vec<f32>, EmbedError> {
        let reply = {
            let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
            conn.round_trip(&request, self.timeout)?
        };
        parse_embedding_reply(&reply, id, self.dim)
    }

    /// Send `shutdown` and wait for the process to exit.
    pub fn shutdown(mut self) -> Option<ExitStatus> {
        let conn = self.conn.get_mut().unwrap_or_else(|p| p.into_inner());
        conn.close(Duration::from_secs(5))
    }
}

impl Drop for ExternalEmbedder {
    fn drop(&mut self) {
        let conn = self.conn.get_mut().unwrap_or_else(|p| p.into_inner());
        conn.close(Duration::from_secs(2));
    }
}

/// Validate an `{"id", "embedding"}` reply.
pub fn parse_embedding_reply(reply: &Value, id: &str, dim: usize) -> Result<Vec<f32>, EmbedError> {
    match reply.get("id").and_then(Value::as_str) {
        Some(got) if got == id => {}
        other => return Err(EmbedError::Malformed(format!("reply id {other:?}, expected {id:?}"))),
    }
    let values = reply
        .get("embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| EmbedError::Malformed("reply lacks an embedding array".into()))?;
    if values.len() != dim {
        return Err(EmbedError::DimMismatch {
            expected: dim,
            got: values.len(),
        });
    }
    values
        .iter()
        .map(|v| match v.as_f64() {
            Some(x) if x.is_finite() && (x as f32).is_finite() => Ok(x as f32),
            Some(_) => Err(EmbedError::NonFinite(id.to_owned())),
            None => Err(EmbedError::Malformed(format!("embedding entry {v} is not a number"))),
        })
        .collect()
}

impl Embedder for ExternalEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, item: &ImageItem<'_>) -> Result<Vec<f32>, EmbedError> {
        let id = item.variant.key(item.id);
        let png = encode_png(item.image)?;
        let png_b64 = base64::engine::general_purpose::STANDARD.encode(png);
        self.request_embedding(
            Request::EmbedImage {
                id: id.clone(),
                png_b64,
            },
            &id,
        )
    }

    fn embed_text(&self, item: &TextItem<'_>) -> Result<Vec<f32>, EmbedError> {
        let request = Request::EmbedText {
            id: item.study_id.to_owned(),
            text: item.text.to_owned(),
        };
        self.request_embedding(request, item.study_id)
    }
}
