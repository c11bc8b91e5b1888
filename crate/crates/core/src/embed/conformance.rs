//! Wire-protocol conformance checks for embedder processes.
//!
//! The suite drives a peer at the byte level, so it also exercises requests a
//! well-behaved client would never send. Run it against a spawned command
//! with [`check_command`] or against an in-process server with
//! [`check_loopback`].

use std::io::{self, Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};

use super::protocol::{self, spawn_frame_reader};
use super::Embedder;
use crate::data::{encode_png, ImageTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &'static str, outcome: Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(CheckResult { name, passed, detail });
    }
}

impl std::fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}

struct Peer<W> {
    writer: W,
    replies: Receiver<io::Result<Vec<u8>>>,
    timeout: Duration,
}

impl<W: Write> Peer<W> {
    fn send_raw(&mut self, payload: &[u8]) -> Result<(), String> {
        protocol::write_frame(&mut self.writer, payload).map_err(|e| format!("write failed: {e}"))
    }

    fn recv(&mut self) -> Result<Value, String> {
        match self.replies.recv_timeout(self.timeout) {
            Ok(Ok(frame)) => serde_json::from_slice(&frame).map_err(|e| format!("reply is not JSON: {e}")),
            Ok(Err(e)) => Err(format!("unreadable reply frame: {e}")),
            Err(RecvTimeoutError::Timeout) => Err(format!("no reply within {:?}", self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err("peer closed the stream".into()),
        }
    }

    fn call(&mut self, request: &Value) -> Result<Value, String> {
        self.send_raw(&serde_json::to_vec(request).expect("serializable"))?;
        self.recv()
    }

    /// After shutdown the reply stream must end without another frame.
    fn expect_end(&mut self) -> Result<(), String> {
        match self.replies.recv_timeout(self.timeout) {
            Err(RecvTimeoutError::Disconnected) => Ok(()),
            Err(RecvTimeoutError::Timeout) => Err("stream still open after shutdown".into()),
            Ok(Ok(frame)) => Err(format!(
                "unexpected frame after shutdown: {}",
                String::from_utf8_lossy(&frame)
            )),
            Ok(Err(e)) => Err(format!("garbage after shutdown: {e}")),
        }
    }
}

fn embedding_of(reply: &Value, id: &str, dim: usize) -> Result<Vec<f64>, String> {
    if reply.get("error").is_some() {
        return Err(format!("error reply {reply}"));
    }
    if reply.get("id").and_then(Value::as_str) != Some(id) {
        return Err(format!("reply id mismatch in {reply}"));
    }
    let arr = reply
        .get("embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| format!("no embedding array in {reply}"))?;
    if arr.len() != dim {
        return Err(format!("embedding has {} entries, hello advertised {dim}", arr.len()));
    }
    arr.iter()
        .map(|v| {
            v.as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("bad entry {v}"))
        })
        .collect()
}

fn is_error_reply(reply: &Value) -> Result<String, String> {
    match reply.get("error") {
        Some(Value::String(msg)) => Ok(format!("rejected: {msg}")),
        _ => Err(format!("expected an error reply, got {reply}")),
    }
}

/// Sample image used by the image checks: an 8×8 gray gradient.
pub fn probe_png() -> Vec<u8> {
    let px = (0..64).map(|i| i as f32 / 63.0).collect();
    encode_png(&ImageTensor::new(8, 8, 1, px).expect("valid probe")).expect("png encode")
}

fn run_suite<W: Write>(peer: &mut Peer<W>, report: &mut ConformanceReport) {
    let hello = peer.call(&json!({"op": "hello"}));
    let dim = match hello.and_then(|h| {
        let name = h.get("name").and_then(Value::as_str).ok_or(format!("no name in {h}"))?;
        let dim = h
            .get("dim")
            .and_then(Value::as_u64)
            .filter(|&d| d > 0)
            .ok_or(format!("no positive dim in {h}"))?;
        Ok((name.to_owned(), dim as usize))
    }) {
        Ok((name, dim)) => {
            report.record("hello", Ok(format!("name={name:?} dim={dim}")));
            dim
        }
        Err(e) => {
            report.record("hello", Err(e));
            return;
        }
    };

    let text_req = json!({"op": "embed_text", "id": "conf-text", "text": "The lungs are clear. No acute process."});
    let first = peer.call(&text_req).and_then(|r| embedding_of(&r, "conf-text", dim));
    report.record(
        "embed_text",
        first
            .as_ref()
            .map(|_| format!("{dim} finite values"))
            .map_err(Clone::clone),
    );

    let png_b64 = base64::engine::general_purpose::STANDARD.encode(probe_png());
    let image_req = json!({"op": "embed_image", "id": "conf-image", "png_b64": png_b64});
    let image = peer.call(&image_req).and_then(|r| embedding_of(&r, "conf-image", dim));
    report.record(
        "embed_image",
        image
            .as_ref()
            .map(|_| format!("{dim} finite values"))
            .map_err(Clone::clone),
    );

    let repeat = peer.call(&text_req).and_then(|r| embedding_of(&r, "conf-text", dim));
    report.record(
        "deterministic",
        match (&first, &repeat) {
            (Ok(a), Ok(b)) if a == b => Ok("repeated request returned an identical vector".into()),
            (Ok(_), Ok(_)) => Err("repeated request returned a different vector".into()),
            (_, Err(e)) | (Err(e), _) => Err(e.clone()),
        },
    );

    let malformed = peer
        .send_raw(b"{this is not json")
        .and_then(|_| peer.recv())
        .and_then(|r| is_error_reply(&r));
    report.record("malformed_json_rejected", malformed);

    let unknown = peer
        .call(&json!({"op": "transmogrify"}))
        .and_then(|r| is_error_reply(&r));
    report.record("unknown_op_rejected", unknown);

    let bad_image = peer
        .call(&json!({"op": "embed_image", "id": "bad", "png_b64": "bm90IGFuIGltYWdl"}))
        .and_then(|r| is_error_reply(&r));
    report.record("bad_image_rejected", bad_image);

    let alive = peer
        .call(&json!({"op": "hello"}))
        .and_then(|h| match h.get("dim").and_then(Value::as_u64) {
            Some(d) if d as usize == dim => Ok("still serving after rejected requests".into()),
            _ => Err(format!("unexpected hello after errors: {h}")),
        });
    report.record("survives_errors", alive);

    let shutdown = peer
        .send_raw(br#"{"op":"shutdown"}"#)
        .and_then(|_| peer.expect_end())
        .map(|_| "stream closed".to_owned());
    report.record("shutdown", shutdown);
}

/// Spawn `command` and run the suite; shutdown must end the process with status 0.
pub fn check_command(command: &[String], timeout: Duration) -> io::Result<ConformanceReport> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?;
    let stdin = child.stdin.take().expect("piped stdin");
    let replies = spawn_frame_reader(child.stdout.take().expect("piped stdout"));
    let mut peer = Peer {
        writer: stdin,
        replies,
        timeout,
    };
    let mut report = ConformanceReport::default();
    run_suite(&mut peer, &mut report);
    drop(peer);

    let deadline = Instant::now() + timeout;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            break None;
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    report.record(
        "exit_status",
        match status {
            Some(s) if s.success() => Ok("exited 0".into()),
            Some(s) => Err(format!("exited with {s}")),
            None => Err("did not exit after shutdown".into()),
        },
    );
    Ok(report)
}

/// Run the suite against `embedder` served in-process over OS pipes.
pub fn check_loopback(embedder: Arc<dyn Embedder>, timeout: Duration) -> io::Result<ConformanceReport> {
    let (req_rx, req_tx) = io::pipe()?;
    let (resp_rx, resp_tx) = io::pipe()?;
    let server = std::thread::spawn(move || protocol::serve(embedder.as_ref(), req_rx, resp_tx));
    let mut peer = Peer {
        writer: req_tx,
        replies: spawn_frame_reader(resp_rx),
        timeout,
    };
    let mut report = ConformanceReport::default();
    run_suite(&mut peer, &mut report);
    drop(peer);
    let end = server.join().map_err(|_| io::Error::other("server thread panicked"))?;
    report.record(
        "server_end",
        match end {
            Ok(protocol::ServeEnd::Shutdown) => Ok("served until shutdown".into()),
            Ok(other) => Err(format!("server ended with {other:?}")),
            Err(e) => Err(format!("server error: {e}")),
        },
    );
    Ok(report)
}

/// Drive any `Read`/`Write` pair (for peers that are neither processes nor in-process).
pub fn check_streams<W: Write, R: Read + Send + 'static>(writer: W, reader: R, timeout: Duration) -> ConformanceReport {
    let mut peer = Peer {
        writer,
        replies: spawn_frame_reader(reader),
        timeout,
    };
    let mut report = ConformanceReport::default();
    run_suite(&mut peer, &mut report);
    report
}
