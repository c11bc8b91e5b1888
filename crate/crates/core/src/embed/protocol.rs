//! Length-prefixed JSON over a byte stream.
//!
//! Each message is a `u32` little-endian byte length followed by that many
//! bytes of UTF-8 JSON. Requests and their replies:
//!
//! ```text
//! {"op":"hello"}                                  -> {"name":str,"dim":int}
//! {"op":"embed_image","id":str,"png_b64":str}     -> {"id":str,"embedding":[float]}
//! {"op":"embed_text","id":str,"text":str}         -> {"id":str,"embedding":[float]}
//! {"op":"shutdown"}                               -> (process exits 0)
//! ```
//!
//! A request that cannot be served gets `{"error":str}` and the connection
//! stays usable. The server is strictly serial.

use std::io::{self, Read, Write};
use std::sync::mpsc;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Embedder, ImageItem, OcclusionVariant, TextItem};
use crate::data::{decode_image, ReportText};

/// Frames larger than this are rejected without reading the body.
pub const MAX_FRAME_LEN: u32 = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Hello,
    EmbedImage { id: String, png_b64: String },
    EmbedText { id: String, text: String },
    Shutdown,
}

pub fn write_frame<W: Write>(out: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&l| l <= MAX_FRAME_LEN)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(payload)?;
    out.flush()
}

pub fn write_json<W: Write>(out: &mut W, value: &impl Serialize) -> io::Result<()> {
    let bytes = serde_json::to_vec(value).map_err(io::Error::other)?;
    write_frame(out, &bytes)
}

/// Read one frame. `Ok(None)` on a clean end of stream before the length prefix.
pub fn read_frame<R: Read>(input: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match input.read(&mut len[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated length prefix")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {len} exceeds limit {MAX_FRAME_LEN}"),
        ));
    }
    let mut buf = vec![0u8; len as usize];
    input.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// Reads frames on a background thread so callers can wait with a timeout.
/// The channel closes after end of stream or the first error.
pub fn spawn_frame_reader<R: Read + Send + 'static>(mut input: R) -> mpsc::Receiver<io::Result<Vec<u8>>> {
    let (tx, rx) = mpsc::channel();
    std::thread::Builder::new()
        .name("embedder-frame-reader".into())
        .spawn(move || loop {
            match read_frame(&mut input) {
                Ok(Some(frame)) => {
                    if tx.send(Ok(frame)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        })
        .expect("spawn frame reader thread");
    rx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeEnd {
    Shutdown,
    EndOfStream,
}

fn error_reply(message: impl Into<String>) -> Value {
    json!({ "error": message.into() })
}

fn handle(embedder: &dyn Embedder, request: Request) -> Value {
    match request {
        Request::Hello => json!({ "name": embedder.name(), "dim": embedder.dim() }),
        Request::EmbedImage { id, png_b64 } => {
            let bytes = match base64::engine::general_purpose::STANDARD.decode(png_b64.as_bytes()) {
                Ok(b) => b,
                Err(e) => return error_reply(format!("png_b64: {e}")),
            };
            let image = match decode_image(&bytes) {
                Ok(img) => img,
                Err(e) => return error_reply(e.to_string()),
            };
            let item = ImageItem {
                id: &id,
                study_id: &id,
                image: &image,
                variant: OcclusionVariant::default(),
            };
            match embedder.embed_image(&item) {
                Ok(v) => json!({ "id": id, "embedding": v }),
                Err(e) => error_reply(e.to_string()),
            }
        }
        Request::EmbedText { id, text } => {
            let report = ReportText::new(text.clone());
            let item = TextItem {
                study_id: &id,
                report: &report,
                text: &text,
            };
            match embedder.embed_text(&item) {
                Ok(v) => json!({ "id": id, "embedding": v }),
                Err(e) => error_reply(e.to_string()),
            }
        }
        Request::Shutdown => Value::Null,
    }
}

/// Serve requests until `shutdown` or end of input.
///
/// Malformed requests are answered with an error reply. An oversized or
/// truncated frame cannot be resynchronised and ends the session with an error.
pub fn serve<R: Read, W: Write>(embedder: &dyn Embedder, mut input: R, mut output: W) -> io::Result<ServeEnd> {
    loop {
        let frame = match read_frame(&mut input) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(ServeEnd::EndOfStream),
            Err(e) => {
                let _ = write_json(&mut output, &error_reply(e.to_string()));
                return Err(e);
            }
        };
        let request: Request = match serde_json::from_slice(&frame) {
            Ok(r) => r,
            Err(e) => {
                write_json(&mut output, &error_reply(format!("bad request: {e}")))?;
                continue;
            }
        };
        if request == Request::Shutdown {
            return Ok(ServeEnd::Shutdown);
        }
        write_json(&mut output, &handle(embedder, request))?;
    }
}
