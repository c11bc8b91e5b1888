//! Embedding tables and the `XEMB` file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XEMB" | u32 version (=1) | u32 count | u32 dim
//! count × ( u16 id_len | id_len bytes UTF-8 id | dim × f32 )
//! ```
//!
//! The reader validates the header against the remaining byte count before
//! allocating anything sized by it.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"XEMB";
pub const VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?} (expected \"XEMB\")")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("embedding id is not valid UTF-8")]
    InvalidId,
    #[error("id {id:?} is {len} bytes, longer than the u16 length field allows")]
    IdTooLong { id: String, len: usize },
    #[error("embedding {id:?} has dimension {got}, table dimension is {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("embedding {0:?} has a non-finite value")]
    NonFinite(String),
    #[error("dimension must be positive")]
    ZeroDim,
}

/// One embedding with its identity key.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub id: String,
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(id: impl Into<String>, values: Vec<f32>) -> Self {
        Self { id: id.into(), values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Ordered embeddings with unique ids and one shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: Vec<EmbeddingVector>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self, TableError> {
        if dim == 0 {
            return Err(TableError::ZeroDim);
        }
        Ok(Self {
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = EmbeddingVector>) -> Result<Self, TableError> {
        let mut table = Self::new(dim)?;
        for e in entries {
            table.push(e)?;
        }
        Ok(table)
    }

    pub fn push(&mut self, entry: EmbeddingVector) -> Result<(), TableError> {
        if entry.values.len() != self.dim {
            return Err(TableError::DimMismatch {
                id: entry.id,
                expected: self.dim,
                got: entry.values.len(),
            });
        }
        if entry.values.iter().any(|v| !v.is_finite()) {
            return Err(TableError::NonFinite(entry.id));
        }
        if entry.id.len() > usize::from(u16::MAX) {
            let len = entry.id.len();
            return Err(TableError::IdTooLong { id: entry.id, len });
        }
        if self.index.contains_key(&entry.id) {
            return Err(TableError::DuplicateId(entry.id));
        }
        self.index.insert(entry.id.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[EmbeddingVector] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

pub fn write_embeddings<W: Write>(table: &EmbeddingTable, mut out: W) -> Result<(), TableError> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(table.len() as u32).to_le_bytes())?;
    out.write_all(&(table.dim() as u32).to_le_bytes())?;
    for e in table.entries() {
        out.write_all(&(e.id.len() as u16).to_le_bytes())?;
        out.write_all(e.id.as_bytes())?;
        for v in &e.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<(), TableError> {
    let file = std::fs::File::create(path)?;
    write_embeddings(table, std::io::BufWriter::new(file))
}

/// Decode a complete `XEMB` image held in memory.
pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingTable, TableError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(TableError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(TableError::UnsupportedVersion(version));
    }
    let count = cur.u32("count")? as u64;
    let dim = cur.u32("dim")? as u64;
    if dim == 0 {
        return Err(TableError::ZeroDim);
    }
    // Smallest possible entry is an empty id plus its vector.
    let min_entry = 2 + 4 * dim;
    let remaining = (bytes.len() as u64).saturating_sub(HEADER_LEN);
    if count.saturating_mul(min_entry) > remaining {
        return Err(TableError::Truncated(format!(
            "header declares {count} entries of dim {dim}, only {remaining} bytes follow"
        )));
    }
    let mut table = EmbeddingTable::new(dim as usize)?;
    table.entries.reserve(count as usize);
    for i in 0..count {
        let id_len = cur.u16(&format!("id length of entry {i}"))? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| TableError::InvalidId)?
            .to_owned();
        let raw = cur.take(4 * dim as usize, "vector")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        table.push(EmbeddingVector { id, values })?;
    }
    if cur.pos != bytes.len() {
        return Err(TableError::Truncated(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - cur.pos
        )));
    }
    Ok(table)
}

pub fn read_embeddings<R: Read>(mut input: R) -> Result<EmbeddingTable, TableError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_embeddings(&bytes)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, TableError> {
    decode_embeddings(&std::fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TableError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TableError::Truncated(format!("{what}: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TableError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &str) -> Result<u16, TableError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}
