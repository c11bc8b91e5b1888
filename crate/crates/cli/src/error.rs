use std::path::PathBuf;

use thiserror::Error;
use xmrbench_core::bench::BenchError;
use xmrbench_core::data::DataError;
use xmrbench_core::embed::{EmbedError, TableError};
use xmrbench_core::report::ReportError;
use xmrbench_core::toymodel::ToyError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const DATA: i32 = 4;
    pub const EMBEDDER: i32 = 5;
    pub const BENCH: i32 = 6;
    pub const TRAIN: i32 = 7;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("conformance failed: {0} of {1} checks")]
    Conformance(usize, usize),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io { .. } => exit::IO,
            CliError::Data(e) => data_code(e),
            CliError::Embed(e) => embed_code(e),
            CliError::Bench(e) => match e {
                BenchError::Config(_) => exit::USAGE,
                BenchError::Data(d) => data_code(d),
                BenchError::Embed { source, .. } => embed_code(source),
                BenchError::Dump(_) => exit::IO,
                _ => exit::BENCH,
            },
            CliError::Toy(e) => match e {
                ToyError::Io(_) => exit::IO,
                ToyError::Config(_) => exit::USAGE,
                _ => exit::TRAIN,
            },
            CliError::Report(e) => match e {
                ReportError::Io(_) => exit::IO,
                ReportError::UnknownFormat(_) => exit::USAGE,
                _ => exit::DATA,
            },
            CliError::Table(e) => table_code(e),
            CliError::Conformance(..) => exit::EMBEDDER,
        }
    }
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Io { .. } => exit::IO,
        _ => exit::DATA,
    }
}

fn table_code(e: &TableError) -> i32 {
    match e {
        TableError::Io(_) => exit::IO,
        _ => exit::DATA,
    }
}

fn embed_code(e: &EmbedError) -> i32 {
    match e {
        EmbedError::Spec(_) => exit::USAGE,
        EmbedError::Table(t) => table_code(t),
        EmbedError::Data(d) => data_code(d),
        EmbedError::Toy(ToyError::Io(_)) => exit::IO,
        _ => exit::EMBEDDER,
    }
}
