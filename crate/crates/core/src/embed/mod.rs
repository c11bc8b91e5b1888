//! The boundary between the harness and a model's image and text branches.
//!
//! An [`Embedder`] turns a (possibly occluded) query image or a report into a
//! fixed-length vector. Builtin embedders cover testing and desk-scale runs;
//! [`external::ExternalEmbedder`] talks to a separate process over the
//! length-prefixed JSON protocol in [`protocol`].

pub mod conformance;
pub mod external;
pub mod protocol;
pub mod table;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ImageTensor, ReportText};
use crate::seed;
use crate::toymodel::{tokenize, ToyEncoderParams, ToyError};

pub use external::ExternalEmbedder;
pub use table::{EmbeddingTable, EmbeddingVector, TableError};

/// Default per-request timeout for external embedders.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to start embedder {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedder process exited: {0}")]
    ProcessExited(String),
    #[error("malformed embedder message: {0}")]
    Malformed(String),
    #[error("embedding dimension {got}, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedder did not answer within {0:?}")]
    Timeout(Duration),
    #[error("embedder reported an error: {0}")]
    Remote(String),
    #[error("no embedding for {0:?}")]
    Missing(String),
    #[error("non-finite value in embedding {0:?}")]
    NonFinite(String),
    #[error("invalid embedder spec: {0}")]
    Spec(String),
    #[error("embedding file: {0}")]
    Table(#[from] TableError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Toy(#[from] ToyError),
}

/// Which corrupted variant of a query image is being embedded.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OcclusionVariant {
    pub ratio_percent: f64,
    pub trial: usize,
    /// Report index, only in the per-pair occlusion mode.
    pub pair: Option<usize>,
}

impl OcclusionVariant {
    pub fn is_clean(&self) -> bool {
        self.ratio_percent == 0.0 && self.trial == 0 && self.pair.is_none()
    }

    /// Lookup key used by precomputed embedding files: the bare image id for
    /// the clean variant, `id@p<ratio>#<trial>` (plus `/r<report>`) otherwise.
    pub fn key(&self, image_id: &str) -> String {
        if self.is_clean() {
            return image_id.to_owned();
        }
        let mut key = format!("{image_id}@p{:.2}#{}", self.ratio_percent, self.trial);
        if let Some(r) = self.pair {
            key.push_str(&format!("/r{r}"));
        }
        key
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImageItem<'a> {
    pub id: &'a str,
    pub study_id: &'a str,
    pub image: &'a ImageTensor,
    pub variant: OcclusionVariant,
}

#[derive(Debug, Clone, Copy)]
pub struct TextItem<'a> {
    pub study_id: &'a str,
    pub report: &'a ReportText,
    /// Report text after section selection.
    pub text: &'a str,
}

/// A model's image branch and text branch.
///
/// Implementations must be deterministic: the same item always maps to the
/// same vector of length [`Embedder::dim`].
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_image(&self, item: &ImageItem<'_>) -> Result<Vec<f32>, EmbedError>;
    fn embed_text(&self, item: &TextItem<'_>) -> Result<Vec<f32>, EmbedError>;
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_image(&self, item: &ImageItem<'_>) -> Result<Vec<f32>, EmbedError> {
        (**self).embed_image(item)
    }
    fn embed_text(&self, item: &TextItem<'_>) -> Result<Vec<f32>, EmbedError> {
        (**self).embed_text(item)
    }
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_image(&self, item: &ImageItem<'_>) -> Result<Vec<f32>, EmbedError> {
        (**self).embed_image(item)
    }
    fn embed_text(&self, item: &TextItem<'_>) -> Result<Vec<f32>, EmbedError> {
        (**self).embed_text(item)
    }
}

/// Pixel-blind Gaussian vectors keyed on `(seed, modality, id)`.
#[derive(Debug, Clone)]
pub struct RandomEmbedder {
    dim: usize,
    seed: u64,
}

impl RandomEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::Spec("random embedder needs dim > 0".into()));
        }
        Ok(Self { dim, seed })
    }

    pub fn vector(&self, namespace: &str, id: &str) -> Vec<f32> {
        let mut rng = seed::rng(seed::derive(
            self.seed,
            &[seed::hash_str(namespace), seed::hash_str(id)],
        ));
        (0..self.dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect()
    }
}

impl Embedder for RandomEmbedder {
    fn name(&self) -> &str {
        "builtin-random"
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_image(&self, item: &ImageItem<'_>) -> Result<Vec<f32>, EmbedError> {
        Ok(self.vector("image", item.id))
    }
    fn embed_text(&self, item: &TextItem<'_>) -> Result<Vec<f32>, EmbedError> {
        Ok(self.vector("text", item.study_id))
    }
}

/// Pixel-blind perfect retriever: one-hot of the study index for both modalities.
#[derive(Debug, Clone)]
pub struct OracleEmbedder {
    index: HashMap<String, usize>,
}

impl OracleEmbedder {
    pub fn new<I, S>(study_ids: I) -> Result<Self, EmbedError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let index: HashMap<String, usize> = study_ids.into_iter().enumerate().map(|(i, s)| (s.into(), i)).collect();
        if index.is_empty() {
            return Err(EmbedError::Spec("oracle embedder needs at least one study".into()));
        }
        Ok(Self { index })
    }

    fn one_hot(&self, study_id: &str) -> Result<Vec<f32>, EmbedError> {
        let i = *self
            .index
            .get(study_id)
            .ok_or_else(|| EmbedError::Missing(study_id.to_owned()))?;
        let mut v = vec![0.0; self.index.len()];
        v[i] = 1.0;
        Ok(v)
    }
}

impl Embedder for OracleEmbedder {
    fn name(&self) -> &str {
        "builtin-oracle"
    }
    fn dim(&self) -> usize {
        self.index.len()
    }
    fn embed_image(&self, item: &ImageItem<'_>) -> Result<Vec<f32>, EmbedError> {
        self.one_hot(item.study_id)
    }
    fn embed_text(&self, item: &TextItem<'_>) -> Result<Vec<f32>, EmbedError> {
        self.one_hot(item.study_id)
    }
}

/// Precomputed embeddings: images keyed by [`OcclusionVariant::key`],
/// reports keyed by study id.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    images: EmbeddingTable,
    reports: EmbeddingTable,
}

impl FileEmbedder {
    pub fn new(images: EmbeddingTable, reports: EmbeddingTable) -> Result<Self, EmbedError> {
        if images.dim() != reports.dim() {
            return Err(EmbedError::DimMismatch {
                expected: images.dim(),
                got: reports.dim(),
            });
        }
        Ok(Self { images, reports })
    }
}

impl Embedder for FileEmbedder {
    fn name(&self) -> &str {
        "file"
    }
    fn dim(&self) -> usize {
        self.images.dim()
    }
    fn embed_image(&self, item: &ImageItem<'_>) -> Result<Vec<f32>, EmbedError> {
        let key = item.variant.key(item.id);
        self.images
            .get(&key)
            .map(|e| e.values.clone())
            .ok_or(EmbedError::Missing(key))
    }
    fn embed_text(&self, item: &TextItem<'_>) -> Result<Vec<f32>, EmbedError> {
        self.reports
            .get(item.study_id)
            .map(|e| e.values.clone())
            .ok_or_else(|| EmbedError::Missing(item.study_id.to_owned()))
    }
}

/// The linear toy dual encoder.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    params: ToyEncoderParams,
}

impl ToyEmbedder {
    pub fn new(params: ToyEncoderParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &ToyEncoderParams {
        &self.params
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

impl Embedder for ToyEmbedder {
    fn name(&self) -> &str {
        "builtin-toy"
    }
    fn dim(&self) -> usize {
        self.params.embed_dim
    }
    fn embed_image(&self, item: &ImageItem<'_>) -> Result<Vec<f32>, EmbedError> {
        Ok(to_f32(self.params.encode_image(item.image)?))
    }
    fn embed_text(&self, item: &TextItem<'_>) -> Result<Vec<f32>, EmbedError> {
        Ok(to_f32(self.params.encode_text(&tokenize(item.text))?))
    }
}

/// L2-normalizes whatever the wrapped embedder returns. Zero vectors pass through.
pub struct Normalized<E>(pub E);

fn l2_normalize(mut v: Vec<f32>) -> Vec<f32> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    v
}

impl<E: Embedder> Embedder for Normalized<E> {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn embed_image(&self, item: &ImageItem<'_>) -> Result<Vec<f32>, EmbedError> {
        self.0.embed_image(item).map(l2_normalize)
    }
    fn embed_text(&self, item: &TextItem<'_>) -> Result<Vec<f32>, EmbedError> {
        self.0.embed_text(item).map(l2_normalize)
    }
}

/// Which embedder a run uses.
///
/// String syntax (as accepted on the command line):
///
/// | spec | embedder |
/// |------|----------|
/// | `random[:dim=<n>,seed=<u64>]` | [`RandomEmbedder`], defaults `dim=128,seed=0` |
/// | `oracle` | [`OracleEmbedder`] over the corpus studies |
/// | `toy:<params.xtoy>` | [`ToyEmbedder`] |
/// | `file:<images.xemb>,<reports.xemb>` | [`FileEmbedder`] |
/// | `process:<command line>` | [`ExternalEmbedder`], whitespace-split argv |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedderSpec {
    File { images: PathBuf, reports: PathBuf },
    ExternalProcess { command: Vec<String> },
    BuiltinToy { params: PathBuf },
    BuiltinRandom { dim: usize, seed: u64 },
    BuiltinOracle,
}

impl std::str::FromStr for EmbedderSpec {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k, Some(r)),
            None => (s, None),
        };
        let need = |what: &str| {
            rest.filter(|r| !r.trim().is_empty())
                .ok_or_else(|| EmbedError::Spec(format!("{kind} embedder needs {what}")))
        };
        match kind {
            "random" => {
                let (mut dim, mut seed) = (128usize, 0u64);
                for kv in rest.unwrap_or("").split(',').filter(|p| !p.is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| EmbedError::Spec(format!("expected key=value, got {kv:?}")))?;
                    let bad = |_| EmbedError::Spec(format!("bad value for {k}: {v:?}"));
                    match k {
                        "dim" => dim = v.parse().map_err(bad)?,
                        "seed" => seed = v.parse().map_err(bad)?,
                        _ => return Err(EmbedError::Spec(format!("unknown random embedder option {k:?}"))),
                    }
                }
                if dim == 0 {
                    return Err(EmbedError::Spec("random embedder needs dim > 0".into()));
                }
                Ok(EmbedderSpec::BuiltinRandom { dim, seed })
            }
            "oracle" if rest.is_none() => Ok(EmbedderSpec::BuiltinOracle),
            "toy" => Ok(EmbedderSpec::BuiltinToy {
                params: PathBuf::from(need("a params file path")?),
            }),
            "file" => {
                let (images, reports) = need("two comma-separated paths")?
                    .split_once(',')
                    .ok_or_else(|| EmbedError::Spec("file embedder needs <images.xemb>,<reports.xemb>".into()))?;
                Ok(EmbedderSpec::File {
                    images: images.into(),
                    reports: reports.into(),
                })
            }
            "process" => Ok(EmbedderSpec::ExternalProcess {
                command: need("a command line")?.split_whitespace().map(str::to_owned).collect(),
            }),
            _ => Err(EmbedError::Spec(format!("unknown embedder {s:?}"))),
        }
    }
}

impl fmt::Display for EmbedderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedderSpec::File { images, reports } => write!(f, "file:{},{}", images.display(), reports.display()),
            EmbedderSpec::ExternalProcess { command } => write!(f, "process:{}", command.join(" ")),
            EmbedderSpec::BuiltinToy { params } => write!(f, "toy:{}", params.display()),
            EmbedderSpec::BuiltinRandom { dim, seed } => write!(f, "random:dim={dim},seed={seed}"),
            EmbedderSpec::BuiltinOracle => f.write_str("oracle"),
        }
    }
}

impl EmbedderSpec {
    /// Instantiate. `study_ids` is only used by the oracle.
    pub fn build(&self, study_ids: &[String], timeout: Duration) -> Result<Box<dyn Embedder>, EmbedError> {
        Ok(match self {
            EmbedderSpec::File { images, reports } => Box::new(FileEmbedder::new(
                table::load_embeddings(images)?,
                table::load_embeddings(reports)?,
            )?),
            EmbedderSpec::ExternalProcess { command } => Box::new(ExternalEmbedder::spawn(command, timeout)?),
            EmbedderSpec::BuiltinToy { params } => Box::new(ToyEmbedder::new(ToyEncoderParams::load(params)?)),
            EmbedderSpec::BuiltinRandom { dim, seed } => Box::new(RandomEmbedder::new(*dim, *seed)?),
            EmbedderSpec::BuiltinOracle => Box::new(OracleEmbedder::new(study_ids.iter().cloned())?),
        })
    }
}
