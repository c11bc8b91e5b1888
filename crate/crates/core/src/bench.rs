//! The occlusion retrieval test and everything built on it.
//!
//! For each ratio `p` and trial `t`, every query image is occluded once with
//! a seed derived from `(seed, image index, p, t)`, embedded, scored against
//! all report embeddings and reduced to the zero-based rank of its true
//! report. Recall@k for every `k` is then read off the same ranks. Report
//! embeddings are computed once per run.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{decode_image, DataError, ImageTensor, Manifest, ReportText, Section};
use crate::embed::{EmbedError, Embedder, ImageItem, OcclusionVariant, TextItem};
use crate::occlusion::{apply_occlusion, OcclusionError, OcclusionSpec};
use crate::scoring::{
    rank_reports, recall_at_k, recall_from_ranks, true_rank, ScoreMatrix, Scorer, ScorerKind, ScoringError,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("corpus has no {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("embedding {context}: {source}")]
    Embed {
        context: String,
        #[source]
        source: EmbedError,
    },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Occlusion(#[from] OcclusionError),
    #[error("score dump: {0}")]
    Dump(#[source] std::io::Error),
}

/// How query images are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcclusionMode {
    /// One occlusion per (image, ratio, trial), scored against every report.
    #[default]
    PerImage,
    /// A fresh occlusion for every (image, report) score. Costs M×N image
    /// embeddings per ratio and trial.
    PerPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ratios: Vec<f64>,
    pub k_values: Vec<usize>,
    pub seed: u64,
    pub trials_per_image: usize,
    pub scorer: ScorerKind,
    pub mode: OcclusionMode,
    pub fill_value: f32,
    /// Report sections concatenated into the text that gets embedded.
    pub text_sections: Vec<Section>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ratios: crate::DEFAULT_RATIOS.to_vec(),
            k_values: crate::DEFAULT_K_VALUES.to_vec(),
            seed: 0,
            trials_per_image: 1,
            scorer: ScorerKind::Cosine,
            mode: OcclusionMode::PerImage,
            fill_value: 0.0,
            text_sections: vec![Section::Findings, Section::Impression],
        }
    }
}

fn strictly_ascending<T: PartialOrd>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.ratios.is_empty() || self.k_values.is_empty() {
            return bad("ratio and k lists must be nonempty".into());
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=100.0).contains(*r)) {
            return bad(format!("ratio {r} outside [0, 100]"));
        }
        if !strictly_ascending(&self.ratios) {
            return bad(format!(
                "ratios must be ascending without duplicates: {:?}",
                self.ratios
            ));
        }
        if self.k_values[0] == 0 {
            return bad("k must be at least 1".into());
        }
        if !strictly_ascending(&self.k_values) {
            return bad(format!(
                "k values must be ascending without duplicates: {:?}",
                self.k_values
            ));
        }
        if self.trials_per_image == 0 {
            return bad("trials_per_image must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.fill_value) {
            return bad(format!("fill value {} outside [0, 1]", self.fill_value));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryImage {
    pub id: String,
    /// Index of the true report in [`Corpus::study_ids`].
    pub study_index: usize,
    pub image: ImageTensor,
}

/// Decoded queries and candidate reports. Every study contributes one
/// candidate report and one query per image.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub study_ids: Vec<String>,
    pub reports: Vec<ReportText>,
    pub queries: Vec<QueryImage>,
}

impl Corpus {
    pub fn new(study_ids: Vec<String>, reports: Vec<ReportText>, queries: Vec<QueryImage>) -> Result<Self, BenchError> {
        if study_ids.is_empty() {
            return Err(BenchError::Empty("reports"));
        }
        if queries.is_empty() {
            return Err(BenchError::Empty("images"));
        }
        if study_ids.len() != reports.len() {
            return Err(BenchError::Config(format!(
                "{} study ids for {} reports",
                study_ids.len(),
                reports.len()
            )));
        }
        if let Some(q) = queries.iter().find(|q| q.study_index >= study_ids.len()) {
            return Err(BenchError::Config(format!(
                "query {} points past the report list",
                q.id
            )));
        }
        Ok(Self {
            study_ids,
            reports,
            queries,
        })
    }

    /// Decode every image referenced by `manifest`; relative refs resolve against `base_dir`.
    pub fn from_manifest(manifest: &Manifest, base_dir: &Path) -> Result<Self, BenchError> {
        let refs: Vec<(usize, &String)> = manifest
            .studies()
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.image_refs.iter().map(move |r| (i, r)))
            .collect();
        let queries = refs
            .par_iter()
            .map(|&(study_index, image_ref)| {
                let path = base_dir.join(image_ref);
                let bytes = std::fs::read(&path).map_err(|e| DataError::io(&path, e))?;
                let image = decode_image(&bytes).map_err(|e| DataError::Decode(format!("{}: {e}", path.display())))?;
                Ok(QueryImage {
                    id: image_ref.clone(),
                    study_index,
                    image,
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Self::new(
            manifest.studies().iter().map(|s| s.study_id.clone()).collect(),
            manifest.studies().iter().map(|s| s.report.clone()).collect(),
            queries,
        )
    }

    pub fn n_reports(&self) -> usize {
        self.study_ids.len()
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn truth(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.study_index).collect()
    }
}

/// Recall percentages indexed `[k][ratio]`, plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallGrid {
    pub k_values: Vec<usize>,
    pub ratios: Vec<f64>,
    pub cells: Vec<Vec<f64>>,
    /// Analytic random baseline per k row.
    pub random: Vec<f64>,
    pub meta: GridMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub n_queries: usize,
    pub n_reports: usize,
    pub seed: u64,
    pub trials_per_image: usize,
    pub scorer: ScorerKind,
    pub mode: OcclusionMode,
    pub model: String,
}

impl RecallGrid {
    pub fn cell(&self, k: usize, ratio: f64) -> Option<f64> {
        let row = self.k_values.iter().position(|&x| x == k)?;
        let col = self.ratios.iter().position(|&x| x == ratio)?;
        Some(self.cells[row][col])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.k_values.len(), self.ratios.len())
    }
}

fn embed_err(context: String) -> impl FnOnce(EmbedError) -> BenchError {
    move |source| BenchError::Embed { context, source }
}

fn check_vector(v: Vec<f32>, dim: usize, context: &str) -> Result<Vec<f32>, BenchError> {
    if v.len() != dim {
        return Err(embed_err(context.to_owned())(EmbedError::DimMismatch {
            expected: dim,
            got: v.len(),
        }));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(embed_err(context.to_owned())(EmbedError::NonFinite(context.to_owned())));
    }
    Ok(v)
}

/// Embed every candidate report once.
pub fn embed_reports(
    corpus: &Corpus,
    embedder: &dyn Embedder,
    sections: &[Section],
) -> Result<Vec<Vec<f32>>, BenchError> {
    let dim = embedder.dim();
    (0..corpus.n_reports())
        .into_par_iter()
        .map(|n| {
            let study_id = corpus.study_ids[n].as_str();
            let report = &corpus.reports[n];
            let text = report.text_for(sections);
            let context = format!("report {study_id}");
            let v = embedder
                .embed_text(&TextItem {
                    study_id,
                    report,
                    text: &text,
                })
                .map_err(embed_err(context.clone()))?;
            check_vector(v, dim, &context)
        })
        .collect()
}

fn occluded(query: &QueryImage, ratio: f64, seed: u64, fill: f32) -> Result<Option<ImageTensor>, BenchError> {
    if ratio == 0.0 {
        return Ok(None);
    }
    let spec = OcclusionSpec::with_fill(ratio, seed, fill)?;
    Ok(Some(apply_occlusion(&query.image, &spec)))
}

fn embed_query(
    embedder: &dyn Embedder,
    query: &QueryImage,
    study_id: &str,
    image: &ImageTensor,
    variant: OcclusionVariant,
) -> Result<Vec<f32>, BenchError> {
    let context = format!(
        "image {} (p={}, trial {})",
        query.id, variant.ratio_percent, variant.trial
    );
    let v = embedder
        .embed_image(&ImageItem {
            id: &query.id,
            study_id,
            image,
            variant,
        })
        .map_err(embed_err(context.clone()))?;
    check_vector(v, embedder.dim(), &context)
}

/// Scores of one query against every report under the configured mode.
#[allow(clippy::too_many_arguments)]
fn query_scores(
    corpus: &Corpus,
    embedder: &dyn Embedder,
    scorer: &Scorer,
    reports: &[Vec<f32>],
    m: usize,
    ratio: f64,
    trial: usize,
    config: &BenchConfig,
) -> Result<Vec<f64>, BenchError> {
    let query = &corpus.queries[m];
    let study_id = &corpus.study_ids[query.study_index];
    let score = |img: &[f32], n: usize| -> Result<f64, BenchError> {
        scorer.score(img, &reports[n]).map_err(|e| {
            BenchError::Scoring(ScoringError::Pair {
                image: m,
                report: n,
                source: Box::new(e),
            })
        })
    };
    match config.mode {
        OcclusionMode::PerImage => {
            let s = seed::occlusion_seed(config.seed, m, ratio, trial, None);
            let img = occluded(query, ratio, s, config.fill_value)?;
            let variant = OcclusionVariant {
                ratio_percent: ratio,
                trial,
                pair: None,
            };
            let v = embed_query(embedder, query, study_id, img.as_ref().unwrap_or(&query.image), variant)?;
            (0..reports.len()).map(|n| score(&v, n)).collect()
        }
        OcclusionMode::PerPair => (0..reports.len())
            .map(|n| {
                let s = seed::occlusion_seed(config.seed, m, ratio, trial, Some(n));
                let img = occluded(query, ratio, s, config.fill_value)?;
                // Without occlusion every pair sees the same image.
                let variant = OcclusionVariant {
                    ratio_percent: ratio,
                    trial,
                    pair: (ratio != 0.0).then_some(n),
                };
                let v = embed_query(embedder, query, study_id, img.as_ref().unwrap_or(&query.image), variant)?;
                score(&v, n)
            })
            .collect(),
    }
}

/// Callback receiving the full score matrix of each (ratio, trial).
pub type ScoreSink<'a> = dyn FnMut(f64, usize, &ScoreMatrix) -> std::io::Result<()> + 'a;

fn check_run(
    corpus: &Corpus,
    embedder: &dyn Embedder,
    scorer: &Scorer,
    config: &BenchConfig,
) -> Result<(), BenchError> {
    config.validate()?;
    if scorer.kind() != config.scorer {
        return Err(BenchError::Config(format!(
            "config asks for the {} scorer but a {} scorer was supplied",
            config.scorer,
            scorer.kind()
        )));
    }
    if embedder.dim() == 0 {
        return Err(BenchError::Config("embedder reports dimension 0".into()));
    }
    if corpus.n_queries() == 0 {
        return Err(BenchError::Empty("images"));
    }
    Ok(())
}

/// Zero-based true ranks of every query at one (ratio, trial).
#[allow(clippy::too_many_arguments)]
fn ranks_at(
    corpus: &Corpus,
    embedder: &dyn Embedder,
    scorer: &Scorer,
    reports: &[Vec<f32>],
    ratio: f64,
    trial: usize,
    config: &BenchConfig,
    sink: Option<&mut ScoreSink<'_>>,
) -> Result<Vec<usize>, BenchError> {
    let rows: Vec<Vec<f64>> = (0..corpus.n_queries())
        .into_par_iter()
        .map(|m| query_scores(corpus, embedder, scorer, reports, m, ratio, trial, config))
        .collect::<Result<_, _>>()?;
    let ranks = rows
        .iter()
        .zip(&corpus.queries)
        .map(|(row, q)| true_rank(row, q.study_index))
        .collect();
    if let Some(sink) = sink {
        let matrix = ScoreMatrix::new(
            corpus.queries.iter().map(|q| q.id.clone()).collect(),
            corpus.study_ids.clone(),
            rows.into_iter().flatten().collect(),
        )?;
        sink(ratio, trial, &matrix).map_err(BenchError::Dump)?;
    }
    Ok(ranks)
}

/// Every (k, ratio) cell. Image embeddings at each ratio and trial are
/// computed once and shared by all k.
pub fn sweep(
    corpus: &Corpus,
    embedder: &dyn Embedder,
    scorer: &Scorer,
    config: &BenchConfig,
) -> Result<RecallGrid, BenchError> {
    sweep_with_dump(corpus, embedder, scorer, config, None)
}

pub fn sweep_with_dump(
    corpus: &Corpus,
    embedder: &dyn Embedder,
    scorer: &Scorer,
    config: &BenchConfig,
    mut sink: Option<&mut ScoreSink<'_>>,
) -> Result<RecallGrid, BenchError> {
    check_run(corpus, embedder, scorer, config)?;
    let n = corpus.n_reports();
    let started = std::time::Instant::now();
    let reports = embed_reports(corpus, embedder, &config.text_sections)?;
    log::info!(
        "embedded {n} reports with {} in {:.2?}",
        embedder.name(),
        started.elapsed()
    );

    let mut cells = vec![vec![0.0; config.ratios.len()]; config.k_values.len()];
    for (col, &ratio) in config.ratios.iter().enumerate() {
        let t0 = std::time::Instant::now();
        let mut sums = vec![0.0; config.k_values.len()];
        for trial in 0..config.trials_per_image {
            let ranks = ranks_at(
                corpus,
                embedder,
                scorer,
                &reports,
                ratio,
                trial,
                config,
                sink.as_deref_mut(),
            )?;
            for (row, &k) in config.k_values.iter().enumerate() {
                sums[row] += recall_from_ranks(&ranks, n, k)?;
            }
        }
        for (row, sum) in sums.into_iter().enumerate() {
            cells[row][col] = sum / config.trials_per_image as f64;
        }
        log::info!(
            "p={ratio:.2}: R@{}={:.2} ({:.2?})",
            config.k_values[0],
            cells[0][col],
            t0.elapsed()
        );
    }
    Ok(RecallGrid {
        k_values: config.k_values.clone(),
        ratios: config.ratios.clone(),
        cells,
        random: config
            .k_values
            .iter()
            .map(|&k| random_baseline_analytic(n, k))
            .collect(),
        meta: GridMeta {
            n_queries: corpus.n_queries(),
            n_reports: n,
            seed: config.seed,
            trials_per_image: config.trials_per_image,
            scorer: config.scorer,
            mode: config.mode,
            model: embedder.name().to_owned(),
        },
    })
}

/// One cell computed from scratch: fresh report embeddings, full rankings,
/// recall over explicit top-k lists. Averages over `trials_per_image`.
pub fn occlusion_retrieval_test(
    corpus: &Corpus,
    embedder: &dyn Embedder,
    scorer: &Scorer,
    ratio: f64,
    k: usize,
    config: &BenchConfig,
) -> Result<f64, BenchError> {
    check_run(corpus, embedder, scorer, config)?;
    if !(0.0..=100.0).contains(&ratio) {
        return Err(BenchError::Config(format!("ratio {ratio} outside [0, 100]")));
    }
    let reports = embed_reports(corpus, embedder, &config.text_sections)?;
    let truth = corpus.truth();
    let mut total = 0.0;
    for trial in 0..config.trials_per_image {
        let rankings = (0..corpus.n_queries())
            .into_par_iter()
            .map(|m| {
                query_scores(corpus, embedder, scorer, &reports, m, ratio, trial, config).map(|row| rank_reports(&row))
            })
            .collect::<Result<Vec<_>, _>>()?;
        total += recall_at_k(&rankings, &truth, k)?;
    }
    Ok(total / config.trials_per_image as f64)
}

/// `100·k/N`: the chance that one relevant report lands in a uniformly
/// random top-k. `k` above `n_reports` counts as `n_reports`.
///
/// # Panics
/// If `n_reports` is zero.
pub fn random_baseline_analytic(n_reports: usize, k: usize) -> f64 {
    assert!(n_reports > 0, "random baseline needs at least one report");
    100.0 * k.min(n_reports) as f64 / n_reports as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub k: usize,
    pub mean: f64,
    /// Standard error of the mean over trials.
    pub stderr: f64,
}

/// Simulated Recall@k under i.i.d. uniform scores, for several k at once.
///
/// Each trial fills an `n_queries × n_reports` matrix with `U(0,1)` scores
/// (query `m`'s true report is `m mod n_reports`) and ranks it like a real
/// run. Trials run in parallel, each with its own derived stream.
pub fn random_baseline_monte_carlo_grid(
    n_reports: usize,
    k_values: &[usize],
    n_queries: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<McEstimate>, BenchError> {
    if n_reports == 0 || n_queries == 0 || trials == 0 || k_values.is_empty() {
        return Err(BenchError::Config(
            "reports, queries, trials and k values must be positive".into(),
        ));
    }
    if k_values.contains(&0) {
        return Err(BenchError::Config("k must be at least 1".into()));
    }
    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed::derive(seed, &[seed::hash_str("random-baseline"), t as u64]));
            let mut row = vec![0.0f64; n_reports];
            let ranks: Vec<usize> = (0..n_queries)
                .map(|m| {
                    row.iter_mut().for_each(|s| *s = rng.random());
                    true_rank(&row, m % n_reports)
                })
                .collect();
            k_values
                .iter()
                .map(|&k| recall_from_ranks(&ranks, n_reports, k).expect("validated inputs"))
                .collect()
        })
        .collect();
    Ok(k_values
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let xs: Vec<f64> = per_trial.iter().map(|r| r[i]).collect();
            let mean = xs.iter().sum::<f64>() / trials as f64;
            let stderr = if trials > 1 {
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
                (var / trials as f64).sqrt()
            } else {
                0.0
            };
            McEstimate { k, mean, stderr }
        })
        .collect())
}

/// Single-k form of [`random_baseline_monte_carlo_grid`]; returns `(mean, stderr)`.
pub fn random_baseline_monte_carlo(
    n_reports: usize,
    k: usize,
    n_queries: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64), BenchError> {
    let est = random_baseline_monte_carlo_grid(n_reports, &[k], n_queries, trials, seed)?;
    Ok((est[0].mean, est[0].stderr))
}
