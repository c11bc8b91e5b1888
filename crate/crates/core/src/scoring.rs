//! Matching scores, ranking and Recall@k.
//!
//! Two scorers are supported: cosine similarity of the image and report
//! embeddings, and a shallow classifier on their elementwise absolute
//! difference whose match probability is used as the score. Higher is better
//! for both. Rankings sort descending and break ties by ascending report index.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingTable;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("classifier head expects dimension {expected}, got {got}")]
    HeadDim { expected: usize, got: usize },
    #[error("classifier head parameters are inconsistent: {0}")]
    HeadShape(String),
    #[error("{0} embedding table is empty")]
    EmptyTable(&'static str),
    #[error("scoring image {image} against report {report}: {source}")]
    Pair {
        image: usize,
        report: usize,
        #[source]
        source: Box<ScoringError>,
    },
    #[error("non-finite score")]
    NonFinite,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("{rankings} rankings but {truth} ground-truth entries")]
    TruthLength { rankings: usize, truth: usize },
    #[error("true report index {index} out of range for {candidates} candidates")]
    TruthOutOfRange { index: usize, candidates: usize },
}

/// Cosine similarity accumulated in f64, left to right.
///
/// A zero-norm vector has no direction; its similarity is defined as 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, ScoringError> {
    if a.len() != b.len() {
        return Err(ScoringError::DimMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine similarity with a zero-norm embedding; scoring as 0");
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One-hidden-layer ReLU network with a sigmoid output.
///
/// `w1` is `hidden × input_dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    input_dim: usize,
    hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub logit: f64,
    pub prob: f64,
}

impl ClassifierHead {
    pub fn new(
        input_dim: usize,
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    ) -> Result<Self, ScoringError> {
        if input_dim == 0 || hidden == 0 {
            return Err(ScoringError::HeadShape(
                "input and hidden widths must be positive".into(),
            ));
        }
        if w1.len() != hidden * input_dim || b1.len() != hidden || w2.len() != hidden {
            return Err(ScoringError::HeadShape(format!(
                "w1 {} (want {}), b1 {} (want {hidden}), w2 {} (want {hidden})",
                w1.len(),
                hidden * input_dim,
                b1.len(),
                w2.len()
            )));
        }
        if w1
            .iter()
            .chain(&b1)
            .chain(&w2)
            .chain(std::iter::once(&b2))
            .any(|v| !v.is_finite())
        {
            return Err(ScoringError::HeadShape("non-finite parameter".into()));
        }
        Ok(Self {
            input_dim,
            hidden,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Result<Self, ScoringError> {
        Self::new(
            input_dim,
            hidden,
            vec![0.0; input_dim * hidden],
            vec![0.0; hidden],
            vec![0.0; hidden],
            0.0,
        )
    }

    /// He-style normal initialisation, zero biases.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self, ScoringError> {
        let n1 = Normal::new(0.0, (2.0 / input_dim as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive std");
        let w1 = (0..input_dim * hidden).map(|_| n1.sample(rng)).collect();
        let w2 = (0..hidden).map(|_| n2.sample(rng)).collect();
        Self::new(input_dim, hidden, w1, vec![0.0; hidden], w2, 0.0)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, input: &[f64]) -> Result<HeadForward, ScoringError> {
        if input.len() != self.input_dim {
            return Err(ScoringError::HeadDim {
                expected: self.input_dim,
                got: input.len(),
            });
        }
        let pre: Vec<f64> = self
            .w1
            .chunks_exact(self.input_dim)
            .zip(&self.b1)
            .map(|(row, b)| row.iter().zip(input).fold(*b, |acc, (w, x)| acc + w * x))
            .collect();
        let act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let logit = act.iter().zip(&self.w2).fold(self.b2, |acc, (h, w)| acc + h * w);
        Ok(HeadForward {
            input: input.to_vec(),
            pre,
            act,
            logit,
            prob: sigmoid(logit),
        })
    }

    /// Match probability for a pair of embeddings.
    pub fn score_pair(&self, a: &[f64], b: &[f64]) -> Result<f64, ScoringError> {
        if a.len() != b.len() {
            return Err(ScoringError::DimMismatch(a.len(), b.len()));
        }
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
        Ok(self.forward(&diff)?.prob)
    }
}

/// `sigmoid(MLP(|v_i − v_t|))`.
pub fn classifier_score(image: &[f32], text: &[f32], head: &ClassifierHead) -> Result<f64, ScoringError> {
    let a: Vec<f64> = image.iter().map(|&v| f64::from(v)).collect();
    let b: Vec<f64> = text.iter().map(|&v| f64::from(v)).collect();
    head.score_pair(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Cosine,
    Classifier,
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScorerKind::Cosine => "cosine",
            ScorerKind::Classifier => "classifier",
        })
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(ScorerKind::Cosine),
            "classifier" => Ok(ScorerKind::Classifier),
            other => Err(format!("unknown scorer {other:?} (expected cosine or classifier)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Cosine,
    Classifier(ClassifierHead),
}

impl Scorer {
    pub fn kind(&self) -> ScorerKind {
        match self {
            Scorer::Cosine => ScorerKind::Cosine,
            Scorer::Classifier(_) => ScorerKind::Classifier,
        }
    }

    pub fn score(&self, image: &[f32], text: &[f32]) -> Result<f64, ScoringError> {
        let s = match self {
            Scorer::Cosine => cosine_similarity(image, text)?,
            Scorer::Classifier(head) => classifier_score(image, text, head)?,
        };
        if s.is_finite() {
            Ok(s)
        } else {
            Err(ScoringError::NonFinite)
        }
    }
}

/// Scores for every (image, report) pair, row-major by image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<String>, cols: Vec<String>, scores: Vec<f64>) -> Result<Self, ScoringError> {
        if scores.len() != rows.len() * cols.len() {
            return Err(ScoringError::DimMismatch(scores.len(), rows.len() * cols.len()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(ScoringError::NonFinite);
        }
        Ok(Self { rows, cols, scores })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let n = self.cols.len();
        &self.scores[m * n..(m + 1) * n]
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.scores[m * self.cols.len() + n]
    }

    /// `image_id,report_id,score` lines with a header.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "image_id,report_id,score")?;
        for (m, image) in self.rows.iter().enumerate() {
            for (n, report) in self.cols.iter().enumerate() {
                writeln!(out, "{image},{report},{}", self.get(m, n))?;
            }
        }
        out.flush()
    }
}

/// Scores all pairs. Rows are computed in parallel; each row is summed in a
/// fixed order, so the result does not depend on the thread schedule.
pub fn score_all(
    images: &EmbeddingTable,
    reports: &EmbeddingTable,
    scorer: &Scorer,
) -> Result<ScoreMatrix, ScoringError> {
    if images.is_empty() {
        return Err(ScoringError::EmptyTable("image"));
    }
    if reports.is_empty() {
        return Err(ScoringError::EmptyTable("report"));
    }
    if images.dim() != reports.dim() {
        return Err(ScoringError::DimMismatch(images.dim(), reports.dim()));
    }
    let rows: Vec<Vec<f64>> = images
        .entries()
        .par_iter()
        .enumerate()
        .map(|(m, img)| {
            reports
                .entries()
                .iter()
                .enumerate()
                .map(|(n, rep)| {
                    scorer.score(&img.values, &rep.values).map_err(|e| ScoringError::Pair {
                        image: m,
                        report: n,
                        source: Box::new(e),
                    })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    ScoreMatrix::new(
        images.entries().iter().map(|e| e.id.clone()).collect(),
        reports.entries().iter().map(|e| e.id.clone()).collect(),
        rows.into_iter().flatten().collect(),
    )
}

/// Report indices in descending score order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList(pub Vec<usize>);

impl RankedList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Zero-based rank of `report`, if present.
    pub fn rank_of(&self, report: usize) -> Option<usize> {
        self.0.iter().position(|&r| r == report)
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.0[..k.min(self.0.len())]
    }
}

#[inline]
fn ranks_before(row: &[f64], a: usize, b: usize) -> Ordering {
    row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
}

/// Sort descending by score; equal scores keep ascending index order.
pub fn rank_reports(row: &[f64]) -> RankedList {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_unstable_by(|&a, &b| ranks_before(row, a, b));
    RankedList(order)
}

/// Zero-based position `truth` would take in [`rank_reports`] of `row`,
/// computed in one pass without sorting.
pub fn true_rank(row: &[f64], truth: usize) -> usize {
    let t = row[truth];
    row.iter()
        .enumerate()
        .filter(|&(n, &s)| s > t || (s == t && n < truth))
        .count()
}

fn clamp_k(k: usize, candidates: usize) -> Result<usize, ScoringError> {
    if k == 0 {
        return Err(ScoringError::ZeroK);
    }
    if k > candidates {
        log::warn!("k = {k} exceeds the {candidates} candidates; clamping to {candidates}");
        return Ok(candidates);
    }
    Ok(k)
}

/// Percentage of queries whose true report is among the top `k`.
///
/// `truth[m]` is the index of the single relevant report for query `m`.
pub fn recall_at_k(rankings: &[RankedList], truth: &[usize], k: usize) -> Result<f64, ScoringError> {
    if rankings.len() != truth.len() {
        return Err(ScoringError::TruthLength {
            rankings: rankings.len(),
            truth: truth.len(),
        });
    }
    if rankings.is_empty() {
        return Err(ScoringError::NoQueries);
    }
    let mut hits = 0usize;
    for (ranking, &t) in rankings.iter().zip(truth) {
        if t >= ranking.len() {
            return Err(ScoringError::TruthOutOfRange {
                index: t,
                candidates: ranking.len(),
            });
        }
        let k = clamp_k(k, ranking.len())?;
        if ranking.top(k).contains(&t) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / rankings.len() as f64)
}

/// Same as [`recall_at_k`] but from precomputed zero-based true ranks.
pub fn recall_from_ranks(ranks: &[usize], candidates: usize, k: usize) -> Result<f64, ScoringError> {
    if ranks.is_empty() {
        return Err(ScoringError::NoQueries);
    }
    let k = clamp_k(k, candidates)?;
    let hits = ranks.iter().filter(|&&r| r < k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 4.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(ScoringError::DimMismatch(1, 2))
        );
    }

    #[test]
    fn zero_head_scores_one_half() {
        let head = ClassifierHead::zeros(3, 4).unwrap();
        assert_eq!(
            classifier_score(&[1.0, -2.0, 5.0], &[0.0, 3.0, 1.0], &head).unwrap(),
            0.5
        );
    }

    #[test]
    fn identical_inputs_score_sigmoid_of_output_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut head = ClassifierHead::random(5, 7, &mut rng).unwrap();
        head.b2 = 1.3;
        let v = [0.3, -1.0, 2.0, 0.0, 4.0];
        let s = classifier_score(&v, &v, &head).unwrap();
        assert!((s - sigmoid(1.3)).abs() < 1e-15);
    }

    #[test]
    fn classifier_dim_mismatch() {
        let head = ClassifierHead::zeros(3, 2).unwrap();
        assert!(classifier_score(&[1.0, 2.0], &[1.0, 2.0], &head).is_err());
        assert!(classifier_score(&[1.0, 2.0, 3.0], &[1.0, 2.0], &head).is_err());
    }

    // Independent forward pass written with plain nested loops.
    fn naive_head_score(head: &ClassifierHead, a: &[f32], b: &[f32]) -> f64 {
        let d = head.input_dim();
        let mut logit = head.b2;
        for j in 0..head.hidden() {
            let mut z = head.b1[j];
            for i in 0..d {
                z += head.w1[j * d + i] * (f64::from(a[i]) - f64::from(b[i])).abs();
            }
            if z > 0.0 {
                logit += head.w2[j] * z;
            }
        }
        1.0 / (1.0 + (-logit).exp())
    }

    #[test]
    fn classifier_matches_naive_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut head = ClassifierHead::random(6, 5, &mut rng).unwrap();
            for b in head.b1.iter_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
            head.b2 = rng.random_range(-1.0..1.0);
            let a: Vec<f32> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f32> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = classifier_score(&a, &b, &head).unwrap();
            assert!((got - naive_head_score(&head, &a, &b)).abs() < 1e-12);
            // |diff| makes the score symmetric in its arguments.
            assert_eq!(got, classifier_score(&b, &a, &head).unwrap());
        }
    }

    fn table(prefix: &str, rows: &[Vec<f32>]) -> EmbeddingTable {
        EmbeddingTable::from_entries(
            rows[0].len(),
            rows.iter()
                .enumerate()
                .map(|(i, r)| EmbeddingVector::new(format!("{prefix}{i}"), r.clone())),
        )
        .unwrap()
    }

    #[test]
    fn score_all_shapes_and_values() {
        let one = table("i", &[vec![0.5, 0.5]]);
        let m = score_all(&one, &table("r", &[vec![0.5, 0.5]]), &Scorer::Cosine).unwrap();
        assert_eq!(m.shape(), (1, 1));
        assert!((m.get(0, 0) - 1.0).abs() < 1e-12);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut rand_rows = |n: usize| -> Vec<Vec<f32>> {
            (0..n)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let imgs = table("i", &rand_rows(3));
        let reps = table("r", &rand_rows(4));
        let m = score_all(&imgs, &reps, &Scorer::Cosine).unwrap();
        assert_eq!(m.shape(), (3, 4));
        for a in 0..3 {
            for b in 0..4 {
                let naive = cosine_similarity(&imgs.entries()[a].values, &reps.entries()[b].values).unwrap();
                assert_eq!(m.get(a, b).to_bits(), naive.to_bits());
            }
        }
    }

    #[test]
    fn score_all_rejects_empty_and_mismatched() {
        let a = table("i", &[vec![1.0, 0.0]]);
        let empty = EmbeddingTable::new(2).unwrap();
        assert_eq!(
            score_all(&empty, &a, &Scorer::Cosine),
            Err(ScoringError::EmptyTable("image"))
        );
        let b = table("r", &[vec![1.0, 0.0, 0.0]]);
        assert!(score_all(&a, &b, &Scorer::Cosine).is_err());
        let head = ClassifierHead::zeros(3, 2).unwrap();
        let err = score_all(&a, &a, &Scorer::Classifier(head)).unwrap_err();
        assert!(matches!(
            err,
            ScoringError::Pair {
                image: 0,
                report: 0,
                ..
            }
        ));
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_reports(&[0.1, 0.9, 0.5]).0, vec![1, 2, 0]);
        assert_eq!(rank_reports(&[0.3; 5]).0, vec![0, 1, 2, 3, 4]);
        assert_eq!(rank_reports(&[0.0, -0.0, 0.0]).0, vec![0, 1, 2]);
    }

    #[test]
    fn recall_examples() {
        // Rankings of 8 reports with the true report at ranks 1, 3 and 7.
        let rankings = vec![
            RankedList(vec![0, 1, 2, 3, 4, 5, 6, 7]),
            RankedList(vec![0, 2, 1, 3, 4, 5, 6, 7]),
            RankedList(vec![0, 3, 4, 5, 6, 7, 2, 1]),
        ];
        let truth = [0, 1, 2];
        let r = recall_at_k(&rankings, &truth, 2).unwrap();
        assert!((r - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(format!("{r:.2}"), "33.33");
        assert_eq!(recall_at_k(&rankings, &truth, 7).unwrap(), 100.0);
        assert!((recall_at_k(&rankings, &truth, 3).unwrap() - 200.0 / 3.0).abs() < 1e-12);

        let perfect: Vec<RankedList> = (0..4).map(|t| rank_reports(&one_hot(4, t))).collect();
        for k in 1..=4 {
            assert_eq!(recall_at_k(&perfect, &[0, 1, 2, 3], k).unwrap(), 100.0);
        }
    }

    fn one_hot(n: usize, i: usize) -> Vec<f64> {
        (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn recall_error_paths() {
        let r = vec![RankedList(vec![0, 1])];
        assert_eq!(recall_at_k(&r, &[0], 0), Err(ScoringError::ZeroK));
        assert_eq!(recall_at_k(&[], &[], 1), Err(ScoringError::NoQueries));
        assert!(recall_at_k(&r, &[0, 1], 1).is_err());
        assert!(recall_at_k(&r, &[5], 1).is_err());
        // k beyond the candidate count is clamped.
        assert_eq!(recall_at_k(&r, &[1], 10).unwrap(), 100.0);
        assert_eq!(recall_from_ranks(&[1], 2, 10).unwrap(), 100.0);
    }

    proptest! {
        #[test]
        fn rank_matches_stable_sort(row in prop::collection::vec(prop_oneof![-3i32..3, -1000i32..1000], 1..40)) {
            let row: Vec<f64> = row.into_iter().map(f64::from).collect();
            let mut reference: Vec<usize> = (0..row.len()).collect();
            // std's sort_by is stable, so equal scores keep index order.
            reference.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            let ranked = rank_reports(&row);
            prop_assert_eq!(&ranked.0, &reference);
            for t in 0..row.len() {
                prop_assert_eq!(true_rank(&row, t), ranked.rank_of(t).unwrap());
            }
        }

        #[test]
        fn recall_monotone_in_k_and_full_at_n(
            rows in prop::collection::vec(prop::collection::vec(0u8..6, 7), 1..12),
            truth_seed in any::<u64>(),
        ) {
            let n = 7;
            let rankings: Vec<RankedList> = rows.iter()
                .map(|r| rank_reports(&r.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
                .collect();
            let truth: Vec<usize> = (0..rows.len()).map(|i| ((truth_seed >> (i % 60)) as usize + i) % n).collect();
            let mut prev = 0.0;
            for k in 1..=n {
                let r = recall_at_k(&rankings, &truth, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 100.0);
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10.0f32..10.0, 5),
            b in prop::collection::vec(-10.0f32..10.0, 5),
            alpha in 0.01f32..100.0,
            beta in 0.01f32..100.0,
        ) {
            let c = cosine_similarity(&a, &b).unwrap();
            prop_assert!((c - cosine_similarity(&b, &a).unwrap()).abs() < 1e-12);
            let sa: Vec<f32> = a.iter().map(|v| v * alpha).collect();
            let sb: Vec<f32> = b.iter().map(|v| v * beta).collect();
            prop_assert!((c - cosine_similarity(&sa, &sb).unwrap()).abs() < 1e-5);
        }

        #[test]
        fn recall_invariant_to_report_permutation(
            scores in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 9), 1..8),
            perm_seed in any::<u64>(),
            k in 1usize..9,
        ) {
            use rand::seq::SliceRandom;
            let n = 9;
            let truth: Vec<usize> = (0..scores.len()).map(|m| m % n).collect();
            let base: Vec<RankedList> = scores.iter().map(|r| rank_reports(r)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            // Report j moves to column perm[j].
            let permuted: Vec<RankedList> = scores.iter().map(|r| {
                let mut p = vec![0.0; n];
                for j in 0..n { p[perm[j]] = r[j]; }
                rank_reports(&p)
            }).collect();
            let ptruth: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
            prop_assert_eq!(
                recall_at_k(&base, &truth, k).unwrap(),
                recall_at_k(&permuted, &ptruth, k).unwrap()
            );
        }
    }
}
