//! Synthetic paired studies.
//!
//! Each study draws a latent `z ∈ [0,1)^c`. The image is a grid of `c`
//! uniform cells in the centre of a black canvas, cell `j` having intensity
//! `0.15 + 0.7·z_j`, plus clamped Gaussian noise everywhere. The report's
//! Findings section lists one token per latent dimension naming the
//! quantised bin of `z_j`; the Impression is filler.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::train::ToyDataset;
use super::ToyError;
use crate::bench::{Corpus, QueryImage};
use crate::data::{encode_png, ImageTensor, Manifest, ReportText, Section, StudyRecord};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPairSpec {
    pub n_studies: usize,
    pub latent_dim: usize,
    pub image_side: usize,
    pub vocab_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticPairSpec {
    fn default() -> Self {
        Self {
            n_studies: 200,
            latent_dim: 16,
            image_side: 32,
            vocab_size: 128,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticPairSpec {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.n_studies == 0 || self.latent_dim == 0 || self.image_side == 0 {
            return Err(ToyError::Config(
                "studies, latent_dim and image_side must be positive".into(),
            ));
        }
        if self.image_side * self.image_side < self.latent_dim {
            return Err(ToyError::Config(format!(
                "a {side}x{side} image cannot hold {} latent cells",
                self.latent_dim,
                side = self.image_side
            )));
        }
        if self.vocab_size < self.latent_dim {
            return Err(ToyError::Config(format!(
                "vocab_size {} is smaller than latent_dim {}",
                self.vocab_size, self.latent_dim
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(ToyError::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Same settings, disjoint studies: the seed is re-derived so a model
    /// trained on this split is never evaluated on its own training images.
    pub fn training_split(&self) -> Self {
        Self {
            seed: seed::derive(self.seed, &[seed::hash_str("training-split")]),
            ..*self
        }
    }

    /// Quantisation levels per latent dimension.
    pub fn bins(&self) -> usize {
        self.vocab_size / self.latent_dim
    }

    pub fn layout(&self) -> SyntheticLayout {
        SyntheticLayout::new(self.image_side, self.latent_dim)
    }
}

/// Where the latent cells sit on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticLayout {
    pub side: usize,
    pub grid: usize,
    pub cell: usize,
    pub margin: usize,
}

impl SyntheticLayout {
    pub fn new(side: usize, latent_dim: usize) -> Self {
        let grid = (1..).find(|g| g * g >= latent_dim).expect("finite");
        let margin = side / 8;
        let (margin, cell) = if side - 2 * margin >= grid {
            (margin, (side - 2 * margin) / grid)
        } else {
            (0, side / grid)
        };
        Self {
            side,
            grid,
            cell,
            margin,
        }
    }

    /// Half-open `(row_start, row_end, col_start, col_end)` of latent cell `j`.
    pub fn cell_bounds(&self, j: usize) -> (usize, usize, usize, usize) {
        let (r, c) = (j / self.grid, j % self.grid);
        let top = self.margin + r * self.cell;
        let left = self.margin + c * self.cell;
        (top, top + self.cell, left, left + self.cell)
    }

    /// Rows/cols `[start, end)` spanned by the cell grid.
    pub fn content_span(&self) -> (usize, usize) {
        (self.margin, self.margin + self.grid * self.cell)
    }
}

/// Noise-free rendering of `z`, then additive noise from `rng`.
pub fn render_image<R: Rng + ?Sized>(z: &[f64], side: usize, noise_sigma: f64, rng: &mut R) -> ImageTensor {
    let layout = SyntheticLayout::new(side, z.len());
    let mut px = vec![0.0f32; side * side];
    for j in 0..layout.grid * layout.grid {
        let value = z.get(j).map_or(0.5, |zj| 0.15 + 0.7 * zj) as f32;
        let (r0, r1, c0, c1) = layout.cell_bounds(j);
        for row in r0..r1 {
            px[row * side + c0..row * side + c1].fill(value);
        }
    }
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
        for p in &mut px {
            *p = (*p + noise.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }
    ImageTensor::new(side, side, 1, px).expect("consistent shape")
}

fn latent_tokens(z: &[f64], bins: usize) -> Vec<u32> {
    z.iter()
        .enumerate()
        .map(|(j, &v)| {
            let bin = ((v * bins as f64) as usize).min(bins - 1);
            (j * bins + bin) as u32
        })
        .collect()
}

/// Token ids carried by report text: whitespace-separated words of the form
/// `tok<digits>`, surrounding punctuation ignored. Everything else is skipped.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.split_whitespace()
        .filter_map(|w| {
            let w = w.trim_matches(|c: char| c.is_ascii_punctuation());
            let digits = w.strip_prefix("tok")?;
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            digits.parse().ok()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticPairSpec,
    pub latents: Vec<Vec<f64>>,
    pub images: Vec<ImageTensor>,
    pub texts: Vec<Vec<u32>>,
    pub manifest: Manifest,
}

pub fn gen_synthetic_pairs(spec: &SyntheticPairSpec) -> Result<SyntheticDataset, ToyError> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::hash_str("synthetic-pairs")]));
    let bins = spec.bins();
    let mut latents = Vec::with_capacity(spec.n_studies);
    let mut images = Vec::with_capacity(spec.n_studies);
    let mut texts = Vec::with_capacity(spec.n_studies);
    let mut studies = Vec::with_capacity(spec.n_studies);
    for i in 0..spec.n_studies {
        let z: Vec<f64> = (0..spec.latent_dim).map(|_| rng.random::<f64>()).collect();
        let image = render_image(&z, spec.image_side, spec.noise_sigma, &mut rng);
        let tokens = latent_tokens(&z, bins);
        let findings = tokens.iter().map(|t| format!("tok{t}")).collect::<Vec<_>>().join(" ");
        let impression = format!("Synthetic study {i}, no acute findings.");
        let study_id = format!("s{i:05}");
        let report = ReportText::new(format!("FINDINGS: {findings}\nIMPRESSION: {impression}"))
            .with_section(Section::Findings, findings)
            .with_section(Section::Impression, impression);
        studies.push(StudyRecord {
            image_refs: vec![format!("images/{study_id}.png")],
            study_id,
            report,
        });
        latents.push(z);
        images.push(image);
        texts.push(tokens);
    }
    Ok(SyntheticDataset {
        spec: *spec,
        latents,
        images,
        texts,
        manifest: Manifest::new(studies)?,
    })
}

impl SyntheticDataset {
    /// Flattened pixels and token sequences, in study order.
    pub fn training_set(&self) -> ToyDataset {
        ToyDataset {
            images: self
                .images
                .iter()
                .map(|img| img.pixels().iter().map(|&v| f64::from(v)).collect())
                .collect(),
            texts: self.texts.clone(),
        }
    }

    /// In-memory benchmark corpus: one query image per study.
    pub fn corpus(&self) -> Corpus {
        let studies = self.manifest.studies();
        let queries = studies
            .iter()
            .zip(&self.images)
            .enumerate()
            .map(|(i, (s, image))| QueryImage {
                id: s.image_refs[0].clone(),
                study_index: i,
                image: image.clone(),
            })
            .collect();
        Corpus::new(
            studies.iter().map(|s| s.study_id.clone()).collect(),
            studies.iter().map(|s| s.report.clone()).collect(),
            queries,
        )
        .expect("synthetic datasets are nonempty and consistent")
    }

    /// Write `manifest.jsonl` and one PNG per study under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf, ToyError> {
        std::fs::create_dir_all(dir.join("images"))?;
        for (study, image) in self.manifest.studies().iter().zip(&self.images) {
            std::fs::write(dir.join(&study.image_refs[0]), encode_png(image)?)?;
        }
        let path = dir.join("manifest.jsonl");
        self.manifest.save(&path)?;
        Ok(path)
    }
}
