//! Encoder parameters, the forward passes, and the `XTOY` parameter file.
//!
//! File layout (little-endian):
//!
//! ```text
//! "XTOY" | u32 version (=1)
//! u32 image_side | u32 vocab_size | u32 token_dim | u32 embed_dim | u32 head_hidden (0 = no head)
//! f32 temperature
//! f32[embed_dim × image_side²]  w_img   (row-major, one row per output)
//! f32[embed_dim]                b_img
//! f32[vocab_size × token_dim]   tok_emb (row-major, one row per token)
//! f32[embed_dim × token_dim]    w_txt
//! f32[embed_dim]                b_txt
//! if head_hidden > 0:
//!   f32[head_hidden × embed_dim] w1 | f32[head_hidden] b1 | f32[head_hidden] w2 | f32 b2
//! ```

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::data::ImageTensor;
use crate::scoring::ClassifierHead;
use crate::seed;

pub const PARAMS_MAGIC: [u8; 4] = *b"XTOY";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyArch {
    pub image_side: usize,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    /// Hidden width of the classifier head; 0 means no head.
    pub head_hidden: usize,
}

impl Default for ToyArch {
    fn default() -> Self {
        Self {
            image_side: 32,
            vocab_size: 128,
            token_dim: 32,
            embed_dim: 32,
            temperature: 0.1,
            head_hidden: 0,
        }
    }
}

impl ToyArch {
    fn validate(&self) -> Result<(), ToyError> {
        if self.image_side == 0 || self.vocab_size == 0 || self.token_dim == 0 || self.embed_dim == 0 {
            return Err(ToyError::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(ToyError::Temperature(self.temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoderParams {
    pub image_side: usize,
    pub vocab_size: usize,
    pub token_dim: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub w_img: Vec<f64>,
    pub b_img: Vec<f64>,
    pub tok_emb: Vec<f64>,
    pub w_txt: Vec<f64>,
    pub b_txt: Vec<f64>,
    pub head: Option<ClassifierHead>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks_exact(x.len())
        .zip(b)
        .map(|(row, bias)| row.iter().zip(x).fold(*bias, |acc, (w, x)| acc + w * x))
        .collect()
}

impl ToyEncoderParams {
    pub fn zeros(arch: &ToyArch) -> Result<Self, ToyError> {
        arch.validate()?;
        let p = arch.image_side * arch.image_side;
        let head = match arch.head_hidden {
            0 => None,
            h => Some(ClassifierHead::zeros(arch.embed_dim, h)?),
        };
        Ok(Self {
            image_side: arch.image_side,
            vocab_size: arch.vocab_size,
            token_dim: arch.token_dim,
            embed_dim: arch.embed_dim,
            temperature: arch.temperature,
            w_img: vec![0.0; arch.embed_dim * p],
            b_img: vec![0.0; arch.embed_dim],
            tok_emb: vec![0.0; arch.vocab_size * arch.token_dim],
            w_txt: vec![0.0; arch.embed_dim * arch.token_dim],
            b_txt: vec![0.0; arch.embed_dim],
            head,
        })
    }

    /// Scaled normal weights, zero biases.
    pub fn init(arch: &ToyArch, seed: u64) -> Result<Self, ToyError> {
        let mut params = Self::zeros(arch)?;
        let mut rng = seed::rng(seed::derive(seed, &[seed::hash_str("toy-init")]));
        let fill = |v: &mut [f64], std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("positive std");
            v.iter_mut().for_each(|x| *x = dist.sample(rng));
        };
        let p = params.image_dim() as f64;
        fill(&mut params.w_img, 1.0 / p.sqrt(), &mut rng);
        fill(&mut params.tok_emb, 1.0, &mut rng);
        fill(&mut params.w_txt, 1.0 / (arch.token_dim as f64).sqrt(), &mut rng);
        if arch.head_hidden > 0 {
            params.head = Some(ClassifierHead::random(arch.embed_dim, arch.head_hidden, &mut rng)?);
        }
        Ok(params)
    }

    pub fn arch(&self) -> ToyArch {
        ToyArch {
            image_side: self.image_side,
            vocab_size: self.vocab_size,
            token_dim: self.token_dim,
            embed_dim: self.embed_dim,
            temperature: self.temperature,
            head_hidden: self.head.as_ref().map_or(0, ClassifierHead::hidden),
        }
    }

    pub fn image_dim(&self) -> usize {
        self.image_side * self.image_side
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch()).expect("arch of a valid params set")
    }

    /// Every trainable tensor, in file order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.w_img, &self.b_img, &self.tok_emb, &self.w_txt, &self.b_txt];
        if let Some(h) = &self.head {
            v.extend([
                h.w1.as_slice(),
                h.b1.as_slice(),
                h.w2.as_slice(),
                std::slice::from_ref(&h.b2),
            ]);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            &mut self.w_img,
            &mut self.b_img,
            &mut self.tok_emb,
            &mut self.w_txt,
            &mut self.b_txt,
        ];
        if let Some(h) = &mut self.head {
            v.push(&mut h.w1);
            v.push(&mut h.b1);
            v.push(&mut h.w2);
            v.push(std::slice::from_mut(&mut h.b2));
        }
        v
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Image branch on a flattened `side × side` grayscale image.
    pub fn encode_pixels(&self, pixels: &[f64]) -> Result<Vec<f64>, ToyError> {
        if pixels.len() != self.image_dim() {
            return Err(ToyError::Shape(format!(
                "image has {} pixels, encoder expects {}",
                pixels.len(),
                self.image_dim()
            )));
        }
        Ok(affine(&self.w_img, &self.b_img, pixels))
    }

    /// Image branch. Color images are reduced to the mean over channels.
    pub fn encode_image(&self, image: &ImageTensor) -> Result<Vec<f64>, ToyError> {
        if image.height() != self.image_side || image.width() != self.image_side {
            return Err(ToyError::Shape(format!(
                "image is {}x{}, encoder expects {side}x{side}",
                image.height(),
                image.width(),
                side = self.image_side
            )));
        }
        let c = image.channels();
        let pixels: Vec<f64> = image
            .pixels()
            .chunks_exact(c)
            .map(|px| px.iter().map(|&v| f64::from(v)).sum::<f64>() / c as f64)
            .collect();
        self.encode_pixels(&pixels)
    }

    /// Mean of the token embeddings; zeros for an empty sequence.
    pub fn pool_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>, ToyError> {
        let d = self.token_dim;
        let mut pooled = vec![0.0; d];
        for &t in tokens {
            let t_idx = t as usize;
            if t_idx >= self.vocab_size {
                return Err(ToyError::TokenOutOfRange {
                    token: t,
                    vocab: self.vocab_size,
                });
            }
            for (p, e) in pooled.iter_mut().zip(&self.tok_emb[t_idx * d..(t_idx + 1) * d]) {
                *p += e;
            }
        }
        if !tokens.is_empty() {
            let n = tokens.len() as f64;
            pooled.iter_mut().for_each(|p| *p /= n);
        }
        Ok(pooled)
    }

    pub fn encode_pooled(&self, pooled: &[f64]) -> Vec<f64> {
        affine(&self.w_txt, &self.b_txt, pooled)
    }

    /// Text branch.
    pub fn encode_text(&self, tokens: &[u32]) -> Result<Vec<f64>, ToyError> {
        Ok(self.encode_pooled(&self.pool_tokens(tokens)?))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), ToyError> {
        let head_hidden = self.head.as_ref().map_or(0, ClassifierHead::hidden);
        out.write_all(&PARAMS_MAGIC)?;
        for v in [
            PARAMS_VERSION as usize,
            self.image_side,
            self.vocab_size,
            self.token_dim,
            self.embed_dim,
            head_hidden,
        ] {
            let v = u32::try_from(v).map_err(|_| ToyError::Format(format!("dimension {v} exceeds u32")))?;
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&(self.temperature as f32).to_le_bytes())?;
        for tensor in self.tensors() {
            for v in tensor {
                out.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<(), ToyError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ToyError> {
        let truncated = || ToyError::Format("truncated params file".into());
        if bytes.len() < 32 {
            return Err(truncated());
        }
        if bytes[..4] != PARAMS_MAGIC {
            return Err(ToyError::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        if word(0) != PARAMS_VERSION as usize {
            return Err(ToyError::Format(format!("unsupported version {}", word(0))));
        }
        let arch = ToyArch {
            image_side: word(1),
            vocab_size: word(2),
            token_dim: word(3),
            embed_dim: word(4),
            head_hidden: word(5),
            temperature: f64::from(f32::from_le_bytes(bytes[28..32].try_into().expect("4 bytes"))),
        };
        arch.validate()?;
        let body = &bytes[32..];
        // Check the size implied by the header before allocating tensors.
        let p = (arch.image_side as u128).pow(2);
        let (d, dt, v, h) = (
            arch.embed_dim as u128,
            arch.token_dim as u128,
            arch.vocab_size as u128,
            arch.head_hidden as u128,
        );
        let mut floats = d * p + d + v * dt + d * dt + d;
        if h > 0 {
            floats += h * d + 2 * h + 1;
        }
        if floats * 4 != body.len() as u128 {
            return Err(ToyError::Format(format!(
                "header implies {} bytes of parameters, file has {}",
                floats * 4,
                body.len()
            )));
        }
        let mut params = Self::zeros(&arch)?;
        params.temperature = arch.temperature;
        let mut values = body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
        for tensor in params.tensors_mut() {
            for slot in tensor.iter_mut() {
                *slot = values.next().expect("length checked");
            }
        }
        if !params.is_finite() {
            return Err(ToyError::Format("non-finite parameter".into()));
        }
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self, ToyError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_arch(head: usize) -> ToyArch {
        ToyArch {
            image_side: 3,
            vocab_size: 5,
            token_dim: 4,
            embed_dim: 2,
            temperature: 0.5,
            head_hidden: head,
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut p = ToyEncoderParams::zeros(&small_arch(0)).unwrap();
        p.b_img = vec![0.25, -1.0];
        p.b_txt = vec![2.0, 3.0];
        assert_eq!(p.encode_pixels(&[0.7; 9]).unwrap(), vec![0.25, -1.0]);
        assert_eq!(p.encode_text(&[1, 4, 4]).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn token_out_of_range() {
        let p = ToyEncoderParams::init(&small_arch(0), 1).unwrap();
        assert!(matches!(
            p.encode_text(&[0, 5]),
            Err(ToyError::TokenOutOfRange { token: 5, vocab: 5 })
        ));
        assert!(p.encode_pixels(&[0.0; 8]).is_err());
    }

    #[test]
    fn image_encoder_is_affine_in_pixels() {
        let p = ToyEncoderParams::init(&small_arch(0), 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x1: Vec<f64> = (0..9).map(|_| rng.random()).collect();
        let x2: Vec<f64> = (0..9).map(|_| rng.random()).collect();
        let alpha = 0.3;
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let (e1, e2, em) = (
            p.encode_pixels(&x1).unwrap(),
            p.encode_pixels(&x2).unwrap(),
            p.encode_pixels(&mix).unwrap(),
        );
        for i in 0..2 {
            let expect = alpha * (e1[i] - p.b_img[i]) + (1.0 - alpha) * (e2[i] - p.b_img[i]);
            assert!((em[i] - p.b_img[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_hand_rolled_oracle() {
        let mut p = ToyEncoderParams::init(&small_arch(0), 3).unwrap();
        p.b_img = vec![0.1, -0.2];
        p.b_txt = vec![-0.3, 0.4];
        let x: Vec<f64> = (0..9).map(|i| i as f64 / 10.0).collect();
        let img = p.encode_pixels(&x).unwrap();
        for o in 0..2 {
            let mut acc = p.b_img[o];
            for i in 0..9 {
                acc += p.w_img[o * 9 + i] * x[i];
            }
            assert!((img[o] - acc).abs() < 1e-12);
        }
        let tokens = [0u32, 3, 3];
        let txt = p.encode_text(&tokens).unwrap();
        let mut pooled = [0.0; 4];
        for &t in &tokens {
            for j in 0..4 {
                pooled[j] += p.tok_emb[t as usize * 4 + j] / 3.0;
            }
        }
        for o in 0..2 {
            let mut acc = p.b_txt[o];
            for j in 0..4 {
                acc += p.w_txt[o * 4 + j] * pooled[j];
            }
            assert!((txt[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn gray_and_rgb_images_encode_alike() {
        let p = ToyEncoderParams::init(&small_arch(0), 4).unwrap();
        let gray = ImageTensor::filled(3, 3, 1, 0.4).unwrap();
        let rgb = ImageTensor::filled(3, 3, 3, 0.4).unwrap();
        let a = p.encode_image(&gray).unwrap();
        let b = p.encode_image(&rgb).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!(p.encode_image(&ImageTensor::filled(4, 3, 1, 0.0).unwrap()).is_err());
    }

    #[test]
    fn file_round_trip_is_f32_exact() {
        for head in [0, 3] {
            let p = ToyEncoderParams::init(&small_arch(head), 5).unwrap();
            let bytes = p.to_bytes();
            assert_eq!(&bytes[..4], b"XTOY");
            let back = ToyEncoderParams::from_bytes(&bytes).unwrap();
            assert_eq!(
                back.arch(),
                ToyEncoderParams::from_bytes(&back.to_bytes()).unwrap().arch()
            );
            assert_eq!(back.to_bytes(), bytes);
            for (a, b) in p.tensors().iter().zip(back.tensors()) {
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(*x as f32, *y as f32);
                }
            }
        }
    }

    #[test]
    fn file_rejects_corruption() {
        let bytes = ToyEncoderParams::init(&small_arch(2), 5).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(ToyEncoderParams::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(ToyEncoderParams::from_bytes(&bad).is_err());
        assert!(ToyEncoderParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(ToyEncoderParams::from_bytes(&bad).is_err());
    }
}
