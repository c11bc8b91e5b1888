use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{bce_pair_loss, info_nce_loss, normalize, normalize_backward, triplet_loss};
use super::params::ToyEncoderParams;
use super::ToyError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    InfoNce,
    Triplet,
    Bce,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::InfoNce => "infonce",
            Objective::Triplet => "triplet",
            Objective::Bce => "bce",
        })
    }
}

impl FromStr for Objective {
    type Err = ToyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "infonce" => Ok(Objective::InfoNce),
            "triplet" => Ok(Objective::Triplet),
            "bce" => Ok(Objective::Bce),
            other => Err(ToyError::Config(format!(
                "unknown objective {other:?} (infonce|triplet|bce)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Hinge margin, triplet objective only.
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_objective(Objective::InfoNce)
    }
}

impl TrainConfig {
    /// Settings that train the default synthetic task to a useful model.
    /// BCE gets a smaller step: raw embedding differences saturate the head.
    pub fn for_objective(objective: Objective) -> Self {
        Self {
            objective,
            epochs: 100,
            lr: match objective {
                Objective::InfoNce | Objective::Triplet => 1.0,
                Objective::Bce => 0.05,
            },
            batch_size: 32,
            seed: 0,
            margin: 0.2,
        }
    }
}

/// Flattened grayscale images and token sequences, paired by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToyDataset {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<Vec<u32>>,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ToyEncoderParams,
    /// Mean loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Loss on one mini-batch and its gradient for every parameter.
///
/// Triplet and BCE negatives are in-batch: pair `i` is contrasted with the
/// text of pair `(i + 1) mod B`.
pub fn batch_gradients(
    params: &ToyEncoderParams,
    images: &[&[f64]],
    texts: &[&[u32]],
    objective: Objective,
    margin: f64,
) -> Result<(f64, ToyEncoderParams), ToyError> {
    let b = images.len();
    if b != texts.len() {
        return Err(ToyError::Shape(format!("{b} images vs {} texts", texts.len())));
    }
    if b < 2 {
        return Err(ToyError::Shape("a batch needs at least two pairs".into()));
    }
    let img_emb = images
        .iter()
        .map(|x| params.encode_pixels(x))
        .collect::<Result<Vec<_>, _>>()?;
    let pooled = texts
        .iter()
        .map(|t| params.pool_tokens(t))
        .collect::<Result<Vec<_>, _>>()?;
    let txt_emb: Vec<Vec<f64>> = pooled.iter().map(|p| params.encode_pooled(p)).collect();
    let d = params.embed_dim;
    let neg = |i: usize| (i + 1) % b;

    let mut grads = params.zeros_like();
    let (loss, d_img, d_txt) = match objective {
        Objective::InfoNce => {
            let out = info_nce_loss(&img_emb, &txt_emb, params.temperature)?;
            (out.loss, out.grad_images, out.grad_texts)
        }
        Objective::Triplet => {
            let us: Vec<_> = img_emb.iter().map(|v| normalize(v)).collect();
            let vs: Vec<_> = txt_emb.iter().map(|v| normalize(v)).collect();
            let mut du = vec![vec![0.0; d]; b];
            let mut dv = vec![vec![0.0; d]; b];
            let mut loss = 0.0;
            let scale = 1.0 / b as f64;
            for i in 0..b {
                let out = triplet_loss(&us[i].0, &vs[i].0, &vs[neg(i)].0, margin)?;
                loss += out.loss * scale;
                for k in 0..d {
                    du[i][k] += out.grad_anchor[k] * scale;
                    dv[i][k] += out.grad_positive[k] * scale;
                    dv[neg(i)][k] += out.grad_negative[k] * scale;
                }
            }
            let d_img = (0..b).map(|i| normalize_backward(&us[i].0, us[i].1, &du[i])).collect();
            let d_txt = (0..b).map(|i| normalize_backward(&vs[i].0, vs[i].1, &dv[i])).collect();
            (loss, d_img, d_txt)
        }
        Objective::Bce => {
            let head = params
                .head
                .as_ref()
                .ok_or_else(|| ToyError::Config("the bce objective needs a classifier head".into()))?;
            let gh = grads.head.as_mut().expect("zeros_like keeps the head");
            let mut d_img = vec![vec![0.0; d]; b];
            let mut d_txt = vec![vec![0.0; d]; b];
            let mut loss = 0.0;
            let scale = 1.0 / (2 * b) as f64;
            for i in 0..b {
                for (j, matched) in [(i, true), (neg(i), false)] {
                    let out = bce_pair_loss(head, &img_emb[i], &txt_emb[j], matched)?;
                    loss += out.loss * scale;
                    for (g, o) in gh.w1.iter_mut().zip(&out.grad_head.w1) {
                        *g += o * scale;
                    }
                    for (g, o) in gh.b1.iter_mut().zip(&out.grad_head.b1) {
                        *g += o * scale;
                    }
                    for (g, o) in gh.w2.iter_mut().zip(&out.grad_head.w2) {
                        *g += o * scale;
                    }
                    gh.b2 += out.grad_head.b2 * scale;
                    for k in 0..d {
                        d_img[i][k] += out.grad_image[k] * scale;
                        d_txt[j][k] += out.grad_text[k] * scale;
                    }
                }
            }
            (loss, d_img, d_txt)
        }
    };

    let p = params.image_dim();
    let dt = params.token_dim;
    for i in 0..b {
        for o in 0..d {
            let g = d_img[i][o];
            grads.b_img[o] += g;
            if g != 0.0 {
                for (w, x) in grads.w_img[o * p..(o + 1) * p].iter_mut().zip(images[i]) {
                    *w += g * x;
                }
            }
        }
        let mut d_pooled = vec![0.0; dt];
        for o in 0..d {
            let g = d_txt[i][o];
            grads.b_txt[o] += g;
            for k in 0..dt {
                grads.w_txt[o * dt + k] += g * pooled[i][k];
                d_pooled[k] += g * params.w_txt[o * dt + k];
            }
        }
        if !texts[i].is_empty() {
            let share = 1.0 / texts[i].len() as f64;
            for &t in texts[i] {
                let row = &mut grads.tok_emb[t as usize * dt..(t as usize + 1) * dt];
                for (r, g) in row.iter_mut().zip(&d_pooled) {
                    *r += g * share;
                }
            }
        }
    }
    Ok((loss, grads))
}

/// Shuffled mini-batches; a trailing batch of one joins the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Plain mini-batch gradient descent. Deterministic for a given config.
pub fn train(mut params: ToyEncoderParams, data: &ToyDataset, cfg: &TrainConfig) -> Result<TrainOutcome, ToyError> {
    if data.images.len() != data.texts.len() {
        return Err(ToyError::Shape(format!(
            "{} images vs {} texts",
            data.images.len(),
            data.texts.len()
        )));
    }
    if data.len() < 2 {
        return Err(ToyError::Config("training needs at least two pairs".into()));
    }
    if cfg.batch_size < 2 {
        return Err(ToyError::Config("batch size must be at least 2".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(ToyError::Config(format!(
            "learning rate must be finite and >= 0, got {}",
            cfg.lr
        )));
    }
    let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::hash_str("toy-train")]));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_no, batch) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let images: Vec<&[f64]> = batch.iter().map(|&i| data.images[i].as_slice()).collect();
            let texts: Vec<&[u32]> = batch.iter().map(|&i| data.texts[i].as_slice()).collect();
            let (loss, grads) = batch_gradients(&params, &images, &texts, cfg.objective, cfg.margin)?;
            if !loss.is_finite() {
                return Err(ToyError::Diverged {
                    epoch,
                    batch: batch_no,
                    loss,
                });
            }
            params.add_scaled(-cfg.lr, &grads);
            if !params.is_finite() {
                return Err(ToyError::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: f64::NAN,
                });
            }
            total += loss * batch.len() as f64;
        }
        let epoch_loss = total / data.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        trace.push(epoch_loss);
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

/// True when the mean of the last `window` epochs is no higher than the
/// mean of the `window` epochs before it. Short traces count as settled.
pub fn loss_settled(trace: &[f64], window: usize) -> bool {
    if window == 0 || trace.len() < 2 * window {
        return true;
    }
    let n = trace.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let last = mean(&trace[n - window..]);
    let prev = mean(&trace[n - 2 * window..n - window]);
    last <= prev + 1e-12 * prev.abs().max(1.0)
}
