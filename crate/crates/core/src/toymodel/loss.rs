//! Training objectives with analytic gradients.
//!
//! Every function returns the loss together with its gradient with respect
//! to the raw (unnormalised) embeddings it was given, so the caller only has
//! to chain through the encoders.

use super::ToyError;
use crate::scoring::{sigmoid, ClassifierHead};

const NORM_FLOOR: f64 = 1e-12;
const BCE_EPS: f64 = 1e-7;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector and the (floored) norm it was divided by.
pub(crate) fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = dot(x, x).sqrt().max(NORM_FLOOR);
    (x.iter().map(|v| v / norm).collect(), norm)
}

/// Gradient through `x ↦ x/‖x‖` given the output `u`, the norm and `dL/du`.
pub(crate) fn normalize_backward(u: &[f64], norm: f64, du: &[f64]) -> Vec<f64> {
    let proj = dot(u, du);
    u.iter().zip(du).map(|(ui, gi)| (gi - ui * proj) / norm).collect()
}

fn check_batch(images: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<usize, ToyError> {
    if images.len() != texts.len() {
        return Err(ToyError::Shape(format!(
            "{} images vs {} texts",
            images.len(),
            texts.len()
        )));
    }
    let dim = images.first().map_or(0, Vec::len);
    if images.iter().chain(texts).any(|v| v.len() != dim) || dim == 0 {
        return Err(ToyError::Shape(
            "embeddings in a batch must share a positive dimension".into(),
        ));
    }
    Ok(dim)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_images: Vec<Vec<f64>>,
    pub grad_texts: Vec<Vec<f64>>,
}

/// Symmetric in-batch contrastive loss over L2-normalised embeddings.
///
/// Logits are `û_i · v̂_j / τ`; the loss averages the image→text and
/// text→image cross-entropies with the diagonal as targets.
pub fn info_nce_loss(images: &[Vec<f64>], texts: &[Vec<f64>], temperature: f64) -> Result<InfoNceOutput, ToyError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(ToyError::Temperature(temperature));
    }
    let dim = check_batch(images, texts)?;
    let b = images.len();
    if b < 2 {
        return Err(ToyError::Shape("contrastive loss needs at least two pairs".into()));
    }
    let us: Vec<(Vec<f64>, f64)> = images.iter().map(|v| normalize(v)).collect();
    let vs: Vec<(Vec<f64>, f64)> = texts.iter().map(|v| normalize(v)).collect();
    let logits: Vec<Vec<f64>> = us
        .iter()
        .map(|(u, _)| vs.iter().map(|(v, _)| dot(u, v) / temperature).collect())
        .collect();

    let row_lse: Vec<f64> = logits.iter().map(|r| log_sum_exp(r.iter().copied())).collect();
    let col_lse: Vec<f64> = (0..b).map(|j| log_sum_exp(logits.iter().map(move |r| r[j]))).collect();
    let mut loss = 0.0;
    for i in 0..b {
        loss += (row_lse[i] - logits[i][i]) + (col_lse[i] - logits[i][i]);
    }
    loss /= 2.0 * b as f64;

    // dL/dlogit_ij = (P_ij + Q_ij - 2δ_ij) / 2B, P row-softmax, Q column-softmax.
    let scale = 1.0 / (2.0 * b as f64);
    let g: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            (0..b)
                .map(|j| {
                    let p = (logits[i][j] - row_lse[i]).exp();
                    let q = (logits[i][j] - col_lse[j]).exp();
                    let target = if i == j { 2.0 } else { 0.0 };
                    (p + q - target) * scale
                })
                .collect()
        })
        .collect();

    let grad_images = (0..b)
        .map(|i| {
            let mut du = vec![0.0; dim];
            for j in 0..b {
                for (d, v) in du.iter_mut().zip(&vs[j].0) {
                    *d += g[i][j] * v / temperature;
                }
            }
            normalize_backward(&us[i].0, us[i].1, &du)
        })
        .collect();
    let grad_texts = (0..b)
        .map(|j| {
            let mut dv = vec![0.0; dim];
            for i in 0..b {
                for (d, u) in dv.iter_mut().zip(&us[i].0) {
                    *d += g[i][j] * u / temperature;
                }
            }
            normalize_backward(&vs[j].0, vs[j].1, &dv)
        })
        .collect();
    Ok(InfoNceOutput {
        loss,
        grad_images,
        grad_texts,
    })
}

#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

fn distance_and_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = dot(&diff, &diff).sqrt();
    if d == 0.0 {
        // Subgradient 0 at the kink.
        return (0.0, vec![0.0; diff.len()]);
    }
    (d, diff.into_iter().map(|v| v / d).collect())
}

/// `max(0, ‖a − p‖ − ‖a − n‖ + margin)`.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<TripletOutput, ToyError> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(ToyError::Config(format!(
            "margin must be finite and non-negative, got {margin}"
        )));
    }
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(ToyError::Shape("triplet members differ in dimension".into()));
    }
    let (d_ap, g_ap) = distance_and_grad(anchor, positive);
    let (d_an, g_an) = distance_and_grad(anchor, negative);
    let raw = d_ap - d_an + margin;
    let n = anchor.len();
    if raw <= 0.0 {
        return Ok(TripletOutput {
            loss: 0.0,
            grad_anchor: vec![0.0; n],
            grad_positive: vec![0.0; n],
            grad_negative: vec![0.0; n],
        });
    }
    Ok(TripletOutput {
        loss: raw,
        grad_anchor: g_ap.iter().zip(&g_an).map(|(p, q)| p - q).collect(),
        grad_positive: g_ap.iter().map(|v| -v).collect(),
        grad_negative: g_an,
    })
}

/// Gradients for the classifier head's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

#[derive(Debug, Clone)]
pub struct BceOutput {
    pub loss: f64,
    pub prob: f64,
    pub grad_head: HeadGrads,
    pub grad_image: Vec<f64>,
    pub grad_text: Vec<f64>,
}

/// Binary cross-entropy of `sigmoid(MLP(|v_i − v_t|))` against `matched`.
///
/// The probability is clamped to `[1e-7, 1 − 1e-7]`; inside the clamped
/// region the gradient is zero.
pub fn bce_pair_loss(head: &ClassifierHead, image: &[f64], text: &[f64], matched: bool) -> Result<BceOutput, ToyError> {
    if image.len() != text.len() {
        return Err(ToyError::Shape(format!(
            "image dim {} vs text dim {}",
            image.len(),
            text.len()
        )));
    }
    let diff: Vec<f64> = image.iter().zip(text).map(|(a, b)| a - b).collect();
    let abs: Vec<f64> = diff.iter().map(|d| d.abs()).collect();
    let fwd = head.forward(&abs)?;
    let raw = sigmoid(fwd.logit);
    let prob = raw.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let y = if matched { 1.0 } else { 0.0 };
    let loss = -(y * prob.ln() + (1.0 - y) * (1.0 - prob).ln());
    let dlogit = if raw == prob { raw - y } else { 0.0 };

    let input_dim = head.input_dim();
    let hidden = head.hidden();
    let w2 = fwd.act.iter().map(|a| dlogit * a).collect();
    let dpre: Vec<f64> = (0..hidden)
        .map(|h| if fwd.pre[h] > 0.0 { dlogit * head.w2[h] } else { 0.0 })
        .collect();
    let mut w1 = vec![0.0; hidden * input_dim];
    let mut dinput = vec![0.0; input_dim];
    for h in 0..hidden {
        if dpre[h] == 0.0 {
            continue;
        }
        let row = &head.w1[h * input_dim..(h + 1) * input_dim];
        for k in 0..input_dim {
            w1[h * input_dim + k] = dpre[h] * abs[k];
            dinput[k] += dpre[h] * row[k];
        }
    }
    let grad_image: Vec<f64> = dinput
        .iter()
        .zip(&diff)
        .map(|(g, d)| {
            if *d > 0.0 {
                *g
            } else if *d < 0.0 {
                -g
            } else {
                0.0
            }
        })
        .collect();
    let grad_text = grad_image.iter().map(|g| -g).collect();
    Ok(BceOutput {
        loss,
        prob,
        grad_head: HeadGrads {
            w1,
            b1: dpre,
            w2,
            b2: dlogit,
        },
        grad_image,
        grad_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    /// Direct transcription of the symmetric cross-entropy, no shared helpers.
    fn naive_info_nce(images: &[Vec<f64>], texts: &[Vec<f64>], tau: f64) -> f64 {
        let unit = |v: &Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let u: Vec<_> = images.iter().map(unit).collect();
        let v: Vec<_> = texts.iter().map(unit).collect();
        let b = u.len();
        let s = |i: usize, j: usize| u[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
        let mut i2t = 0.0;
        let mut t2i = 0.0;
        for i in 0..b {
            let row: f64 = (0..b).map(|j| s(i, j).exp()).sum();
            i2t -= (s(i, i).exp() / row).ln();
            let col: f64 = (0..b).map(|j| s(j, i).exp()).sum();
            t2i -= (s(i, i).exp() / col).ln();
        }
        (i2t + t2i) / (2.0 * b as f64)
    }

    #[test]
    fn info_nce_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let imgs = random_vecs(&mut rng, 5, 4);
            let txts = random_vecs(&mut rng, 5, 4);
            let got = info_nce_loss(&imgs, &txts, 0.3).unwrap().loss;
            assert!((got - naive_info_nce(&imgs, &txts, 0.3)).abs() < 1e-10);
        }
    }

    #[test]
    fn info_nce_rejects_bad_input() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(info_nce_loss(&v, &v, 0.0), Err(ToyError::Temperature(_))));
        assert!(matches!(info_nce_loss(&v, &v, f64::NAN), Err(ToyError::Temperature(_))));
        assert!(info_nce_loss(&v[..1], &v[..1], 0.1).is_err());
        assert!(info_nce_loss(&v, &v[..1], 0.1).is_err());
    }

    #[test]
    fn info_nce_perfect_alignment_is_near_zero() {
        let v: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let out = info_nce_loss(&v, &v, 0.01).unwrap();
        assert!(out.loss < 1e-10);
        assert!(out.grad_images.iter().flatten().all(|g| g.abs() < 1e-10));
    }

    fn rel_err(a: &[f64], n: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    fn numeric(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|k| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[k] += h;
                m[k] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn info_nce_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs = random_vecs(&mut rng, 4, 3);
        let txts = random_vecs(&mut rng, 4, 3);
        let out = info_nce_loss(&imgs, &txts, 0.5).unwrap();
        for i in 0..4 {
            let f = |x: &[f64]| {
                let mut m = imgs.clone();
                m[i] = x.to_vec();
                info_nce_loss(&m, &txts, 0.5).unwrap().loss
            };
            assert!(rel_err(&out.grad_images[i], &numeric(f, &imgs[i])) < 1e-6);
            let f = |x: &[f64]| {
                let mut m = txts.clone();
                m[i] = x.to_vec();
                info_nce_loss(&imgs, &m, 0.5).unwrap().loss
            };
            assert!(rel_err(&out.grad_texts[i], &numeric(f, &txts[i])) < 1e-6);
        }
    }

    #[test]
    fn triplet_cases() {
        let a = [0.0, 0.0];
        let p = [1.0, 0.0];
        let n = [3.0, 0.0];
        let out = triplet_loss(&a, &p, &n, 0.5).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_anchor.iter().all(|g| *g == 0.0));
        let out = triplet_loss(&a, &p, &n, 2.5).unwrap();
        assert!((out.loss - 0.5).abs() < 1e-12);
        assert_eq!(out.grad_positive[0], 1.0);
        assert_eq!(out.grad_negative[0], -1.0);
        assert!(triplet_loss(&a, &p, &n, -1.0).is_err());
        // Coincident anchor and positive: subgradient zero on that term.
        let out = triplet_loss(&a, &a, &p, 2.0).unwrap();
        assert!((out.loss - 1.0).abs() < 1e-12);
        assert_eq!(out.grad_positive, vec![0.0, 0.0]);
    }

    #[test]
    fn triplet_gradient_is_exact_off_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_vecs(&mut rng, 3, 5);
        let out = triplet_loss(&v[0], &v[1], &v[2], 10.0).unwrap();
        assert!(out.loss > 0.0);
        let f = |x: &[f64]| triplet_loss(x, &v[1], &v[2], 10.0).unwrap().loss;
        assert!(rel_err(&out.grad_anchor, &numeric(f, &v[0])) < 1e-6);
        let f = |x: &[f64]| triplet_loss(&v[0], x, &v[2], 10.0).unwrap().loss;
        assert!(rel_err(&out.grad_positive, &numeric(f, &v[1])) < 1e-6);
        let f = |x: &[f64]| triplet_loss(&v[0], &v[1], x, 10.0).unwrap().loss;
        assert!(rel_err(&out.grad_negative, &numeric(f, &v[2])) < 1e-6);
    }

    #[test]
    fn bce_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = ClassifierHead::random(4, 6, &mut rng).unwrap();
        let v = random_vecs(&mut rng, 2, 4);
        for matched in [true, false] {
            let out = bce_pair_loss(&head, &v[0], &v[1], matched).unwrap();
            let f = |x: &[f64]| bce_pair_loss(&head, x, &v[1], matched).unwrap().loss;
            assert!(rel_err(&out.grad_image, &numeric(f, &v[0])) < 1e-6);
            let f = |x: &[f64]| bce_pair_loss(&head, &v[0], x, matched).unwrap().loss;
            assert!(rel_err(&out.grad_text, &numeric(f, &v[1])) < 1e-6);
            let f = |x: &[f64]| {
                let mut h = head.clone();
                h.w1 = x.to_vec();
                bce_pair_loss(&h, &v[0], &v[1], matched).unwrap().loss
            };
            assert!(rel_err(&out.grad_head.w1, &numeric(f, &head.w1)) < 1e-6);
            let f = |x: &[f64]| {
                let mut h = head.clone();
                h.b2 = x[0];
                bce_pair_loss(&h, &v[0], &v[1], matched).unwrap().loss
            };
            assert!((out.grad_head.b2 - numeric(f, &[head.b2])[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_clamps_extreme_probabilities() {
        let mut head = ClassifierHead::zeros(2, 1).unwrap();
        head.b2 = 100.0;
        let out = bce_pair_loss(&head, &[0.0, 0.0], &[1.0, 1.0], false).unwrap();
        assert!((out.loss + (BCE_EPS).ln()).abs() < 1e-6);
        assert_eq!(out.grad_head.b2, 0.0);
        assert!(out.loss.is_finite());
    }
}
