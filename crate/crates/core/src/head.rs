//! Linear identity classifier (a 1×1 convolution over the rendered
//! identity map) and the pixel-wise cross-entropy loss.

use rayon::prelude::*;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    num_classes: usize,
    dim: usize,
    /// Row-major `C × D`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradients with respect to the head parameters, same layout as the head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            weights: vec![0.0; num_classes * dim],
            biases: vec![0.0; num_classes],
        }
    }

    pub fn add_scaled(&mut self, other: &HeadGrads, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += scale * b;
        }
    }
}

impl ClassifierHead {
    /// Zero weights and biases: uniform predictions.
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            num_classes,
            dim,
            weights: vec![0.0; num_classes * dim],
            biases: vec![0.0; num_classes],
        }
    }

    /// `W[c][c] = 1` for `c < min(C, D)`, zero bias.
    pub fn identity_like(num_classes: usize, dim: usize) -> Self {
        let mut head = Self::zeros(num_classes, dim);
        for c in 0..num_classes.min(dim) {
            head.weights[c * dim + c] = 1.0;
        }
        head
    }

    pub fn from_parts(num_classes: usize, dim: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() != num_classes * dim || biases.len() != num_classes {
            return Err(Error::Invalid(format!(
                "head parameter shapes do not match {num_classes}×{dim}"
            )));
        }
        Ok(Self {
            num_classes,
            dim,
            weights,
            biases,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    /// `out = W·feature + b`.
    pub fn logits_into(&self, feature: &[f64], out: &mut [f64]) {
        debug_assert_eq!(feature.len(), self.dim);
        for (c, z) in out.iter_mut().enumerate() {
            let mut acc = self.biases[c];
            for (w, f) in self.row(c).iter().zip(feature) {
                acc += w * f;
            }
            *z = acc;
        }
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        self.logits_into(feature, &mut out);
        out
    }

    /// Softmax class probabilities for each `D`-sized feature in `features`.
    pub fn classify(&self, features: &[f64]) -> Vec<f64> {
        let c = self.num_classes;
        let mut out = vec![0.0; features.len() / self.dim * c];
        out.par_chunks_mut(c)
            .zip(features.par_chunks(self.dim))
            .for_each(|(probs, f)| {
                self.logits_into(f, probs);
                softmax_in_place(probs);
            });
        out
    }

    /// Per-feature argmax class (lowest index wins ties).
    pub fn predict(&self, features: &[f64]) -> Vec<usize> {
        features
            .par_chunks(self.dim)
            .map_init(
                || vec![0.0; self.num_classes],
                |logits, f| {
                    self.logits_into(f, logits);
                    crate::scene::argmax(logits)
                },
            )
            .collect()
    }

    /// Accumulates `dz ⊗ feature` into the weight gradient and `dz` into the
    /// bias gradient, and adds `Wᵀ dz` to `d_feature`.
    pub(crate) fn backprop_logits(
        &self,
        feature: &[f64],
        dz: &[f64],
        d_feature: &mut [f64],
        grads: Option<&mut HeadGrads>,
    ) {
        let d = self.dim;
        for (c, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (df, w) in d_feature.iter_mut().zip(self.row(c)) {
                *df += g * w;
            }
        }
        if let Some(grads) = grads {
            for (c, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grads.biases[c] += g;
                for (dw, f) in grads.weights[c * d..(c + 1) * d].iter_mut().zip(feature) {
                    *dw += g * f;
                }
            }
        }
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Result of the pixel cross-entropy loss.
#[derive(Clone, Debug)]
pub struct Loss2d {
    pub loss: f64,
    /// `∂loss/∂identity_map`, same layout as the input map.
    pub d_identity: Vec<f64>,
    pub d_head: HeadGrads,
}

const PIXEL_CHUNK: usize = 256;

/// Mean over pixels of `−ln softmax(W·E + b)[mask]`.
///
/// `identity_map` holds one `D`-vector per pixel, `mask` one class id per
/// pixel. Partial head gradients are reduced in fixed chunk order so the
/// result does not depend on the thread schedule.
pub fn loss_2d(identity_map: &[f64], mask: &[u8], head: &ClassifierHead) -> Result<Loss2d> {
    let (c, d) = (head.num_classes, head.dim);
    let pixels = mask.len();
    if identity_map.len() != pixels * d {
        return Err(Error::Invalid(format!(
            "identity map has {} values, expected {}×{d}",
            identity_map.len(),
            pixels
        )));
    }
    if let Some(&bad) = mask.iter().find(|&&m| m as usize >= c) {
        return Err(Error::Invalid(format!("mask id {bad} exceeds class count {c}")));
    }
    if pixels == 0 {
        return Ok(Loss2d {
            loss: 0.0,
            d_identity: Vec::new(),
            d_head: HeadGrads::zeros(c, d),
        });
    }
    let scale = 1.0 / pixels as f64;
    let mut d_identity = vec![0.0; identity_map.len()];

    let partials: Vec<(f64, HeadGrads)> = d_identity
        .par_chunks_mut(PIXEL_CHUNK * d)
        .zip(identity_map.par_chunks(PIXEL_CHUNK * d))
        .zip(mask.par_chunks(PIXEL_CHUNK))
        .map(|((d_chunk, feat_chunk), mask_chunk)| {
            let mut grads = HeadGrads::zeros(c, d);
            let mut z = vec![0.0; c];
            let mut loss = 0.0;
            // all-zero features give logits equal to the biases
            let mut bias_softmax: Option<(f64, f64, Vec<f64>)> = None;
            for ((df, f), &label) in d_chunk.chunks_mut(d).zip(feat_chunk.chunks(d)).zip(mask_chunk) {
                let label = label as usize;
                if f.iter().all(|&v| v == 0.0) {
                    let (max, sum, p) = bias_softmax.get_or_insert_with(|| {
                        let mut p = head.biases.clone();
                        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for v in p.iter_mut() {
                            *v = (*v - max).exp();
                            sum += *v;
                        }
                        (max, sum, p)
                    });
                    loss += sum.ln() - (head.biases[label] - *max);
                    for (zv, pv) in z.iter_mut().zip(p.iter()) {
                        *zv = pv * (scale / *sum);
                    }
                } else {
                    head.logits_into(f, &mut z);
                    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let shifted_label = z[label] - max;
                    let mut sum = 0.0;
                    for v in z.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    loss += sum.ln() - shifted_label;
                    for v in z.iter_mut() {
                        *v *= scale / sum;
                    }
                }
                z[label] -= scale;
                head.backprop_logits(f, &z, df, Some(&mut grads));
            }
            (loss, grads)
        })
        .collect();

    let mut total = 0.0;
    let mut d_head = HeadGrads::zeros(c, d);
    for (loss, grads) in &partials {
        total += loss;
        d_head.add_scaled(grads, 1.0);
    }
    Ok(Loss2d {
        loss: total * scale,
        d_identity,
        d_head,
    })
}
