//! Adam over every parameter family of the cloud and the classifier head.
//!
//! Scales are stepped in log space, opacities in logit space, and
//! quaternions are renormalised after each step. A zero update leaves the
//! stored value bit-identical.

use serde::{Deserialize, Serialize};

use crate::backward::ParamGrads;
use crate::head::ClassifierHead;
use crate::scene::{normalized, remap_rows, GaussianCloud, RowOrigin};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
const OPACITY_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub encoding: f64,
    pub head: f64,
}

impl Default for LearningRates {
    /// `position` is per unit scene extent; the trainer multiplies it in.
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            encoding: 2.5e-3,
            head: 5e-4,
        }
    }
}

/// First and second moments of one flat parameter array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Updates the moments with `grads` at step `t` (1-based) and returns
    /// the bias-corrected parameter deltas.
    pub fn step(&mut self, grads: &[f64], lr: f64, t: u64) -> Vec<f64> {
        debug_assert_eq!(grads.len(), self.m.len());
        let bc1 = 1.0 - BETA1.powf(t as f64);
        let bc2 = 1.0 - BETA2.powf(t as f64);
        let mut delta = vec![0.0; grads.len()];
        for k in 0..grads.len() {
            let g = grads[k];
            self.m[k] = BETA1 * self.m[k] + (1.0 - BETA1) * g;
            self.v[k] = BETA2 * self.v[k] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            delta[k] = -lr * m_hat / (v_hat.sqrt() + EPS);
        }
        delta
    }

    fn remap(&mut self, width: usize, origins: &[RowOrigin]) {
        self.m = remap_rows(&self.m, width, origins);
        self.v = remap_rows(&self.v, width, origins);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub position: Moments,
    pub log_scale: Moments,
    pub rotation: Moments,
    pub opacity_logit: Moments,
    pub color: Moments,
    pub encoding: Moments,
    pub head_weights: Moments,
    pub head_biases: Moments,
    dim: usize,
}

impl OptimizerState {
    pub fn new(num_gaussians: usize, dim: usize, num_classes: usize) -> Self {
        let n = num_gaussians;
        Self {
            step: 0,
            position: Moments::zeros(n * 3),
            log_scale: Moments::zeros(n * 3),
            rotation: Moments::zeros(n * 4),
            opacity_logit: Moments::zeros(n),
            color: Moments::zeros(n * 3),
            encoding: Moments::zeros(n * dim),
            head_weights: Moments::zeros(num_classes * dim),
            head_biases: Moments::zeros(num_classes),
            dim,
        }
    }

    /// Number of Gaussian rows tracked.
    pub fn rows(&self) -> usize {
        self.opacity_logit.len()
    }

    /// Re-indexes all per-Gaussian moments after a prune / split / clone.
    pub fn remap(&mut self, origins: &[RowOrigin]) {
        self.position.remap(3, origins);
        self.log_scale.remap(3, origins);
        self.rotation.remap(4, origins);
        self.opacity_logit.remap(1, origins);
        self.color.remap(3, origins);
        self.encoding.remap(self.dim, origins);
    }
}

fn flat3(v: &[nalgebra::Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|x| x.iter().copied()).collect()
}

pub fn logit(o: f64) -> f64 {
    let o = o.clamp(OPACITY_CLAMP, 1.0 - OPACITY_CLAMP);
    (o / (1.0 - o)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One Adam step over the cloud and head.
pub fn adam_step(
    cloud: &mut GaussianCloud,
    head: &mut ClassifierHead,
    state: &mut OptimizerState,
    grads: &ParamGrads,
    lr: &LearningRates,
) -> Result<()> {
    let n = cloud.len();
    let d = cloud.encoding_dim();
    if let Some(family) = grads.non_finite_family() {
        return Err(Error::NonFiniteGradient(family));
    }
    if grads.len() != n
        || grads.encoding.len() != n * d
        || state.rows() != n
        || grads.head.weights.len() != head.weights.len()
        || grads.head.biases.len() != head.biases.len()
    {
        return Err(Error::Invalid("gradient / optimizer shapes do not match the scene".into()));
    }
    state.step += 1;
    let t = state.step;

    let dp = state.position.step(&flat3(&grads.position), lr.position, t);
    let ds = state.log_scale.step(&flat3(&grads.log_scale), lr.scale, t);
    let rot: Vec<f64> = grads.rotation.iter().flatten().copied().collect();
    let dr = state.rotation.step(&rot, lr.rotation, t);
    let dop = state.opacity_logit.step(&grads.opacity_logit, lr.opacity, t);
    let dc = state.color.step(&flat3(&grads.color), lr.color, t);
    let de = state.encoding.step(&grads.encoding, lr.encoding, t);

    for (i, g) in cloud.gaussians.iter_mut().enumerate() {
        for a in 0..3 {
            g.position[a] += dp[i * 3 + a];
            if ds[i * 3 + a] != 0.0 {
                g.scale[a] *= ds[i * 3 + a].exp();
            }
            if dc[i * 3 + a] != 0.0 {
                g.color[a] = (g.color[a] + dc[i * 3 + a]).clamp(0.0, 1.0);
            }
        }
        let dq = &dr[i * 4..i * 4 + 4];
        if dq.iter().any(|&v| v != 0.0) {
            for k in 0..4 {
                g.rotation[k] += dq[k];
            }
            g.rotation = normalized(&g.rotation);
        }
        if dop[i] != 0.0 {
            g.opacity = sigmoid(logit(g.opacity) + dop[i]);
        }
        for (e, v) in g.encoding.iter_mut().zip(&de[i * d..(i + 1) * d]) {
            *e += v;
        }
    }

    let dw = state.head_weights.step(&grads.head.weights, lr.head, t);
    let db = state.head_biases.step(&grads.head.biases, lr.head, t);
    head.weights.iter_mut().zip(&dw).for_each(|(w, v)| *w += v);
    head.biases.iter_mut().zip(&db).for_each(|(b, v)| *b += v);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use nalgebra::Vector3;

    fn scene() -> (GaussianCloud, ClassifierHead) {
        let g = Gaussian {
            position: Vector3::new(0.1, 0.2, 0.3),
            scale: Vector3::new(0.1, 0.2, 0.05),
            rotation: [0.9, 0.1, 0.0, 0.0],
            opacity: 0.4,
            color: Vector3::new(0.2, 0.5, 0.7),
            encoding: vec![0.01, -0.02],
        };
        let mut g = g;
        g.rotation = normalized(&g.rotation);
        (GaussianCloud::from_gaussians(2, vec![g]), ClassifierHead::zeros(3, 2))
    }

    #[test]
    fn first_step_has_unit_magnitude() {
        let mut m = Moments::zeros(1);
        let delta = m.step(&[0.5], 0.01, 1);
        assert!((delta[0] + 0.01).abs() < 1e-9);
        assert_eq!(-0.01 * 0.5 / (0.25f64.sqrt() + 1e-8), delta[0]);
    }

    #[test]
    fn quadratic_converges() {
        let mut m = Moments::zeros(1);
        let mut x = 1.0f64;
        for t in 1..=100 {
            x += m.step(&[2.0 * x], 0.1, t)[0];
        }
        assert!(x.abs() < 0.05, "{x}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut cloud, mut head) = scene();
        let before = (cloud.clone(), head.clone());
        let mut state = OptimizerState::new(1, 2, 3);
        let grads = ParamGrads::zeros(1, 2, 3);
        adam_step(&mut cloud, &mut head, &mut state, &grads, &LearningRates::default()).unwrap();
        assert_eq!((cloud, head), before);
        assert_eq!(state.step, 1);
        assert!(state.position.m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_gradient_names_family() {
        let (mut cloud, mut head) = scene();
        let mut state = OptimizerState::new(1, 2, 3);
        let mut grads = ParamGrads::zeros(1, 2, 3);
        grads.opacity_logit[0] = f64::NAN;
        let err = adam_step(&mut cloud, &mut head, &mut state, &grads, &LearningRates::default()).unwrap_err();
        assert!(err.to_string().contains("opacity"), "{err}");
    }

    #[test]
    fn reparameterised_families_stay_valid() {
        let (mut cloud, mut head) = scene();
        let mut state = OptimizerState::new(1, 2, 3);
        let mut grads = ParamGrads::zeros(1, 2, 3);
        grads.log_scale[0] = Vector3::new(1.0, -1.0, 1.0);
        grads.opacity_logit[0] = -3.0;
        grads.rotation[0] = [0.3, -0.2, 0.5, 0.1];
        grads.color[0] = Vector3::repeat(-100.0);
        for _ in 0..200 {
            adam_step(&mut cloud, &mut head, &mut state, &grads, &LearningRates { opacity: 0.5, color: 0.01, ..Default::default() })
                .unwrap();
        }
        cloud.validate().unwrap();
        let g = &cloud.gaussians[0];
        assert!(g.scale.x < 0.1 && g.scale.y > 0.2);
        assert!(g.opacity > 0.4);
        assert_eq!(g.color, Vector3::repeat(1.0));
    }

    #[test]
    fn remap_zeroes_spawned_rows() {
        let mut state = OptimizerState::new(2, 1, 1);
        state.opacity_logit.m = vec![1.0, 2.0];
        state.encoding.v = vec![3.0, 4.0];
        state.remap(&[RowOrigin::Kept(1), RowOrigin::Spawned(0), RowOrigin::Spawned(0)]);
        assert_eq!(state.rows(), 3);
        assert_eq!(state.opacity_logit.m, vec![2.0, 0.0, 0.0]);
        assert_eq!(state.encoding.v, vec![4.0, 0.0, 0.0]);
        assert_eq!(state.position.len(), 9);
    }

    #[test]
    fn logit_sigmoid_inverse() {
        for o in [0.01, 0.3, 0.5, 0.9] {
            assert!((sigmoid(logit(o)) - o).abs() < 1e-12);
        }
    }
}
