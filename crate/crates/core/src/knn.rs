//! Neighbour selection over Gaussian centres and the 3D identity
//! consistency loss.
//!
//! Two neighbourhoods are supported: plain Euclidean K-nearest neighbours,
//! and the local adaptive variant that only admits points lying strictly in
//! front of the target along a direction `u`, ranked by their projection
//! distance `(p_j − p_i)·u`. Both are answered from a kd-tree with exact
//! branch-and-bound pruning, so results are identical to exhaustive search
//! (ties broken by ascending index).

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::head::{softmax_in_place, ClassifierHead, HeadGrads};
use crate::scene::GaussianCloud;
use crate::{Error, Result};

const LEAF_SIZE: usize = 8;
/// EMA norms below this give no usable direction.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KnnMode {
    #[default]
    Global,
    LocalAdaptive,
}

#[derive(Clone, Debug)]
struct Node {
    lo: [f64; 3],
    hi: [f64; 3],
    /// Range into `order` for leaves; children for inner nodes.
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

/// Static kd-tree over a point set.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Bounded candidate list ordered by `(key, index)`.
struct Best {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn full(&self) -> bool {
        self.items.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |x| x.0)
    }

    fn offer(&mut self, key: f64, index: usize) {
        if self.full() {
            let (wk, wi) = *self.items.last().expect("k ≥ 1");
            if key > wk || (key == wk && index > wi) {
                return;
            }
        }
        let at = self.items.partition_point(|&(k, i)| k < key || (k == key && i < index));
        self.items.insert(at, (key, index));
        self.items.truncate(self.k);
    }

    fn indices(self) -> Vec<usize> {
        self.items.into_iter().map(|(_, i)| i).collect()
    }
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            start,
            end,
            children: None,
        });
        if end - start > LEAF_SIZE {
            let axis = (0..3)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
                .expect("three axes");
            let mid = (start + end) / 2;
            let points = &self.points;
            self.order[start..end].select_nth_unstable_by(mid - start, |&x, &y| {
                points[x][axis].total_cmp(&points[y][axis]).then(x.cmp(&y))
            });
            let left = self.build(start, mid);
            let right = self.build(mid, end);
            self.nodes[id].children = Some((left, right));
        }
        id
    }

    fn sq_dist(&self, j: usize, q: &[f64; 3]) -> f64 {
        let p = &self.points[j];
        let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
        dx * dx + dy * dy + dz * dz
    }

    fn proj(&self, j: usize, q: &[f64; 3], u: &[f64; 3]) -> f64 {
        let p = &self.points[j];
        (p[0] - q[0]) * u[0] + (p[1] - q[1]) * u[1] + (p[2] - q[2]) * u[2]
    }

    /// `K` nearest points to point `i` by Euclidean distance, excluding `i`.
    pub fn nearest(&self, i: usize, k: usize) -> Vec<usize> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let q = self.points[i];
        let mut best = Best::new(k);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            // same evaluation order as `sq_dist`, so this is a true lower bound
            let mut gap = [0.0; 3];
            for a in 0..3 {
                let c = q[a].clamp(node.lo[a], node.hi[a]);
                gap[a] = c - q[a];
            }
            let bound = gap[0] * gap[0] + gap[1] * gap[1] + gap[2] * gap[2];
            if best.full() && bound > best.worst() {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    // visit the closer child first
                    let dl = self.box_sq_dist(l, &q);
                    let dr = self.box_sq_dist(r, &q);
                    if dl <= dr {
                        stack.extend([r, l]);
                    } else {
                        stack.extend([l, r]);
                    }
                }
                None => {
                    for &j in &self.order[node.start..node.end] {
                        if j != i {
                            best.offer(self.sq_dist(j, &q), j);
                        }
                    }
                }
            }
        }
        best.indices()
    }

    fn box_sq_dist(&self, id: usize, q: &[f64; 3]) -> f64 {
        let node = &self.nodes[id];
        (0..3)
            .map(|a| {
                let g = q[a].clamp(node.lo[a], node.hi[a]) - q[a];
                g * g
            })
            .sum()
    }

    /// Up to `K` points `j ≠ i` with `(p_j − p_i)·u > 0`, smallest
    /// projection first.
    pub fn forward(&self, i: usize, u: &Vector3<f64>, k: usize) -> Vec<usize> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let q = self.points[i];
        let u = [u.x, u.y, u.z];
        let mut best = Best::new(k);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            let (lo, hi) = self.proj_range(id, &q, &u);
            if hi <= 0.0 || (best.full() && lo > best.worst()) {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    let dl = self.proj_range(l, &q, &u).0;
                    let dr = self.proj_range(r, &q, &u).0;
                    if dl <= dr {
                        stack.extend([r, l]);
                    } else {
                        stack.extend([l, r]);
                    }
                }
                None => {
                    for &j in &self.order[node.start..node.end] {
                        if j == i {
                            continue;
                        }
                        let d = self.proj(j, &q, &u);
                        if d > 0.0 {
                            best.offer(d, j);
                        }
                    }
                }
            }
        }
        best.indices()
    }

    /// Range of `(p − q)·u` over the node's bounding box, evaluated in the
    /// same operation order as [`Self::proj`].
    fn proj_range(&self, id: usize, q: &[f64; 3], u: &[f64; 3]) -> (f64, f64) {
        let node = &self.nodes[id];
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            let x = (node.lo[a] - q[a]) * u[a];
            let y = (node.hi[a] - q[a]) * u[a];
            lo[a] = x.min(y);
            hi[a] = x.max(y);
        }
        (lo[0] + lo[1] + lo[2], hi[0] + hi[1] + hi[2])
    }
}

/// `u = −ema / ‖ema‖`, or `None` for a vanishing EMA.
pub fn neighbor_direction(cloud: &GaussianCloud, i: usize) -> Option<Vector3<f64>> {
    let ema = cloud.pos_grad_ema[i];
    let norm = ema.norm();
    if !(norm >= MIN_DIRECTION_NORM) {
        return None;
    }
    Some(-ema / norm)
}

pub fn global_neighbors(cloud: &GaussianCloud, i: usize, k: usize) -> Vec<usize> {
    KdTree::new(&cloud.positions()).nearest(i, k)
}

pub fn local_adaptive_neighbors(cloud: &GaussianCloud, i: usize, u: &Vector3<f64>, k: usize) -> Vec<usize> {
    KdTree::new(&cloud.positions()).forward(i, u, k)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Loss3dParams {
    /// Number of sampled targets `M`.
    pub samples: usize,
    pub k: usize,
    pub mode: KnnMode,
    pub seed: u64,
    /// Also differentiate through the classifier head.
    pub head_grad: bool,
}

#[derive(Clone, Debug)]
pub struct Loss3d {
    pub loss: f64,
    /// `N × D`.
    pub d_encoding: Vec<f64>,
    /// Present when `head_grad` was requested.
    pub d_head: Option<HeadGrads>,
    /// Number of (target, neighbour) pairs averaged over.
    pub pairs: usize,
}

/// Seeded uniform sample of `m` distinct indices out of `n`.
pub fn sample_targets(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, n, m.min(n)).into_vec()
}

/// Neighbour lists for the given targets. In local adaptive mode a target
/// without a usable direction falls back to the global neighbourhood.
pub fn neighbor_lists(cloud: &GaussianCloud, targets: &[usize], k: usize, mode: KnnMode) -> Vec<Vec<usize>> {
    let tree = KdTree::new(&cloud.positions());
    targets
        .par_iter()
        .map(|&i| match mode {
            KnnMode::LocalAdaptive => match neighbor_direction(cloud, i) {
                Some(u) => tree.forward(i, &u, k),
                None => tree.nearest(i, k),
            },
            KnnMode::Global => tree.nearest(i, k),
        })
        .collect()
}

fn probabilities(head: &ClassifierHead, e: &[f64]) -> Vec<f64> {
    let mut p = head.logits(e);
    softmax_in_place(&mut p);
    p
}

/// Back-propagates `g = ∂L/∂p` through `p = softmax(z)`.
fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// `KL(p ‖ q)` of two probability vectors with the floor applied, and its
/// gradients with respect to the unfloored `p` and `q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    kl_with_logs(p, &floored_logs(p), q, &floored_logs(q))
}

fn floored_logs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.max(PROB_FLOOR).ln()).collect()
}

fn kl_with_logs(p: &[f64], log_p: &[f64], q: &[f64], log_q: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut kl = 0.0;
    let mut dp = vec![0.0; p.len()];
    let mut dq = vec![0.0; q.len()];
    for c in 0..p.len() {
        let pc = p[c].max(PROB_FLOOR);
        let qc = q[c].max(PROB_FLOOR);
        let log_ratio = log_p[c] - log_q[c];
        kl += pc * log_ratio;
        if p[c] > PROB_FLOOR {
            dp[c] = log_ratio + 1.0;
        }
        if q[c] > PROB_FLOOR {
            dq[c] = -pc / qc;
        }
    }
    (kl, dp, dq)
}

/// Mean over sampled targets `i` and their neighbours `j` of
/// `KL(F(e_i) ‖ F(e_j))`.
///
/// Class distributions are computed once per involved Gaussian; the
/// probability gradients of all pairs are summed per Gaussian before a
/// single pass back through the softmax and the head.
pub fn loss_3d(cloud: &GaussianCloud, head: &ClassifierHead, params: &Loss3dParams) -> Result<Loss3d> {
    let n = cloud.len();
    let d = cloud.encoding_dim();
    if head.dim() != d {
        return Err(Error::Invalid("head dimension does not match encodings".into()));
    }
    if params.samples > n {
        log::warn!("L_3d: {} targets requested but only {n} gaussians; clamping", params.samples);
    }
    let c = head.num_classes();
    let targets = sample_targets(n, params.samples, params.seed);
    let neighbors = neighbor_lists(cloud, &targets, params.k, params.mode);
    let pairs: usize = neighbors.iter().map(Vec::len).sum();
    let mut out = Loss3d {
        loss: 0.0,
        d_encoding: vec![0.0; n * d],
        d_head: params.head_grad.then(|| HeadGrads::zeros(c, d)),
        pairs,
    };
    if pairs == 0 {
        return Ok(out);
    }

    let mut slot = vec![usize::MAX; n];
    let mut involved = Vec::new();
    for (&i, nbrs) in targets.iter().zip(&neighbors) {
        if nbrs.is_empty() {
            continue;
        }
        for &g in std::iter::once(&i).chain(nbrs) {
            if slot[g] == usize::MAX {
                slot[g] = involved.len();
                involved.push(g);
            }
        }
    }
    let probs: Vec<(Vec<f64>, Vec<f64>)> = involved
        .par_iter()
        .map(|&g| {
            let p = probabilities(head, &cloud.gaussians[g].encoding);
            let log_p = floored_logs(&p);
            (p, log_p)
        })
        .collect();

    // per target: its loss and (slot, ∂L/∂p) contributions
    let terms: Vec<(f64, Vec<(usize, Vec<f64>)>)> = targets
        .par_iter()
        .zip(&neighbors)
        .filter(|(_, nbrs)| !nbrs.is_empty())
        .map(|(&i, nbrs)| {
            let (pi, log_pi) = &probs[slot[i]];
            let mut loss = 0.0;
            let mut gp_total = vec![0.0; c];
            let mut grads = Vec::with_capacity(nbrs.len() + 1);
            for &j in nbrs {
                let (pj, log_pj) = &probs[slot[j]];
                let (kl, gp, gq) = kl_with_logs(pi, log_pi, pj, log_pj);
                loss += kl;
                for (a, b) in gp_total.iter_mut().zip(&gp) {
                    *a += b;
                }
                grads.push((slot[j], gq));
            }
            grads.push((slot[i], gp_total));
            (loss, grads)
        })
        .collect();

    let scale = 1.0 / pairs as f64;
    let mut d_prob = vec![0.0; involved.len() * c];
    for (loss, grads) in &terms {
        out.loss += loss;
        for (s, g) in grads {
            for (acc, v) in d_prob[s * c..(s + 1) * c].iter_mut().zip(g) {
                *acc += v * scale;
            }
        }
    }
    out.loss *= scale;

    let per_gaussian: Vec<(Vec<f64>, Option<HeadGrads>)> = involved
        .par_iter()
        .enumerate()
        .map(|(s, &g)| {
            let dz = softmax_backward(&probs[s].0, &d_prob[s * c..(s + 1) * c]);
            let mut de = vec![0.0; d];
            let mut dh = params.head_grad.then(|| HeadGrads::zeros(c, d));
            head.backprop_logits(&cloud.gaussians[g].encoding, &dz, &mut de, dh.as_mut());
            (de, dh)
        })
        .collect();
    for (&g, (de, dh)) in involved.iter().zip(&per_gaussian) {
        out.d_encoding[g * d..(g + 1) * d].copy_from_slice(de);
        if let (Some(acc), Some(h)) = (out.d_head.as_mut(), dh.as_ref()) {
            acc.add_scaled(h, 1.0);
        }
    }
    Ok(out)
}
