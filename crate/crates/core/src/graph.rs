//! Synthetic geometric graphs for matching experiments.
//!
//! A reference graph is drawn uniformly in `[-1, 1]^d` and wired by symmetrised
//! k-nearest-neighbour edges. A query graph is produced from it by Gaussian
//! coordinate noise, appended uniform outliers, a node shuffle, and a rebuilt
//! k-NN topology; the returned ground truth maps each reference node to its
//! shuffled position.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Stream ids for [`rng_stream`]; one per distinct stochastic purpose so that
/// draws made for one purpose never overlap another.
pub mod streams {
    pub const REFERENCE: u64 = 0;
    pub const PERTURB: u64 = 1;
    pub const MASK: u64 = 2;
    pub const MODEL_INIT: u64 = 3;
    pub const ANGLE: u64 = 4;
}

/// Seeded generator on an explicit stream. All stochastic operations in the
/// crate draw from one of these, so a single experiment seed reproduces
/// everything bit-for-bit.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent child seed from a base seed and two indices
/// (e.g. iteration and batch slot). Deterministic and collision-resistant
/// for the index ranges used here.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(base ^ a.wrapping_mul(0x9e3779b97f4a7c15)) ^ b.wrapping_mul(0xc2b2ae3d27d4eb4f))
}

/// Undirected geometric graph. Edges are canonical: stored once as `(i, j)`
/// with `i < j`, sorted, no self-loops, no duplicates.
///
/// `n_inliers` counts the non-outlier nodes. Generator outputs place inliers
/// first; shuffled query graphs from [`perturb`] instead locate their inliers
/// through the returned ground-truth vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub points: Array2<f64>,
    pub edges: Vec<(usize, usize)>,
    pub n_inliers: usize,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    points: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    n_inliers: usize,
}

impl Graph {
    /// Validates and canonicalises (sorts, deduplicates, orients) the edge list.
    pub fn new(points: Array2<f64>, edges: Vec<(usize, usize)>, n_inliers: usize) -> Result<Self> {
        let n = points.nrows();
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("graph points must be finite".into()));
        }
        if n_inliers > n {
            return Err(Error::Input(format!(
                "n_inliers {n_inliers} exceeds node count {n}"
            )));
        }
        let mut canonical = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Input(format!("self-loop on node {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::Input(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            canonical.insert((a.min(b), a.max(b)));
        }
        Ok(Graph {
            points,
            edges: canonical.into_iter().collect(),
            n_inliers,
        })
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Serialize for Graph {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = GraphRepr {
            points: self.points.rows().into_iter().map(|r| r.to_vec()).collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            n_inliers: self.n_inliers,
        };
        repr.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Graph {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = GraphRepr::deserialize(de)?;
        let n = repr.points.len();
        let d = repr.points.first().map_or(0, Vec::len);
        if repr.points.iter().any(|row| row.len() != d) {
            return Err(serde::de::Error::custom("ragged point rows"));
        }
        let flat: Vec<f64> = repr.points.into_iter().flatten().collect();
        let points = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| serde::de::Error::custom(e.to_string()))?;
        let edges = repr.edges.iter().map(|e| (e[0], e[1])).collect();
        Graph::new(points, edges, repr.n_inliers).map_err(serde::de::Error::custom)
    }
}

/// Parameters of the synthetic pair generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Inlier count of the reference graph.
    pub n_in: usize,
    /// Outliers appended to the query graph.
    pub n_out: usize,
    /// Std-dev of the Gaussian coordinate noise on query inliers.
    pub sigma: f64,
    /// Point dimension (2 or 3).
    pub dim: usize,
    /// Neighbours per node for the k-NN topology.
    pub k: usize,
    pub seed: u64,
    /// Upper bound (radians) of the uniform random rotation applied to the
    /// query after perturbation; 0 disables it. Training with a nonzero
    /// bound forces the model off absolute coordinates and onto the
    /// rotation-invariant edge geometry. 2-d only.
    #[serde(default)]
    pub rotation_max: f64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 {
            return Err(Error::Config("n_in must be at least 1".into()));
        }
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::Config(format!("dim must be 2 or 3, got {}", self.dim)));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.k >= self.n_in + self.n_out {
            return Err(Error::Config(format!(
                "k = {} must be smaller than the query node count {}",
                self.k,
                self.n_in + self.n_out
            )));
        }
        if !self.rotation_max.is_finite() || self.rotation_max < 0.0 {
            return Err(Error::Config(format!(
                "rotation_max must be finite and >= 0, got {}",
                self.rotation_max
            )));
        }
        if self.rotation_max > 0.0 && self.dim != 2 {
            return Err(Error::Config("rotation_max needs 2-d points".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        GenConfig { seed, ..self.clone() }
    }
}

/// A reference/query pair with ground truth: `gt[i]` is the query index of
/// reference node `i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchPair {
    pub reference: Graph,
    pub query: Graph,
    pub gt: Vec<usize>,
}

/// Symmetrised k-nearest-neighbour edges (union over directions). Distance
/// ties break toward the lower node index. Requires `1 <= k < n`.
pub fn knn_edges(points: ArrayView2<'_, f64>, k: usize) -> Result<Vec<(usize, usize)>> {
    let n = points.nrows();
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n <= k {
        return Err(Error::Config(format!("k = {k} requires more than {k} nodes, got {n}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("points must be finite".into()));
    }
    let mut edges = BTreeSet::new();
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            cand.push((d2, j));
        }
        cand.sort_unstable_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, j) in cand.iter().take(k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    Ok(edges.into_iter().collect())
}

/// Reference graph: `n_in` points uniform in `[-1, 1]^d`, k-NN topology.
/// `k` is clamped to `n_in - 1` so degenerate single-node graphs are legal.
pub fn generate_reference(cfg: &GenConfig) -> Result<Graph> {
    cfg.validate()?;
    let mut rng = rng_stream(cfg.seed, streams::REFERENCE);
    let mut points = Array2::zeros((cfg.n_in, cfg.dim));
    for v in points.iter_mut() {
        *v = rng.gen_range(-1.0..=1.0);
    }
    let k_eff = cfg.k.min(cfg.n_in.saturating_sub(1));
    let edges = if k_eff == 0 {
        Vec::new()
    } else {
        knn_edges(points.view(), k_eff)?
    };
    Graph::new(points, edges, cfg.n_in)
}

/// Query graph from a reference: noisy inlier copies plus uniform outliers,
/// node order shuffled. The inlier copies inherit the reference topology
/// (relabelled through the shuffle); each outlier joins by connecting to its
/// k nearest query nodes. Returns the graph and the ground-truth positions of
/// the reference nodes.
pub fn perturb(reference: &Graph, cfg: &GenConfig) -> Result<(Graph, Vec<usize>)> {
    cfg.validate()?;
    if reference.n() != cfg.n_in {
        return Err(Error::Config(format!(
            "reference has {} nodes but cfg.n_in is {}",
            reference.n(),
            cfg.n_in
        )));
    }
    if reference.dim() != cfg.dim {
        return Err(Error::Config(format!(
            "reference dim {} does not match cfg.dim {}",
            reference.dim(),
            cfg.dim
        )));
    }
    let n_in = cfg.n_in;
    let n = n_in + cfg.n_out;
    let mut rng = rng_stream(cfg.seed, streams::PERTURB);

    let mut stacked = Array2::zeros((n, cfg.dim));
    if cfg.sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.sigma).expect("validated sigma");
        for i in 0..n_in {
            for (dst, src) in stacked.row_mut(i).iter_mut().zip(reference.points.row(i)) {
                *dst = src + noise.sample(&mut rng);
            }
        }
    } else {
        for i in 0..n_in {
            stacked.row_mut(i).assign(&reference.points.row(i));
        }
    }
    for i in n_in..n {
        for v in stacked.row_mut(i).iter_mut() {
            *v = rng.gen_range(-1.0..=1.0);
        }
    }

    // order[p] = original index placed at shuffled position p
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut points = Array2::zeros((n, cfg.dim));
    let mut inverse = vec![0usize; n];
    for (p, &orig) in order.iter().enumerate() {
        points.row_mut(p).assign(&stacked.row(orig));
        inverse[orig] = p;
    }
    let gt = inverse[..n_in].to_vec();

    let mut edge_set = BTreeSet::new();
    for &(i, j) in &reference.edges {
        let (a, b) = (inverse[i], inverse[j]);
        edge_set.insert((a.min(b), a.max(b)));
    }
    // Outliers enter the neighborhood rule like any node: each connects to
    // its k nearest query nodes. Inherited inlier edges stay untouched.
    let k_eff = cfg.k.min(n.saturating_sub(1));
    if k_eff > 0 {
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
        for orig in n_in..n {
            let p = inverse[orig];
            cand.clear();
            for q in 0..n {
                if q == p {
                    continue;
                }
                let d2: f64 = points
                    .row(p)
                    .iter()
                    .zip(points.row(q).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                cand.push((d2, q));
            }
            cand.sort_unstable_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            for &(_, q) in cand.iter().take(k_eff) {
                edge_set.insert((p.min(q), p.max(q)));
            }
        }
    }
    let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();
    Ok((Graph::new(points, edges, n_in)?, gt))
}

/// Generate a full reference/query pair from one config. With a nonzero
/// `rotation_max` the query is additionally spun by a uniform random angle
/// from `[0, rotation_max]`.
pub fn make_pair(cfg: &GenConfig) -> Result<MatchPair> {
    let reference = generate_reference(cfg)?;
    let (mut query, gt) = perturb(&reference, cfg)?;
    if cfg.rotation_max > 0.0 {
        let mut rng = rng_stream(cfg.seed, streams::ANGLE);
        let theta = rng.gen_range(0.0..=cfg.rotation_max);
        query = rotate(&query, theta)?;
    }
    Ok(MatchPair { reference, query, gt })
}

/// Rotate 2-d points by `theta` radians about the origin. Edges and inlier
/// bookkeeping are untouched.
pub fn rotate(g: &Graph, theta: f64) -> Result<Graph> {
    if g.dim() != 2 {
        return Err(Error::UnsupportedDim(format!(
            "rotation is defined for 2-d points, got {}-d",
            g.dim()
        )));
    }
    let (c, s) = (theta.cos(), theta.sin());
    let mut points = Array2::zeros((g.n(), 2));
    for (mut dst, src) in points.rows_mut().into_iter().zip(g.points.rows()) {
        dst[0] = c * src[0] - s * src[1];
        dst[1] = s * src[0] + c * src[1];
    }
    Ok(Graph {
        points,
        edges: g.edges.clone(),
        n_inliers: g.n_inliers,
    })
}
