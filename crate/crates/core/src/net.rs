//! Ensemble matching networks: initialization module, stacked solver blocks,
//! decision layer, and the affinity-update and random-sampling variants.
//!
//! A model holds `C` channels and `L` blocks. The initialization module lifts
//! two node-feature sets into a `C x n x n` tensor; each block runs one
//! differentiable solver step per channel against the affinity matrix and
//! mixes channels with a 1x1 convolution; the decision layer turns the
//! concatenated block outputs into a doubly-stochastic assignment matrix.
//! Variants: the update mode recomputes the affinity between blocks from the
//! current features, and the sampled mode touches only a weighted random
//! subset of association rows per solver step, with straight-through
//! gradients into the sampling scores.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;
use std::sync::Arc;

use crate::affinity::{
    build_affinity, feature_distances, pattern_and_deltas, AffinityMatrix, UnaryMode,
};
use crate::error::{Error, Result};
use crate::graph::{rng_stream, streams, MatchPair};
use crate::solvers::QAP_LAYER_EPS;
use crate::tape::{softplus_inverse, NodeId, SampledStepArgs, SteBuf, Tape, Value};

/// Network variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Fixed affinity in every block.
    Eqan,
    /// Affinity recomputed from features between blocks.
    EqanU,
    /// Row-sampled solver steps.
    EqanR,
}

/// Which solver step the blocks unroll.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    /// Proximal update with entropic regularisation.
    Dpgm,
    /// Annealed softmax projection.
    Gagm,
    /// Power-iteration step.
    Sm,
}

/// Hyperparameters of a model; serialised as the checkpoint sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mode: Mode,
    pub solver: SolverKind,
    /// Channel count C.
    pub channels: usize,
    /// Block count L.
    pub blocks: usize,
    /// Input feature dimension d.
    pub feature_dim: usize,
    pub unary: UnaryMode,
    /// Sinkhorn rounds inside each block.
    pub sinkhorn_rounds: usize,
    /// Sampling density for the sampled mode: `N_s = ceil(gamma * n * sqrt n)`
    /// rows per channel.
    pub gamma: f64,
    /// Whether straight-through sampling gradients flow into the features
    /// behind the sampling scores.
    pub ste_through_features: bool,
    /// Decision layer reads all block outputs (default) or only the last.
    pub decision_all: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            mode: Mode::Eqan,
            solver: SolverKind::Dpgm,
            channels: 8,
            blocks: 3,
            feature_dim: 2,
            unary: UnaryMode::Gaussian,
            sinkhorn_rounds: 5,
            gamma: 1.0,
            ste_through_features: true,
            decision_all: true,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.blocks == 0 || self.feature_dim == 0 {
            return Err(Error::Config("channels, blocks and feature_dim must be positive".into()));
        }
        if self.sinkhorn_rounds == 0 {
            return Err(Error::Config("at least one Sinkhorn round is required".into()));
        }
        if self.mode == Mode::EqanR {
            if !(self.gamma.is_finite() && self.gamma > 0.0) {
                return Err(Error::Config(format!(
                    "sampled mode needs gamma > 0, got {}",
                    self.gamma
                )));
            }
            if self.solver != SolverKind::Dpgm {
                return Err(Error::Config(
                    "sampled mode is defined for the proximal solver only".into(),
                ));
            }
        }
        Ok(())
    }

    /// Channel count feeding the decision layer.
    pub fn decision_width(&self) -> usize {
        if self.decision_all {
            (self.blocks + 1) * self.channels
        } else {
            self.channels
        }
    }

    fn solver_scalars_per_block(&self) -> usize {
        match self.solver {
            SolverKind::Dpgm => 2 * self.channels,
            SolverKind::Gagm => self.channels,
            SolverKind::Sm => 0,
        }
    }

    fn head_count(&self) -> usize {
        if self.mode == Mode::EqanU {
            self.blocks.saturating_sub(1)
        } else {
            0
        }
    }
}

/// Per-block learnable state.
#[derive(Debug, Clone)]
pub struct BlockParams {
    /// Raw (pre-softplus) propagation weights, one per channel. For the
    /// annealed solver these are the raw inverse temperatures.
    pub wp_raw: Array1<f64>,
    /// Raw retention weights, one per channel (proximal solver only).
    pub wz_raw: Array1<f64>,
    /// C x C channel-mixing kernel.
    pub mix_w: Array2<f64>,
    pub mix_b: Array1<f64>,
}

/// Learnable affinity-refresh vectors of the update mode.
#[derive(Debug, Clone)]
pub struct AffinityHead {
    /// Pairwise channel weights.
    pub w: Array1<f64>,
    /// Unary channel weights.
    pub u: Array1<f64>,
}

/// Ensemble matching model with all learnable parameters.
///
/// Every parameter mutation rounds through `f32`, so the in-memory state is
/// always exactly representable in the checkpoint format and save/load
/// round-trips are bitwise.
#[derive(Debug, Clone)]
pub struct EqanModel {
    pub spec: ModelSpec,
    /// Raw (pre-softplus) affinity bandwidth.
    pub sigma_raw: f64,
    /// C x 3d initialization kernel.
    pub init_w: Array2<f64>,
    pub init_b: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub heads: Vec<AffinityHead>,
    /// 1 x decision_width decision kernel.
    pub decision_w: Array2<f64>,
    pub decision_b: Array1<f64>,
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

fn lecun_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (3.0 / cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..=limit))
}

impl EqanModel {
    /// Fresh model with seeded initialization: scaled-uniform mixing kernels,
    /// zero biases, solver weights at 0.5 after the positivity map, unit
    /// affinity bandwidth.
    pub fn with_seed(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_stream(seed, streams::MODEL_INIT);
        let (c, l, d) = (spec.channels, spec.blocks, spec.feature_dim);
        let init_w = lecun_uniform(&mut rng, c, 3 * d);
        let mut blocks = Vec::with_capacity(l);
        for block in 0..l {
            let wp = match spec.solver {
                // annealing schedule across blocks as the starting point
                SolverKind::Gagm => {
                    softplus_inverse(crate::solvers::gagm_schedule(0.5, 1.075, block + 1))
                }
                _ => softplus_inverse(0.5),
            };
            blocks.push(BlockParams {
                wp_raw: Array1::from_elem(c, wp),
                wz_raw: Array1::from_elem(c, softplus_inverse(0.5)),
                mix_w: lecun_uniform(&mut rng, c, c),
                mix_b: Array1::zeros(c),
            });
        }
        let heads = (0..spec.head_count())
            .map(|_| AffinityHead { w: Array1::from_elem(c, 0.1), u: Array1::zeros(c) })
            .collect();
        let width = spec.decision_width();
        let decision_w = lecun_uniform(&mut rng, 1, width);
        let mut model = Self {
            spec,
            sigma_raw: softplus_inverse(1.0),
            init_w,
            init_b: Array1::zeros(c),
            blocks,
            heads,
            decision_w,
            decision_b: Array1::zeros(1),
        };
        let flat = model.flatten();
        model.assign_from_flat(&flat)?;
        Ok(model)
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> usize {
        let s = &self.spec;
        let (c, d) = (s.channels, s.feature_dim);
        1 + c * 3 * d
            + c
            + s.blocks * (s.solver_scalars_per_block() + c * c + c)
            + s.head_count() * 2 * c
            + s.decision_width()
            + 1
    }

    /// Parameters in the declared checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.push(self.sigma_raw);
        out.extend(self.init_w.iter());
        out.extend(self.init_b.iter());
        for b in &self.blocks {
            match self.spec.solver {
                SolverKind::Dpgm => {
                    out.extend(b.wp_raw.iter());
                    out.extend(b.wz_raw.iter());
                }
                SolverKind::Gagm => out.extend(b.wp_raw.iter()),
                SolverKind::Sm => {}
            }
            out.extend(b.mix_w.iter());
            out.extend(b.mix_b.iter());
        }
        for h in &self.heads {
            out.extend(h.w.iter());
            out.extend(h.u.iter());
        }
        out.extend(self.decision_w.iter());
        out.extend(self.decision_b.iter());
        out
    }

    /// Overwrite all parameters from a flat slice in checkpoint order,
    /// rounding every value through `f32`.
    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.assign_impl(flat, true)
    }

    /// Overwrite all parameters without the `f32` rounding. Finite-difference
    /// gradient checks need exact 64-bit probe offsets; everywhere else the
    /// rounding variant is the contract.
    pub fn assign_from_flat_exact(&mut self, flat: &[f64]) -> Result<()> {
        self.assign_impl(flat, false)
    }

    fn assign_impl(&mut self, flat: &[f64], round: bool) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Input(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().map(|&x| if round { f32_round(x) } else { x });
        let mut take = |dst: &mut f64| *dst = it.next().expect("length checked");
        take(&mut self.sigma_raw);
        for v in self.init_w.iter_mut() {
            take(v);
        }
        for v in self.init_b.iter_mut() {
            take(v);
        }
        for b in self.blocks.iter_mut() {
            match self.spec.solver {
                SolverKind::Dpgm => {
                    for v in b.wp_raw.iter_mut() {
                        take(v);
                    }
                    for v in b.wz_raw.iter_mut() {
                        take(v);
                    }
                }
                SolverKind::Gagm => {
                    for v in b.wp_raw.iter_mut() {
                        take(v);
                    }
                }
                SolverKind::Sm => {}
            }
            for v in b.mix_w.iter_mut() {
                take(v);
            }
            for v in b.mix_b.iter_mut() {
                take(v);
            }
        }
        for h in self.heads.iter_mut() {
            for v in h.w.iter_mut() {
                take(v);
            }
            for v in h.u.iter_mut() {
                take(v);
            }
        }
        for v in self.decision_w.iter_mut() {
            take(v);
        }
        for v in self.decision_b.iter_mut() {
            take(v);
        }
        Ok(())
    }

    /// Indices (in flat order) of the per-channel solver scalars; used to
    /// freeze them in ablations.
    pub fn solver_param_indices(&self) -> Vec<usize> {
        let s = &self.spec;
        let (c, d) = (s.channels, s.feature_dim);
        let mut idx = Vec::new();
        let mut at = 1 + c * 3 * d + c;
        for _ in 0..s.blocks {
            let scalars = s.solver_scalars_per_block();
            idx.extend(at..at + scalars);
            at += scalars + c * c + c;
        }
        idx
    }

    /// Effective affinity bandwidth after the positivity map.
    pub fn sigma(&self) -> f64 {
        crate::tape::softplus(self.sigma_raw)
    }
}

/// Square, padded, standardized inputs ready for matching. Coordinates are
/// standardized per graph (centroid removed, one global scale); the smaller
/// side is padded with zero-feature, edgeless dummy nodes up to
/// `n = max(n1, n2)`.
#[derive(Debug, Clone)]
pub struct PaddedPair {
    pub f1: Array2<f64>,
    pub f2: Array2<f64>,
    pub edges1: Vec<(usize, usize)>,
    pub edges2: Vec<(usize, usize)>,
    /// Real (non-dummy) node counts.
    pub real1: usize,
    pub real2: usize,
    /// Ground-truth query column per reference row.
    pub gt: Vec<usize>,
    /// Reference rows that carry ground truth.
    pub n_inliers: usize,
}

impl PaddedPair {
    pub fn n(&self) -> usize {
        self.f1.nrows()
    }
}

/// Zero-mean, unit-scale coordinates: subtract the centroid and divide by a
/// single scalar deviation, preserving rotations.
pub fn standardize(points: &Array2<f64>) -> Array2<f64> {
    let (n, d) = points.dim();
    let mut out = points.clone();
    for k in 0..d {
        let mean = out.column(k).sum() / n as f64;
        out.column_mut(k).mapv_inplace(|v| v - mean);
    }
    let var = out.iter().map(|v| v * v).sum::<f64>() / (n * d) as f64;
    let scale = var.sqrt().max(1e-12);
    out.mapv_inplace(|v| v / scale);
    out
}

/// Build the padded, standardized representation of a matching instance.
pub fn pad_pair(pair: &MatchPair) -> Result<PaddedPair> {
    let d = pair.reference.dim();
    if pair.query.dim() != d {
        return Err(Error::Input(format!(
            "feature dims differ: {} vs {}",
            d,
            pair.query.dim()
        )));
    }
    let s1 = standardize(&pair.reference.points);
    let s2 = standardize(&pair.query.points);
    let n = s1.nrows().max(s2.nrows());
    let mut f1 = Array2::zeros((n, d));
    f1.slice_mut(ndarray::s![..s1.nrows(), ..]).assign(&s1);
    let mut f2 = Array2::zeros((n, d));
    f2.slice_mut(ndarray::s![..s2.nrows(), ..]).assign(&s2);
    Ok(PaddedPair {
        f1,
        f2,
        edges1: pair.reference.edges.clone(),
        edges2: pair.query.edges.clone(),
        real1: s1.nrows(),
        real2: s2.nrows(),
        gt: pair.gt.clone(),
        n_inliers: pair.reference.n_inliers,
    })
}

/// The affinity matrix a padded pair induces outside any tape: geometric
/// kernels at bandwidth `sigma` with padding rows zeroed. Matches the traced
/// construction bit-for-bit.
pub fn base_affinity(pair: &PaddedPair, sigma: f64, mode: UnaryMode) -> Result<AffinityMatrix> {
    let g1 = crate::graph::Graph::new(pair.f1.clone(), pair.edges1.clone(), pair.real1)?;
    let g2 = crate::graph::Graph::new(pair.f2.clone(), pair.edges2.clone(), pair.real2)?;
    let mut m = build_affinity(pair.f1.view(), pair.f2.view(), &g1, &g2, sigma, mode)?;
    m.set_real_counts(pair.real1, pair.real2);
    Ok(m)
}

/// Per-call forward settings.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Seed for mask draws in the sampled mode.
    pub mask_seed: u64,
    /// Sinkhorn rounds of the decision layer (5 in training, 50 at
    /// evaluation).
    pub decision_rounds: usize,
    /// Force saturated masks in the sampled mode (tests).
    pub force_full_mask: bool,
}

impl ForwardOptions {
    pub fn train(mask_seed: u64) -> Self {
        Self { mask_seed, decision_rounds: 5, force_full_mask: false }
    }

    pub fn eval(mask_seed: u64) -> Self {
        Self { mask_seed, decision_rounds: 50, force_full_mask: false }
    }
}

/// Tape node ids of every leaf parameter, in block structure.
pub struct ParamNodes {
    pub sigma_raw: NodeId,
    pub init_w: NodeId,
    pub init_b: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub heads: Vec<HeadNodes>,
    pub decision_w: NodeId,
    pub decision_b: NodeId,
}

pub struct BlockNodes {
    pub wp_raw: Vec<NodeId>,
    pub wz_raw: Vec<NodeId>,
    pub mix_w: NodeId,
    pub mix_b: NodeId,
}

pub struct HeadNodes {
    pub w: NodeId,
    pub u: NodeId,
}

/// A completed traced forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    /// Doubly-stochastic assignment probabilities.
    pub q: NodeId,
    /// Pre-normalisation response matrix.
    pub r: NodeId,
    /// Concatenated block features feeding the decision layer.
    pub v_all: NodeId,
    pub params: ParamNodes,
    /// Mask rows held per block (sampled mode; empty otherwise). Bounds the
    /// extra memory of the sampling path.
    pub mask_active: Vec<usize>,
}

/// Plain forward outputs.
pub struct ForwardOutput {
    pub q: Array2<f64>,
    pub r: Array2<f64>,
    pub v_all: Array3<f64>,
}

/// Weighted sampling without replacement: `count` flat positions drawn by
/// exponential-race keys from weights `s` (uniform fallback when all weights
/// vanish); zero-weight positions fill the quota only after every positive
/// weight is taken. Returns strictly increasing rows.
pub fn sample_mask_rows(s: &Array2<f64>, count: usize, rng: &mut impl Rng) -> Vec<u32> {
    let plane = s.len();
    let count = count.min(plane);
    let sf = s.as_slice().expect("contiguous");
    let total: f64 = sf.iter().sum();
    let uniform = if total <= 0.0 {
        log::warn!("sampling scores sum to zero; falling back to uniform");
        true
    } else {
        false
    };
    let mut keyed: Vec<(f64, u32)> = Vec::with_capacity(plane);
    for (r, &w) in sf.iter().enumerate() {
        let u: f64 = rng.gen::<f64>().max(1e-300);
        let q = if uniform { 1.0 } else { w / total };
        let key = if q > 0.0 { u.ln() / q } else { -1e300 + u };
        keyed.push((key, r as u32));
    }
    keyed.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut rows: Vec<u32> = keyed[..count].iter().map(|&(_, r)| r).collect();
    rows.sort_unstable();
    rows
}

/// Sampled rows per channel for one sampling stage: `ceil(gamma * n * sqrt n)`
/// positions drawn independently per channel from shared scores.
pub fn sample_mask(
    s: &Array2<f64>,
    gamma: f64,
    channels: usize,
    rng: &mut impl Rng,
) -> Vec<Arc<Vec<u32>>> {
    let n = s.nrows();
    let n_s = (gamma * n as f64 * (n as f64).sqrt()).ceil() as usize;
    (0..channels).map(|_| Arc::new(sample_mask_rows(s, n_s, rng))).collect()
}

struct TapeAffinity {
    unary: NodeId,
    pairwise: NodeId,
}

impl EqanModel {
    fn push_params(&self, tape: &mut Tape) -> ParamNodes {
        let c = self.spec.channels;
        let sigma_raw = tape.leaf_scalar(self.sigma_raw);
        let init_w = tape.leaf_matrix(self.init_w.clone());
        let init_b = tape.leaf_vector(self.init_b.clone());
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockNodes {
                wp_raw: (0..c).map(|ch| tape.leaf_scalar(b.wp_raw[ch])).collect(),
                wz_raw: (0..c).map(|ch| tape.leaf_scalar(b.wz_raw[ch])).collect(),
                mix_w: tape.leaf_matrix(b.mix_w.clone()),
                mix_b: tape.leaf_vector(b.mix_b.clone()),
            })
            .collect();
        let heads = self
            .heads
            .iter()
            .map(|h| HeadNodes {
                w: tape.leaf_vector(h.w.clone()),
                u: tape.leaf_vector(h.u.clone()),
            })
            .collect();
        ParamNodes {
            sigma_raw,
            init_w,
            init_b,
            blocks,
            heads,
            decision_w: tape.leaf_matrix(self.decision_w.clone()),
            decision_b: tape.leaf_vector(self.decision_b.clone()),
        }
    }

    fn input_tensor(&self, pair: &PaddedPair) -> Result<Array3<f64>> {
        let n = pair.n();
        let d = self.spec.feature_dim;
        if pair.f1.ncols() != d {
            return Err(Error::Input(format!(
                "model expects {d}-dimensional features, got {}",
                pair.f1.ncols()
            )));
        }
        let mut vhat = Array3::zeros((3 * d, n, n));
        for i in 0..n {
            for j in 0..n {
                for k in 0..d {
                    vhat[(k, i, j)] = (pair.f1[(i, k)] - pair.f2[(j, k)]).abs();
                    vhat[(d + k, i, j)] = pair.f1[(i, k)];
                    vhat[(2 * d + k, i, j)] = pair.f2[(j, k)];
                }
            }
        }
        Ok(vhat)
    }

    fn base_tape_affinity(
        &self,
        tape: &mut Tape,
        pair: &PaddedPair,
        delta_sq: &Arc<Vec<f64>>,
        sigma: NodeId,
    ) -> Result<TapeAffinity> {
        let dists = feature_distances(pair.f1.view(), pair.f2.view())?;
        let unary = match self.spec.unary {
            UnaryMode::Gaussian => {
                let dist_sq = dists.mapv(|d| d * d);
                tape.gauss_unary(sigma, dist_sq, pair.real1, pair.real2)?
            }
            UnaryMode::Norm => {
                let mut masked = dists;
                for i in 0..masked.nrows() {
                    for j in 0..masked.ncols() {
                        if i >= pair.real1 || j >= pair.real2 {
                            masked[(i, j)] = 0.0;
                        }
                    }
                }
                tape.leaf_matrix(masked)
            }
        };
        let pairwise = tape.pairwise_kernel(sigma, Arc::clone(delta_sq))?;
        Ok(TapeAffinity { unary, pairwise })
    }

    /// Traced forward pass over one padded pair.
    pub fn forward_tape(&self, pair: &PaddedPair, opts: &ForwardOptions) -> Result<ForwardPass> {
        self.spec.validate()?;
        let n = pair.n();
        let c = self.spec.channels;
        let mut tape = Tape::new();
        let params = self.push_params(&mut tape);
        let sigma = tape.softplus(params.sigma_raw)?;
        let (pattern, delta_sq) = pattern_and_deltas(
            pair.f1.view(),
            pair.f2.view(),
            &pair.edges1,
            &pair.edges2,
            n,
            n,
        )?;
        let base = self.base_tape_affinity(&mut tape, pair, &delta_sq, sigma)?;
        let vhat = {
            let t = self.input_tensor(pair)?;
            tape.leaf_tensor(t)
        };
        let pre0 = tape.conv1x1(params.init_w, params.init_b, vhat)?;
        let v0 = tape.relu(pre0)?;
        let mut v_tensors = vec![v0];
        let mut mask_active = Vec::new();
        let mut mask_rng = rng_stream(opts.mask_seed, streams::MASK);
        // sampled-mode state carried across blocks
        let mut prev_blend: Vec<NodeId> = Vec::new();
        let mut prev_vtilde: Option<NodeId> = None;
        for (l, bn) in params.blocks.iter().enumerate() {
            let vin = *v_tensors.last().expect("at least the init tensor");
            // affinity for this block: refreshed from features in update mode
            let aff = if self.spec.mode == Mode::EqanU && l > 0 {
                let head = &params.heads[l - 1];
                let unary = tape.unary_from_features(vin, head.u, pair.real1, pair.real2)?;
                let pairwise = tape.pairwise_from_features(vin, head.w, Arc::clone(&pattern))?;
                TapeAffinity { unary, pairwise }
            } else {
                TapeAffinity { unary: base.unary, pairwise: base.pairwise }
            };
            // sampled mode: draw this block's masks from the anchor scores.
            // A saturated mask covers every position with probability one, so
            // the draw carries no score gradient; skipping the
            // straight-through wiring there keeps gradients equal to the
            // dense model's.
            let sampled = if self.spec.mode == Mode::EqanR {
                let n_s = (self.spec.gamma * n as f64 * (n as f64).sqrt()).ceil() as usize;
                if opts.force_full_mask || n_s >= n * n {
                    let all: Arc<Vec<u32>> = Arc::new((0..(n * n) as u32).collect());
                    mask_active.push(c * n * n);
                    Some((None, vec![all; c]))
                } else {
                    let ste = SteBuf::new(n * n);
                    let score = match prev_vtilde {
                        None => base.unary,
                        Some(vt) => tape.mean_channels(vt)?,
                    };
                    let anchor =
                        tape.sample_anchor(score, Rc::clone(&ste), self.spec.ste_through_features)?;
                    let score_val = tape.value(anchor).as_matrix()?.clone();
                    let rows = sample_mask(&score_val, self.spec.gamma, c, &mut mask_rng);
                    mask_active.push(rows.iter().map(|r| r.len()).sum());
                    Some((Some(ste), rows))
                }
            } else {
                None
            };
            let mut channels = Vec::with_capacity(c);
            let mut blends = Vec::with_capacity(c);
            for ch in 0..c {
                let slice = tape.slice_channel(vin, ch)?;
                let z = tape.add_const(slice, QAP_LAYER_EPS)?;
                let out = match (&sampled, self.spec.solver) {
                    (Some((ste, rows)), SolverKind::Dpgm) => {
                        let wp = tape.softplus(bn.wp_raw[ch])?;
                        let wz = tape.softplus(bn.wz_raw[ch])?;
                        let prev = if l == 0 { z } else { prev_blend[ch] };
                        let blend = tape.sampled_step(SampledStepArgs {
                            z,
                            prev,
                            unary: aff.unary,
                            pairwise: aff.pairwise,
                            wp,
                            wz,
                            pattern: Arc::clone(&pattern),
                            rows: Arc::clone(&rows[ch]),
                            ste: ste.as_ref().map(Rc::clone),
                        })?;
                        blends.push(blend);
                        tape.sinkhorn(blend, self.spec.sinkhorn_rounds)?
                    }
                    (None, SolverKind::Dpgm) => {
                        let wp = tape.softplus(bn.wp_raw[ch])?;
                        let wz = tape.softplus(bn.wz_raw[ch])?;
                        let mv = tape.matvec(aff.unary, aff.pairwise, z, Arc::clone(&pattern))?;
                        let a = tape.scale_by(mv, wp)?;
                        let lz = tape.ln(z)?;
                        let b = tape.scale_by(lz, wz)?;
                        let s = tape.add(a, b)?;
                        let y = tape.exp(s)?;
                        tape.sinkhorn(y, self.spec.sinkhorn_rounds)?
                    }
                    (None, SolverKind::Gagm) => {
                        let beta = tape.softplus(bn.wp_raw[ch])?;
                        let mv = tape.matvec(aff.unary, aff.pairwise, z, Arc::clone(&pattern))?;
                        let a = tape.scale_by(mv, beta)?;
                        let y = tape.exp(a)?;
                        tape.sinkhorn(y, self.spec.sinkhorn_rounds)?
                    }
                    (None, SolverKind::Sm) => {
                        let mv = tape.matvec(aff.unary, aff.pairwise, z, Arc::clone(&pattern))?;
                        tape.l2_normalize(mv)?
                    }
                    (Some(_), _) => unreachable!("validated: sampled mode is proximal-only"),
                };
                channels.push(out);
            }
            if sampled.is_some() {
                prev_blend = blends;
            }
            let vtilde = tape.stack_channels(&channels)?;
            prev_vtilde = Some(vtilde);
            let mixed = tape.conv1x1(bn.mix_w, bn.mix_b, vtilde)?;
            let vout = tape.relu(mixed)?;
            v_tensors.push(vout);
        }
        let v_all = tape.concat_channels(&v_tensors)?;
        let decision_in = if self.spec.decision_all {
            v_all
        } else {
            *v_tensors.last().expect("nonempty")
        };
        let dec = tape.conv1x1(params.decision_w, params.decision_b, decision_in)?;
        let logits = tape.slice_channel(dec, 0)?;
        let r = tape.exp(logits)?;
        let q = tape.sinkhorn(r, opts.decision_rounds)?;
        Ok(ForwardPass { tape, q, r, v_all, params, mask_active })
    }

    /// Untraced forward convenience: assignment probabilities, responses and
    /// stacked features.
    pub fn forward(&self, pair: &PaddedPair, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let pass = self.forward_tape(pair, opts)?;
        Ok(ForwardOutput {
            q: pass.tape.value(pass.q).as_matrix()?.clone(),
            r: pass.tape.value(pass.r).as_matrix()?.clone(),
            v_all: pass.tape.value(pass.v_all).as_tensor()?.clone(),
        })
    }

    /// Collect parameter gradients from a backpropagated pass, in flat
    /// checkpoint order; parameters the loss never touched yield zeros.
    pub fn collect_grads(&self, pass: &ForwardPass) -> Vec<f64> {
        let tape = &pass.tape;
        let p = &pass.params;
        let mut out = Vec::with_capacity(self.param_count());
        let scalar = |id: NodeId| -> f64 {
            tape.grad(id).map_or(0.0, |g| g.as_scalar().expect("scalar grad"))
        };
        let push_all = |out: &mut Vec<f64>, id: NodeId, len: usize| match tape.grad(id) {
            None => out.extend(std::iter::repeat(0.0).take(len)),
            Some(Value::Vector(v)) => out.extend(v.iter()),
            Some(Value::Matrix(m)) => out.extend(m.iter()),
            Some(_) => unreachable!("parameter grads are vectors or matrices"),
        };
        out.push(scalar(p.sigma_raw));
        push_all(&mut out, p.init_w, self.init_w.len());
        push_all(&mut out, p.init_b, self.init_b.len());
        for (bn, b) in p.blocks.iter().zip(&self.blocks) {
            match self.spec.solver {
                SolverKind::Dpgm => {
                    out.extend(bn.wp_raw.iter().map(|&id| scalar(id)));
                    out.extend(bn.wz_raw.iter().map(|&id| scalar(id)));
                }
                SolverKind::Gagm => out.extend(bn.wp_raw.iter().map(|&id| scalar(id))),
                SolverKind::Sm => {}
            }
            push_all(&mut out, bn.mix_w, b.mix_w.len());
            push_all(&mut out, bn.mix_b, b.mix_b.len());
        }
        for (hn, h) in p.heads.iter().zip(&self.heads) {
            push_all(&mut out, hn.w, h.w.len());
            push_all(&mut out, hn.u, h.u.len());
        }
        push_all(&mut out, p.decision_w, self.decision_w.len());
        push_all(&mut out, p.decision_b, self.decision_b.len());
        out
    }
}

// ---- checkpoint format ----

const MAGIC: &[u8; 4] = b"EQAN";
const VERSION: u32 = 1;

fn mode_code(m: Mode) -> u8 {
    match m {
        Mode::Eqan => 0,
        Mode::EqanU => 1,
        Mode::EqanR => 2,
    }
}

fn solver_code(s: SolverKind) -> u8 {
    match s {
        SolverKind::Dpgm => 0,
        SolverKind::Gagm => 1,
        SolverKind::Sm => 2,
    }
}

fn unary_code(u: UnaryMode) -> u8 {
    match u {
        UnaryMode::Norm => 0,
        UnaryMode::Gaussian => 1,
    }
}

fn checkpoint_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.display().to_string(), offset, msg: msg.into() }
}

impl EqanModel {
    /// Write the binary checkpoint (44-byte header + little-endian `f32`
    /// parameters in declared order) and a JSON hyperparameter sidecar at
    /// `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let flat = self.flatten();
        let mut buf = Vec::with_capacity(44 + flat.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.spec.blocks as u32).to_le_bytes());
        buf.extend_from_slice(&(self.spec.channels as u32).to_le_bytes());
        buf.extend_from_slice(&(self.spec.feature_dim as u32).to_le_bytes());
        buf.push(mode_code(self.spec.mode));
        buf.push(solver_code(self.spec.solver));
        buf.push(unary_code(self.spec.unary));
        let mut flags = 0u8;
        if self.spec.ste_through_features {
            flags |= 1;
        }
        if self.spec.decision_all {
            flags |= 2;
        }
        buf.push(flags);
        buf.extend_from_slice(&(self.spec.sinkhorn_rounds as u32).to_le_bytes());
        buf.extend_from_slice(&self.spec.gamma.to_le_bytes());
        buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in &flat {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        let sidecar = serde_json::to_string_pretty(&self.spec)?;
        std::fs::write(sidecar_path(path), sidecar)?;
        Ok(())
    }

    /// Load a checkpoint saved by [`EqanModel::save`]. The binary header is
    /// authoritative; a present sidecar must agree with it.
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut data = Vec::new();
        f.read_to_end(&mut data)?;
        let need = |off: usize, len: usize| -> Result<&[u8]> {
            data.get(off..off + len)
                .ok_or_else(|| checkpoint_err(path, off as u64, "file truncated"))
        };
        if need(0, 4)? != MAGIC {
            return Err(checkpoint_err(path, 0, "bad magic"));
        }
        let u32_at = |off: usize| -> Result<u32> {
            Ok(u32::from_le_bytes(need(off, 4)?.try_into().expect("4 bytes")))
        };
        let version = u32_at(4)?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                path: path.display().to_string(),
                found: version,
                expected: VERSION,
            });
        }
        let blocks = u32_at(8)? as usize;
        let channels = u32_at(12)? as usize;
        let feature_dim = u32_at(16)? as usize;
        let mode = match need(20, 1)?[0] {
            0 => Mode::Eqan,
            1 => Mode::EqanU,
            2 => Mode::EqanR,
            x => return Err(checkpoint_err(path, 20, format!("unknown mode code {x}"))),
        };
        let solver = match need(21, 1)?[0] {
            0 => SolverKind::Dpgm,
            1 => SolverKind::Gagm,
            2 => SolverKind::Sm,
            x => return Err(checkpoint_err(path, 21, format!("unknown solver code {x}"))),
        };
        let unary = match need(22, 1)?[0] {
            0 => UnaryMode::Norm,
            1 => UnaryMode::Gaussian,
            x => return Err(checkpoint_err(path, 22, format!("unknown unary code {x}"))),
        };
        let flags = need(23, 1)?[0];
        let sinkhorn_rounds = u32_at(24)? as usize;
        let gamma = f64::from_le_bytes(need(28, 8)?.try_into().expect("8 bytes"));
        let count = u64::from_le_bytes(need(36, 8)?.try_into().expect("8 bytes")) as usize;
        let spec = ModelSpec {
            mode,
            solver,
            channels,
            blocks,
            feature_dim,
            unary,
            sinkhorn_rounds,
            gamma,
            ste_through_features: flags & 1 != 0,
            decision_all: flags & 2 != 0,
        };
        spec.validate().map_err(|e| checkpoint_err(path, 8, format!("bad header: {e}")))?;
        let mut model = EqanModel::with_seed(spec.clone(), 0)?;
        if count != model.param_count() {
            return Err(checkpoint_err(
                path,
                36,
                format!("header declares {count} parameters, shape needs {}", model.param_count()),
            ));
        }
        let mut flat = Vec::with_capacity(count);
        for i in 0..count {
            let off = 44 + 4 * i;
            let bytes: [u8; 4] = need(off, 4)?.try_into().expect("4 bytes");
            let v = f32::from_le_bytes(bytes);
            if !v.is_finite() {
                return Err(checkpoint_err(path, off as u64, "non-finite parameter"));
            }
            flat.push(v as f64);
        }
        if data.len() > 44 + 4 * count {
            return Err(checkpoint_err(path, (44 + 4 * count) as u64, "trailing bytes"));
        }
        model.assign_from_flat(&flat)?;
        let sidecar = sidecar_path(path);
        if sidecar.exists() {
            let text = std::fs::read_to_string(&sidecar)?;
            let side: ModelSpec = serde_json::from_str(&text)?;
            if side != spec {
                return Err(checkpoint_err(path, 0, "sidecar disagrees with binary header"));
            }
        }
        Ok(model)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}
