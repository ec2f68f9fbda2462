//! Evaluation harness: classical solver baselines, the naive averaging
//! ensemble, robustness and sampling sweeps, ablation variants, convergence
//! diagnostics, and the reproducible CSV formats they emit.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::{AffinityMatrix, UnaryMode};
use crate::assign::{graph_similarity, hungarian, matching_accuracy};
use crate::error::{Error, Result};
use crate::graph::{derive_seed, make_pair, rng_stream, rotate, streams, GenConfig, MatchPair};
use crate::net::{
    base_affinity, pad_pair, EqanModel, ForwardOptions, Mode, ModelSpec, PaddedPair, SolverKind,
};
use crate::solvers::{
    dpgm_solve, dpgm_step, gagm_solve, kl_descent_inner, objective, sm_solve, uniform_start,
    SolverParams,
};
use crate::tape::{CE_CLAMP_HI, CE_CLAMP_LO};
use crate::train::{cross_entropy_loss, train, TrainConfig, TrainableModel};

/// 64-bit FNV-1a over raw bytes; the stable hash behind config fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hex fingerprint of any serializable configuration, via its JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(format!("{:016x}", fnv1a64(serde_json::to_string(value)?.as_bytes())))
}

/// Hex fingerprint of a model: its spec plus every stored parameter bit.
pub fn model_fingerprint(model: &EqanModel) -> Result<String> {
    let mut bytes = serde_json::to_vec(&model.spec)?;
    for p in model.flatten() {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

/// Build the global worker pool from the `EQAN_THREADS` environment
/// variable; unset or unparsable values keep the default (all cores). Only
/// the first initialization in a process takes effect.
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("EQAN_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Untrained solver baseline: one classical relaxation run on the shared
/// standardized/padded affinity, rounded by the Hungarian method.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassicalConfig {
    pub solver: SolverKind,
    /// Proximal step size (also the annealing start for the graduated
    /// solver).
    pub beta: f64,
    /// Entropy weight of the proximal solver.
    pub lambda: f64,
    pub iters: usize,
    pub sinkhorn_rounds: usize,
    /// Affinity bandwidth.
    pub sigma: f64,
    pub unary: UnaryMode,
    /// Annealing growth factor of the graduated solver.
    pub growth: f64,
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Dpgm,
            beta: 0.5,
            lambda: 1.0,
            iters: 30,
            sinkhorn_rounds: 5,
            sigma: 1.0,
            unary: UnaryMode::Gaussian,
            growth: 1.075,
        }
    }
}

impl ClassicalConfig {
    pub fn validate(&self) -> Result<()> {
        SolverParams::from_beta_lambda(self.beta, self.lambda)?;
        if self.iters == 0 || self.sinkhorn_rounds == 0 {
            return Err(Error::Config("solver and Sinkhorn iterations must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("bandwidth must be positive, got {}", self.sigma)));
        }
        if !(self.growth >= 1.0 && self.growth.is_finite()) {
            return Err(Error::Config(format!("annealing growth must be >= 1, got {}", self.growth)));
        }
        Ok(())
    }

    /// Relaxed assignment plane of the configured solver.
    pub fn plane(&self, m: &AffinityMatrix) -> Result<Vec<f64>> {
        match self.solver {
            SolverKind::Dpgm => {
                dpgm_solve(m, self.beta, self.lambda, self.iters, self.sinkhorn_rounds)
            }
            SolverKind::Gagm => {
                gagm_solve(m, self.beta, self.growth, self.iters, self.sinkhorn_rounds)
            }
            SolverKind::Sm => sm_solve(m, self.iters),
        }
    }
}

/// Independent classical solver runs with constants jittered around a base
/// configuration, combined only at the end by learnable scalar weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NaiveModel {
    pub base: ClassicalConfig,
    /// Combination weights, one per run; the only learnable parameters.
    pub weights: Vec<f64>,
    /// Per-run step sizes, jittered up to ten percent off the base.
    pub betas: Vec<f64>,
    /// Per-run entropy weights, jittered likewise.
    pub lambdas: Vec<f64>,
}

impl NaiveModel {
    pub fn with_seed(base: ClassicalConfig, channels: usize, seed: u64) -> Result<Self> {
        base.validate()?;
        if channels == 0 {
            return Err(Error::Config("averaging ensemble needs at least one run".into()));
        }
        let mut rng = rng_stream(seed, streams::MODEL_INIT);
        let betas =
            (0..channels).map(|_| base.beta * (1.0 + 0.1 * rng.gen_range(-1.0..1.0))).collect();
        let lambdas =
            (0..channels).map(|_| base.lambda * (1.0 + 0.1 * rng.gen_range(-1.0..1.0))).collect();
        let weights = vec![1.0 / channels as f64; channels];
        Ok(Self { base, weights, betas, lambdas })
    }

    fn planes(&self, padded: &PaddedPair) -> Result<Vec<Vec<f64>>> {
        let m = base_affinity(padded, self.base.sigma, self.base.unary)?;
        self.betas
            .iter()
            .zip(&self.lambdas)
            .map(|(&beta, &lambda)| {
                let cfg = ClassicalConfig { beta, lambda, ..self.base.clone() };
                cfg.plane(&m)
            })
            .collect()
    }

    /// Weighted sum of the run outputs.
    pub fn combined_plane(&self, padded: &PaddedPair) -> Result<Array2<f64>> {
        let n = padded.n();
        let planes = self.planes(padded)?;
        let mut q = vec![0.0; n * n];
        for (w, plane) in self.weights.iter().zip(&planes) {
            for (qr, zr) in q.iter_mut().zip(plane) {
                *qr += w * zr;
            }
        }
        Array2::from_shape_vec((n, n), q).map_err(|e| Error::Input(e.to_string()))
    }
}

impl TrainableModel for NaiveModel {
    fn params(&self) -> Vec<f64> {
        self.weights.clone()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.weights.len() {
            return Err(Error::Input(format!(
                "expected {} weights, got {}",
                self.weights.len(),
                flat.len()
            )));
        }
        self.weights = flat.to_vec();
        Ok(())
    }

    fn loss_and_grad(&self, pair: &MatchPair, _seed: u64) -> Result<(f64, Vec<f64>)> {
        let padded = pad_pair(pair)?;
        let n = padded.n();
        let planes = self.planes(&padded)?;
        let mut q = vec![0.0; n * n];
        for (w, plane) in self.weights.iter().zip(&planes) {
            for (qr, zr) in q.iter_mut().zip(plane) {
                *qr += w * zr;
            }
        }
        let qm = Array2::from_shape_vec((n, n), q).map_err(|e| Error::Input(e.to_string()))?;
        let loss = cross_entropy_loss(qm.view(), &padded.gt, padded.n_inliers)?;
        // the prediction is linear in the weights, so the chain rule stops
        // at the clamped cross-entropy derivative
        let mut grads = vec![0.0; self.weights.len()];
        for i in 0..padded.n_inliers {
            for j in 0..n {
                let raw = qm[(i, j)];
                if !(CE_CLAMP_LO..=CE_CLAMP_HI).contains(&raw) {
                    continue;
                }
                let dq =
                    if j == padded.gt[i] { -1.0 / raw } else { 1.0 / (1.0 - raw) };
                for (g, plane) in grads.iter_mut().zip(&planes) {
                    *g += dq * plane[i * n + j];
                }
            }
        }
        Ok((loss, grads))
    }

    fn accuracy(&self, pair: &MatchPair, _seed: u64) -> Result<f64> {
        let padded = pad_pair(pair)?;
        let q = self.combined_plane(&padded)?;
        let flat =
            q.as_slice().ok_or_else(|| Error::Input("combined plane not contiguous".into()))?;
        let perm = hungarian(flat, padded.n())?;
        matching_accuracy(&perm, &padded.gt, padded.n_inliers)
    }
}

/// Hard assignment with its soft context and scores.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// `perm[i] = j`: padded reference row `i` takes query column `j`.
    pub perm: Vec<usize>,
    /// Soft assignment over the padded square.
    pub q: Array2<f64>,
    /// Response matrix feeding the similarity score.
    pub r: Array2<f64>,
    pub accuracy: f64,
    /// Trace similarity of `q` against `r`.
    pub similarity: f64,
}

/// Anything that can score a pair: a classical single run, the averaging
/// ensemble, or a trained network.
#[derive(Debug, Clone)]
pub enum Matcher {
    Classical(ClassicalConfig),
    Naive(NaiveModel),
    Learned(EqanModel),
}

impl Matcher {
    /// Standardize, pad, score and round one pair. `seed` feeds stochastic
    /// forward passes; classical runs ignore it.
    pub fn match_pair(&self, pair: &MatchPair, seed: u64) -> Result<MatchResult> {
        let padded = pad_pair(pair)?;
        let n = padded.n();
        let (q, r) = match self {
            Matcher::Classical(cfg) => {
                let m = base_affinity(&padded, cfg.sigma, cfg.unary)?;
                let q = Array2::from_shape_vec((n, n), cfg.plane(&m)?)
                    .map_err(|e| Error::Input(e.to_string()))?;
                (q.clone(), q)
            }
            Matcher::Naive(nm) => {
                let q = nm.combined_plane(&padded)?;
                (q.clone(), q)
            }
            Matcher::Learned(model) => {
                let out = model.forward(&padded, &ForwardOptions::eval(seed))?;
                (out.q, out.r)
            }
        };
        let qf = q.as_slice().ok_or_else(|| Error::Input("assignment not contiguous".into()))?;
        let rf = r.as_slice().ok_or_else(|| Error::Input("response not contiguous".into()))?;
        let perm = hungarian(qf, n)?;
        let accuracy = matching_accuracy(&perm, &padded.gt, padded.n_inliers)?;
        let similarity = graph_similarity(qf, rf, n)?;
        Ok(MatchResult { perm, q, r, accuracy, similarity })
    }

    /// Stable fingerprint covering everything the matcher's output depends
    /// on (configuration, or spec plus parameters).
    pub fn fingerprint(&self) -> Result<String> {
        match self {
            Matcher::Classical(cfg) => config_hash(cfg),
            Matcher::Naive(nm) => config_hash(nm),
            Matcher::Learned(model) => model_fingerprint(model),
        }
    }
}

/// Mean accuracy over `pairs` freshly generated instances; pair `i` draws
/// from `derive_seed(seed, i, 0)`, and a nonzero `rotation` (radians) spins
/// the query graph before matching.
pub fn evaluate(
    matcher: &Matcher,
    gen: &GenConfig,
    pairs: usize,
    seed: u64,
    rotation: f64,
) -> Result<f64> {
    if pairs == 0 {
        return Err(Error::Input("evaluation needs at least one pair".into()));
    }
    let accs: Vec<f64> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, i as u64, 0);
            let mut pair = make_pair(&gen.with_seed(s))?;
            if rotation != 0.0 {
                pair.query = rotate(&pair.query, rotation)?;
            }
            Ok(matcher.match_pair(&pair, s)?.accuracy)
        })
        .collect::<Result<_>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// The three robustness studies and their generation protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// Coordinate noise 0 to 0.2 at 50 inliers, no outliers.
    Noise,
    /// 0 to 50 outliers at 35 inliers, noise 0.1.
    Outlier,
    /// Query rotation 0 to 90 degrees at 30 inliers, 15 outliers, noise 0.1.
    Rotation,
}

impl SweepKind {
    pub fn label(self) -> &'static str {
        match self {
            SweepKind::Noise => "noise",
            SweepKind::Outlier => "outlier",
            SweepKind::Rotation => "rotation",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "noise" => Ok(SweepKind::Noise),
            "outlier" => Ok(SweepKind::Outlier),
            "rotation" => Ok(SweepKind::Rotation),
            other => Err(Error::Config(format!("unknown sweep kind '{other}'"))),
        }
    }

    /// Grid of x-values for this study.
    pub fn grid(self) -> Vec<f64> {
        match self {
            SweepKind::Noise => (0..=10).map(|i| i as f64 * 0.02).collect(),
            SweepKind::Outlier => (0..=10).map(|i| (i * 5) as f64).collect(),
            SweepKind::Rotation => (0..=9).map(|i| (i * 10) as f64).collect(),
        }
    }

    /// Generation settings at one grid value (seed filled in later).
    pub fn gen_at(self, x: f64, k: usize) -> GenConfig {
        match self {
            SweepKind::Noise => {
                GenConfig { n_in: 50, n_out: 0, sigma: x, dim: 2, k, seed: 0, rotation_max: 0.0 }
            }
            SweepKind::Outlier => {
                GenConfig { n_in: 35, n_out: x as usize, sigma: 0.1, dim: 2, k, seed: 0, rotation_max: 0.0 }
            }
            SweepKind::Rotation => {
                GenConfig { n_in: 30, n_out: 15, sigma: 0.1, dim: 2, k, seed: 0, rotation_max: 0.0 }
            }
        }
    }

    /// Query rotation applied at one grid value, in radians.
    pub fn rotation_radians(self, x: f64) -> f64 {
        match self {
            SweepKind::Rotation => x.to_radians(),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// Independent data-seed repeats aggregated per grid point.
    pub repeats: usize,
    /// Generated pairs per repeat.
    pub eval_pairs: usize,
    pub seed: u64,
    /// Topology degree of the generated graphs.
    pub k: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { kind: SweepKind::Noise, repeats: 5, eval_pairs: 200, seed: 0, k: 5 }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.eval_pairs == 0 {
            return Err(Error::Config("sweep needs repeats >= 1 and eval_pairs >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("topology degree must be positive".into()));
        }
        Ok(())
    }
}

/// One aggregated grid point; carries everything needed to re-run itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    /// Position in the grid; repeat seeds derive from it.
    pub idx: usize,
    pub x: f64,
    pub k: usize,
    pub repeats: usize,
    pub eval_pairs: usize,
    /// Base seed of the whole sweep.
    pub seed: u64,
    pub mean_acc: f64,
    /// Population standard deviation over the repeats.
    pub std_acc: f64,
    pub config_hash: String,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn sweep_point(matcher: &Matcher, cfg: &SweepConfig, idx: usize, x: f64) -> Result<SweepRow> {
    let gen = cfg.kind.gen_at(x, cfg.k);
    let rotation = cfg.kind.rotation_radians(x);
    let accs: Vec<f64> = (0..cfg.repeats)
        .map(|r| {
            let seed = derive_seed(cfg.seed, idx as u64, r as u64);
            evaluate(matcher, &gen, cfg.eval_pairs, seed, rotation)
        })
        .collect::<Result<_>>()?;
    let (mean_acc, std_acc) = mean_std(&accs);
    let fingerprint = matcher.fingerprint()?;
    let config_hash = config_hash(&(
        cfg.kind.label(),
        idx,
        x,
        cfg.k,
        cfg.repeats,
        cfg.eval_pairs,
        cfg.seed,
        fingerprint,
    ))?;
    Ok(SweepRow {
        kind: cfg.kind.label().to_string(),
        idx,
        x,
        k: cfg.k,
        repeats: cfg.repeats,
        eval_pairs: cfg.eval_pairs,
        seed: cfg.seed,
        mean_acc,
        std_acc,
        config_hash,
    })
}

/// Evaluate the matcher across the study's declared grid.
pub fn run_robustness_sweep(matcher: &Matcher, cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    cfg.kind
        .grid()
        .iter()
        .enumerate()
        .map(|(idx, &x)| sweep_point(matcher, cfg, idx, x))
        .collect()
}

/// Recompute one recorded row from its own seed and settings. Errors if the
/// matcher at hand does not hash to the recorded configuration.
pub fn replay_row(matcher: &Matcher, row: &SweepRow) -> Result<SweepRow> {
    let cfg = SweepConfig {
        kind: SweepKind::from_label(&row.kind)?,
        repeats: row.repeats,
        eval_pairs: row.eval_pairs,
        seed: row.seed,
        k: row.k,
    };
    let fresh = sweep_point(matcher, &cfg, row.idx, row.x)?;
    if fresh.config_hash != row.config_hash {
        return Err(Error::Input(
            "config hash mismatch: matcher or settings differ from the recorded run".into(),
        ));
    }
    Ok(fresh)
}

const SWEEP_HEADER: &str = "kind,idx,x,k,repeats,eval_pairs,seed,mean_acc,std_acc,config_hash";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.kind, r.idx, r.x, r.k, r.repeats, r.eval_pairs, r.seed, r.mean_acc, r.std_acc,
            r.config_hash
        )?;
    }
    Ok(())
}

fn csv_field<'a, T: std::str::FromStr>(
    parts: &mut impl Iterator<Item = &'a str>,
    line: usize,
    name: &str,
) -> Result<T> {
    let raw = parts
        .next()
        .ok_or_else(|| Error::Input(format!("line {line}: missing field '{name}'")))?;
    raw.parse()
        .map_err(|_| Error::Input(format!("line {line}: cannot parse '{raw}' as {name}")))
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == SWEEP_HEADER => {}
        other => {
            return Err(Error::Input(format!(
                "expected sweep header '{SWEEP_HEADER}', got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let n = i + 2;
        let mut parts = line.split(',');
        rows.push(SweepRow {
            kind: csv_field(&mut parts, n, "kind")?,
            idx: csv_field(&mut parts, n, "idx")?,
            x: csv_field(&mut parts, n, "x")?,
            k: csv_field(&mut parts, n, "k")?,
            repeats: csv_field(&mut parts, n, "repeats")?,
            eval_pairs: csv_field(&mut parts, n, "eval_pairs")?,
            seed: csv_field(&mut parts, n, "seed")?,
            mean_acc: csv_field(&mut parts, n, "mean_acc")?,
            std_acc: csv_field(&mut parts, n, "std_acc")?,
            config_hash: csv_field(&mut parts, n, "config_hash")?,
        });
        if parts.next().is_some() {
            return Err(Error::Input(format!("line {n}: trailing fields")));
        }
    }
    Ok(rows)
}

/// One sampling-ratio grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRow {
    pub gamma: f64,
    pub accuracy: f64,
    pub eval_pairs: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// Sampling ratios covering degradation through saturation; includes 1.0
/// (the recommended operating point) and a value past every practical mask
/// bound.
pub fn default_gamma_grid() -> Vec<f64> {
    vec![0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 8.0]
}

/// Evaluate a sampled-mode model across sampling ratios on a shared
/// held-out set. Every ratio sees the same pairs and mask seeds.
pub fn run_sampling_sweep(
    model: &EqanModel,
    gammas: &[f64],
    gen: &GenConfig,
    eval_pairs: usize,
    seed: u64,
) -> Result<Vec<SamplingRow>> {
    if model.spec.mode != Mode::EqanR {
        return Err(Error::Config("sampling sweep needs a sampled-mode model".into()));
    }
    if gammas.is_empty() {
        return Err(Error::Config("sampling sweep needs a nonempty ratio grid".into()));
    }
    let fingerprint = model_fingerprint(model)?;
    gammas
        .iter()
        .map(|&gamma| {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!(
                    "sampling ratio must be positive, got {gamma}"
                )));
            }
            let mut at_gamma = model.clone();
            at_gamma.spec.gamma = gamma;
            let accuracy = evaluate(&Matcher::Learned(at_gamma), gen, eval_pairs, seed, 0.0)?;
            let config_hash = config_hash(&(gamma, eval_pairs, seed, gen, &fingerprint))?;
            Ok(SamplingRow { gamma, accuracy, eval_pairs, seed, config_hash })
        })
        .collect()
}

const SAMPLING_HEADER: &str = "gamma,accuracy,eval_pairs,seed,config_hash";

pub fn write_sampling_csv<W: Write>(rows: &[SamplingRow], mut w: W) -> Result<()> {
    writeln!(w, "{SAMPLING_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.gamma, r.accuracy, r.eval_pairs, r.seed, r.config_hash)?;
    }
    Ok(())
}

/// Architecture and baseline variants of the ablation study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    /// One untrained classical solver run.
    SingleSolver { solver: SolverKind },
    /// Independent solver runs combined by trained scalar weights.
    NaiveAveraging { channels: usize },
    /// The full network with the given solver layer.
    Ensemble { solver: SolverKind, channels: usize, blocks: usize },
    /// Network trained with the per-channel solver scalars frozen at random
    /// values (everything else learns).
    FrozenSolverParams { channels: usize, blocks: usize },
    /// Decision layer reads only the last block's features.
    DecisionLastOnly { channels: usize, blocks: usize },
}

fn solver_label(kind: SolverKind) -> &'static str {
    match kind {
        SolverKind::Dpgm => "dpgm",
        SolverKind::Gagm => "gagm",
        SolverKind::Sm => "sm",
    }
}

fn solver_from_label(label: &str) -> Result<SolverKind> {
    match label {
        "dpgm" => Ok(SolverKind::Dpgm),
        "gagm" => Ok(SolverKind::Gagm),
        "sm" => Ok(SolverKind::Sm),
        other => Err(Error::Config(format!("unknown solver '{other}'"))),
    }
}

impl AblationVariant {
    /// Stable row identifier, parseable back via [`AblationVariant::parse`].
    pub fn id(&self) -> String {
        match self {
            AblationVariant::SingleSolver { solver } => format!("single-{}", solver_label(*solver)),
            AblationVariant::NaiveAveraging { channels } => format!("naive-c{channels}"),
            AblationVariant::Ensemble { solver, channels, blocks } => {
                format!("ensemble-{}-c{channels}-l{blocks}", solver_label(*solver))
            }
            AblationVariant::FrozenSolverParams { channels, blocks } => {
                format!("frozen-solver-c{channels}-l{blocks}")
            }
            AblationVariant::DecisionLastOnly { channels, blocks } => {
                format!("decision-last-c{channels}-l{blocks}")
            }
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown ablation variant '{id}'"));
        if let Some(rest) = id.strip_prefix("single-") {
            return Ok(AblationVariant::SingleSolver { solver: solver_from_label(rest)? });
        }
        if let Some(rest) = id.strip_prefix("naive-c") {
            return Ok(AblationVariant::NaiveAveraging {
                channels: rest.parse().map_err(|_| bad())?,
            });
        }
        let parse_cl = |rest: &str| -> Result<(usize, usize)> {
            let (c, l) = rest.strip_prefix('c').and_then(|r| r.split_once("-l")).ok_or_else(bad)?;
            Ok((c.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?))
        };
        if let Some(rest) = id.strip_prefix("ensemble-") {
            let (solver, dims) = rest.split_once('-').ok_or_else(bad)?;
            let (channels, blocks) = parse_cl(dims)?;
            return Ok(AblationVariant::Ensemble {
                solver: solver_from_label(solver)?,
                channels,
                blocks,
            });
        }
        if let Some(rest) = id.strip_prefix("frozen-solver-") {
            let (channels, blocks) = parse_cl(rest)?;
            return Ok(AblationVariant::FrozenSolverParams { channels, blocks });
        }
        if let Some(rest) = id.strip_prefix("decision-last-") {
            let (channels, blocks) = parse_cl(rest)?;
            return Ok(AblationVariant::DecisionLastOnly { channels, blocks });
        }
        Err(bad())
    }
}

/// Channel grid of the width study (at five blocks).
pub fn width_grid() -> [usize; 4] {
    [8, 16, 32, 64]
}

/// Block grid of the depth study (at thirty-two channels).
pub fn depth_grid() -> [usize; 5] {
    [2, 4, 5, 8, 16]
}

/// The ablation data distribution: heavy noise with outliers on a sparse
/// topology.
pub fn default_ablation_gen(seed: u64) -> GenConfig {
    GenConfig { n_in: 35, n_out: 15, sigma: 0.3, dim: 2, k: 3, seed, rotation_max: 0.0 }
}

/// One evaluated variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    /// Whether any parameters were trained for this row.
    pub trained: bool,
    pub eval_pairs: usize,
    pub seed: u64,
    pub config_hash: String,
}

fn build_variant(
    variant: &AblationVariant,
    gen: &GenConfig,
    train_cfg: &TrainConfig,
    model_seed: u64,
) -> Result<(Matcher, bool)> {
    match variant {
        AblationVariant::SingleSolver { solver } => Ok((
            Matcher::Classical(ClassicalConfig { solver: *solver, ..ClassicalConfig::default() }),
            false,
        )),
        AblationVariant::NaiveAveraging { channels } => {
            let mut nm = NaiveModel::with_seed(ClassicalConfig::default(), *channels, model_seed)?;
            train(&mut nm, train_cfg, gen)?;
            Ok((Matcher::Naive(nm), true))
        }
        AblationVariant::Ensemble { solver, channels, blocks } => {
            let spec = ModelSpec {
                solver: *solver,
                channels: *channels,
                blocks: *blocks,
                ..ModelSpec::default()
            };
            let mut model = EqanModel::with_seed(spec, model_seed)?;
            train(&mut model, train_cfg, gen)?;
            Ok((Matcher::Learned(model), true))
        }
        AblationVariant::FrozenSolverParams { channels, blocks } => {
            let spec =
                ModelSpec { channels: *channels, blocks: *blocks, ..ModelSpec::default() };
            let mut model = EqanModel::with_seed(spec, model_seed)?;
            // scatter the solver scalars before freezing them
            let frozen = model.solver_param_indices();
            let mut flat = model.flatten();
            let mut rng = rng_stream(model_seed, streams::PERTURB);
            for &i in &frozen {
                flat[i] = rng.gen_range(-2.0..2.0);
            }
            model.assign_from_flat(&flat)?;
            let cfg = TrainConfig { frozen, ..train_cfg.clone() };
            train(&mut model, &cfg, gen)?;
            Ok((Matcher::Learned(model), true))
        }
        AblationVariant::DecisionLastOnly { channels, blocks } => {
            let spec = ModelSpec {
                channels: *channels,
                blocks: *blocks,
                decision_all: false,
                ..ModelSpec::default()
            };
            let mut model = EqanModel::with_seed(spec, model_seed)?;
            train(&mut model, train_cfg, gen)?;
            Ok((Matcher::Learned(model), true))
        }
    }
}

/// Train (where applicable) and evaluate each variant on the given data
/// distribution. Variant `v` trains with seed lane `derive_seed(seed, 2, v)`
/// and evaluates on `derive_seed(seed, 1, v)`, so rows are independent.
pub fn run_ablation(
    variants: &[AblationVariant],
    gen: &GenConfig,
    train_cfg: &TrainConfig,
    eval_pairs: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .enumerate()
        .map(|(v, variant)| {
            let vi = v as u64;
            let cfg = TrainConfig { seed: derive_seed(seed, 2, vi), ..train_cfg.clone() };
            let (matcher, trained) = build_variant(variant, gen, &cfg, derive_seed(seed, 3, vi))?;
            let eval_seed = derive_seed(seed, 1, vi);
            let accuracy = evaluate(&matcher, gen, eval_pairs, eval_seed, 0.0)?;
            let config_hash =
                config_hash(&(variant.id(), eval_pairs, seed, gen, matcher.fingerprint()?))?;
            Ok(AblationRow { variant: variant.id(), accuracy, trained, eval_pairs, seed, config_hash })
        })
        .collect()
}

const ABLATION_HEADER: &str = "variant,accuracy,trained,eval_pairs,seed,config_hash";

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.variant, r.accuracy, r.trained, r.eval_pairs, r.seed, r.config_hash
        )?;
    }
    Ok(())
}

/// One proximal iteration of the convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub iter: usize,
    /// Squared step length between consecutive iterates.
    pub step_sq: f64,
    /// Regularised objective at this iterate.
    pub objective: f64,
    /// Bregman inner product between the iterate pair; bounded below by
    /// half the squared step length.
    pub kl_inner: f64,
}

/// Run the proximal solver from the uniform start, logging per iteration
/// the squared step, the objective, and the Bregman inner product the
/// descent analysis relies on. Row 0 holds the start objective.
pub fn convergence_diagnostics(
    m: &AffinityMatrix,
    beta: f64,
    lambda: f64,
    t_max: usize,
    sinkhorn_rounds: usize,
) -> Result<Vec<ConvergenceRow>> {
    if m.n1() != m.n2() {
        return Err(Error::Input(format!(
            "diagnostics need a square association space, got {}x{}",
            m.n1(),
            m.n2()
        )));
    }
    let params = SolverParams::from_beta_lambda(beta, lambda)?;
    let n = m.n1();
    let mut z = uniform_start(n);
    let mut rows = Vec::with_capacity(t_max + 1);
    rows.push(ConvergenceRow {
        iter: 0,
        step_sq: 0.0,
        objective: objective(m, &z, lambda)?,
        kl_inner: 0.0,
    });
    for t in 1..=t_max {
        let prev = z.clone();
        dpgm_step(m, &mut z, params, sinkhorn_rounds)?;
        let step_sq = z.iter().zip(&prev).map(|(a, b)| (a - b) * (a - b)).sum();
        rows.push(ConvergenceRow {
            iter: t,
            step_sq,
            objective: objective(m, &z, lambda)?,
            kl_inner: kl_descent_inner(&z, &prev),
        });
    }
    Ok(rows)
}

const CONVERGENCE_HEADER: &str = "iter,step_sq,objective,kl_inner";

pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], mut w: W) -> Result<()> {
    writeln!(w, "{CONVERGENCE_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.iter, r.step_sq, r.objective, r.kl_inner)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::stable_beta;

    fn exact_copy_gen(seed: u64) -> GenConfig {
        GenConfig { n_in: 10, n_out: 0, sigma: 0.0, dim: 2, k: 3, seed, rotation_max: 0.0 }
    }

    fn tiny_gen(seed: u64) -> GenConfig {
        GenConfig { n_in: 5, n_out: 1, sigma: 0.1, dim: 2, k: 2, seed, rotation_max: 0.0 }
    }

    #[test]
    fn classical_solvers_recover_exact_copies() {
        let pair = make_pair(&exact_copy_gen(3)).unwrap();
        for solver in [SolverKind::Dpgm, SolverKind::Gagm, SolverKind::Sm] {
            let cfg = ClassicalConfig { solver, ..ClassicalConfig::default() };
            let res = Matcher::Classical(cfg).match_pair(&pair, 0).unwrap();
            assert_eq!(res.accuracy, 1.0, "{solver:?}");
        }
    }

    #[test]
    fn match_result_carries_consistent_similarity() {
        let pair = make_pair(&tiny_gen(1)).unwrap();
        let cfg = ClassicalConfig::default();
        let res = Matcher::Classical(cfg).match_pair(&pair, 0).unwrap();
        let n = res.q.nrows();
        let mut want = 0.0;
        for i in 0..n {
            for j in 0..n {
                want += res.q[(i, j)] * res.r[(j, i)];
            }
        }
        assert!((res.similarity - want).abs() < 1e-12);
        assert_eq!(res.perm.len(), n);
    }

    #[test]
    fn naive_weights_select_component_planes() {
        let pair = make_pair(&tiny_gen(2)).unwrap();
        let padded = pad_pair(&pair).unwrap();
        let mut nm = NaiveModel::with_seed(ClassicalConfig::default(), 2, 7).unwrap();
        assert_eq!(nm.weights, vec![0.5, 0.5]);
        for (b, l) in nm.betas.iter().zip(&nm.lambdas) {
            assert!((b - 0.5).abs() <= 0.05 + 1e-12);
            assert!((l - 1.0).abs() <= 0.1 + 1e-12);
        }
        nm.weights = vec![1.0, 0.0];
        let q0 = nm.combined_plane(&padded).unwrap();
        let m = base_affinity(&padded, nm.base.sigma, nm.base.unary).unwrap();
        let solo = ClassicalConfig { beta: nm.betas[0], lambda: nm.lambdas[0], ..nm.base.clone() };
        let want = solo.plane(&m).unwrap();
        for (a, b) in q0.iter().zip(&want) {
            assert_eq!(a.to_bits(), (1.0f64 * b).to_bits());
        }
    }

    #[test]
    fn naive_weight_gradients_match_finite_differences() {
        let pair = make_pair(&tiny_gen(4)).unwrap();
        let nm = NaiveModel::with_seed(ClassicalConfig::default(), 3, 5).unwrap();
        let (_, grads) = nm.loss_and_grad(&pair, 0).unwrap();
        let h = 1e-6;
        for c in 0..3 {
            let mut up = nm.clone();
            up.weights[c] += h;
            let mut down = nm.clone();
            down.weights[c] -= h;
            let lu = up.loss_and_grad(&pair, 0).unwrap().0;
            let ld = down.loss_and_grad(&pair, 0).unwrap().0;
            let fd = (lu - ld) / (2.0 * h);
            assert!(
                (grads[c] - fd).abs() / fd.abs().max(1.0) < 1e-5,
                "channel {c}: {} vs {fd}",
                grads[c]
            );
        }
    }

    #[test]
    fn evaluate_is_deterministic() {
        let matcher = Matcher::Classical(ClassicalConfig::default());
        let gen = tiny_gen(0);
        let a = evaluate(&matcher, &gen, 4, 11, 0.0).unwrap();
        let b = evaluate(&matcher, &gen, 4, 11, 0.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn sweep_grids_match_declared_protocols() {
        let noise = SweepKind::Noise.grid();
        assert_eq!(noise.len(), 11);
        assert_eq!(noise[0], 0.0);
        assert!((noise[10] - 0.2).abs() < 1e-12);
        assert_eq!(SweepKind::Noise.gen_at(0.1, 5).n_in, 50);
        let outlier = SweepKind::Outlier.grid();
        assert_eq!(outlier.len(), 11);
        assert_eq!(outlier[10], 50.0);
        let g = SweepKind::Outlier.gen_at(25.0, 5);
        assert_eq!((g.n_in, g.n_out), (35, 25));
        assert!((g.sigma - 0.1).abs() < 1e-12);
        let rot = SweepKind::Rotation.grid();
        assert_eq!(rot.len(), 10);
        assert_eq!(rot[9], 90.0);
        let g = SweepKind::Rotation.gen_at(40.0, 5);
        assert_eq!((g.n_in, g.n_out), (30, 15));
        assert!((SweepKind::Rotation.rotation_radians(90.0) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(SweepKind::Noise.rotation_radians(0.1), 0.0);
    }

    #[test]
    fn sweep_rows_replay_and_round_trip_csv() {
        let matcher = Matcher::Classical(ClassicalConfig { iters: 5, ..ClassicalConfig::default() });
        let cfg = SweepConfig {
            kind: SweepKind::Rotation,
            repeats: 2,
            eval_pairs: 2,
            seed: 21,
            k: 3,
        };
        let rows = run_robustness_sweep(&matcher, &cfg).unwrap();
        assert_eq!(rows.len(), 10);
        let again = replay_row(&matcher, &rows[4]).unwrap();
        assert_eq!(again, rows[4]);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let parsed = parse_sweep_csv(&text).unwrap();
        assert_eq!(parsed, rows);
        // different matcher: the recorded hash no longer matches
        let other = Matcher::Classical(ClassicalConfig { iters: 6, ..ClassicalConfig::default() });
        assert!(replay_row(&other, &rows[4]).is_err());
    }

    #[test]
    fn sweep_csv_rejects_malformed_input() {
        assert!(parse_sweep_csv("nonsense").is_err());
        let good = format!("{SWEEP_HEADER}\nnoise,0,0.1,5,1,1,0,0.5,0.1,abc\n");
        assert_eq!(parse_sweep_csv(&good).unwrap().len(), 1);
        let broken = format!("{SWEEP_HEADER}\nnoise,0,not-a-number,5,1,1,0,0.5,0.1,abc\n");
        assert!(parse_sweep_csv(&broken).is_err());
        let trailing = format!("{SWEEP_HEADER}\nnoise,0,0.1,5,1,1,0,0.5,0.1,abc,extra\n");
        assert!(parse_sweep_csv(&trailing).is_err());
    }

    #[test]
    fn sampling_sweep_saturated_ratio_matches_dense() {
        let spec_r = ModelSpec {
            mode: Mode::EqanR,
            channels: 2,
            blocks: 1,
            gamma: 1.0,
            ..ModelSpec::default()
        };
        let sampled = EqanModel::with_seed(spec_r, 6).unwrap();
        let mut dense = EqanModel::with_seed(
            ModelSpec { channels: 2, blocks: 1, ..ModelSpec::default() },
            6,
        )
        .unwrap();
        dense.assign_from_flat(&sampled.flatten()).unwrap();
        let gen = GenConfig { n_in: 5, n_out: 0, sigma: 0.1, dim: 2, k: 2, seed: 0, rotation_max: 0.0 };
        let rows = run_sampling_sweep(&sampled, &[0.5, 8.0], &gen, 3, 13).unwrap();
        let dense_acc = evaluate(&Matcher::Learned(dense), &gen, 3, 13, 0.0).unwrap();
        assert_eq!(rows[1].accuracy.to_bits(), dense_acc.to_bits());
        // dense models are rejected
        let dense2 = EqanModel::with_seed(
            ModelSpec { channels: 2, blocks: 1, ..ModelSpec::default() },
            6,
        )
        .unwrap();
        assert!(run_sampling_sweep(&dense2, &[1.0], &gen, 1, 0).is_err());
    }

    #[test]
    fn ablation_variant_ids_round_trip() {
        let variants = [
            AblationVariant::SingleSolver { solver: SolverKind::Gagm },
            AblationVariant::NaiveAveraging { channels: 8 },
            AblationVariant::Ensemble { solver: SolverKind::Sm, channels: 16, blocks: 5 },
            AblationVariant::FrozenSolverParams { channels: 8, blocks: 3 },
            AblationVariant::DecisionLastOnly { channels: 32, blocks: 2 },
        ];
        for v in &variants {
            assert_eq!(&AblationVariant::parse(&v.id()).unwrap(), v);
        }
        assert!(AblationVariant::parse("made-up-variant").is_err());
        assert!(matches!(
            AblationVariant::parse("single-fgm"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ablation_runs_and_labels_rows() {
        let variants = [
            AblationVariant::SingleSolver { solver: SolverKind::Dpgm },
            AblationVariant::NaiveAveraging { channels: 2 },
            AblationVariant::Ensemble { solver: SolverKind::Dpgm, channels: 2, blocks: 1 },
        ];
        let cfg = TrainConfig {
            total_iters: 2,
            batch: 1,
            warmup_iters: 0,
            eval_every: 0,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let rows = run_ablation(&variants, &tiny_gen(0), &cfg, 3, 17).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].variant, "single-dpgm");
        assert!(!rows[0].trained && rows[1].trained && rows[2].trained);
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.accuracy), "{r:?}");
        }
        let mut buf = Vec::new();
        write_ablation_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with(ABLATION_HEADER));
    }

    #[test]
    fn frozen_solver_scalars_stay_put_while_training() {
        let cfg = TrainConfig {
            total_iters: 2,
            batch: 1,
            warmup_iters: 0,
            eval_every: 0,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let variant = AblationVariant::FrozenSolverParams { channels: 2, blocks: 1 };
        let (matcher, _) = build_variant(&variant, &tiny_gen(1), &cfg, 23).unwrap();
        let Matcher::Learned(model) = matcher else { panic!("expected a trained network") };
        // rebuild the pre-training scatter and compare the frozen slots
        let spec = ModelSpec { channels: 2, blocks: 1, ..ModelSpec::default() };
        let fresh = EqanModel::with_seed(spec, 23).unwrap();
        let frozen = fresh.solver_param_indices();
        let mut want = fresh.flatten();
        let mut rng = rng_stream(23, streams::PERTURB);
        for &i in &frozen {
            want[i] = rng.gen_range(-2.0..2.0);
        }
        let trained = model.flatten();
        for &i in &frozen {
            assert_eq!(trained[i].to_bits(), (want[i] as f32 as f64).to_bits());
        }
        let moved = trained
            .iter()
            .zip(&want)
            .enumerate()
            .filter(|(i, (a, b))| !frozen.contains(i) && a != b)
            .count();
        assert!(moved > 0, "non-frozen parameters should have moved");
    }

    #[test]
    fn convergence_zero_affinity_stays_at_uniform() {
        let pair = make_pair(&tiny_gen(3)).unwrap();
        let padded = pad_pair(&pair).unwrap();
        let mut m = base_affinity(&padded, 1.0, UnaryMode::Gaussian).unwrap();
        m.unary.fill(0.0);
        m.values.iter_mut().for_each(|v| *v = 0.0);
        let rows = convergence_diagnostics(&m, 0.5, 1.0, 10, 5).unwrap();
        assert_eq!(rows.len(), 11);
        // the uniform plane is the fixpoint; only roundoff wiggle remains
        for r in &rows {
            assert!(r.step_sq < 1e-28, "iter {}: {}", r.iter, r.step_sq);
            assert!((r.objective - rows[0].objective).abs() < 1e-12, "iter {}", r.iter);
        }
    }

    #[test]
    fn convergence_descends_and_satisfies_kl_bound_below_stable_step() {
        for seed in [1u64, 2, 3] {
            let pair = make_pair(&exact_copy_gen(seed)).unwrap();
            let padded = pad_pair(&pair).unwrap();
            let m = base_affinity(&padded, 1.0, UnaryMode::Gaussian).unwrap();
            let beta = stable_beta(&m, 0.9).unwrap();
            let rows = convergence_diagnostics(&m, beta, 1.0, 50, 10).unwrap();
            for w in rows.windows(2) {
                assert!(
                    w[1].objective <= w[0].objective + 1e-9,
                    "seed {seed} iter {}: {} -> {}",
                    w[1].iter,
                    w[0].objective,
                    w[1].objective
                );
                assert!(
                    w[1].kl_inner >= 0.5 * w[1].step_sq - 1e-9,
                    "seed {seed} iter {}",
                    w[1].iter
                );
            }
            let mut buf = Vec::new();
            write_convergence_csv(&rows, &mut buf).unwrap();
            assert!(String::from_utf8(buf).unwrap().starts_with(CONVERGENCE_HEADER));
        }
    }

    #[test]
    fn config_hash_distinguishes_configurations() {
        let a = config_hash(&ClassicalConfig::default()).unwrap();
        let b =
            config_hash(&ClassicalConfig { beta: 0.25, ..ClassicalConfig::default() }).unwrap();
        assert_eq!(a.len(), 16);
        assert_ne!(a, b);
        assert_eq!(a, config_hash(&ClassicalConfig::default()).unwrap());
        let m1 = EqanModel::with_seed(ModelSpec { channels: 2, blocks: 1, ..ModelSpec::default() }, 1)
            .unwrap();
        let mut m2 = m1.clone();
        let mut flat = m2.flatten();
        flat[0] += 0.5;
        m2.assign_from_flat(&flat).unwrap();
        assert_ne!(model_fingerprint(&m1).unwrap(), model_fingerprint(&m2).unwrap());
    }

    #[test]
    fn gamma_grid_covers_recommended_point() {
        let grid = default_gamma_grid();
        assert!(grid.contains(&1.0));
        assert!(grid.iter().all(|&g| g > 0.0));
    }
}
