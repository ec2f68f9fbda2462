//! End-to-end training: clamped cross-entropy loss, the straight-through
//! score gradient, Adam with a warmup phase, and a streaming loop over
//! freshly generated synthetic pairs.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{hungarian, matching_accuracy};
use crate::error::{Error, Result};
use crate::graph::{derive_seed, make_pair, GenConfig, MatchPair};
use crate::net::{pad_pair, EqanModel, ForwardOptions};
use crate::tape::{CE_CLAMP_HI, CE_CLAMP_LO};

/// Optimizer and loop hyperparameters. Gradients are averaged over the
/// batch; the first `warmup_iters` updates use `warmup_lr`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate after warmup.
    pub lr: f64,
    /// Pairs per optimizer step.
    pub batch: usize,
    /// Total optimizer steps.
    pub total_iters: usize,
    /// Steps trained at `warmup_lr` before switching to `lr`.
    pub warmup_iters: usize,
    pub warmup_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Base seed; per-pair draw seeds and the held-out set derive from it.
    pub seed: u64,
    /// Held-out accuracy cadence in iterations; 0 disables evaluation and
    /// keeps the final parameters instead of the best-scoring ones.
    pub eval_every: usize,
    /// Held-out pairs per evaluation.
    pub eval_pairs: usize,
    /// Flat parameter indices whose gradients are zeroed, keeping those
    /// parameters at their initial values (ablations).
    pub frozen: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 8,
            total_iters: 5000,
            warmup_iters: 500,
            warmup_lr: 1e-10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 250,
            eval_pairs: 200,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.warmup_lr > 0.0 && self.warmup_lr.is_finite()) {
            return Err(Error::Config(format!(
                "warmup learning rate must be positive, got {}",
                self.warmup_lr
            )));
        }
        if self.warmup_iters > self.total_iters {
            return Err(Error::Config(format!(
                "warmup ({}) exceeds total iterations ({})",
                self.warmup_iters, self.total_iters
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("Adam epsilon must be positive, got {}", self.eps)));
        }
        if self.eval_every > 0 && self.eval_pairs == 0 {
            return Err(Error::Config("evaluation enabled with zero held-out pairs".into()));
        }
        Ok(())
    }
}

/// Learning rate in effect at a given iteration: `warmup_lr` during the
/// warmup phase, `lr` afterwards.
pub fn effective_lr(cfg: &TrainConfig, iter: usize) -> f64 {
    if iter < cfg.warmup_iters {
        cfg.warmup_lr
    } else {
        cfg.lr
    }
}

/// Clamped binary cross-entropy between assignment probabilities and a
/// ground-truth permutation, summed over the first `rows` rows: every entry
/// is clamped to `[1e-12, 1 - 1e-12]`, the matching column contributes
/// `-ln q` and every other column `-ln(1 - q)`. Matches the traced loss
/// bit-for-bit.
pub fn cross_entropy_loss(q: ArrayView2<'_, f64>, gt: &[usize], rows: usize) -> Result<f64> {
    let (n1, n2) = q.dim();
    if rows > n1 || rows > gt.len() {
        return Err(Error::Input(format!(
            "loss rows {rows} exceed matrix rows {n1} or labels {}",
            gt.len()
        )));
    }
    if gt.iter().take(rows).any(|&j| j >= n2) {
        return Err(Error::Input("ground-truth column out of range".into()));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite assignment probability in the loss".into()));
    }
    let mut loss = 0.0;
    for i in 0..rows {
        for j in 0..n2 {
            let qc = q[(i, j)].clamp(CE_CLAMP_LO, CE_CLAMP_HI);
            if j == gt[i] {
                loss -= qc.ln();
            } else {
                loss -= (1.0 - qc).ln();
            }
        }
    }
    Ok(loss)
}

/// Straight-through gradient of the mask draw: given the loss gradient with
/// respect to the per-channel mask planes `dL/dB` (shape `C x n1 x n2`), the
/// sampling scores `S` and the draw distribution `q = S / sum(S)`, returns
///
/// `dL/dS_ij = (1 / sum S) * sum_{c,t,k} dL/dB_{c,t,k} * (delta_{t,i} delta_{k,j} - q_ij)`.
pub fn ste_backward(
    dl_db: ArrayView3<'_, f64>,
    s: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let (c, n1, n2) = dl_db.dim();
    if c == 0 {
        return Err(Error::Input("mask gradient needs at least one channel".into()));
    }
    if s.dim() != (n1, n2) || q.dim() != (n1, n2) {
        return Err(Error::Input(format!(
            "shape mismatch: dL/dB is {c}x{n1}x{n2}, scores {:?}, distribution {:?}",
            s.dim(),
            q.dim()
        )));
    }
    let total = s.sum();
    if total <= 0.0 {
        return Err(Error::Domain(format!("sampling scores sum to {total}, need positive mass")));
    }
    let gsum = dl_db.sum();
    let mut out = Array2::zeros((n1, n2));
    for i in 0..n1 {
        for j in 0..n2 {
            let mut chan = 0.0;
            for ch in 0..c {
                chan += dl_db[(ch, i, j)];
            }
            out[(i, j)] = (chan - q[(i, j)] * gsum) / total;
        }
    }
    Ok(out)
}

/// First and second Adam moments plus the step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One bias-corrected Adam update in place. Updated parameters round through
/// `f32`, matching the storage precision of the model they land in.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Input(format!(
            "parameter/gradient/state length mismatch: {} vs {} vs {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::TrainAbort(format!("non-finite gradient at parameter {i}")));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] = (params[i] - lr * mhat / (vhat.sqrt() + cfg.eps)) as f32 as f64;
    }
    Ok(())
}

/// Anything the loop can optimize: a flat parameter vector, a per-pair loss
/// with gradient, and a rounded matching accuracy.
pub trait TrainableModel {
    /// Parameter snapshot in checkpoint order.
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]) -> Result<()>;
    /// Loss and parameter gradient on one pair; `seed` feeds any stochastic
    /// part of the forward pass.
    fn loss_and_grad(&self, pair: &MatchPair, seed: u64) -> Result<(f64, Vec<f64>)>;
    /// Hungarian-rounded matching accuracy at evaluation settings.
    fn accuracy(&self, pair: &MatchPair, seed: u64) -> Result<f64>;
}

/// Mean accuracy over an evaluation set, each pair forwarded with its index
/// as the draw seed.
pub fn evaluate_accuracy<M: TrainableModel + Sync>(model: &M, pairs: &[MatchPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let accs: Vec<f64> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| model.accuracy(p, i as u64))
        .collect::<Result<_>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

impl TrainableModel for EqanModel {
    fn params(&self) -> Vec<f64> {
        self.flatten()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.assign_from_flat(flat)
    }

    fn loss_and_grad(&self, pair: &MatchPair, seed: u64) -> Result<(f64, Vec<f64>)> {
        let padded = pad_pair(pair)?;
        let mut pass = self.forward_tape(&padded, &ForwardOptions::train(seed))?;
        let loss = pass.tape.cross_entropy(pass.q, &padded.gt, padded.n_inliers)?;
        let value = pass.tape.scalar(loss)?;
        pass.tape.backward(loss)?;
        Ok((value, self.collect_grads(&pass)))
    }

    fn accuracy(&self, pair: &MatchPair, seed: u64) -> Result<f64> {
        let padded = pad_pair(pair)?;
        let out = self.forward(&padded, &ForwardOptions::eval(seed))?;
        let flat = out
            .q
            .as_slice()
            .ok_or_else(|| Error::Input("assignment matrix not contiguous".into()))?;
        let perm = hungarian(flat, padded.n())?;
        matching_accuracy(&perm, &padded.gt, padded.n_inliers)
    }
}

/// One training-loop log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    /// Batch-averaged loss at this step.
    pub loss: f64,
    /// Held-out accuracy, present on evaluation iterations.
    pub eval_acc: Option<f64>,
    /// Seconds since the loop started.
    pub wallclock: f64,
}

/// Stream metric records as `iter,loss,eval_acc,wallclock` CSV; the accuracy
/// field is empty on non-evaluation iterations.
pub fn write_metrics_csv<W: Write>(records: &[MetricRecord], mut w: W) -> Result<()> {
    writeln!(w, "iter,loss,eval_acc,wallclock")?;
    for r in records {
        match r.eval_acc {
            Some(a) => writeln!(w, "{},{},{},{}", r.iter, r.loss, a, r.wallclock)?,
            None => writeln!(w, "{},{},,{}", r.iter, r.loss, r.wallclock)?,
        }
    }
    Ok(())
}

/// Stream fresh pairs and optimize the model in place. Batch members draw
/// their generation and forward seeds from `cfg.seed` and the iteration, so
/// fixed seeds give bit-identical trajectories; the held-out set uses a
/// disjoint seed lane. Batch gradients are averaged in index order. A
/// non-finite loss or gradient aborts before the update, leaving the model
/// at the last finite step. When evaluation is enabled, the parameters with
/// the best held-out accuracy are restored at the end.
pub fn train<M: TrainableModel + Sync>(
    model: &mut M,
    cfg: &TrainConfig,
    gen: &GenConfig,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    gen.validate()?;
    if cfg.total_iters == 0 {
        return Ok(Vec::new());
    }
    let eval_set: Vec<MatchPair> = if cfg.eval_every > 0 {
        (0..cfg.eval_pairs)
            .map(|i| make_pair(&gen.with_seed(derive_seed(cfg.seed, u64::MAX, i as u64))))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let dim = model.params().len();
    for &i in &cfg.frozen {
        if i >= dim {
            return Err(Error::Config(format!(
                "frozen parameter index {i} out of range for {dim} parameters"
            )));
        }
    }
    let mut state = AdamState::new(dim);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut metrics = Vec::with_capacity(cfg.total_iters);
    let start = Instant::now();
    for iter in 0..cfg.total_iters {
        let seeds: Vec<u64> =
            (0..cfg.batch).map(|b| derive_seed(cfg.seed, iter as u64, b as u64)).collect();
        let pairs: Vec<MatchPair> =
            seeds.iter().map(|&s| make_pair(&gen.with_seed(s))).collect::<Result<_>>()?;
        let results: Vec<(f64, Vec<f64>)> = pairs
            .par_iter()
            .zip(&seeds)
            .map(|(p, &s)| model.loss_and_grad(p, s))
            .collect::<Result<_>>()?;
        let inv = 1.0 / cfg.batch as f64;
        let loss = results.iter().map(|(l, _)| l).sum::<f64>() * inv;
        if !loss.is_finite() {
            return Err(Error::TrainAbort(format!(
                "non-finite loss at iteration {iter}; parameters left at the last finite step"
            )));
        }
        let mut grad = vec![0.0; dim];
        for (_, g) in &results {
            if g.len() != dim {
                return Err(Error::Input(format!(
                    "gradient length {} does not match {dim} parameters",
                    g.len()
                )));
            }
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        for g in grad.iter_mut() {
            *g *= inv;
        }
        for &i in &cfg.frozen {
            grad[i] = 0.0;
        }
        let mut params = model.params();
        adam_step(&mut params, &grad, &mut state, effective_lr(cfg, iter), cfg).map_err(
            |e| match e {
                Error::TrainAbort(m) => Error::TrainAbort(format!(
                    "{m} at iteration {iter}; parameters left at the last finite step"
                )),
                other => other,
            },
        )?;
        model.set_params(&params)?;
        let eval_due =
            cfg.eval_every > 0 && ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.total_iters);
        let eval_acc = if eval_due {
            let acc = evaluate_accuracy(model, &eval_set)?;
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.params()));
            }
            Some(acc)
        } else {
            None
        };
        metrics.push(MetricRecord { iter, loss, eval_acc, wallclock: start.elapsed().as_secs_f64() });
    }
    if let Some((_, p)) = best {
        model.set_params(&p)?;
    }
    Ok(metrics)
}

/// Outcome of a finite-difference gradient check: the worst relative error
/// and the parameter it occurred at.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub fd: f64,
}

/// Compare analytic gradients against 64-bit central finite differences at
/// step `h`, probing every parameter; the relative error uses
/// `max(|analytic|, |fd|, 1e-4)` as denominator. The floor sits two orders
/// above the difference-quotient roundoff (loss values carry ~1e-14 of
/// noise, so quotients at `h = 1e-5` are only good to ~1e-9), which keeps
/// near-dead parameters judged on absolute agreement instead of noise.
/// Probes bypass the `f32` parameter rounding so the offsets are exact.
/// Meaningful for the dense and update modes (and saturated sampled masks);
/// a partial mask redraw moves discretely under perturbations.
pub fn fd_gradcheck(model: &EqanModel, pair: &MatchPair, seed: u64, h: f64) -> Result<FdReport> {
    let padded = pad_pair(pair)?;
    let loss_at = |m: &EqanModel| -> Result<f64> {
        let mut pass = m.forward_tape(&padded, &ForwardOptions::train(seed))?;
        let id = pass.tape.cross_entropy(pass.q, &padded.gt, padded.n_inliers)?;
        pass.tape.scalar(id)
    };
    let base = model.flatten();
    let (_, analytic) = model.loss_and_grad(pair, seed)?;
    let mut probe = model.clone();
    let mut report = FdReport { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, fd: 0.0 };
    for j in 0..base.len() {
        let mut theta = base.clone();
        theta[j] = base[j] + h;
        probe.assign_from_flat_exact(&theta)?;
        let up = loss_at(&probe)?;
        theta[j] = base[j] - h;
        probe.assign_from_flat_exact(&theta)?;
        let down = loss_at(&probe)?;
        let fd = (up - down) / (2.0 * h);
        let denom = analytic[j].abs().max(fd.abs()).max(1e-4);
        let rel = (analytic[j] - fd).abs() / denom;
        if rel > report.max_rel_err {
            report = FdReport { max_rel_err: rel, worst_index: j, analytic: analytic[j], fd };
        }
    }
    Ok(report)
}
