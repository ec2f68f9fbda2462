//! Argument plumbing: clap definitions, the TOML configuration file, and the
//! defaults -> config file -> flags overlay order shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use eqan_core::affinity::UnaryMode;
use eqan_core::graph::GenConfig;
use eqan_core::harness::{
    default_ablation_gen, ClassicalConfig, Matcher, NaiveModel, SweepKind,
};
use eqan_core::net::{EqanModel, Mode, ModelSpec, SolverKind};
use eqan_core::train::TrainConfig;

/// Ensemble graph matching experiments. Settings resolve in three layers:
/// built-in defaults, then the TOML file given by --config, then flags.
/// `EQAN_THREADS` caps the worker pool; no other environment is read.
#[derive(Debug, Parser)]
#[command(name = "eqan", version, max_term_width = 100)]
pub struct Cli {
    /// TOML configuration file with [gen], [model], [train] and [classical]
    /// sections; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug) [default: warnings only]
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic reference/query pair as JSON.
    Generate(GenerateCmd),
    /// Train a model and save its checkpoint.
    Train(TrainCmd),
    /// Evaluate a matcher's mean accuracy over generated pairs.
    Eval(EvalCmd),
    /// Match one generated pair and print the assignment.
    Match(MatchCmd),
    /// Run a robustness sweep (noise, outlier or rotation) to CSV, or replay
    /// a recorded sweep CSV and verify bit-identical results.
    Sweep(SweepCmd),
    /// Train and evaluate ablation variants to CSV.
    Ablate(AblateCmd),
    /// Log per-iteration convergence diagnostics of the proximal solver.
    Diagnose(DiagnoseCmd),
    /// Evaluate a sampled-mode checkpoint across sampling ratios.
    SampleSweep(SampleSweepCmd),
}

fn merge<T: Clone>(dst: &mut T, src: &Option<T>) {
    if let Some(v) = src {
        *dst = v.clone();
    }
}

fn parse_solver(s: &str) -> std::result::Result<SolverKind, String> {
    match s {
        "dpgm" => Ok(SolverKind::Dpgm),
        "gagm" => Ok(SolverKind::Gagm),
        "sm" => Ok(SolverKind::Sm),
        _ => Err(format!("unknown solver '{s}' (expected dpgm, gagm or sm)")),
    }
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    match s {
        "eqan" => Ok(Mode::Eqan),
        "eqan-u" => Ok(Mode::EqanU),
        "eqan-r" => Ok(Mode::EqanR),
        _ => Err(format!("unknown mode '{s}' (expected eqan, eqan-u or eqan-r)")),
    }
}

fn parse_unary(s: &str) -> std::result::Result<UnaryMode, String> {
    match s {
        "norm" => Ok(UnaryMode::Norm),
        "gaussian" => Ok(UnaryMode::Gaussian),
        _ => Err(format!("unknown unary mode '{s}' (expected norm or gaussian)")),
    }
}

fn parse_kind(s: &str) -> std::result::Result<SweepKind, String> {
    SweepKind::from_label(s).map_err(|e| e.to_string())
}

/// Synthetic pair distribution.
#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenArgs {
    /// Inlier node count [default: 35]
    #[arg(long)]
    pub n_in: Option<usize>,
    /// Outlier node count [default: 15]
    #[arg(long)]
    pub n_out: Option<usize>,
    /// Coordinate noise standard deviation [default: 0.3]
    #[arg(id = "noise", long)]
    pub sigma: Option<f64>,
    /// Point dimension [default: 2]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Neighbor degree of the generated topology [default: 3]
    #[arg(id = "degree", long)]
    pub k: Option<usize>,
    /// Data seed [default: 0]
    #[arg(id = "gen-seed", long)]
    pub seed: Option<u64>,
    /// Max random query rotation in degrees, drawn uniformly per pair;
    /// training data only unless set elsewhere [default: 0]
    #[arg(id = "rotation-max-deg", long)]
    pub rotation_max_deg: Option<f64>,
}

impl GenArgs {
    fn overlay(&self, onto: &mut GenConfig) {
        merge(&mut onto.n_in, &self.n_in);
        merge(&mut onto.n_out, &self.n_out);
        merge(&mut onto.sigma, &self.sigma);
        merge(&mut onto.dim, &self.dim);
        merge(&mut onto.k, &self.k);
        merge(&mut onto.seed, &self.seed);
        if let Some(deg) = self.rotation_max_deg {
            onto.rotation_max = deg.to_radians();
        }
    }

    pub fn resolve(&self, file: &GenArgs) -> Result<GenConfig> {
        let mut gen = default_ablation_gen(0);
        file.overlay(&mut gen);
        self.overlay(&mut gen);
        gen.validate().context("generation settings")?;
        Ok(gen)
    }
}

/// Model architecture.
#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelArgs {
    /// Network variant: eqan, eqan-u or eqan-r [default: eqan]
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Solver layer: dpgm, gagm or sm [default: dpgm]
    #[arg(long, value_parser = parse_solver)]
    pub solver: Option<SolverKind>,
    /// Channel count [default: 8, or 32 with --full-scale]
    #[arg(long)]
    pub channels: Option<usize>,
    /// Block count [default: 3, or 5 with --full-scale]
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Input feature dimension [default: 2]
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Node affinity kind: norm or gaussian [default: gaussian]
    #[arg(long, value_parser = parse_unary)]
    pub unary: Option<UnaryMode>,
    /// Sinkhorn rounds inside each block [default: 5]
    #[arg(long)]
    pub sinkhorn_rounds: Option<usize>,
    /// Sampling density of the sampled mode [default: 1.0]
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Pass sampling gradients through the score features [default: true]
    #[arg(long = "ste-features")]
    pub ste_through_features: Option<bool>,
    /// Decision layer reads all block outputs, not just the last
    /// [default: true]
    #[arg(long = "decision-all")]
    pub decision_all: Option<bool>,
}

impl ModelArgs {
    fn overlay(&self, onto: &mut ModelSpec) {
        merge(&mut onto.mode, &self.mode);
        merge(&mut onto.solver, &self.solver);
        merge(&mut onto.channels, &self.channels);
        merge(&mut onto.blocks, &self.blocks);
        merge(&mut onto.feature_dim, &self.feature_dim);
        merge(&mut onto.unary, &self.unary);
        merge(&mut onto.sinkhorn_rounds, &self.sinkhorn_rounds);
        merge(&mut onto.gamma, &self.gamma);
        merge(&mut onto.ste_through_features, &self.ste_through_features);
        merge(&mut onto.decision_all, &self.decision_all);
    }

    pub fn resolve(&self, file: &ModelArgs, full_scale: bool) -> Result<ModelSpec> {
        let mut spec = ModelSpec::default();
        if full_scale {
            spec.channels = 32;
            spec.blocks = 5;
        }
        file.overlay(&mut spec);
        self.overlay(&mut spec);
        spec.validate().context("model settings")?;
        Ok(spec)
    }
}

/// Optimizer settings.
#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Post-warmup learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Pairs per gradient step [default: 8]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Total training iterations [default: 5000, or 80000 with --full-scale]
    #[arg(id = "iters", long)]
    pub total_iters: Option<usize>,
    /// Warmup iterations at the warmup rate [default: 500]
    #[arg(long)]
    pub warmup_iters: Option<usize>,
    /// Warmup learning rate [default: 1e-10]
    #[arg(long)]
    pub warmup_lr: Option<f64>,
    /// Adam first-moment decay [default: 0.9]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam second-moment decay [default: 0.999]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam stabilizer [default: 1e-8]
    #[arg(id = "adam-eps", long)]
    pub eps: Option<f64>,
    /// Training stream seed [default: 0]
    #[arg(id = "train-seed", long)]
    pub seed: Option<u64>,
    /// Evaluate the held-out set every this many iterations, 0 disables
    /// [default: 250]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Held-out pairs per evaluation [default: 200]
    #[arg(long)]
    pub eval_pairs: Option<usize>,
    /// Comma-separated parameter indices excluded from updates [default: none]
    #[arg(long, value_delimiter = ',')]
    pub frozen: Option<Vec<usize>>,
}

impl TrainArgs {
    fn overlay(&self, onto: &mut TrainConfig) {
        merge(&mut onto.lr, &self.lr);
        merge(&mut onto.batch, &self.batch);
        merge(&mut onto.total_iters, &self.total_iters);
        merge(&mut onto.warmup_iters, &self.warmup_iters);
        merge(&mut onto.warmup_lr, &self.warmup_lr);
        merge(&mut onto.beta1, &self.beta1);
        merge(&mut onto.beta2, &self.beta2);
        merge(&mut onto.eps, &self.eps);
        merge(&mut onto.seed, &self.seed);
        merge(&mut onto.eval_every, &self.eval_every);
        merge(&mut onto.eval_pairs, &self.eval_pairs);
        merge(&mut onto.frozen, &self.frozen);
    }

    pub fn resolve(&self, file: &TrainArgs, full_scale: bool) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if full_scale {
            cfg.total_iters = 80_000;
        }
        file.overlay(&mut cfg);
        self.overlay(&mut cfg);
        cfg.validate().context("training settings")?;
        Ok(cfg)
    }
}

/// Classical solver baseline.
#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicalArgs {
    /// Baseline solver: dpgm, gagm or sm [default: dpgm]
    #[arg(long, value_parser = parse_solver)]
    pub solver: Option<SolverKind>,
    /// Proximal step size, also the annealing start [default: 0.5]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Entropy weight [default: 1.0]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Solver iterations [default: 30]
    #[arg(id = "solver-iters", long)]
    pub iters: Option<usize>,
    /// Sinkhorn rounds per solver iteration [default: 5]
    #[arg(long)]
    pub sinkhorn_rounds: Option<usize>,
    /// Affinity bandwidth [default: 1.0]
    #[arg(id = "bandwidth", long)]
    pub sigma: Option<f64>,
    /// Node affinity kind: norm or gaussian [default: gaussian]
    #[arg(long, value_parser = parse_unary)]
    pub unary: Option<UnaryMode>,
    /// Annealing growth factor of the graduated solver [default: 1.075]
    #[arg(long)]
    pub growth: Option<f64>,
}

impl ClassicalArgs {
    fn overlay(&self, onto: &mut ClassicalConfig) {
        merge(&mut onto.solver, &self.solver);
        merge(&mut onto.beta, &self.beta);
        merge(&mut onto.lambda, &self.lambda);
        merge(&mut onto.iters, &self.iters);
        merge(&mut onto.sinkhorn_rounds, &self.sinkhorn_rounds);
        merge(&mut onto.sigma, &self.sigma);
        merge(&mut onto.unary, &self.unary);
        merge(&mut onto.growth, &self.growth);
    }

    pub fn resolve(&self, file: &ClassicalArgs) -> Result<ClassicalConfig> {
        let mut cfg = ClassicalConfig::default();
        file.overlay(&mut cfg);
        self.overlay(&mut cfg);
        cfg.validate().context("classical solver settings")?;
        Ok(cfg)
    }
}

/// Which matcher scores the pairs.
#[derive(Debug, Default, Clone, Args)]
pub struct MatcherArgs {
    /// Model checkpoint to evaluate (takes precedence over --baseline).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Untrained baseline when no checkpoint is given: classical or naive
    /// [default: classical]
    #[arg(long)]
    pub baseline: Option<String>,
    /// Solver runs inside the naive averaging baseline [default: 8]
    #[arg(long)]
    pub naive_channels: Option<usize>,
    /// Jitter seed of the naive baseline [default: 0]
    #[arg(long)]
    pub naive_seed: Option<u64>,
    #[command(flatten)]
    pub classical: ClassicalArgs,
}

impl MatcherArgs {
    pub fn build(&self, file: &FileConfig) -> Result<Matcher> {
        if let Some(path) = &self.checkpoint {
            let model = EqanModel::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            return Ok(Matcher::Learned(model));
        }
        let classical = self.classical.resolve(&file.classical)?;
        match self.baseline.as_deref().unwrap_or("classical") {
            "classical" => Ok(Matcher::Classical(classical)),
            "naive" => Ok(Matcher::Naive(NaiveModel::with_seed(
                classical,
                self.naive_channels.unwrap_or(8),
                self.naive_seed.unwrap_or(0),
            )?)),
            other => anyhow::bail!("unknown baseline '{other}' (expected classical or naive)"),
        }
    }
}

/// TOML configuration file: any subset of these sections, each holding any
/// subset of the matching flag group's fields.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gen: GenArgs,
    pub model: ModelArgs,
    pub train: TrainArgs,
    pub classical: ClassicalArgs,
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

#[derive(Debug, Args)]
pub struct GenerateCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    /// Write the pair JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Model initialization seed [default: 0]
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Continue training from this checkpoint instead of a fresh model;
    /// architecture flags are taken from the checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Published-scale preset: 32 channels, 5 blocks, 80000 iterations.
    #[arg(long)]
    pub full_scale: bool,
    /// Checkpoint output path [default: model.ckpt]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the per-iteration metrics CSV here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub matcher: MatcherArgs,
    /// Evaluation pairs [default: 200]
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Evaluation seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rotate query graphs by this angle in degrees [default: 0]
    #[arg(long)]
    pub rotation_deg: Option<f64>,
    /// Write the JSON summary here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchCmd {
    /// Pair JSON produced by `generate`.
    #[arg(long)]
    pub pair: PathBuf,
    #[command(flatten)]
    pub matcher: MatcherArgs,
    /// Forward seed for stochastic models [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    /// Study kind: noise, outlier or rotation (required unless --replay).
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<SweepKind>,
    #[command(flatten)]
    pub matcher: MatcherArgs,
    /// Data-seed repeats per grid point [default: 5]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Generated pairs per repeat [default: 200]
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Sweep seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Topology degree of the generated graphs [default: 5]
    #[arg(long)]
    pub degree: Option<usize>,
    /// Re-run every row of this sweep CSV and require bit-identical results.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Comma-separated variant ids: single-<solver>, naive-c<C>,
    /// ensemble-<solver>-c<C>-l<L>, frozen-solver-c<C>-l<L>,
    /// decision-last-c<C>-l<L> [default: the canonical set at c8/l3]
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Evaluation pairs per variant [default: 200]
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Ablation seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseCmd {
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub classical: ClassicalArgs,
    /// Solver iterations to log [default: 400]
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Derive the step size from the stability bound with this margin in
    /// (0, 1], overriding --beta [default: off]
    #[arg(long)]
    pub auto_beta: Option<f64>,
    /// Instance seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleSweepCmd {
    /// Sampled-mode checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub gen: GenArgs,
    /// Comma-separated sampling ratios
    /// [default: 0.1,0.25,0.5,0.75,1.0,1.5,2.0,8.0]
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// Evaluation pairs per ratio [default: 200]
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Evaluation seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
