//! Subcommand implementations over the library harness.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use eqan_core::graph::{make_pair, GenConfig, MatchPair};
use eqan_core::harness::{
    convergence_diagnostics, default_gamma_grid, evaluate, model_fingerprint, parse_sweep_csv,
    replay_row, run_ablation, run_robustness_sweep, run_sampling_sweep, write_ablation_csv,
    write_convergence_csv, write_sampling_csv, write_sweep_csv, AblationVariant, SweepConfig,
};
use eqan_core::net::{base_affinity, pad_pair, EqanModel};
use eqan_core::solvers::stable_beta;
use eqan_core::train::{train, write_metrics_csv};

use crate::opts::*;

pub fn dispatch(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(c) => generate_cmd(c, &file),
        Command::Train(c) => train_cmd(c, &file),
        Command::Eval(c) => eval_cmd(c, &file),
        Command::Match(c) => match_cmd(c, &file),
        Command::Sweep(c) => sweep_cmd(c, &file),
        Command::Ablate(c) => ablate_cmd(c, &file),
        Command::Diagnose(c) => diagnose_cmd(c, &file),
        Command::SampleSweep(c) => sample_sweep_cmd(c, &file),
    }
}

/// On-disk format of `generate`, consumed back by `match`.
#[derive(Serialize, Deserialize)]
struct GeneratedFile {
    gen: GenConfig,
    pair: MatchPair,
}

fn emit_json(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(path) = out {
        fs::write(path, format!("{text}\n"))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("{}", json!({ "wrote": path.display().to_string() }));
    } else {
        println!("{text}");
    }
    Ok(())
}

fn emit_csv<F>(render: F, rows: usize, out: Option<&Path>) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> eqan_core::Result<()>,
{
    let mut buf = Vec::new();
    render(&mut buf)?;
    if let Some(path) = out {
        fs::write(path, &buf).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", json!({ "wrote": path.display().to_string(), "rows": rows }));
    } else {
        print!("{}", String::from_utf8(buf).expect("CSV is UTF-8"));
    }
    Ok(())
}

fn generate_cmd(cmd: GenerateCmd, file: &FileConfig) -> Result<()> {
    let gen = cmd.gen.resolve(&file.gen)?;
    let pair = make_pair(&gen)?;
    info!("generated pair with {} reference nodes", pair.reference.n());
    emit_json(&GeneratedFile { gen, pair }, cmd.out.as_deref())
}

fn train_cmd(cmd: TrainCmd, file: &FileConfig) -> Result<()> {
    let gen = cmd.gen.resolve(&file.gen)?;
    let cfg = cmd.train.resolve(&file.train, cmd.full_scale)?;
    let mut model = match &cmd.resume {
        Some(path) => EqanModel::load(path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?,
        None => {
            let spec = cmd.model.resolve(&file.model, cmd.full_scale)?;
            EqanModel::with_seed(spec, cmd.model_seed.unwrap_or(0))?
        }
    };
    info!("training {} parameters for {} iterations", model.param_count(), cfg.total_iters);
    let records = train(&mut model, &cfg, &gen)?;
    let out = cmd.out.unwrap_or_else(|| PathBuf::from("model.ckpt"));
    model.save(&out).with_context(|| format!("saving checkpoint {}", out.display()))?;
    if let Some(path) = &cmd.metrics {
        let mut buf = Vec::new();
        write_metrics_csv(&records, &mut buf)?;
        fs::write(path, &buf).with_context(|| format!("writing {}", path.display()))?;
    }
    let best = records
        .iter()
        .filter_map(|r| r.eval_acc)
        .fold(None::<f64>, |acc, a| Some(acc.map_or(a, |b| b.max(a))));
    let summary = json!({
        "checkpoint": out.display().to_string(),
        "params": model.param_count(),
        "iterations": cfg.total_iters,
        "final_loss": records.last().map(|r| r.loss),
        "best_eval_acc": best,
        "fingerprint": model_fingerprint(&model)?,
    });
    emit_json(&summary, None)
}

fn eval_cmd(cmd: EvalCmd, file: &FileConfig) -> Result<()> {
    let gen = cmd.gen.resolve(&file.gen)?;
    let matcher = cmd.matcher.build(file)?;
    let pairs = cmd.pairs.unwrap_or(200);
    let seed = cmd.seed.unwrap_or(0);
    let rotation_deg = cmd.rotation_deg.unwrap_or(0.0);
    let accuracy = evaluate(&matcher, &gen, pairs, seed, rotation_deg.to_radians())?;
    let summary = json!({
        "accuracy": accuracy,
        "pairs": pairs,
        "seed": seed,
        "rotation_deg": rotation_deg,
        "matcher": matcher.fingerprint()?,
        "gen": gen,
    });
    emit_json(&summary, cmd.out.as_deref())
}

fn match_cmd(cmd: MatchCmd, file: &FileConfig) -> Result<()> {
    let text = fs::read_to_string(&cmd.pair)
        .with_context(|| format!("reading pair file {}", cmd.pair.display()))?;
    let parsed: GeneratedFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing pair file {}", cmd.pair.display()))?;
    let matcher = cmd.matcher.build(file)?;
    let res = matcher.match_pair(&parsed.pair, cmd.seed.unwrap_or(0))?;
    let summary = json!({
        "perm": res.perm,
        "accuracy": res.accuracy,
        "similarity": res.similarity,
    });
    emit_json(&summary, cmd.out.as_deref())
}

fn sweep_cmd(cmd: SweepCmd, file: &FileConfig) -> Result<()> {
    let matcher = cmd.matcher.build(file)?;
    if let Some(path) = &cmd.replay {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading sweep CSV {}", path.display()))?;
        let rows = parse_sweep_csv(&text)?;
        for (i, row) in rows.iter().enumerate() {
            let fresh = replay_row(&matcher, row).with_context(|| format!("replaying row {i}"))?;
            if fresh != *row {
                bail!(
                    "row {i} of {} did not reproduce: recorded mean {}, fresh {}",
                    path.display(),
                    row.mean_acc,
                    fresh.mean_acc
                );
            }
        }
        println!("{}", json!({ "replayed": rows.len(), "identical": true }));
        return Ok(());
    }
    let Some(kind) = cmd.kind else { bail!("--kind is required unless --replay is given") };
    let cfg = SweepConfig {
        kind,
        repeats: cmd.repeats.unwrap_or(5),
        eval_pairs: cmd.pairs.unwrap_or(200),
        seed: cmd.seed.unwrap_or(0),
        k: cmd.degree.unwrap_or(5),
    };
    let rows = run_robustness_sweep(&matcher, &cfg)?;
    emit_csv(|w| write_sweep_csv(&rows, w), rows.len(), cmd.out.as_deref())
}

fn default_variant_ids() -> Vec<String> {
    [
        "single-dpgm",
        "single-gagm",
        "single-sm",
        "naive-c8",
        "ensemble-dpgm-c8-l3",
        "ensemble-gagm-c8-l3",
        "ensemble-sm-c8-l3",
        "frozen-solver-c8-l3",
        "decision-last-c8-l3",
    ]
    .map(String::from)
    .to_vec()
}

fn ablate_cmd(cmd: AblateCmd, file: &FileConfig) -> Result<()> {
    let gen = cmd.gen.resolve(&file.gen)?;
    let train_cfg = cmd.train.resolve(&file.train, false)?;
    let ids = cmd.variants.unwrap_or_else(default_variant_ids);
    let variants = ids
        .iter()
        .map(|id| AblationVariant::parse(id.trim()))
        .collect::<eqan_core::Result<Vec<_>>>()?;
    info!("running {} ablation variants", variants.len());
    let rows =
        run_ablation(&variants, &gen, &train_cfg, cmd.pairs.unwrap_or(200), cmd.seed.unwrap_or(0))?;
    emit_csv(|w| write_ablation_csv(&rows, w), rows.len(), cmd.out.as_deref())
}

fn diagnose_cmd(cmd: DiagnoseCmd, file: &FileConfig) -> Result<()> {
    let gen = cmd.gen.resolve(&file.gen)?;
    let classical = cmd.classical.resolve(&file.classical)?;
    let pair = make_pair(&gen.with_seed(cmd.seed.unwrap_or(0)))?;
    let padded = pad_pair(&pair)?;
    let m = base_affinity(&padded, classical.sigma, classical.unary)?;
    let beta = match cmd.auto_beta {
        Some(margin) => stable_beta(&m, margin)?,
        None => classical.beta,
    };
    info!("logging {} proximal iterations at step size {beta}", cmd.t_max.unwrap_or(400));
    let rows = convergence_diagnostics(
        &m,
        beta,
        classical.lambda,
        cmd.t_max.unwrap_or(400),
        classical.sinkhorn_rounds,
    )?;
    emit_csv(|w| write_convergence_csv(&rows, w), rows.len(), cmd.out.as_deref())
}

fn sample_sweep_cmd(cmd: SampleSweepCmd, file: &FileConfig) -> Result<()> {
    let gen = cmd.gen.resolve(&file.gen)?;
    let model = EqanModel::load(&cmd.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cmd.checkpoint.display()))?;
    let gammas = cmd.gammas.unwrap_or_else(default_gamma_grid);
    let rows =
        run_sampling_sweep(&model, &gammas, &gen, cmd.pairs.unwrap_or(200), cmd.seed.unwrap_or(0))?;
    emit_csv(|w| write_sampling_csv(&rows, w), rows.len(), cmd.out.as_deref())
}
