use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use super::config::{ExperimentConfig, Method, RewardMode};
use super::distill::{train_distill, DistillOptions, SeedData};
use super::grpo::{sft_phase, train_grpo};
use super::report::{MethodReport, RunKind, RunReport, SeedRow, Timing};
use crate::error::Result;
use crate::par;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub single_thread: bool,
    /// Read datasets written by `gen-data` instead of generating them.
    pub data_dir: Option<PathBuf>,
}

pub struct RunOutput {
    pub report: RunReport,
    pub log: Vec<Value>,
    pub timing: Timing,
}

/// Share of GRPO steps averaged at each end when comparing early and late
/// group reward.
pub const REWARD_WINDOW: f64 = 0.1;

pub fn grpo_method_name(mode: RewardMode) -> &'static str {
    match mode {
        RewardMode::LabelOnly => "grpo_label_only",
        RewardMode::Weighted => "grpo_weighted",
    }
}

fn seed_data(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<SeedData> {
    match &opts.data_dir {
        Some(root) => SeedData::load(root, seed),
        None => SeedData::generate(cfg, seed),
    }
}

fn tag<T: Serialize>(x: &T, fields: &[(&str, Value)]) -> Result<Value> {
    let mut v = serde_json::to_value(x)?;
    if let Value::Object(m) = &mut v {
        for (k, f) in fields {
            m.insert((*k).to_string(), f.clone());
        }
    }
    Ok(v)
}

struct SeedResult {
    rows: Vec<(String, SeedRow)>,
    log: Vec<Value>,
    seconds: Vec<(String, f64)>,
}

fn assemble(kind: RunKind, cfg: &ExperimentConfig, names: &[String], per_seed: Vec<SeedResult>, start: Instant) -> RunOutput {
    let mut log = Vec::new();
    let mut seconds = BTreeMap::new();
    let mut by_method: BTreeMap<String, Vec<SeedRow>> = BTreeMap::new();
    for s in per_seed {
        log.extend(s.log);
        seconds.extend(s.seconds);
        for (m, row) in s.rows {
            by_method.entry(m).or_default().push(row);
        }
    }
    let methods = names
        .iter()
        .map(|n| MethodReport::new(n.clone(), by_method.remove(n).unwrap_or_default()))
        .collect();
    RunOutput {
        report: RunReport::new(kind, cfg, methods),
        log,
        timing: Timing { seconds, total_seconds: start.elapsed().as_secs_f64() },
    }
}

/// Trains every method on every configured seed. Seeds run as independent
/// workers; methods of a seed share one dataset.
pub fn run_distill(cfg: &ExperimentConfig, methods: &[Method], opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let d_opts = DistillOptions { single_thread: opts.single_thread, digest_steps: 0 };
    let per_seed = par::map(&cfg.seeds, opts.single_thread, |&seed| -> Result<SeedResult> {
        let data = seed_data(cfg, seed, opts)?;
        let mut out = SeedResult { rows: Vec::new(), log: Vec::new(), seconds: Vec::new() };
        for &m in methods {
            let t = Instant::now();
            let o = train_distill(cfg, m, &data, &d_opts)?;
            out.seconds.push((format!("{m}/seed-{seed}"), t.elapsed().as_secs_f64()));
            for s in &o.log {
                out.log.push(tag(s, &[("method", m.as_str().into()), ("seed", seed.into())])?);
            }
            let tail = o.log.len().min(50).max(1);
            let final_sce = o.log.iter().rev().take(tail).map(|s| s.sce).sum::<f64>() / tail as f64;
            let extras = BTreeMap::from([("final_sce".to_string(), final_sce)]);
            out.rows.push((m.as_str().to_string(), SeedRow { seed, eval: o.eval, extras }));
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = methods.iter().map(|m| m.as_str().to_string()).collect();
    Ok(assemble(RunKind::Distill, cfg, &names, per_seed, start))
}

fn window_mean(xs: &[f64], from_end: bool) -> f64 {
    let w = ((xs.len() as f64 * REWARD_WINDOW).ceil() as usize).clamp(1, xs.len().max(1));
    let part = if from_end { &xs[xs.len() - w..] } else { &xs[..w] };
    part.iter().sum::<f64>() / part.len() as f64
}

/// One SFT warm start per seed, then GRPO under each reward mode from that
/// same checkpoint.
pub fn run_grpo(cfg: &ExperimentConfig, modes: &[RewardMode], opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let per_seed = par::map(&cfg.seeds, opts.single_thread, |&seed| -> Result<SeedResult> {
        let data = seed_data(cfg, seed, opts)?;
        let mut out = SeedResult { rows: Vec::new(), log: Vec::new(), seconds: Vec::new() };
        let t = Instant::now();
        let (sft, sft_log) = sft_phase(cfg, &data)?;
        out.seconds.push((format!("sft/seed-{seed}"), t.elapsed().as_secs_f64()));
        for s in &sft_log {
            out.log.push(tag(s, &[("phase", "sft".into()), ("seed", seed.into())])?);
        }
        for &mode in modes {
            let name = grpo_method_name(mode);
            let t = Instant::now();
            let o = train_grpo(cfg, &data, &sft, mode, opts.single_thread)?;
            out.seconds.push((format!("{name}/seed-{seed}"), t.elapsed().as_secs_f64()));
            for s in &o.log {
                out.log.push(tag(s, &[("phase", "grpo".into()), ("method", name.into()), ("seed", seed.into())])?);
            }
            let rewards: Vec<f64> = o.log.iter().map(|s| s.mean_reward).collect();
            let extras = BTreeMap::from([
                ("r_thinking".to_string(), o.r_thinking),
                ("r_label".to_string(), o.r_label),
                ("reward_first".to_string(), window_mean(&rewards, false)),
                ("reward_last".to_string(), window_mean(&rewards, true)),
                ("reward_step0".to_string(), rewards.first().copied().unwrap_or(f64::NAN)),
                ("reward_final_step".to_string(), rewards.last().copied().unwrap_or(f64::NAN)),
            ]);
            out.rows.push((name.to_string(), SeedRow { seed, eval: o.eval, extras }));
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = modes.iter().map(|&m| grpo_method_name(m).to_string()).collect();
    Ok(assemble(RunKind::Grpo, cfg, &names, per_seed, start))
}
