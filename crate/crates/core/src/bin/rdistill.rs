use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reasoning_distill::error::{Error, Result};
use reasoning_distill::harness::report::{write_run_dir, Comparison, RunReport};
use reasoning_distill::harness::run::{run_distill, run_grpo, RunOptions, RunOutput};
use reasoning_distill::harness::suite::{grad_check_suite, selftest};
use reasoning_distill::harness::{parse_seed_range, ExperimentConfig, Method, RewardMode, SeedData};
use reasoning_distill::synth::ReasonMode;

#[derive(Parser)]
#[command(name = "rdistill", version, about = "Reasoning distillation experiments on synthetic relevance data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed; overrides the config's seed list.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed range such as `0..5` or `0..=4`.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Run everything on the calling thread.
    #[arg(long)]
    single_thread: bool,
    /// Load the published loss weights and group size.
    #[arg(long)]
    paper_defaults: bool,
}

#[derive(Args, Clone)]
struct DataArg {
    /// Read datasets written by `gen-data` from this directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate worlds and train/test splits for each seed.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "oracle")]
        reason_mode: ReasonMode,
    },
    /// Train one distillation method on every seed.
    TrainDistill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Defaults to the config's method.
        #[arg(long)]
        method: Option<Method>,
    },
    /// SFT warm start, then GRPO under label-only and weighted rewards.
    TrainGrpo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Restrict to one reward mode (`label_only` or `weighted`).
        #[arg(long)]
        reward_mode: Option<RewardMode>,
    },
    /// Reasoning-path ablation: oracle, empty and shuffled reasons.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Comparison table from run directories or report.json files.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write comparison.csv and comparison.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks for every op and objective.
    GradCheck,
    /// Closed-form loss, advantage and metric cases.
    Selftest,
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if common.paper_defaults {
        cfg.apply_paper_defaults();
    }
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(r) = &common.seeds {
        cfg.seeds = parse_seed_range(r)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish(out: &Path, cfg: &ExperimentConfig, run: &RunOutput) -> Result<()> {
    write_run_dir(out, cfg, &run.report, &run.log, &run.timing)?;
    let table = Comparison::from_reports(std::slice::from_ref(&run.report))?;
    std::fs::write(out.join("comparison.csv"), table.to_csv()).map_err(|e| Error::io(out, e))?;
    print!("{}", table.to_text());
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn options(common: &Common, data: &DataArg) -> RunOptions {
    RunOptions { single_thread: common.single_thread, data_dir: data.data.clone() }
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, reason_mode } => {
            let cfg = resolve(&common)?;
            for &seed in &cfg.seeds {
                let data = SeedData::generate(&cfg, seed)?;
                data.write(&common.out, reason_mode)?;
                println!("seed {seed}: {} train, {} test, vocabulary {}", data.train.len(), data.test.len(), data.world.vocab.len());
            }
            std::fs::write(common.out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&common.out, e))?;
        }
        Command::TrainDistill { common, data, method } => {
            let cfg = resolve(&common)?;
            let method = method.unwrap_or(cfg.method);
            let out = run_distill(&cfg, &[method], &options(&common, &data))?;
            finish(&common.out, &cfg, &out)?;
        }
        Command::TrainGrpo { common, data, reward_mode } => {
            let cfg = resolve(&common)?;
            let modes = match reward_mode {
                Some(m) => vec![m],
                None => vec![RewardMode::LabelOnly, RewardMode::Weighted],
            };
            let out = run_grpo(&cfg, &modes, &options(&common, &data))?;
            finish(&common.out, &cfg, &out)?;
            for m in &out.report.methods {
                if let (Some(t), Some(l)) = (m.extra("r_thinking"), m.extra("r_label")) {
                    println!("{}: R_thinking {:.4} ± {:.4}, R_label {:.4} ± {:.4}", m.method, t.mean, t.std, l.mean, l.std);
                }
            }
        }
        Command::Ablate { common, data } => {
            let cfg = resolve(&common)?;
            let out = run_distill(&cfg, &Method::ABLATION, &options(&common, &data))?;
            finish(&common.out, &cfg, &out)?;
        }
        Command::Report { runs, out } => {
            let reports = runs.iter().map(|p| RunReport::load(&report_path(p))).collect::<Result<Vec<_>>>()?;
            let table = Comparison::from_reports(&reports)?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                std::fs::write(dir.join("comparison.csv"), table.to_csv()).map_err(|e| Error::io(&dir, e))?;
                std::fs::write(dir.join("comparison.txt"), table.to_text()).map_err(|e| Error::io(&dir, e))?;
            }
        }
        Command::GradCheck => {
            let mut ok = true;
            for c in grad_check_suite()? {
                ok &= c.passed();
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!("{verdict:4} {:32} max rel err {:.3e} over {} coords", c.name, c.max_rel_error, c.checked);
            }
            return Ok(ok);
        }
        Command::Selftest => {
            let mut ok = true;
            for c in selftest()? {
                ok &= c.passed();
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!("{verdict:4} {:32} {:.15} (expected {:.15}, tol {:e})", c.name, c.value, c.expected, c.tolerance);
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
