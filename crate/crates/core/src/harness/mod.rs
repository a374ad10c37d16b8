//! Experiment orchestration: configs, training runs, reports and the
//! verification suites behind the command-line tool.

pub mod config;
pub mod distill;
pub mod grpo;
pub mod report;
pub mod run;
pub mod suite;

pub use config::{parse_seed_range, ExperimentConfig, Method, RewardMode};
pub use distill::{train_distill, triple_digest, DistillOptions, DistillOutcome, DistillStep, SeedData};
