use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::Reduction;
use crate::optim::AdamWConfig;
use crate::policy::PolicyConfig;
use crate::synth::{ReasonMode, Vocabulary, WorldConfig, DEFAULT_LABEL_MIX};

/// Distillation objective variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Student cross-entropy only.
    Baseline,
    /// Cross-entropy plus cosine alignment of the projected CLS with the
    /// frozen reason embedding.
    BaselineReason,
    /// Student cross-entropy plus InfoNCE alignment; no teacher CE.
    CrsdAlignOnly,
    /// Student CE + teacher CE + InfoNCE alignment.
    #[default]
    CrsdFull,
    /// As `CrsdFull` with the teacher fed the student input.
    CrsdNoReason,
    /// As `CrsdFull` with reasons shuffled across examples.
    CrsdRandomReason,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Baseline,
        Method::BaselineReason,
        Method::CrsdAlignOnly,
        Method::CrsdFull,
        Method::CrsdNoReason,
        Method::CrsdRandomReason,
    ];

    pub const ABLATION: [Method; 3] = [Method::CrsdFull, Method::CrsdNoReason, Method::CrsdRandomReason];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::BaselineReason => "baseline_reason",
            Method::CrsdAlignOnly => "crsd_align_only",
            Method::CrsdFull => "crsd_full",
            Method::CrsdNoReason => "crsd_no_reason",
            Method::CrsdRandomReason => "crsd_random_reason",
        }
    }

    /// Which reasons the training split carries for this method.
    pub fn reason_mode(self) -> ReasonMode {
        match self {
            Method::CrsdNoReason => ReasonMode::None,
            Method::CrsdRandomReason => ReasonMode::Random,
            _ => ReasonMode::Oracle,
        }
    }

    pub fn uses_teacher(self) -> bool {
        !matches!(self, Method::Baseline | Method::BaselineReason)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// `R_final = R_label` (alpha = 0, beta = 1).
    LabelOnly,
    /// `R_final = alpha · R_thinking + beta · R_label`.
    #[default]
    Weighted,
}

impl RewardMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::LabelOnly => "label_only",
            RewardMode::Weighted => "weighted",
        }
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "label_only" => Ok(RewardMode::LabelOnly),
            "weighted" => Ok(RewardMode::Weighted),
            _ => Err(Error::Config(format!("unknown reward mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub label_mix: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_size: 20_000, test_size: 2_000, label_mix: DEFAULT_LABEL_MIX }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mu: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
    pub reduction: Reduction,
    /// Treat the teacher rows of the alignment loss as constants.
    pub teacher_stop_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { mu: 0.1, gamma: 0.01, delta: 0.01, tau: 0.05, reduction: Reduction::Mean, teacher_stop_grad: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Batch size for held-out scoring.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, steps: 2_000, eval_batch_size: 256 }
    }
}

/// Encoder sizes; the vocabulary size comes from the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub d_reason: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self { d_model: 64, n_heads: 4, d_ff: 256, n_layers: 2, d_reason: 32, max_len: 160, init_std: 0.02 }
    }
}

impl EncoderDims {
    pub fn resolve(&self, vocab: &Vocabulary) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab.len(),
            max_len: self.max_len,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            d_reason: self.d_reason,
            init_std: self.init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub reward_mode: RewardMode,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub steps: usize,
    pub prompts_per_step: usize,
    /// Optimizer passes over each sampled batch.
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub sft_steps: usize,
    pub sft_batch_size: usize,
    pub sft_learning_rate: f64,
    pub eval_prompts: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub reason_cap: usize,
    pub max_len: usize,
    pub init_std: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            reward_mode: RewardMode::Weighted,
            group_size: 16,
            clip_eps: 0.2,
            kl_coeff: 0.01,
            alpha: 0.5,
            beta: 0.5,
            temperature: 1.0,
            steps: 200,
            prompts_per_step: 4,
            inner_epochs: 2,
            learning_rate: 1e-3,
            sft_steps: 400,
            sft_batch_size: 32,
            sft_learning_rate: 3e-3,
            eval_prompts: 400,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_layers: 1,
            reason_cap: 12,
            max_len: 64,
            init_std: 0.02,
        }
    }
}

impl GrpoConfig {
    /// Effective reward weights for the selected mode.
    pub fn weights(&self) -> (f64, f64) {
        match self.reward_mode {
            RewardMode::LabelOnly => (0.0, 1.0),
            RewardMode::Weighted => (self.alpha, self.beta),
        }
    }

    pub fn policy_config(&self, vocab_size: usize, answer_ids: [u32; 3]) -> PolicyConfig {
        PolicyConfig {
            vocab_size,
            answer_ids,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            max_len: self.max_len,
            reason_cap: self.reason_cap,
            init_std: self.init_std,
        }
    }
}

/// Everything a run depends on. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub method: Method,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub optim: AdamWConfig,
    pub encoder: EncoderDims,
    pub grpo: GrpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            method: Method::default(),
            world: WorldConfig::default(),
            data: DataConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            optim: AdamWConfig { learning_rate: 3e-4, ..AdamWConfig::default() },
            encoder: EncoderDims::default(),
            grpo: GrpoConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Pins the loss weights and group size to the published settings.
    pub fn apply_paper_defaults(&mut self) {
        self.loss.mu = 0.1;
        self.loss.gamma = 0.01;
        self.loss.delta = 0.01;
        self.grpo.group_size = 16;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        self.world.validate()?;
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return bad("train_size and test_size must be positive");
        }
        let mix = self.data.label_mix;
        if mix.iter().any(|&p| !(p >= 0.0)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("label_mix must be a probability vector");
        }
        let l = &self.loss;
        if !(l.mu >= 0.0 && l.gamma >= 0.0 && l.delta >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(l.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.train.batch_size == 0 || self.train.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.optim.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        let g = &self.grpo;
        if g.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(g.alpha >= 0.0 && g.beta >= 0.0) || g.alpha + g.beta == 0.0 {
            return bad("reward weights alpha, beta must be non-negative and not both zero");
        }
        if !(g.clip_eps >= 0.0 && g.kl_coeff >= 0.0 && g.temperature >= 0.0) {
            return bad("clip_eps, kl_coeff and temperature must be non-negative");
        }
        if g.prompts_per_step == 0 || g.sft_batch_size == 0 || g.inner_epochs == 0 || g.eval_prompts == 0 {
            return bad("GRPO batch sizes, inner_epochs and eval_prompts must be positive");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&json);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses `N`, `N..M` (exclusive) or `N..=M`.
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>> {
    let num = |x: &str| x.trim().parse::<u64>().map_err(|e| Error::Config(format!("seed {x:?}: {e}")));
    if let Some((a, b)) = s.split_once("..=") {
        let (a, b) = (num(a)?, num(b)?);
        return if a <= b { Ok((a..=b).collect()) } else { Err(Error::Config(format!("empty seed range {s}"))) };
    }
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        return if a < b { Ok((a..b).collect()) } else { Err(Error::Config(format!("empty seed range {s}"))) };
    }
    Ok(vec![num(s)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::default();
        cfg.method = Method::CrsdRandomReason;
        cfg.loss.tau = 0.1;
        cfg.optim.clip_norm = Some(1.0);
        cfg.grpo.reward_mode = RewardMode::LabelOnly;
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[loss]\nmu = 0.1\nnu = 2").is_err());
        assert!(ExperimentConfig::from_toml("[loss]\ntau = 0.0").is_err());
        assert!(ExperimentConfig::from_toml("method = \"nope\"").is_err());
        assert!(ExperimentConfig::from_toml("[grpo]\nalpha = 0.0\nbeta = 0.0").is_err());
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.loss.mu = 0.2;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn paper_defaults_and_seed_ranges() {
        let mut cfg = ExperimentConfig::from_toml("[loss]\nmu = 0.5\n[grpo]\ngroup_size = 4").unwrap();
        cfg.apply_paper_defaults();
        assert_eq!((cfg.loss.mu, cfg.loss.gamma, cfg.loss.delta, cfg.grpo.group_size), (0.1, 0.01, 0.01, 16));
        assert_eq!(parse_seed_range("3").unwrap(), vec![3]);
        assert_eq!(parse_seed_range("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seed_range("1..=2").unwrap(), vec![1, 2]);
        assert!(parse_seed_range("3..1").is_err());
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }
}
