use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RewardMode};
use super::distill::SeedData;
use crate::autodiff::{Checkpoint, Graph};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::optim::{AdamW, AdamWConfig};
use crate::par;
use crate::policy::{
    aggregate_reward, compute_advantages, grpo_objective, prompt_ids, score_output, sft_loss, PolicyOutput,
    PolicyParams,
};
use crate::synth::{derive_seed, RelevanceExample, TokenId};

/// One supervised warm-start step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftStep {
    pub step: usize,
    pub loss: f64,
}

/// One GRPO step: statistics of the freshly sampled groups and of the
/// final inner optimisation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoStep {
    pub step: usize,
    pub mean_reward: f64,
    pub r_thinking: f64,
    pub r_label: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub loss: f64,
}

pub struct GrpoOutcome {
    /// Answer-token predictions against true labels on held-out prompts.
    pub eval: EvalReport,
    /// Mean process score (first four reward dimensions) on held-out prompts.
    pub r_thinking: f64,
    pub r_label: f64,
    pub log: Vec<GrpoStep>,
    pub policy: PolicyParams,
}

/// Prompt and gold output (the oracle reasoning path, closed by its label token).
fn encode_example(data: &SeedData, e: &RelevanceExample) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let vocab = &data.world.vocab;
    Ok((prompt_ids(vocab, &e.query, &e.service)?, vocab.tokenize(&e.reason)?))
}

pub fn new_policy(cfg: &ExperimentConfig, data: &SeedData) -> Result<PolicyParams> {
    let vocab = &data.world.vocab;
    let pc = cfg.grpo.policy_config(vocab.len(), data.world.answer_ids());
    PolicyParams::new(pc, derive_seed(data.seed, "policy"))
}

/// Supervised warm start on oracle (reason, answer) sequences.
pub fn sft_phase(cfg: &ExperimentConfig, data: &SeedData) -> Result<(PolicyParams, Vec<SftStep>)> {
    let g_cfg = &cfg.grpo;
    let mut policy = new_policy(cfg, data)?;
    let train: Vec<(Vec<TokenId>, Vec<TokenId>)> = data
        .train
        .iter()
        .filter(|e| !e.reason.is_empty())
        .map(|e| encode_example(data, e))
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::Data("no training example carries a reasoning path".into()));
    }
    let mut opt = AdamW::new(
        AdamWConfig { learning_rate: g_cfg.sft_learning_rate, weight_decay: 0.0, ..AdamWConfig::default() },
        &policy.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(data.seed, "sft-batches"));
    let mut log = Vec::with_capacity(g_cfg.sft_steps);
    for step in 0..g_cfg.sft_steps {
        let batch: Vec<(&[TokenId], &[TokenId])> = (0..g_cfg.sft_batch_size)
            .map(|_| {
                let (p, o) = &train[rng.random_range(0..train.len())];
                (p.as_slice(), o.as_slice())
            })
            .collect();
        let mut g = Graph::new();
        let loss = sft_loss(&mut g, &policy, &batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence { step, what: format!("SFT loss = {value}") });
        }
        policy.store.zero_grad();
        g.backward_into(loss, &mut policy.store)?;
        opt.step(&mut policy.store);
        log.push(SftStep { step, loss: value });
    }
    Ok((policy, log))
}

/// Loads an SFT checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(cfg: &ExperimentConfig, data: &SeedData, path: &Path) -> Result<PolicyParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    let mut policy = new_policy(cfg, data)?;
    policy.store.load_checkpoint(&ckpt)?;
    Ok(policy)
}

pub fn save_checkpoint(policy: &PolicyParams, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&policy.store.to_checkpoint())?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Sampled {
    prompt: Vec<TokenId>,
    outputs: Vec<PolicyOutput>,
    finals: Vec<f64>,
    advantages: Vec<f64>,
    r_thinking: f64,
    r_label: f64,
}

/// GRPO from a warm-started policy; the warm start doubles as the frozen
/// KL reference.
pub fn train_grpo(
    cfg: &ExperimentConfig,
    data: &SeedData,
    sft: &PolicyParams,
    mode: RewardMode,
    single_thread: bool,
) -> Result<GrpoOutcome> {
    let mut g_cfg = cfg.grpo.clone();
    g_cfg.reward_mode = mode;
    let (alpha, beta) = g_cfg.weights();
    let world = &data.world;
    let mut policy = sft.clone();
    let mut opt = AdamW::new(
        AdamWConfig { learning_rate: g_cfg.learning_rate, weight_decay: 0.0, ..AdamWConfig::default() },
        &policy.store,
    );
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(derive_seed(data.seed, "grpo-prompts"));
    let mut log = Vec::with_capacity(g_cfg.steps);

    for step in 0..g_cfg.steps {
        let picks: Vec<(usize, usize)> = (0..g_cfg.prompts_per_step)
            .map(|k| (k, prompt_rng.random_range(0..data.train.len())))
            .collect();
        let groups = par::map(&picks, single_thread, |&(k, i)| -> Result<Sampled> {
            let e = &data.train[i];
            let prompt = prompt_ids(&world.vocab, &e.query, &e.service)?;
            let seed = derive_seed(data.seed, &format!("grpo-sample/{step}/{k}"));
            let outputs = policy.sample_group(&prompt, g_cfg.group_size, g_cfg.temperature, seed)?;
            let rewards = outputs.iter().map(|o| score_output(world, e, &o.tokens)).collect::<Result<Vec<_>>>()?;
            let finals = rewards.iter().map(|r| aggregate_reward(r, alpha, beta)).collect::<Result<Vec<_>>>()?;
            let n = rewards.len() as f64;
            Ok(Sampled {
                advantages: compute_advantages(&finals),
                r_thinking: rewards.iter().map(|r| r.r_thinking()).sum::<f64>() / n,
                r_label: rewards.iter().map(|r| r.r_label()).sum::<f64>() / n,
                prompt,
                outputs,
                finals,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let n = groups.len() as f64;
        let mut rec = GrpoStep {
            step,
            mean_reward: groups.iter().map(|s| s.finals.iter().sum::<f64>() / s.finals.len() as f64).sum::<f64>() / n,
            r_thinking: groups.iter().map(|s| s.r_thinking).sum::<f64>() / n,
            r_label: groups.iter().map(|s| s.r_label).sum::<f64>() / n,
            clip_fraction: 0.0,
            kl: 0.0,
            loss: 0.0,
        };
        let view: Vec<(&[TokenId], &[PolicyOutput], &[f64])> =
            groups.iter().map(|s| (s.prompt.as_slice(), s.outputs.as_slice(), s.advantages.as_slice())).collect();
        for _ in 0..g_cfg.inner_epochs {
            let mut g = Graph::new();
            let (loss, stats) = grpo_objective(&mut g, &policy, sft, &view, g_cfg.clip_eps, g_cfg.kl_coeff)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { step, what: format!("GRPO objective = {value}") });
            }
            policy.store.zero_grad();
            g.backward_into(loss, &mut policy.store)?;
            opt.step(&mut policy.store);
            rec.loss = value;
            rec.clip_fraction = stats.clip_fraction;
            rec.kl = stats.kl;
        }
        log.push(rec);
    }

    let (eval, r_thinking, r_label) = evaluate_policy(&policy, data, g_cfg.eval_prompts, single_thread)?;
    Ok(GrpoOutcome { eval, r_thinking, r_label, log, policy })
}

/// Greedy decoding on the first `n` held-out prompts: answer accuracy/F1
/// plus mean process and label scores.
pub fn evaluate_policy(
    policy: &PolicyParams,
    data: &SeedData,
    n: usize,
    single_thread: bool,
) -> Result<(EvalReport, f64, f64)> {
    let world = &data.world;
    let test = &data.test[..n.min(data.test.len())];
    let rows = par::map(test, single_thread, |e| -> Result<(usize, usize, f64, f64)> {
        let prompt = prompt_ids(&world.vocab, &e.query, &e.service)?;
        let out = policy.sample_group(&prompt, 1, 0.0, 0)?.remove(0);
        let rv = score_output(world, e, &out.tokens)?;
        let pred = out.answer().and_then(|a| world.answer_label(a)).map(|l| l.index()).unwrap_or(0);
        Ok((e.label.index(), pred, rv.r_thinking(), rv.r_label()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let pred: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let k = rows.len() as f64;
    Ok((
        EvalReport::from_predictions(&truth, &pred)?,
        rows.iter().map(|r| r.2).sum::<f64>() / k,
        rows.iter().map(|r| r.3).sum::<f64>() / k,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.world.n_intents = 6;
        cfg.world.n_attributes = 10;
        cfg.world.n_rules = 12;
        cfg.data.train_size = 200;
        cfg.data.test_size = 60;
        cfg.grpo.sft_steps = 20;
        cfg.grpo.steps = 6;
        cfg.grpo.group_size = 4;
        cfg.grpo.prompts_per_step = 2;
        cfg.grpo.eval_prompts = 30;
        cfg.grpo.d_model = 16;
        cfg.grpo.d_ff = 16;
        cfg
    }

    #[test]
    fn label_only_equals_weighted_with_zero_alpha() {
        let mut cfg = tiny();
        let data = SeedData::generate(&cfg, 1).unwrap();
        let (sft, _) = sft_phase(&cfg, &data).unwrap();
        let a = train_grpo(&cfg, &data, &sft, RewardMode::LabelOnly, true).unwrap();
        cfg.grpo.alpha = 0.0;
        let b = train_grpo(&cfg, &data, &sft, RewardMode::Weighted, true).unwrap();
        assert_eq!(a.policy.store.digest(), b.policy.store.digest());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.loss, y.loss);
            assert_eq!(x.r_label, y.r_label);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_threading_agree() {
        let cfg = tiny();
        let data = SeedData::generate(&cfg, 2).unwrap();
        let (sft, log) = sft_phase(&cfg, &data).unwrap();
        assert!(log.last().unwrap().loss < log[0].loss);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.json");
        save_checkpoint(&sft, &path).unwrap();
        let back = load_checkpoint(&cfg, &data, &path).unwrap();
        assert_eq!(back.store.digest(), sft.store.digest());
        assert!(load_checkpoint(&cfg, &data, &dir.path().join("missing.json")).is_err());

        let a = train_grpo(&cfg, &data, &sft, RewardMode::Weighted, true).unwrap();
        let b = train_grpo(&cfg, &data, &back, RewardMode::Weighted, false).unwrap();
        assert_eq!(a.policy.store.digest(), b.policy.store.digest());
        assert_eq!(a.eval, b.eval);
        assert!(a.log.iter().all(|s| s.loss.is_finite() && s.kl >= 0.0));
    }
}
