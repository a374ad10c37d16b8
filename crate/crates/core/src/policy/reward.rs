use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{RelevanceExample, TokenId, World};

/// Groups whose reward spread falls below this get zero advantage.
pub const ADVANTAGE_STD_GUARD: f64 = 1e-8;

const MAX_SCORE: f64 = 4.0;

/// Five scores in `[0, 4]`: query understanding, service understanding,
/// rule compliance, reasoning consistency, answer correctness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardVector(pub [f64; 5]);

impl RewardVector {
    /// Mean of the four process dimensions.
    pub fn r_thinking(&self) -> f64 {
        self.0[..4].iter().sum::<f64>() / 4.0
    }

    pub fn r_label(&self) -> f64 {
        self.0[4]
    }
}

fn coverage(reason: &[&str], wanted: &[&str]) -> f64 {
    if wanted.is_empty() {
        return MAX_SCORE;
    }
    let hit = wanted.iter().filter(|w| reason.contains(w)).count();
    MAX_SCORE * hit as f64 / wanted.len() as f64
}

/// Rule-based stand-in for a learned reward model.
///
/// * dim 1: share of the query's canonical intent token present in the reason;
/// * dim 2: share of the evidence attributes (the deciding rule's pattern, or
///   every service attribute when no rule fires) present by canonical token;
/// * dim 3: the deciding rule's token (or the no-rule token) is cited;
/// * dim 4: the answer equals the label implied by the first cited rule;
/// * dim 5: the answer equals the true label.
pub fn score_output(world: &World, example: &RelevanceExample, output: &[TokenId]) -> Result<RewardVector> {
    let intent = world.query_intent(&example.query)?;
    let attrs = world.service_attributes(&example.service)?;
    let decision = world.decide(intent, &attrs);

    let (reason_ids, answer) = match output.split_last() {
        Some((a, r)) => (r, Some(*a)),
        None => (output, None),
    };
    let reason: Vec<&str> = reason_ids.iter().filter_map(|&t| world.vocab.token(t)).collect();

    let d1 = coverage(&reason, &[world.intents[intent].canonical()]);
    let evidence: Vec<&str> =
        world.evidence(decision, &attrs).into_iter().map(|a| world.attributes[a].canonical()).collect();
    let d2 = coverage(&reason, &evidence);
    let d3 = if reason.contains(&world.deciding_token(decision)) { MAX_SCORE } else { 0.0 };
    let answer_label = answer.and_then(|a| world.answer_label(a));
    let implied = reason.iter().find_map(|t| world.rule_label(t));
    let d4 = match (implied, answer_label) {
        (Some(r), Some(a)) if r == a => MAX_SCORE,
        _ => 0.0,
    };
    let d5 = if answer_label == Some(example.label) { MAX_SCORE } else { 0.0 };
    Ok(RewardVector([d1, d2, d3, d4, d5]))
}

/// `alpha · R_thinking + beta · R_label`.
pub fn aggregate_reward(rv: &RewardVector, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha >= 0.0 && beta >= 0.0) || alpha + beta == 0.0 {
        return Err(Error::Config(format!("reward weights alpha={alpha}, beta={beta}")));
    }
    Ok(alpha * rv.r_thinking() + beta * rv.r_label())
}

/// `(R_i − mean) / std` with population std; all zeros when the std is below
/// [`ADVANTAGE_STD_GUARD`].
pub fn compute_advantages(finals: &[f64]) -> Vec<f64> {
    let n = finals.len() as f64;
    if finals.is_empty() {
        return Vec::new();
    }
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ADVANTAGE_STD_GUARD {
        return vec![0.0; finals.len()];
    }
    let mut adv: Vec<f64> = finals.iter().map(|r| (r - mean) / std).collect();
    // Re-centre to cancel the rounding left by the division.
    let drift = adv.iter().sum::<f64>() / n;
    adv.iter_mut().for_each(|a| *a -= drift);
    adv
}
