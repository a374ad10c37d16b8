use serde::{Deserialize, Serialize};

use super::{PolicyOutput, PolicyParams};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::synth::TokenId;

/// Mean per-token negative log-likelihood of gold outputs given prompts.
pub fn sft_loss(g: &mut Graph, policy: &PolicyParams, batch: &[(&[TokenId], &[TokenId])]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty SFT batch".into()));
    }
    let lp = policy.token_log_probs(g, batch)?;
    let m = g.mean(lp);
    Ok(g.neg(m))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoStats {
    /// Objective value before negation.
    pub objective: f64,
    /// Share of tokens where the clipped branch is the active minimum.
    pub clip_fraction: f64,
    /// Token-mean of the KL estimator.
    pub kl: f64,
}

/// Token-level GRPO objective on precomputed log-probabilities.
///
/// `logp` holds the current policy's log-probabilities of `K` tokens; `old`,
/// `reference`, `adv` and `weights` are per-token constants. Returns
/// `Σ_k w_k · (min(ρ_k A_k, clip(ρ_k) A_k) − kl_coeff · KL_k)` where
/// `ρ = exp(logp − old)` and `KL = exp(ref − logp) − (ref − logp) − 1`.
#[allow(clippy::too_many_arguments)]
pub fn grpo_surrogate(
    g: &mut Graph,
    logp: Var,
    old: &[f64],
    reference: &[f64],
    adv: &[f64],
    weights: &[f64],
    eps: f64,
    kl_coeff: f64,
) -> Result<(Var, GrpoStats)> {
    let k = g.value(logp).len();
    if [old.len(), reference.len(), adv.len(), weights.len()].iter().any(|&n| n != k) {
        return Err(Error::Shape(format!(
            "{k} token log-probs with {} old, {} reference, {} advantages, {} weights",
            old.len(),
            reference.len(),
            adv.len(),
            weights.len()
        )));
    }
    let old_v = g.constant(Tensor::vector(old.to_vec()));
    let diff = g.sub(logp, old_v)?;
    let ratio = g.exp(diff);
    let surr = g.clipped_surrogate(ratio, adv, eps)?;

    let ref_v = g.constant(Tensor::vector(reference.to_vec()));
    let d = g.sub(ref_v, logp)?;
    let e = g.exp(d);
    let kl = g.sub(e, d)?;
    let kl = g.shift(kl, -1.0);

    let penalty = g.scale(kl, kl_coeff);
    let per_token = g.sub(surr, penalty)?;
    let w = g.constant(Tensor::vector(weights.to_vec()));
    let weighted = g.mul(per_token, w)?;
    let objective = g.sum(weighted);

    let rv = g.value(ratio).data();
    let clipped = rv
        .iter()
        .zip(adv)
        .filter(|&(&r, &a)| {
            let c = r.clamp(1.0 - eps, 1.0 + eps);
            c * a < r * a
        })
        .count();
    let stats = GrpoStats {
        objective: g.value(objective).item(),
        clip_fraction: clipped as f64 / k.max(1) as f64,
        kl: g.value(kl).data().iter().sum::<f64>() / k.max(1) as f64,
    };
    Ok((objective, stats))
}

/// Negated GRPO objective over groups of sampled outputs, ready to minimise.
///
/// Each group is `(prompt, outputs, advantages)`. Per-token terms are
/// averaged within each output over its generated tokens, then over the
/// outputs of a group, then over groups. Old log-probabilities are the ones
/// recorded at sampling time; reference log-probabilities come from
/// `reference` and carry no gradient.
pub fn grpo_objective(
    g: &mut Graph,
    policy: &PolicyParams,
    reference: &PolicyParams,
    groups: &[(&[TokenId], &[PolicyOutput], &[f64])],
    eps: f64,
    kl_coeff: f64,
) -> Result<(Var, GrpoStats)> {
    if groups.is_empty() {
        return Err(Error::Invalid("no groups".into()));
    }
    let mut pairs = Vec::new();
    let (mut old, mut refs, mut adv, mut weights) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let n_groups = groups.len() as f64;
    for (prompt, outputs, advantages) in groups {
        if outputs.len() != advantages.len() || outputs.is_empty() {
            return Err(Error::Shape(format!("{} outputs with {} advantages", outputs.len(), advantages.len())));
        }
        let toks: Vec<&[TokenId]> = outputs.iter().map(|o| o.tokens.as_slice()).collect();
        let ref_lp = reference.score(prompt, &toks)?;
        let g_size = outputs.len() as f64;
        for ((o, &a), r) in outputs.iter().zip(advantages.iter()).zip(ref_lp) {
            if o.log_probs.len() != o.tokens.len() {
                return Err(Error::Invalid(format!(
                    "{} tokens but {} recorded log-probs",
                    o.tokens.len(),
                    o.log_probs.len()
                )));
            }
            let w = 1.0 / (o.tokens.len() as f64 * g_size * n_groups);
            pairs.push((*prompt, o.tokens.as_slice()));
            old.extend_from_slice(&o.log_probs);
            refs.extend(r);
            adv.extend(std::iter::repeat_n(a, o.tokens.len()));
            weights.extend(std::iter::repeat_n(w, o.tokens.len()));
        }
    }
    let logp = policy.token_log_probs(g, &pairs)?;
    let (obj, stats) = grpo_surrogate(g, logp, &old, &refs, &adv, &weights, eps, kl_coeff)?;
    Ok((g.neg(obj), stats))
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy;
    use super::*;
    use crate::autodiff::gradcheck::grad_check_inputs;
    use crate::autodiff::grad_check;
    use crate::policy::compute_advantages;
    use crate::synth::{CLS, SEP};

    #[test]
    fn uniform_policy_costs_ln_v_per_token() {
        let mut p = toy(1, 0.3);
        p.set_output_head(Tensor::zeros(&[8, 6]), Tensor::zeros(&[6])).unwrap();
        let mut g = Graph::new();
        let batch: [(&[TokenId], &[TokenId]); 2] = [(&[CLS, 0, SEP], &[1, 2, 3]), (&[CLS, SEP], &[4])];
        let l = sft_loss(&mut g, &p, &batch).unwrap();
        assert!((g.value(l).item() - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_gold_costs_nothing() {
        let mut p = toy(2, 0.3);
        let mut b = vec![0.0; 6];
        b[3] = 1000.0;
        p.set_output_head(Tensor::zeros(&[8, 6]), Tensor::vector(b)).unwrap();
        let mut g = Graph::new();
        let l = sft_loss(&mut g, &p, &[(&[CLS, SEP], &[3]), (&[CLS, 1, SEP], &[3, 3, 3])]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        assert!(sft_loss(&mut g, &p, &[(&[CLS, SEP], &[])]).is_err());
    }

    #[test]
    fn sft_gradients() {
        let p = toy(3, 0.5);
        let report = grad_check(&p.store, |g, store| {
            let q = PolicyParams { store: store.clone(), ..p.clone() };
            sft_loss(g, &q, &[(&[CLS, 0, SEP], &[1, 2, 3]), (&[CLS, 2, SEP], &[0, 5])])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn groups(p: &PolicyParams) -> Vec<(Vec<TokenId>, Vec<PolicyOutput>, Vec<f64>)> {
        [[CLS, 0, SEP], [CLS, 2, SEP]]
            .iter()
            .enumerate()
            .map(|(i, prompt)| {
                let outs = p.sample_group(prompt, 4, 1.0, 10 + i as u64).unwrap();
                let finals: Vec<f64> = outs.iter().map(|o| o.tokens.len() as f64 + o.tokens[0] as f64).collect();
                (prompt.to_vec(), outs, compute_advantages(&finals))
            })
            .collect()
    }

    fn view(gs: &[(Vec<TokenId>, Vec<PolicyOutput>, Vec<f64>)]) -> Vec<(&[TokenId], &[PolicyOutput], &[f64])> {
        gs.iter().map(|(p, o, a)| (p.as_slice(), o.as_slice(), a.as_slice())).collect()
    }

    #[test]
    fn on_policy_identity() {
        let p = toy(4, 0.5);
        let gs = groups(&p);
        let mut g = Graph::new();
        let (loss, stats) = grpo_objective(&mut g, &p, &p, &view(&gs), 0.2, 0.01).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);
        assert!(stats.kl.abs() < 1e-12);
        assert_eq!(stats.clip_fraction, 0.0);
    }

    #[test]
    fn grpo_gradients_with_off_policy_reference() {
        let p = toy(5, 0.5);
        let reference = toy(6, 0.5);
        let old = toy(7, 0.5);
        let gs = groups(&old);
        let report = grad_check(&p.store, |g, store| {
            let q = PolicyParams { store: store.clone(), ..p.clone() };
            // wide clip so no element sits on a kink under the FD step
            Ok(grpo_objective(g, &q, &reference, &view(&gs), 10.0, 0.05)?.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn clipped_token_has_zero_logit_gradient() {
        // One token whose ratio is 1.5 with positive advantage and eps 0.2.
        let logits = Tensor::vector(vec![0.3, -0.2, 1.1, 0.0]).reshape(&[1, 4]).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(logits.clone());
        let lp = g.log_softmax(x, 1).unwrap();
        let picked = g.pick(lp, &[2]).unwrap();
        let cur = g.value(picked).item();
        let old = cur - 1.5f64.ln();
        let (obj, stats) = grpo_surrogate(&mut g, picked, &[old], &[cur], &[0.7], &[1.0], 0.2, 0.0).unwrap();
        assert_eq!(stats.clip_fraction, 1.0);
        let grads = g.backward(obj).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_clip_no_kl_is_the_plain_surrogate() {
        let p = toy(8, 0.5);
        let old = toy(9, 0.5);
        let gs = groups(&old);
        let mut g = Graph::new();
        let (loss, _) = grpo_objective(&mut g, &p, &old, &view(&gs), f64::INFINITY, 0.0).unwrap();
        let mut expect = 0.0;
        for (prompt, outs, adv) in &gs {
            let toks: Vec<&[TokenId]> = outs.iter().map(|o| o.tokens.as_slice()).collect();
            let cur = p.score(prompt, &toks).unwrap();
            for ((o, a), c) in outs.iter().zip(adv).zip(&cur) {
                let per: f64 = o.log_probs.iter().zip(c).map(|(ol, cl)| (cl - ol).exp() * a).sum();
                expect += per / o.tokens.len() as f64 / outs.len() as f64 / gs.len() as f64;
            }
        }
        assert!((-g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn surrogate_gradients_through_log_probs() {
        let inputs = [Tensor::vector(vec![-0.7, -1.2, -0.1])];
        let report = grad_check_inputs(&inputs, |g, v| {
            Ok(grpo_surrogate(g, v[0], &[-0.9, -1.0, -0.3], &[-0.5, -1.5, -0.2], &[1.0, -0.5, 0.3], &[0.2, 0.3, 0.5], 5.0, 0.1)?.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
