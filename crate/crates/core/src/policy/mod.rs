//! Tiny causal policy over the world vocabulary, its rule-based reward, and
//! the supervised and group-relative objectives used to train it.
//!
//! A prompt is `[CLS] query [SEP] service [SEP]`; an output is a reasoning
//! path of at most `reason_cap` tokens closed by one answer token. At output
//! position `reason_cap` the policy is masked to the answer sub-vocabulary, so
//! every output terminates.

mod objective;
mod reward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::encoder::{affine, pack, Block, Init};
use crate::error::{Error, Result};
use crate::synth::{TokenId, Vocabulary, CLS, SEP};

pub use objective::{grpo_objective, grpo_surrogate, sft_loss, GrpoStats};
pub use reward::{aggregate_reward, compute_advantages, score_output, RewardVector, ADVANTAGE_STD_GUARD};

/// Additive logit penalty for tokens outside the answer set at the forced step.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub answer_ids: [TokenId; 3],
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub reason_cap: usize,
    pub init_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            answer_ids: [3, 4, 5],
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            n_layers: 1,
            max_len: 64,
            reason_cap: 12,
            init_std: 0.02,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.answer_ids.iter().any(|&a| a as usize >= self.vocab_size) {
            return bad(format!("answer ids {:?} outside vocabulary of {}", self.answer_ids, self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("{} heads do not divide d_model {}", self.n_heads, self.d_model));
        }
        if self.d_ff == 0 || self.max_len <= self.reason_cap + 1 {
            return bad("d_ff must be positive and max_len must exceed reason_cap + 1".into());
        }
        if !(self.init_std >= 0.0) {
            return bad(format!("init_std {}", self.init_std));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Block>,
    out_w: ParamId,
    out_b: ParamId,
}

/// One sampled completion and its per-token log-probabilities under the
/// sampling policy at temperature 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub tokens: Vec<TokenId>,
    pub log_probs: Vec<f64>,
}

impl PolicyOutput {
    pub fn reason(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len().saturating_sub(1)]
    }

    pub fn answer(&self) -> Option<TokenId> {
        self.tokens.last().copied()
    }
}

/// `[CLS] query [SEP] service [SEP]`.
pub fn prompt_ids<S: AsRef<str>>(vocab: &Vocabulary, query: &[S], service: &[S]) -> Result<Vec<TokenId>> {
    let mut ids = vec![CLS];
    ids.extend(vocab.tokenize(query)?);
    ids.push(SEP);
    ids.extend(vocab.tokenize(service)?);
    ids.push(SEP);
    Ok(ids)
}

impl PolicyParams {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed, config.init_std)?;
        let (d, f) = (config.d_model, config.d_ff);
        let tok_emb = init.weight("tok_emb", config.vocab_size, d);
        let pos_emb = init.weight("pos_emb", config.max_len, d);
        let layers = (0..config.n_layers).map(|l| Block::new(&mut init, &format!("layer{l}"), d, f)).collect();
        let out_w = init.weight("out_w", d, config.vocab_size);
        let out_b = init.zeros("out_b", config.vocab_size);
        Ok(Self { config, store, tok_emb, pos_emb, layers, out_w, out_b })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same architecture carrying the weights in `store`.
    pub fn with_store(&self, store: ParamStore) -> Self {
        Self { store, ..self.clone() }
    }

    /// Replaces the output head; shapes must match.
    pub fn set_output_head(&mut self, w: Tensor, b: Tensor) -> Result<()> {
        for (id, t) in [(self.out_w, w), (self.out_b, b)] {
            let slot = self.store.value_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!("{:?} into slot of shape {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(())
    }

    fn is_answer(&self, t: TokenId) -> bool {
        self.config.answer_ids.contains(&t)
    }

    /// Final hidden rows of the packed causal pass plus each sequence's start row.
    fn hidden(&self, g: &mut Graph, seqs: &[&[TokenId]]) -> Result<(Var, Vec<usize>)> {
        let cfg = &self.config;
        let (ids, positions, segments) = pack(seqs.iter().copied(), cfg.vocab_size, cfg.max_len)?;
        let tok = g.param(&self.store, self.tok_emb);
        let pos = g.param(&self.store, self.pos_emb);
        let te = g.gather(tok, &ids)?;
        let pe = g.gather(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        for block in &self.layers {
            x = block.forward(g, &self.store, x, &segments, cfg.n_heads, true)?;
        }
        Ok((x, segments.iter().map(|s| s.start).collect()))
    }

    fn forced_mask(&self, forced: &[bool]) -> Option<Tensor> {
        if !forced.iter().any(|&f| f) {
            return None;
        }
        let v = self.config.vocab_size;
        let mut data = vec![0.0; forced.len() * v];
        for (r, _) in forced.iter().enumerate().filter(|(_, &f)| f) {
            for (c, x) in data[r * v..(r + 1) * v].iter_mut().enumerate() {
                if !self.is_answer(c as TokenId) {
                    *x = MASKED;
                }
            }
        }
        Some(Tensor::matrix(forced.len(), v, data).expect("shape"))
    }

    /// Log-probabilities of every output token given its prompt, flattened
    /// output by output into one vector.
    pub fn token_log_probs(&self, g: &mut Graph, pairs: &[(&[TokenId], &[TokenId])]) -> Result<Var> {
        let cap = self.config.reason_cap;
        let mut seqs: Vec<Vec<TokenId>> = Vec::with_capacity(pairs.len());
        for (prompt, output) in pairs {
            if output.is_empty() {
                return Err(Error::Invalid("empty output sequence".into()));
            }
            if output.len() > cap + 1 {
                return Err(Error::Invalid(format!("output of {} tokens exceeds cap {}", output.len(), cap + 1)));
            }
            if prompt.is_empty() {
                return Err(Error::Invalid("empty prompt".into()));
            }
            let mut s = prompt.to_vec();
            s.extend_from_slice(&output[..output.len() - 1]);
            seqs.push(s);
        }
        let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
        let (h, starts) = self.hidden(g, &refs)?;
        let (mut rows, mut targets, mut forced) = (Vec::new(), Vec::new(), Vec::new());
        for ((prompt, output), start) in pairs.iter().zip(starts) {
            for (t, &tok) in output.iter().enumerate() {
                rows.push(start + prompt.len() - 1 + t);
                targets.push(tok as usize);
                forced.push(t == cap);
            }
        }
        let h = g.select_rows(h, &rows)?;
        let mut logits = affine(g, &self.store, h, self.out_w, self.out_b)?;
        if let Some(mask) = self.forced_mask(&forced) {
            let m = g.constant(mask);
            logits = g.add(logits, m)?;
        }
        let lp = g.log_softmax(logits, 1)?;
        g.pick(lp, &targets)
    }

    /// Per-output log-probabilities without gradient tracking.
    pub fn score(&self, prompt: &[TokenId], outputs: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let pairs: Vec<(&[TokenId], &[TokenId])> = outputs.iter().map(|o| (prompt, *o)).collect();
        let lp = self.token_log_probs(&mut g, &pairs)?;
        let flat = g.value(lp).data();
        let mut out = Vec::with_capacity(outputs.len());
        let mut at = 0;
        for o in outputs {
            out.push(flat[at..at + o.len()].to_vec());
            at += o.len();
        }
        Ok(out)
    }

    /// Next-token distribution logits for each sequence's final position.
    fn next_logits(&self, seqs: &[&[TokenId]]) -> Result<Tensor> {
        let mut g = Graph::new();
        let (h, starts) = self.hidden(&mut g, seqs)?;
        let rows: Vec<usize> = starts.iter().zip(seqs).map(|(s, q)| s + q.len() - 1).collect();
        let h = g.select_rows(h, &rows)?;
        let logits = affine(&mut g, &self.store, h, self.out_w, self.out_b)?;
        Ok(g.value(logits).clone())
    }

    /// `group_size` independent ancestral samples for one prompt.
    ///
    /// Tokens are drawn from `softmax(logits / temperature)`; a temperature at
    /// or below 1e-8 is greedy. Recorded log-probabilities are always taken at
    /// temperature 1, i.e. under the policy itself.
    pub fn sample_group(
        &self,
        prompt: &[TokenId],
        group_size: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<PolicyOutput>> {
        if group_size == 0 {
            return Err(Error::Invalid("group size must be positive".into()));
        }
        if !(temperature >= 0.0) {
            return Err(Error::Invalid(format!("temperature {temperature}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut outs: Vec<PolicyOutput> =
            (0..group_size).map(|_| PolicyOutput { tokens: Vec::new(), log_probs: Vec::new() }).collect();
        let mut active: Vec<usize> = (0..group_size).collect();
        for step in 0..=self.config.reason_cap {
            if active.is_empty() {
                break;
            }
            let seqs: Vec<Vec<TokenId>> = active
                .iter()
                .map(|&i| prompt.iter().chain(&outs[i].tokens).copied().collect())
                .collect();
            let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
            let logits = self.next_logits(&refs)?;
            let forced = step == self.config.reason_cap;
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let mut row = logits.row(r).to_vec();
                if forced {
                    for (c, x) in row.iter_mut().enumerate() {
                        if !self.is_answer(c as TokenId) {
                            *x += MASKED;
                        }
                    }
                }
                let log_p = log_softmax(&row);
                let tok = if temperature <= 1e-8 {
                    crate::autodiff::argmax(&row)
                } else {
                    let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
                    draw(&log_softmax(&scaled), &mut rng)
                };
                outs[i].tokens.push(tok as TokenId);
                outs[i].log_probs.push(log_p[tok]);
                if !self.is_answer(tok as TokenId) {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(outs)
    }
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn draw(log_p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_p.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass; fall back to the most likely token
    crate::autodiff::argmax(log_p)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(seed: u64, std: f64) -> PolicyParams {
        let cfg = PolicyConfig {
            vocab_size: 6,
            answer_ids: [3, 4, 5],
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            n_layers: 1,
            max_len: 16,
            reason_cap: 3,
            init_std: std,
        };
        PolicyParams::new(cfg, seed).unwrap()
    }

    #[test]
    fn outputs_end_in_an_answer_within_the_cap() {
        let p = toy(1, 0.5);
        let outs = p.sample_group(&[CLS, 0, SEP], 64, 1.0, 3).unwrap();
        for o in &outs {
            assert!(!o.tokens.is_empty() && o.tokens.len() <= 4);
            assert!(p.is_answer(o.answer().unwrap()));
            assert!(o.log_probs.iter().all(|&l| l <= 0.0));
        }
        assert!(outs.iter().any(|o| o.tokens.len() > 1));
    }

    #[test]
    fn recorded_log_probs_match_rescoring() {
        let p = toy(2, 0.5);
        let prompt = [CLS, 2, 0, SEP];
        let outs = p.sample_group(&prompt, 16, 1.0, 4).unwrap();
        let refs: Vec<&[TokenId]> = outs.iter().map(|o| o.tokens.as_slice()).collect();
        let scored = p.score(&prompt, &refs).unwrap();
        for (o, s) in outs.iter().zip(&scored) {
            for (a, b) in o.log_probs.iter().zip(s) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn greedy_collapse_and_seed_determinism() {
        let p = toy(3, 0.5);
        let prompt = [CLS, 1, SEP];
        let outs = p.sample_group(&prompt, 8, 0.0, 5).unwrap();
        assert!(outs.windows(2).all(|w| w[0] == w[1]));
        let a = p.sample_group(&prompt, 8, 1.0, 6).unwrap();
        let b = p.sample_group(&prompt, 8, 1.0, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_token_frequencies_match_probabilities() {
        let p = toy(4, 0.8);
        let prompt = [CLS, 0, SEP];
        let probs: Vec<f64> = log_softmax(p.next_logits(&[&prompt]).unwrap().row(0)).iter().map(|l| l.exp()).collect();
        let n = 10_000;
        let outs = p.sample_group(&prompt, n, 1.0, 7).unwrap();
        let mut counts = [0usize; 6];
        for o in &outs {
            counts[o.tokens[0] as usize] += 1;
        }
        for (c, pr) in counts.iter().zip(&probs) {
            assert!((*c as f64 / n as f64 - pr).abs() < 0.02, "{counts:?} vs {probs:?}");
        }
    }

    #[test]
    fn forced_step_only_admits_answers() {
        let mut p = toy(5, 0.1);
        // bias strongly toward a non-answer token
        let mut b = vec![0.0; 6];
        b[0] = 50.0;
        p.set_output_head(Tensor::zeros(&[8, 6]), Tensor::vector(b)).unwrap();
        let outs = p.sample_group(&[CLS, SEP], 4, 1.0, 8).unwrap();
        for o in &outs {
            assert_eq!(o.tokens.len(), 4);
            assert!(p.is_answer(o.tokens[3]));
        }
        // the mask is applied identically when rescoring
        let scored = p.score(&[CLS, SEP], &[outs[0].tokens.as_slice()]).unwrap();
        assert!((scored[0][3] - outs[0].log_probs[3]).abs() < 1e-9);
        assert!(p.score(&[CLS, SEP], &[&[0, 0, 0, 0, 3]]).is_err());
    }
}
