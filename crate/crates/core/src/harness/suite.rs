//! Finite-difference gradient suite and closed-form self-tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::grad_check_inputs;
use crate::autodiff::{grad_check, GradCheckReport, Graph, Segment, Tensor, Var};
use crate::encoder::{classify, encode_batch, EncoderConfig, EncoderParams, TokenSequence};
use crate::error::Result;
use crate::losses::{classification_ce, cosine_align_loss, crsd_total, info_nce, Reduction};
use crate::metrics::{accuracy, macro_f1, weighted_f1};
use crate::policy::{compute_advantages, grpo_objective, sft_loss, PolicyConfig, PolicyOutput, PolicyParams};
use crate::synth::{TokenId, CLS, SEP};

/// Largest relative error a gradient check may report.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize)>,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClosedFormCase {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
}

impl ClosedFormCase {
    pub fn passed(&self) -> bool {
        (self.value - self.expected).abs() <= self.tolerance
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Reduces any output to a scalar through a fixed random weighting, so
/// symmetric outputs (softmax rows, normalised rows) still carry gradient.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let y = g.mul(out, w)?;
    Ok(g.sum(y))
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut m = |r: usize, c: usize| random(&mut rng, &[r, c], -1.0, 1.0);
    let (a, b, c, d, e) = (m(3, 4), m(3, 4), m(4, 2), m(5, 4), m(5, 4));
    let (f, h, k) = (m(5, 4), m(2, 4), m(1, 4));
    let positive = Tensor::matrix(2, 3, vec![0.5, 1.2, 2.0, 0.8, 3.1, 1.7]).expect("2x3");
    let ratios = Tensor::vector(vec![0.5, 0.95, 1.05, 1.6, 0.7, 1.3]);
    let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
    vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.add(v[0], v[1])?; probe(g, y, 1) })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; probe(g, y, 2) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; probe(g, y, 3) })),
        ("neg", vec![a.clone()], Box::new(|g, v| { let y = g.neg(v[0]); probe(g, y, 4) })),
        ("exp", vec![a.clone()], Box::new(|g, v| { let y = g.exp(v[0]); probe(g, y, 5) })),
        ("log", vec![positive], Box::new(|g, v| { let y = g.log(v[0]); probe(g, y, 6) })),
        ("tanh", vec![a.clone()], Box::new(|g, v| { let y = g.tanh(v[0]); probe(g, y, 7) })),
        ("square", vec![a.clone()], Box::new(|g, v| { let y = g.square(v[0]); probe(g, y, 8) })),
        ("gelu", vec![a.clone()], Box::new(|g, v| { let y = g.gelu(v[0]); probe(g, y, 9) })),
        ("scale", vec![a.clone()], Box::new(|g, v| { let y = g.scale(v[0], -1.7); probe(g, y, 10) })),
        ("shift", vec![a.clone()], Box::new(|g, v| { let y = g.shift(v[0], 0.3); let y = g.square(y); probe(g, y, 11) })),
        ("matmul", vec![a.clone(), c], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y, 12) })),
        ("transpose", vec![a.clone()], Box::new(|g, v| { let y = g.transpose(v[0])?; probe(g, y, 13) })),
        ("reshape", vec![a.clone()], Box::new(|g, v| { let y = g.reshape(v[0], &[2, 6])?; probe(g, y, 14) })),
        ("add_row", vec![a.clone(), Tensor::vector(vec![0.1, -0.4, 0.9, 0.2])], Box::new(|g, v| { let y = g.add_row(v[0], v[1])?; probe(g, y, 15) })),
        ("softmax", vec![a.clone()], Box::new(|g, v| { let y = g.softmax(v[0], 1)?; probe(g, y, 16) })),
        ("log_softmax", vec![a.clone()], Box::new(|g, v| { let y = g.log_softmax(v[0], 1)?; probe(g, y, 17) })),
        ("layernorm", vec![a.clone(), Tensor::vector(vec![1.1, 0.9, -0.5, 1.3]), Tensor::vector(vec![0.0, 0.2, -0.1, 0.4])],
            Box::new(|g, v| { let y = g.layernorm(v[0], v[1], v[2], 1e-5)?; probe(g, y, 18) })),
        ("normalize_rows", vec![a.clone()], Box::new(|g, v| { let y = g.normalize_rows(v[0], 1e-12); probe(g, y, 19) })),
        ("gather", vec![a.clone()], Box::new(|g, v| { let y = g.gather(v[0], &[2, 0, 2, 1])?; probe(g, y, 20) })),
        ("select_rows", vec![d.clone()], Box::new(|g, v| { let y = g.select_rows(v[0], &[4, 1])?; probe(g, y, 21) })),
        ("pick", vec![a.clone()], Box::new(|g, v| { let y = g.pick(v[0], &[3, 0, 1])?; probe(g, y, 22) })),
        ("sum", vec![a.clone()], Box::new(|g, v| { let y = g.square(v[0]); Ok(g.sum(y)) })),
        ("mean", vec![a.clone()], Box::new(|g, v| { let y = g.tanh(v[0]); Ok(g.mean(y)) })),
        ("sum_last_axis", vec![a], Box::new(|g, v| { let y = g.sum_last_axis(v[0]); probe(g, y, 23) })),
        ("attention", vec![d.clone(), e.clone(), f.clone()], Box::new(move |g, v| { let y = g.attention(v[0], v[1], v[2], &segs, 2, false)?; probe(g, y, 24) })),
        ("attention_causal", vec![d, e, f], Box::new(move |g, v| { let y = g.attention(v[0], v[1], v[2], &segs, 2, true)?; probe(g, y, 25) })),
        ("clipped_surrogate", vec![ratios], Box::new(|g, v| { let y = g.clipped_surrogate(v[0], &[1.0, -0.5, 0.8, 0.3, -1.2, -0.7], 0.2)?; probe(g, y, 26) })),
        ("matmul_transposed", vec![h, k], Box::new(|g, v| { let kt = g.transpose(v[1])?; let y = g.matmul(v[0], kt)?; probe(g, y, 27) })),
    ]
}

fn case(name: &str, r: GradCheckReport) -> GradCase {
    GradCase { name: name.to_string(), max_rel_error: r.max_rel_error, checked: r.checked, worst: r.worst }
}

fn toy_policy(seed: u64) -> Result<PolicyParams> {
    let cfg = PolicyConfig {
        vocab_size: 6,
        answer_ids: [3, 4, 5],
        d_model: 8,
        n_heads: 2,
        d_ff: 8,
        n_layers: 1,
        max_len: 16,
        reason_cap: 3,
        init_std: 0.5,
    };
    PolicyParams::new(cfg, seed)
}

/// Every gradient check the command-line `grad-check` runs.
pub fn grad_check_suite() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases() {
        out.push(case(name, grad_check_inputs(&inputs, |g, v| f(g, v))?));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = random(&mut rng, &[4, 3], -2.0, 2.0);
    out.push(case("classification_ce", grad_check_inputs(&[logits], |g, v| classification_ce(g, v[0], &[0, 2, 1, 2]))?));
    let (s, t) = (random(&mut rng, &[4, 5], -1.0, 1.0), random(&mut rng, &[4, 5], -1.0, 1.0));
    out.push(case("cosine_align", grad_check_inputs(&[s.clone(), t.clone()], |g, v| cosine_align_loss(g, v[0], v[1]))?));
    out.push(case(
        "info_nce_batch4",
        grad_check_inputs(&[s, t], |g, v| info_nce(g, v[0], v[1], 0.05, Reduction::Mean))?,
    ));

    let enc = EncoderParams::new(
        EncoderConfig { vocab_size: 12, max_len: 16, d_model: 8, n_heads: 2, d_ff: 12, n_layers: 2, d_reason: 4, init_std: 0.5 },
        22,
    )?;
    let student = [
        TokenSequence::new(vec![CLS, 4, SEP, 7, 8])?,
        TokenSequence::new(vec![CLS, 5, SEP, 9])?,
        TokenSequence::new(vec![CLS, 6, 4, SEP, 10, 11])?,
    ];
    let teacher = [
        TokenSequence::new(vec![CLS, 4, SEP, 7, 8, SEP, 3, 11])?,
        TokenSequence::new(vec![CLS, 5, SEP, 9, SEP, 4])?,
        TokenSequence::new(vec![CLS, 6, 4, SEP, 10, 11, SEP, 10, 5])?,
    ];
    let y = [0, 1, 2];
    let r = grad_check(&enc.store, |g, store| {
        let q = enc.with_store(store.clone());
        let cls = encode_batch(g, &q, &student.iter().collect::<Vec<_>>())?;
        let cls_r = encode_batch(g, &q, &teacher.iter().collect::<Vec<_>>())?;
        let sl = classify(g, &q, cls)?;
        let sce = classification_ce(g, sl, &y)?;
        let tl = classify(g, &q, cls_r)?;
        let tce = classification_ce(g, tl, &y)?;
        let align = info_nce(g, cls, cls_r, 0.1, Reduction::Mean)?;
        crsd_total(g, sce, tce, align, 0.5, 0.5)
    })?;
    out.push(case("crsd_composite_2layer_encoder", r));

    let policy = toy_policy(23)?;
    let batch: [(&[TokenId], &[TokenId]); 2] = [(&[CLS, 0, SEP], &[1, 2, 3]), (&[CLS, 2, SEP], &[0, 5])];
    let r = grad_check(&policy.store, |g, store| {
        let q = policy.with_store(store.clone());
        sft_loss(g, &q, &batch)
    })?;
    out.push(case("sft_loss", r));

    let reference = toy_policy(24)?;
    let old = toy_policy(25)?;
    let mut groups: Vec<(Vec<TokenId>, Vec<PolicyOutput>, Vec<f64>)> = Vec::new();
    for (i, prompt) in [[CLS, 0, SEP], [CLS, 2, SEP]].iter().enumerate() {
        let outs = old.sample_group(prompt, 4, 1.0, 30 + i as u64)?;
        let finals: Vec<f64> = outs.iter().map(|o| o.tokens.len() as f64 + o.tokens[0] as f64).collect();
        groups.push((prompt.to_vec(), outs, compute_advantages(&finals)));
    }
    let view: Vec<(&[TokenId], &[PolicyOutput], &[f64])> =
        groups.iter().map(|(p, o, a)| (p.as_slice(), o.as_slice(), a.as_slice())).collect();
    let r = grad_check(&policy.store, |g, store| {
        let q = policy.with_store(store.clone());
        Ok(grpo_objective(g, &q, &reference, &view, 0.2, 0.05)?.0)
    })?;
    out.push(case("grpo_objective_toy_policy", r));
    Ok(out)
}

fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

/// Closed-form loss, advantage and metric cases.
pub fn selftest() -> Result<Vec<ClosedFormCase>> {
    let c = |name: &str, value: f64, expected: f64, tolerance: f64| ClosedFormCase {
        name: name.to_string(),
        value,
        expected,
        tolerance,
    };
    let row = |xs: &[f64]| Tensor::from_rows(&[xs.to_vec()]);
    let mut out = Vec::new();

    let one = Tensor::from_rows(&[vec![0.3, -1.2, 0.8]])?;
    let other = Tensor::from_rows(&[vec![-0.5, 0.1, 0.4]])?;
    out.push(c(
        "info_nce_single_pair",
        eval(|g| {
            let (a, b) = (g.constant(one.clone()), g.constant(other.clone()));
            info_nce(g, a, b, 0.05, Reduction::Mean)
        })?,
        0.0,
        1e-12,
    ));
    for n in [2usize, 4, 16] {
        let same = Tensor::from_rows(&vec![vec![0.2, 0.7, -0.1]; n])?;
        out.push(c(
            &format!("info_nce_identical_rows_n{n}"),
            eval(|g| {
                let a = g.constant(same.clone());
                info_nce(g, a, a, 0.05, Reduction::Mean)
            })?,
            (n as f64).ln(),
            1e-9,
        ));
    }
    out.push(c(
        "ce_uniform_logits",
        eval(|g| {
            let l = g.constant(Tensor::from_rows(&[vec![0.4; 3], vec![-2.0; 3]])?);
            classification_ce(g, l, &[0, 2])
        })?,
        3f64.ln(),
        1e-9,
    ));
    let x = [1.0, -2.0, 0.5];
    for (name, y, expected) in [
        ("cosine_identical", [1.0, -2.0, 0.5], 0.0),
        ("cosine_orthogonal", [2.0, 1.0, 0.0], 1.0),
        ("cosine_antiparallel", [-2.0, 4.0, -1.0], 2.0),
    ] {
        let (a, b) = (row(&x)?, row(&y)?);
        let v = eval(|g| {
            let (a, b) = (g.constant(a), g.constant(b));
            cosine_align_loss(g, a, b)
        })?;
        out.push(c(name, v, expected, 1e-12));
    }

    let adv = compute_advantages(&[0.0, 2.0]);
    out.push(c("advantages_0_2_low", adv[0], -1.0, 0.0));
    out.push(c("advantages_0_2_high", adv[1], 1.0, 0.0));
    let flat = compute_advantages(&[1.5; 8]);
    out.push(c("advantages_constant_group", flat.iter().map(|a| a.abs()).sum(), 0.0, 0.0));

    let (t, p) = ([0, 1, 2], [0, 1, 1]);
    out.push(c("worked_example_accuracy", accuracy(&t, &p)?, 2.0 / 3.0, 1e-12));
    out.push(c("worked_example_macro_f1", macro_f1(&t, &p)?, 5.0 / 9.0, 1e-12));
    out.push(c("worked_example_weighted_f1", weighted_f1(&t, &p)?, 5.0 / 9.0, 1e-12));
    Ok(out)
}
