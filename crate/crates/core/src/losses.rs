//! Training objectives as differentiable graph functions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Guard for zero-norm rows in cosine similarities.
pub const COSINE_EPS: f64 = 1e-12;

pub const NUM_LABELS: usize = 3;

/// How per-example terms are combined over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

fn reduce(g: &mut Graph, v: Var, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Mean => g.mean(v),
        Reduction::Sum => g.sum(v),
    }
}

/// Mean of `−log softmax(logits)[label]` over the batch.
pub fn classification_ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let t = g.value(logits);
    if t.shape().len() != 2 || t.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "logits {:?} for {} labels",
            t.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= t.cols()) {
        return Err(Error::Invalid(format!("label {bad} out of range 0..{}", t.cols())));
    }
    let lp = g.log_softmax(logits, 1)?;
    let picked = g.pick(lp, labels)?;
    let m = g.mean(picked);
    Ok(g.neg(m))
}

/// Row-wise cosine similarity between two equally shaped matrices.
pub fn row_cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.shape() != tb.shape() {
        return Err(Error::Shape(format!("cosine of {:?} and {:?}", ta.shape(), tb.shape())));
    }
    let na = g.normalize_rows(a, COSINE_EPS);
    let nb = g.normalize_rows(b, COSINE_EPS);
    let prod = g.mul(na, nb)?;
    Ok(g.sum_last_axis(prod))
}

/// Mean over rows of `1 − cos(emb_c_i, emb_r_i)`.
pub fn cosine_align_loss(g: &mut Graph, emb_c: Var, emb_r: Var) -> Result<Var> {
    let cos = row_cosine(g, emb_c, emb_r)?;
    let m = g.mean(cos);
    let neg = g.neg(m);
    Ok(g.shift(neg, 1.0))
}

/// `ce + mu · cos`.
pub fn baseline_total(g: &mut Graph, ce: Var, cos: Var, mu: f64) -> Result<Var> {
    if !(mu >= 0.0) {
        return Err(Error::Invalid(format!("alignment weight mu = {mu}")));
    }
    let w = g.scale(cos, mu);
    g.add(ce, w)
}

/// In-batch InfoNCE: student row `i` must pick teacher row `i` among all
/// teacher rows of the batch, with cosine similarities divided by `tau`.
pub fn info_nce(
    g: &mut Graph,
    cls: Var,
    cls_r: Var,
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature tau = {tau} must be positive")));
    }
    let (ts, tt) = (g.value(cls), g.value(cls_r));
    if ts.shape() != tt.shape() || ts.shape().len() != 2 || ts.rows() == 0 {
        return Err(Error::Shape(format!(
            "info_nce of student {:?} and teacher {:?}",
            ts.shape(),
            tt.shape()
        )));
    }
    let s = g.normalize_rows(cls, COSINE_EPS);
    let t = g.normalize_rows(cls_r, COSINE_EPS);
    let tt = g.transpose(t)?;
    let sim = g.matmul(s, tt)?;
    info_nce_from_similarities(g, sim, tau, reduction)
}

/// InfoNCE on a precomputed `N × N` similarity matrix whose diagonal holds
/// the positive pairs.
pub fn info_nce_from_similarities(
    g: &mut Graph,
    sim: Var,
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let t = g.value(sim);
    if t.shape().len() != 2 || t.rows() != t.cols() {
        return Err(Error::Shape(format!("similarity matrix {:?}", t.shape())));
    }
    let n = t.rows();
    let logits = g.scale(sim, 1.0 / tau);
    let lp = g.log_softmax(logits, 1)?;
    let diag: Vec<usize> = (0..n).collect();
    let pos = g.pick(lp, &diag)?;
    let r = reduce(g, pos, reduction);
    Ok(g.neg(r))
}

/// `l_sce + gamma · l_tce + delta · l_align`.
pub fn crsd_total(
    g: &mut Graph,
    l_sce: Var,
    l_tce: Var,
    l_align: Var,
    gamma: f64,
    delta: f64,
) -> Result<Var> {
    if !(gamma >= 0.0 && delta >= 0.0) {
        return Err(Error::Invalid(format!("weights gamma = {gamma}, delta = {delta}")));
    }
    let t = g.scale(l_tce, gamma);
    let a = g.scale(l_align, delta);
    let s = g.add(l_sce, t)?;
    g.add(s, a)
}
