//! Compact post-LN transformer encoder with CLS pooling, a 3-way relevance
//! head, a projection head and a frozen random-projection reason embedder.
//!
//! The same [`EncoderParams`] serves both input views: the student sequence
//! `[CLS] query [SEP] service` and the teacher sequence that appends
//! `[SEP] reason`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Segment, Tensor, Var, LAYERNORM_EPS};
use crate::error::{Error, Result};
use crate::losses::{COSINE_EPS, NUM_LABELS};
use crate::synth::{TokenId, Vocabulary, CLS, SEP};

pub const STUDENT_MAX_LEN: usize = 64;
pub const TEACHER_MAX_LEN: usize = 150;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub d_reason: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            max_len: 160,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 2,
            d_reason: 32,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("{} heads do not divide d_model {}", self.n_heads, self.d_model));
        }
        if self.max_len == 0 || self.d_ff == 0 || self.d_reason == 0 {
            return bad("max_len, d_ff and d_reason must be positive".into());
        }
        if !(self.init_std >= 0.0) {
            return bad(format!("init_std {}", self.init_std));
        }
        Ok(())
    }
}

/// One post-LN transformer block: self-attention, residual, layernorm,
/// GELU feed-forward, residual, layernorm.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl<'a> Init<'a> {
    pub(crate) fn new(store: &'a mut ParamStore, seed: u64, std: f64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init_std {std}: {e}")))?;
        Ok(Self { store, rng: ChaCha8Rng::seed_from_u64(seed), normal })
    }

    pub(crate) fn weight(&mut self, name: impl Into<String>, r: usize, c: usize) -> ParamId {
        let data = (0..r * c).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::matrix(r, c, data).expect("shape"))
    }

    pub(crate) fn zeros(&mut self, name: impl Into<String>, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[n]))
    }

    pub(crate) fn ones(&mut self, name: impl Into<String>, n: usize) -> ParamId {
        self.store.add(name, Tensor::filled(&[n], 1.0))
    }
}

impl Block {
    pub(crate) fn new(init: &mut Init<'_>, prefix: &str, d: usize, f: usize) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        Block {
            wq: init.weight(p("wq"), d, d),
            bq: init.zeros(p("bq"), d),
            wk: init.weight(p("wk"), d, d),
            wv: init.weight(p("wv"), d, d),
            bv: init.zeros(p("bv"), d),
            wo: init.weight(p("wo"), d, d),
            bo: init.zeros(p("bo"), d),
            ln1_g: init.ones(p("ln1_g"), d),
            ln1_b: init.zeros(p("ln1_b"), d),
            w1: init.weight(p("w1"), d, f),
            b1: init.zeros(p("b1"), f),
            w2: init.weight(p("w2"), f, d),
            b2: init.zeros(p("b2"), d),
            ln2_g: init.ones(p("ln2_g"), d),
            ln2_b: init.zeros(p("ln2_b"), d),
        }
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        segments: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let q = affine(g, store, x, self.wq, self.bq)?;
        // No key bias: it shifts every score in a row equally and cancels in the softmax.
        let wk = g.param(store, self.wk);
        let k = g.matmul(x, wk)?;
        let v = affine(g, store, x, self.wv, self.bv)?;
        let a = g.attention(q, k, v, segments, heads, causal)?;
        let o = affine(g, store, a, self.wo, self.bo)?;
        let r = g.add(x, o)?;
        let (gain, bias) = (g.param(store, self.ln1_g), g.param(store, self.ln1_b));
        let x = g.layernorm(r, gain, bias, LAYERNORM_EPS)?;
        let h = affine(g, store, x, self.w1, self.b1)?;
        let h = g.gelu(h);
        let f = affine(g, store, h, self.w2, self.b2)?;
        let r = g.add(x, f)?;
        let (gain, bias) = (g.param(store, self.ln2_g), g.param(store, self.ln2_b));
        g.layernorm(r, gain, bias, LAYERNORM_EPS)
    }
}

/// Packs sequences row-wise: token ids, positions and per-sequence segments.
pub(crate) fn pack<'s>(
    seqs: impl IntoIterator<Item = &'s [TokenId]>,
    vocab_size: usize,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<usize>, Vec<Segment>)> {
    let (mut ids, mut positions, mut segments) = (Vec::new(), Vec::new(), Vec::new());
    for s in seqs {
        if s.len() > max_len {
            return Err(Error::Invalid(format!("sequence of {} tokens exceeds L = {max_len}", s.len())));
        }
        if let Some(&bad) = s.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {vocab_size}")));
        }
        segments.push(Segment { start: ids.len(), len: s.len() });
        ids.extend(s.iter().map(|&t| t as usize));
        positions.extend(0..s.len());
    }
    if segments.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    Ok((ids, positions, segments))
}

/// All learnable weights of the encoder and its two heads.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<Block>,
    cls_w: ParamId,
    cls_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl EncoderParams {
    /// Weights ~ N(0, init_std), biases 0, layernorm gains 1.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed, config.init_std)?;
        let (d, f) = (config.d_model, config.d_ff);
        let tok_emb = init.weight("tok_emb", config.vocab_size, d);
        let pos_emb = init.weight("pos_emb", config.max_len, d);
        let layers = (0..config.n_layers).map(|l| Block::new(&mut init, &format!("layer{l}"), d, f)).collect();
        let cls_w = init.weight("cls_w", d, NUM_LABELS);
        let cls_b = init.zeros("cls_b", NUM_LABELS);
        let proj_w = init.weight("proj_w", d, config.d_reason);
        let proj_b = init.zeros("proj_b", config.d_reason);
        Ok(Self { config, store, tok_emb, pos_emb, layers, cls_w, cls_b, proj_w, proj_b })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same architecture carrying the weights in `store`.
    pub fn with_store(&self, store: ParamStore) -> Self {
        Self { store, ..self.clone() }
    }

    pub fn positional_table_mut(&mut self) -> &mut Tensor {
        self.store.value_mut(self.pos_emb)
    }

    /// Replaces the classification head; shapes must match.
    pub fn set_class_head(&mut self, w: Tensor, b: Tensor) -> Result<()> {
        self.replace(self.cls_w, w)?;
        self.replace(self.cls_b, b)
    }

    /// Replaces the projection head; shapes must match.
    pub fn set_projection_head(&mut self, w: Tensor, b: Tensor) -> Result<()> {
        self.replace(self.proj_w, w)?;
        self.replace(self.proj_b, b)
    }

    fn replace(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        let slot = self.store.value_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!("{:?} into slot of shape {:?}", t.shape(), slot.shape())));
        }
        *slot = t;
        Ok(())
    }
}

/// Token ids starting with CLS.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::Invalid("token sequence must start with [CLS]".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Builds student and teacher views from surface tokens.
#[derive(Clone, Debug)]
pub struct InputBuilder<'a> {
    vocab: &'a Vocabulary,
    pub student_max_len: usize,
    pub teacher_max_len: usize,
}

impl<'a> InputBuilder<'a> {
    pub fn new(vocab: &'a Vocabulary) -> Self {
        Self { vocab, student_max_len: STUDENT_MAX_LEN, teacher_max_len: TEACHER_MAX_LEN }
    }

    /// `[CLS] query [SEP] service`; overflow drops the service tail, then the query tail.
    pub fn build_student_input<S: AsRef<str>>(&self, query: &[S], service: &[S]) -> Result<TokenSequence> {
        let q = self.vocab.tokenize(query)?;
        let s = self.vocab.tokenize(service)?;
        student_ids(&q, &s, self.student_max_len)
    }

    /// Student view plus `[SEP] reason`; overflow drops the reason tail first.
    /// An empty reason yields exactly the student view.
    pub fn build_teacher_input<S: AsRef<str>>(
        &self,
        query: &[S],
        service: &[S],
        reason: &[S],
    ) -> Result<TokenSequence> {
        let q = self.vocab.tokenize(query)?;
        let s = self.vocab.tokenize(service)?;
        let r = self.vocab.tokenize(reason)?;
        if r.is_empty() {
            return student_ids(&q, &s, self.teacher_max_len);
        }
        let base = student_ids(&q, &s, self.teacher_max_len)?;
        let mut ids = base.ids;
        if ids.len() + 1 < self.teacher_max_len {
            ids.push(SEP);
            let room = self.teacher_max_len - ids.len();
            ids.extend_from_slice(&r[..r.len().min(room)]);
        }
        TokenSequence::new(ids)
    }
}

fn student_ids(q: &[TokenId], s: &[TokenId], max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} cannot hold [CLS] [SEP]")));
    }
    let budget = max_len - 2;
    let q_keep = q.len().min(budget);
    let s_keep = s.len().min(budget - q_keep);
    let mut ids = Vec::with_capacity(2 + q_keep + s_keep);
    ids.push(CLS);
    ids.extend_from_slice(&q[..q_keep]);
    ids.push(SEP);
    ids.extend_from_slice(&s[..s_keep]);
    TokenSequence::new(ids)
}

pub(crate) fn affine(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Encodes a packed batch and returns the `N × d` CLS rows.
pub fn encode_batch(g: &mut Graph, params: &EncoderParams, seqs: &[&TokenSequence]) -> Result<Var> {
    let cfg = &params.config;
    let store = &params.store;
    let (ids, positions, segments) = pack(seqs.iter().map(|s| s.ids()), cfg.vocab_size, cfg.max_len)?;
    let tok = g.param(store, params.tok_emb);
    let pos = g.param(store, params.pos_emb);
    let te = g.gather(tok, &ids)?;
    let pe = g.gather(pos, &positions)?;
    let mut x = g.add(te, pe)?;
    for block in &params.layers {
        x = block.forward(g, store, x, &segments, cfg.n_heads, false)?;
    }
    let starts: Vec<usize> = segments.iter().map(|s| s.start).collect();
    g.select_rows(x, &starts)
}

/// CLS vector of a single sequence.
pub fn encode(params: &EncoderParams, seq: &TokenSequence) -> Result<Tensor> {
    let mut g = Graph::new();
    let cls = encode_batch(&mut g, params, &[seq])?;
    Ok(Tensor::vector(g.value(cls).data().to_vec()))
}

/// `N × 3` logits from `N × d` CLS rows.
pub fn classify(g: &mut Graph, params: &EncoderParams, cls: Var) -> Result<Var> {
    affine(g, &params.store, cls, params.cls_w, params.cls_b)
}

/// `N × d_r` projections from `N × d` CLS rows.
pub fn project(g: &mut Graph, params: &EncoderParams, cls: Var) -> Result<Var> {
    affine(g, &params.store, cls, params.proj_w, params.proj_b)
}

/// Argmax labels (ties to the lowest index) for a batch, without gradients.
pub fn predict(params: &EncoderParams, seqs: &[&TokenSequence]) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let cls = encode_batch(&mut g, params, seqs)?;
    let logits = classify(&mut g, params, cls)?;
    let t = g.value(logits);
    Ok((0..t.rows()).map(|r| t.argmax_row(r)).collect())
}

/// Frozen text embedding of a reasoning path.
#[derive(Clone, Debug, PartialEq)]
pub struct ReasonEmbedding {
    pub vector: Tensor,
    /// Set for empty reasons, whose embedding is the zero vector.
    pub degenerate: bool,
}

/// Fixed seed-generated `V × d_r` matrix; a reason embeds as the L2-normalised
/// mean of its token rows. Never trained.
#[derive(Clone, Debug)]
pub struct ReasonEmbedder {
    table: Tensor,
}

impl ReasonEmbedder {
    pub fn new(vocab_size: usize, d_reason: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..vocab_size * d_reason).map(|_| normal.sample(&mut rng)).collect();
        Self { table: Tensor::matrix(vocab_size, d_reason, data).expect("shape") }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        self.table.row(id as usize)
    }

    pub fn embed(&self, reason: &[TokenId]) -> Result<ReasonEmbedding> {
        let d = self.dim();
        let mut v = vec![0.0; d];
        if reason.is_empty() {
            return Ok(ReasonEmbedding { vector: Tensor::vector(v), degenerate: true });
        }
        for &t in reason {
            if t as usize >= self.table.rows() {
                return Err(Error::Invalid(format!("token id {t} outside vocabulary of {}", self.table.rows())));
            }
            for (a, b) in v.iter_mut().zip(self.row(t)) {
                *a += b;
            }
        }
        let n = reason.len() as f64;
        v.iter_mut().for_each(|a| *a /= n);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(COSINE_EPS);
        v.iter_mut().for_each(|a| *a /= norm);
        Ok(ReasonEmbedding { vector: Tensor::vector(v), degenerate: false })
    }
}
