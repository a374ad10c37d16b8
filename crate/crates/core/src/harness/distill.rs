use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Method};
use crate::autodiff::{Graph, Tensor};
use crate::encoder::{classify, encode_batch, predict, project, EncoderParams, InputBuilder, ReasonEmbedder, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::{baseline_total, classification_ce, cosine_align_loss, crsd_total, info_nce};
use crate::metrics::{evaluate, EvalReport, RelevanceModel};
use crate::optim::AdamW;
use crate::synth::{
    derive_seed, gen_dataset, randomize_reasons, read_jsonl, strip_reasons, write_jsonl, ReasonMode,
    RelevanceExample, Vocabulary, World,
};

/// World plus train/test splits for one seed. Training reasons are oracle
/// paths; method-specific variants are derived on demand so every method
/// sees the same (query, service, label) triples.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub seed: u64,
    pub world: World,
    pub train: Vec<RelevanceExample>,
    pub test: Vec<RelevanceExample>,
}

impl SeedData {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let world = World::generate(derive_seed(seed, "world"), &cfg.world)?;
        let mix = cfg.data.label_mix;
        let train = gen_dataset(&world, cfg.data.train_size, mix, ReasonMode::Oracle, derive_seed(seed, "train"))?;
        let test = gen_dataset(&world, cfg.data.test_size, mix, ReasonMode::Oracle, derive_seed(seed, "test"))?;
        Ok(Self { seed, world, train, test })
    }

    pub fn dir(root: &Path, seed: u64) -> PathBuf {
        root.join(format!("seed-{seed}"))
    }

    /// Writes `world.json`, `train.jsonl` and `test.jsonl` under `seed-<s>/`,
    /// with the training reasons in `reason_mode`.
    pub fn write(&self, root: &Path, reason_mode: ReasonMode) -> Result<()> {
        let dir = Self::dir(root, self.seed);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let world_path = dir.join("world.json");
        std::fs::write(&world_path, self.world.to_json()?).map_err(|e| Error::io(&world_path, e))?;
        write_jsonl(&dir.join("train.jsonl"), &self.train_with(reason_mode))?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)
    }

    pub fn load(root: &Path, seed: u64) -> Result<Self> {
        let dir = Self::dir(root, seed);
        let world_path = dir.join("world.json");
        let text = std::fs::read_to_string(&world_path).map_err(|e| Error::io(&world_path, e))?;
        let world = World::from_json(&text)?;
        let train = read_jsonl(&dir.join("train.jsonl"))?;
        let test = read_jsonl(&dir.join("test.jsonl"))?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!("{}: empty split", dir.display())));
        }
        Ok(Self { seed, world, train, test })
    }

    /// Training split with reasons in `mode`.
    pub fn train_with(&self, mode: ReasonMode) -> Vec<RelevanceExample> {
        let mut out = self.train.clone();
        match mode {
            ReasonMode::Oracle => {}
            ReasonMode::None => strip_reasons(&mut out),
            ReasonMode::Random => randomize_reasons(&mut out, derive_seed(self.seed, "random-reasons")),
        }
        out
    }
}

/// SHA-256 over the (id, query, service, label) triples, ignoring reasons.
pub fn triple_digest(examples: &[RelevanceExample]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update(e.id.to_le_bytes());
        h.update(e.query.join(" ").as_bytes());
        h.update([0]);
        h.update(e.service.join(" ").as_bytes());
        h.update([0, e.label as u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One optimizer step of a distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillStep {
    pub step: usize,
    pub loss: f64,
    pub sce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cos: Option<f64>,
    /// Largest |cls − cls_r| entry between student and teacher views.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view_gap: Option<f64>,
    /// Parameter digest after the update (only when requested).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_digest: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct DistillOptions {
    pub single_thread: bool,
    /// Record a parameter digest after each of the first this-many steps.
    pub digest_steps: usize,
}

pub struct DistillOutcome {
    pub eval: EvalReport,
    pub log: Vec<DistillStep>,
    pub params: EncoderParams,
}

/// Encoder scored on student inputs.
pub struct StudentModel<'a> {
    pub params: &'a EncoderParams,
    pub vocab: &'a Vocabulary,
}

impl RelevanceModel for StudentModel<'_> {
    fn predict(&self, batch: &[RelevanceExample]) -> Result<Vec<usize>> {
        let b = InputBuilder::new(self.vocab);
        let seqs = batch
            .iter()
            .map(|e| b.build_student_input(&e.query, &e.service))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let mut out = Vec::with_capacity(batch.len());
        for chunk in refs.chunks(256) {
            out.extend(predict(self.params, chunk)?);
        }
        Ok(out)
    }
}

/// Seeded epoch shuffles; within-batch duplicate ids are dropped and
/// backfilled from the stream.
struct Batches {
    order: Vec<usize>,
    at: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self { order: (0..n).collect(), at: n, rng: ChaCha8Rng::seed_from_u64(seed) };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.at = 0;
    }

    fn next(&mut self, size: usize, ids: &[u64]) -> Vec<usize> {
        let want = size.min(self.order.len());
        let mut seen = HashSet::with_capacity(want);
        let mut batch = Vec::with_capacity(want);
        let mut scanned = 0;
        while batch.len() < want && scanned < 4 * self.order.len() {
            if self.at == self.order.len() {
                self.reshuffle();
            }
            let i = self.order[self.at];
            self.at += 1;
            scanned += 1;
            if seen.insert(ids[i]) {
                batch.push(i);
            }
        }
        batch
    }
}

fn max_gap(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Trains one encoder with `method` on `data` and scores it on the test split.
pub fn train_distill(
    cfg: &ExperimentConfig,
    method: Method,
    data: &SeedData,
    opts: &DistillOptions,
) -> Result<DistillOutcome> {
    let vocab = &data.world.vocab;
    let seed = data.seed;
    let train = data.train_with(method.reason_mode());
    let builder = InputBuilder::new(vocab);
    let student: Vec<TokenSequence> = train
        .iter()
        .map(|e| builder.build_student_input(&e.query, &e.service))
        .collect::<Result<_>>()?;
    let teacher: Vec<TokenSequence> = if method.uses_teacher() {
        train
            .iter()
            .map(|e| builder.build_teacher_input(&e.query, &e.service, &e.reason))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let reason_rows: Vec<Vec<f64>> = if method == Method::BaselineReason {
        let emb = ReasonEmbedder::new(vocab.len(), cfg.encoder.d_reason, derive_seed(seed, "reason-embedder"));
        train
            .iter()
            .map(|e| Ok(emb.embed(&vocab.tokenize(&e.reason)?)?.vector.into_data()))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let labels: Vec<usize> = train.iter().map(|e| e.label.index()).collect();
    let ids: Vec<u64> = train.iter().map(|e| e.id).collect();

    let mut params = EncoderParams::new(cfg.encoder.resolve(vocab), derive_seed(seed, "encoder"))?;
    let mut opt = AdamW::new(cfg.optim.clone(), &params.store);
    let mut batches = Batches::new(train.len(), derive_seed(seed, "batches"));
    let l = &cfg.loss;
    let mut log = Vec::with_capacity(cfg.train.steps);

    for step in 0..cfg.train.steps {
        let idx = batches.next(cfg.train.batch_size, &ids);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut g = Graph::new();
        let s_refs: Vec<&TokenSequence> = idx.iter().map(|&i| &student[i]).collect();
        let cls = encode_batch(&mut g, &params, &s_refs)?;
        let logits = classify(&mut g, &params, cls)?;
        let sce = classification_ce(&mut g, logits, &y)?;
        let mut rec = DistillStep {
            step,
            loss: 0.0,
            sce: g.value(sce).item(),
            tce: None,
            align: None,
            cos: None,
            view_gap: None,
            param_digest: None,
        };
        let loss = match method {
            Method::Baseline => sce,
            Method::BaselineReason => {
                let emb_c = project(&mut g, &params, cls)?;
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| reason_rows[i].clone()).collect();
                let emb_r = g.constant(Tensor::from_rows(&rows)?);
                let cos = cosine_align_loss(&mut g, emb_c, emb_r)?;
                rec.cos = Some(g.value(cos).item());
                baseline_total(&mut g, sce, cos, l.mu)?
            }
            _ => {
                let t_refs: Vec<&TokenSequence> = idx.iter().map(|&i| &teacher[i]).collect();
                let cls_r = encode_batch(&mut g, &params, &t_refs)?;
                rec.view_gap = Some(max_gap(g.value(cls), g.value(cls_r)));
                let target = if l.teacher_stop_grad { g.constant(g.value(cls_r).clone()) } else { cls_r };
                let align = info_nce(&mut g, cls, target, l.tau, l.reduction)?;
                rec.align = Some(g.value(align).item());
                if method == Method::CrsdAlignOnly {
                    let a = g.scale(align, l.delta);
                    g.add(sce, a)?
                } else {
                    let t_logits = classify(&mut g, &params, cls_r)?;
                    let tce = classification_ce(&mut g, t_logits, &y)?;
                    rec.tce = Some(g.value(tce).item());
                    crsd_total(&mut g, sce, tce, align, l.gamma, l.delta)?
                }
            }
        };
        rec.loss = g.value(loss).item();
        if !rec.loss.is_finite() {
            return Err(Error::Divergence { step, what: format!("{method} loss = {}", rec.loss) });
        }
        params.store.zero_grad();
        g.backward_into(loss, &mut params.store)?;
        opt.step(&mut params.store);
        if step < opts.digest_steps {
            rec.param_digest = Some(params.store.digest());
        }
        log.push(rec);
    }

    let model = StudentModel { params: &params, vocab };
    let eval = evaluate(&model, &data.test, opts.single_thread)?;
    Ok(DistillOutcome { eval, log, params })
}
