use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::World;
use super::Label;
use crate::error::{Error, Result};

/// Default label mixture (irrelevant, moderate, relevant).
pub const DEFAULT_LABEL_MIX: [f64; 3] = [0.162, 0.117, 0.721];

const MAX_ATTEMPTS: usize = 100_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonMode {
    #[default]
    Oracle,
    Random,
    None,
}

impl ReasonMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasonMode::Oracle => "oracle",
            ReasonMode::Random => "random",
            ReasonMode::None => "none",
        }
    }
}

impl std::str::FromStr for ReasonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(ReasonMode::Oracle),
            "random" => Ok(ReasonMode::Random),
            "none" => Ok(ReasonMode::None),
            _ => Err(Error::Data(format!("unknown reason mode {s:?}"))),
        }
    }
}

/// One query–service pair with its reasoning path and 3-way label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelevanceExample {
    pub id: u64,
    pub query: Vec<String>,
    pub service: Vec<String>,
    pub reason: Vec<String>,
    pub reason_mode: ReasonMode,
    pub label: Label,
}

/// Rejection-samples `n` labelled pairs.
///
/// Label counts follow `label_mix` by largest-remainder quotas, so the
/// realised mixture is within `1/n` of the target; the order of labels is a
/// seeded shuffle. For each slot, pairs are proposed until one lands in the
/// slot's label stratum.
pub fn gen_dataset(
    world: &World,
    n: usize,
    label_mix: [f64; 3],
    reason_mode: ReasonMode,
    seed: u64,
) -> Result<Vec<RelevanceExample>> {
    let total: f64 = label_mix.iter().sum();
    if (total - 1.0).abs() > 1e-9 || label_mix.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Config(format!("label mixture {label_mix:?} does not sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets: Vec<Label> = quotas(n, label_mix)
        .into_iter()
        .zip(Label::ALL)
        .flat_map(|(c, l)| std::iter::repeat_n(l, c))
        .collect();
    targets.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n);
    for (id, target) in targets.into_iter().enumerate() {
        let mut hit = None;
        for _ in 0..MAX_ATTEMPTS {
            let (query, service) = world.propose_pair(&mut rng);
            let intent = world.query_intent(&query)?;
            let attrs = world.service_attributes(&service)?;
            if world.decide(intent, &attrs).label == target {
                hit = Some((query, service, world.oracle_reason(intent, &attrs)));
                break;
            }
        }
        let (query, service, reason) = hit.ok_or_else(|| {
            Error::Data(format!("label {} unreachable after {MAX_ATTEMPTS} proposals", target as u8))
        })?;
        out.push(RelevanceExample {
            id: id as u64,
            query,
            service,
            reason,
            reason_mode: ReasonMode::Oracle,
            label: target,
        });
    }
    match reason_mode {
        ReasonMode::Oracle => {}
        ReasonMode::None => strip_reasons(&mut out),
        ReasonMode::Random => randomize_reasons(&mut out, seed ^ 0x5eed_0f_4ea5),
    }
    Ok(out)
}

fn quotas(n: usize, mix: [f64; 3]) -> [usize; 3] {
    let exact = mix.map(|p| p * n as f64);
    let mut counts = exact.map(|x| x.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

pub fn strip_reasons(examples: &mut [RelevanceExample]) {
    for e in examples {
        e.reason.clear();
        e.reason_mode = ReasonMode::None;
    }
}

/// Gives every example the reason of a uniformly drawn *other* example.
/// Query, service and label are untouched.
pub fn randomize_reasons(examples: &mut [RelevanceExample], seed: u64) {
    let n = examples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let originals: Vec<Vec<String>> = examples.iter().map(|e| e.reason.clone()).collect();
    for (i, e) in examples.iter_mut().enumerate() {
        if n > 1 {
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            e.reason = originals[j].clone();
        }
        e.reason_mode = ReasonMode::Random;
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    id: u64,
    query: String,
    service: String,
    reason: String,
    label: u8,
    reason_mode: String,
}

fn split(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn write_jsonl(path: &Path, examples: &[RelevanceExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        let rec = JsonlRecord {
            id: e.id,
            query: e.query.join(" "),
            service: e.service.join(" "),
            reason: e.reason.join(" "),
            label: e.label as u8,
            reason_mode: e.reason_mode.as_str().into(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RelevanceExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| Error::Data(format!("{}:{}: {m}", path.display(), i + 1));
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let label = Label::try_from(rec.label).map_err(|e| at(e.to_string()))?;
        let reason_mode = rec.reason_mode.parse().map_err(|e: Error| at(e.to_string()))?;
        out.push(RelevanceExample {
            id: rec.id,
            query: split(&rec.query),
            service: split(&rec.service),
            reason: split(&rec.reason),
            reason_mode,
            label,
        });
    }
    Ok(out)
}
