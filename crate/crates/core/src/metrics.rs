//! Accuracy, macro-F1 and weighted-F1 over the three relevance labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::NUM_LABELS;
use crate::par;
use crate::synth::RelevanceExample;

/// `counts[true][pred]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; NUM_LABELS]; NUM_LABELS]);

impl Confusion {
    pub fn from_pairs(y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        check(y_true, y_pred)?;
        let mut c = Confusion::default();
        for (&t, &p) in y_true.iter().zip(y_pred) {
            c.0[t][p] += 1;
        }
        Ok(c)
    }

    pub fn merge(mut self, other: &Confusion) -> Self {
        for t in 0..NUM_LABELS {
            for p in 0..NUM_LABELS {
                self.0[t][p] += other.0[t][p];
            }
        }
        self
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_LABELS).map(|i| self.0[i][i]).sum()
    }

    pub fn support(&self, label: usize) -> u64 {
        self.0[label].iter().sum()
    }

    pub fn predicted(&self, label: usize) -> u64 {
        (0..NUM_LABELS).map(|t| self.0[t][label]).sum()
    }

    pub fn label_stats(&self, label: usize) -> LabelStats {
        let tp = self.0[label][label] as f64;
        let ratio = |den: u64| if den == 0 { 0.0 } else { tp / den as f64 };
        let precision = ratio(self.predicted(label));
        let recall = ratio(self.support(label));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        LabelStats { precision, recall, f1, support: self.support(label) }
    }
}

fn check(y_true: &[usize], y_pred: &[usize]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Invalid(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Invalid("empty label vector".into()));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&l| l >= NUM_LABELS) {
        return Err(Error::Invalid(format!("label {bad} outside 0..{NUM_LABELS}")));
    }
    Ok(())
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let c = Confusion::from_pairs(y_true, y_pred)?;
    Ok(c.trace() as f64 / c.total() as f64)
}

/// Unweighted mean of per-label F1; labels absent from both vectors count as 0.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let c = Confusion::from_pairs(y_true, y_pred)?;
    Ok((0..NUM_LABELS).map(|l| c.label_stats(l).f1).sum::<f64>() / NUM_LABELS as f64)
}

/// Support-weighted mean of per-label F1 (support from `y_true`).
pub fn weighted_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let c = Confusion::from_pairs(y_true, y_pred)?;
    Ok(weighted(&c))
}

fn weighted(c: &Confusion) -> f64 {
    let n = c.total() as f64;
    (0..NUM_LABELS).map(|l| c.support(l) as f64 / n * c.label_stats(l).f1).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_label: [LabelStats; NUM_LABELS],
    pub confusion: Confusion,
    pub samples: u64,
}

impl EvalReport {
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        let n = confusion.total();
        if n == 0 {
            return Err(Error::Invalid("empty evaluation set".into()));
        }
        let per_label = [0, 1, 2].map(|l| confusion.label_stats(l));
        Ok(Self {
            accuracy: confusion.trace() as f64 / n as f64,
            macro_f1: per_label.iter().map(|s| s.f1).sum::<f64>() / NUM_LABELS as f64,
            weighted_f1: weighted(&confusion),
            per_label,
            confusion,
            samples: n,
        })
    }

    pub fn from_predictions(y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        Self::from_confusion(Confusion::from_pairs(y_true, y_pred)?)
    }

    pub const CSV_HEADER: &'static str = "accuracy,macro_f1,weighted_f1,\
precision_0,recall_0,f1_0,support_0,\
precision_1,recall_1,f1_1,support_1,\
precision_2,recall_2,f1_2,support_2";

    /// One CSV row in [`EvalReport::CSV_HEADER`] column order.
    pub fn csv_row(&self) -> String {
        let mut cells = vec![
            self.accuracy.to_string(),
            self.macro_f1.to_string(),
            self.weighted_f1.to_string(),
        ];
        for s in &self.per_label {
            cells.extend([
                s.precision.to_string(),
                s.recall.to_string(),
                s.f1.to_string(),
                s.support.to_string(),
            ]);
        }
        cells.join(",")
    }

    /// Flat JSON object: the three headline metrics, per-label cells, the
    /// confusion matrix as `confusion_<true>_<pred>`, and the sample count.
    pub fn to_flat_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert("accuracy".into(), self.accuracy.into());
        m.insert("macro_f1".into(), self.macro_f1.into());
        m.insert("weighted_f1".into(), self.weighted_f1.into());
        for (l, s) in self.per_label.iter().enumerate() {
            m.insert(format!("precision_{l}"), s.precision.into());
            m.insert(format!("recall_{l}"), s.recall.into());
            m.insert(format!("f1_{l}"), s.f1.into());
            m.insert(format!("support_{l}"), s.support.into());
        }
        for t in 0..NUM_LABELS {
            for p in 0..NUM_LABELS {
                m.insert(format!("confusion_{t}_{p}"), self.confusion.0[t][p].into());
            }
        }
        m.insert("samples".into(), self.samples.into());
        serde_json::Value::Object(m)
    }
}

/// Anything that assigns relevance labels to examples.
pub trait RelevanceModel: Sync {
    fn predict(&self, batch: &[RelevanceExample]) -> Result<Vec<usize>>;
}

/// Scores `model` on `data`, sharding batches across threads unless
/// `single_thread`; shard confusion matrices are merged additively.
pub fn evaluate<M: RelevanceModel + ?Sized>(
    model: &M,
    data: &[RelevanceExample],
    single_thread: bool,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let shards = par::map_chunks(data, 256, single_thread, |chunk| -> Result<Confusion> {
        let pred = model.predict(chunk)?;
        let truth: Vec<usize> = chunk.iter().map(|e| e.label.index()).collect();
        Confusion::from_pairs(&truth, &pred)
    });
    let mut total = Confusion::default();
    for s in shards {
        total = total.merge(&s?);
    }
    EvalReport::from_confusion(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example() {
        let (t, p) = ([0, 1, 2], [0, 1, 1]);
        assert!((accuracy(&t, &p).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((macro_f1(&t, &p).unwrap() - 5.0 / 9.0).abs() < 1e-15);
        assert!((weighted_f1(&t, &p).unwrap() - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn edge_conventions() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(weighted_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert!((macro_f1(&[0, 0], &[0, 0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let w = weighted_f1(&[2, 2, 2, 0], &[2, 2, 2, 2]).unwrap();
        assert!((w - 0.75 * 6.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(macro_f1(&[3], &[0]).is_err());
    }

    #[test]
    fn flat_json_and_csv_agree() {
        let r = EvalReport::from_predictions(&[0, 1, 2, 2], &[0, 2, 2, 2]).unwrap();
        let j = r.to_flat_json();
        assert_eq!(j["accuracy"].as_f64().unwrap(), r.accuracy);
        assert_eq!(j["confusion_1_2"].as_u64().unwrap(), 1);
        assert_eq!(r.csv_row().split(',').count(), EvalReport::CSV_HEADER.split(',').count());
    }

    // Brute-force reference: direct TP/FP/FN counting per label.
    fn reference(t: &[usize], p: &[usize]) -> (f64, f64, f64) {
        let n = t.len() as f64;
        let acc = t.iter().zip(p).filter(|(a, b)| a == b).count() as f64 / n;
        let (mut mac, mut wei) = (0.0, 0.0);
        for l in 0..3 {
            let tp = t.iter().zip(p).filter(|&(&a, &b)| a == l && b == l).count() as f64;
            let fp = t.iter().zip(p).filter(|&(&a, &b)| a != l && b == l).count() as f64;
            let fn_ = t.iter().zip(p).filter(|&(&a, &b)| a == l && b != l).count() as f64;
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            mac += f1 / 3.0;
            wei += (tp + fn_) / n * f1;
        }
        (acc, mac, wei)
    }

    #[test]
    fn brute_force_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.random_range(1..=50);
            let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let (a, m, w) = reference(&t, &p);
            let r = EvalReport::from_predictions(&t, &p).unwrap();
            assert!((r.accuracy - a).abs() < 1e-12);
            assert!((r.macro_f1 - m).abs() < 1e-12);
            assert!((r.weighted_f1 - w).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn invariants(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60), seed in 0u64..1000) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
            let r = EvalReport::from_predictions(&t, &p).unwrap();
            for v in [r.accuracy, r.macro_f1, r.weighted_f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(r.confusion.total(), t.len() as u64);
            // accuracy equals support-weighted recall
            let wr: f64 = r.per_label.iter().map(|s| s.support as f64 / t.len() as f64 * s.recall).sum();
            prop_assert!((wr - r.accuracy).abs() < 1e-12);
            // joint permutation invariance
            let mut idx: Vec<usize> = (0..t.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let t2: Vec<usize> = idx.iter().map(|&i| t[i]).collect();
            let p2: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
            let r2 = EvalReport::from_predictions(&t2, &p2).unwrap();
            prop_assert!((r.macro_f1 - r2.macro_f1).abs() < 1e-12);
            prop_assert!((r.weighted_f1 - r2.weighted_f1).abs() < 1e-12);
            prop_assert_eq!(r.accuracy, r2.accuracy);
        }
    }
}
