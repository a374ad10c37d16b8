use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;

pub const REPORT_SCHEMA: &str = "rdistill.run-report.v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Distill,
    Grpo,
}

/// Mean and sample standard deviation across seeds (std is 0 for one seed).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Summary { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub eval: EvalReport,
    /// Method-specific scalars such as final reward statistics.
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub rows: Vec<SeedRow>,
    pub accuracy: Summary,
    pub macro_f1: Summary,
    pub weighted_f1: Summary,
    pub extras: BTreeMap<String, Summary>,
}

impl MethodReport {
    pub fn new(method: impl Into<String>, mut rows: Vec<SeedRow>) -> Self {
        rows.sort_by_key(|r| r.seed);
        let pick = |f: fn(&EvalReport) -> f64| Summary::of(&rows.iter().map(|r| f(&r.eval)).collect::<Vec<_>>());
        let keys: Vec<String> = rows.iter().flat_map(|r| r.extras.keys().cloned()).collect();
        let extras = keys
            .into_iter()
            .map(|k| {
                let xs: Vec<f64> = rows.iter().filter_map(|r| r.extras.get(&k).copied()).collect();
                (k, Summary::of(&xs))
            })
            .collect();
        Self {
            method: method.into(),
            accuracy: pick(|e| e.accuracy),
            macro_f1: pick(|e| e.macro_f1),
            weighted_f1: pick(|e| e.weighted_f1),
            extras,
            rows,
        }
    }

    pub fn extra(&self, key: &str) -> Option<Summary> {
        self.extras.get(key).copied()
    }
}

/// Everything a run reports; a pure function of the resolved config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub kind: RunKind,
    pub config_digest: String,
    pub crate_version: String,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodReport>,
}

impl RunReport {
    pub fn new(kind: RunKind, cfg: &ExperimentConfig, methods: Vec<MethodReport>) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_string(),
            kind,
            config_digest: cfg.digest(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: cfg.seeds.clone(),
            methods,
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: RunReport = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: not a run report: {e}", path.display())))?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::Data(format!(
                "{}: schema {:?}, expected {REPORT_SCHEMA:?}",
                path.display(),
                report.schema
            )));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per (method, seed): config digest, method, seed, the
    /// evaluation columns, then every extra key in sorted order.
    pub fn metrics_csv(&self) -> String {
        let mut keys: Vec<&String> = self.methods.iter().flat_map(|m| m.rows.iter().flat_map(|r| r.extras.keys())).collect();
        keys.sort();
        keys.dedup();
        let mut out = format!("config_digest,method,seed,{}", EvalReport::CSV_HEADER);
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for m in &self.methods {
            for r in &m.rows {
                let _ = write!(out, "{},{},{},{}", self.config_digest, m.method, r.seed, r.eval.csv_row());
                for k in &keys {
                    out.push(',');
                    if let Some(v) = r.extras.get(*k) {
                        out.push_str(&v.to_string());
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Wall-clock per (method, seed); kept out of `report.json` so reports stay
/// byte-identical across reruns.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

/// Writes `config.resolved.json`, `metrics.csv`, `report.json`,
/// `training_log.jsonl` and `timing.json` into `dir`.
pub fn write_run_dir(
    dir: &Path,
    cfg: &ExperimentConfig,
    report: &RunReport,
    log: &[serde_json::Value],
    timing: &Timing,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    let mut resolved = serde_json::to_value(cfg)?;
    if let serde_json::Value::Object(m) = &mut resolved {
        m.insert("config_digest".into(), cfg.digest().into());
    }
    write("config.resolved.json", serde_json::to_string_pretty(&resolved)? + "\n")?;
    write("metrics.csv", report.metrics_csv())?;
    write("report.json", report.to_json()?)?;
    let mut lines = String::new();
    for v in log {
        lines.push_str(&serde_json::to_string(v)?);
        lines.push('\n');
    }
    write("training_log.jsonl", lines)?;
    write("timing.json", serde_json::to_string_pretty(timing)? + "\n")
}

/// Comparison rows across reports, in order of first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<(String, Summary, Summary, Summary)>,
}

impl Comparison {
    pub fn from_reports(reports: &[RunReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Data("no reports to compare".into()))?;
        let mut rows = Vec::new();
        for r in reports {
            if r.schema != first.schema || r.kind != first.kind {
                return Err(Error::Data(format!(
                    "cannot compare a {:?} report ({}) with a {:?} report ({})",
                    first.kind, first.schema, r.kind, r.schema
                )));
            }
            for m in &r.methods {
                rows.push((m.method.clone(), m.accuracy, m.macro_f1, m.weighted_f1));
            }
        }
        Ok(Self { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("Method,Accuracy,Accuracy std,Macro F1,Macro F1 std,Weight F1,Weight F1 std\n");
        for (m, a, f, w) in &self.rows {
            let _ = writeln!(out, "{m},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}", a.mean, a.std, f.mean, f.std, w.mean, w.std);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let cell = |s: &Summary| format!("{:.4} ± {:.4}", s.mean, s.std);
        let header = ["Method", "Accuracy", "Macro F1", "Weight F1"];
        let body: Vec<[String; 4]> =
            self.rows.iter().map(|(m, a, f, w)| [m.clone(), cell(a), cell(f), cell(w)]).collect();
        let mut width = header.map(|h| h.chars().count());
        for r in &body {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: [&str; 4]| {
            let mut s = String::new();
            for (i, (c, w)) in cells.iter().zip(width).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                s.push_str(c);
                s.extend(std::iter::repeat_n(' ', w - c.chars().count()));
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(header);
        for r in &body {
            out += &line([r[0].as_str(), r[1].as_str(), r[2].as_str(), r[3].as_str()]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, pred: &[usize]) -> SeedRow {
        let eval = EvalReport::from_predictions(&[0, 1, 2, 2], pred).unwrap();
        SeedRow { seed, eval, extras: BTreeMap::from([("r".to_string(), seed as f64)]) }
    }

    #[test]
    fn summary_cases() {
        assert_eq!(Summary::of(&[0.5]), Summary { mean: 0.5, std: 0.0 });
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rows_sort_and_aggregate() {
        let m = MethodReport::new("x", vec![row(3, &[0, 1, 2, 2]), row(1, &[0, 0, 0, 0])]);
        assert_eq!(m.rows[0].seed, 1);
        assert_eq!(m.accuracy.mean, (0.25 + 1.0) / 2.0);
        assert_eq!(m.extra("r").unwrap().mean, 2.0);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let cfg = ExperimentConfig::default();
        let report = RunReport::new(RunKind::Distill, &cfg, vec![MethodReport::new("baseline", vec![row(0, &[0, 1, 2, 1])])]);
        let csv = report.metrics_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].starts_with(&format!("{},baseline,0,0.75,", cfg.digest())));

        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), &cfg, &report, &[serde_json::json!({"step": 0})], &Timing::default()).unwrap();
        let back = RunReport::load(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, report);
        for f in ["config.resolved.json", "metrics.csv", "training_log.jsonl", "timing.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn comparison_rejects_mixed_kinds() {
        let cfg = ExperimentConfig::default();
        let a = RunReport::new(RunKind::Distill, &cfg, vec![MethodReport::new("baseline", vec![row(0, &[0, 1, 2, 2])])]);
        let mut b = a.clone();
        b.kind = RunKind::Grpo;
        assert!(Comparison::from_reports(&[a.clone(), b]).is_err());
        assert!(Comparison::from_reports(&[]).is_err());
        let mut c = a.clone();
        c.schema = "other".into();
        assert!(Comparison::from_reports(&[a.clone(), c]).is_err());

        let t = Comparison::from_reports(&[a]).unwrap();
        let text = t.to_text();
        assert!(text.starts_with("Method    Accuracy"));
        assert!(text.contains("baseline  1.0000 ± 0.0000"));
        assert_eq!(t.to_csv().lines().nth(1).unwrap(), "baseline,1.0000,0.0000,1.0000,0.0000,1.0000,0.0000");
    }

    #[test]
    fn load_rejects_foreign_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        std::fs::write(&p, "{\"hello\": 1}").unwrap();
        assert!(matches!(RunReport::load(&p), Err(Error::Data(_))));
    }
}
