use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA: &str = "fedfd-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }

    /// Percent, as `92.74 (0.97)`.
    pub fn display(&self) -> String {
        format!("{:.2} ({:.2})", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_domain: usize,
    pub benchmark_fingerprint: String,
    /// Round the evaluated server model comes from (0 = initial model).
    pub best_round: usize,
    /// Mean participant validation accuracy for rounds 1..
    pub round_scores: Vec<f64>,
    /// Held-out accuracy per inference mode.
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub version: u32,
    pub config_hash: String,
    /// Hash over the per-seed benchmark fingerprints.
    pub benchmark_hash: String,
    pub headline_mode: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub summary: BTreeMap<String, Stat>,
    /// Held-out domain -> mode -> statistic over the seeds holding it out.
    pub per_domain: BTreeMap<usize, BTreeMap<String, Stat>>,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let format = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if value.get("schema").and_then(|s| s.as_str()) != Some(REPORT_SCHEMA) {
            return Err(format(format!("not a {REPORT_SCHEMA} file")));
        }
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != REPORT_VERSION {
            return Err(Error::Version {
                found,
                expected: REPORT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| format(e.to_string()))
    }

    /// Recomputes `summary` and `per_domain` from `seeds`.
    pub fn summarize(&mut self) {
        let mut by_mode: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut by_domain: BTreeMap<usize, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for s in &self.seeds {
            for (mode, acc) in &s.accuracy {
                by_mode.entry(mode.clone()).or_default().push(*acc);
                by_domain
                    .entry(s.test_domain)
                    .or_default()
                    .entry(mode.clone())
                    .or_default()
                    .push(*acc);
            }
        }
        let stats = |m: BTreeMap<String, Vec<f64>>| {
            m.into_iter()
                .filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s)))
                .collect::<BTreeMap<_, _>>()
        };
        self.summary = stats(by_mode);
        self.per_domain = by_domain.into_iter().map(|(d, m)| (d, stats(m))).collect();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    /// `None` for the all-seed average.
    pub domain: Option<usize>,
    pub mode: String,
    pub cells: Vec<Option<Stat>>,
    /// Mean of each report minus the first report's mean, in fractions.
    pub deltas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side table of several reports over the same benchmark.
pub fn compare(reports: &[(String, RunReport)]) -> Result<Comparison> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Usage("compare needs at least one report".into()));
    };
    for (label, r) in &reports[1..] {
        if r.benchmark_hash != first.benchmark_hash {
            return Err(Error::Input(format!(
                "{label} was produced on a different benchmark ({} vs {}); refusing to compare",
                r.benchmark_hash, first.benchmark_hash
            )));
        }
    }
    let mut keys: Vec<(Option<usize>, String)> = Vec::new();
    for (_, r) in reports {
        for (d, modes) in &r.per_domain {
            for m in modes.keys() {
                keys.push((Some(*d), m.clone()));
            }
        }
        for m in r.summary.keys() {
            keys.push((None, m.clone()));
        }
    }
    // per-domain rows first, the overall average last
    keys.sort_by(|a, b| (a.0.is_none(), a.0, &a.1).cmp(&(b.0.is_none(), b.0, &b.1)));
    keys.dedup();
    let rows = keys
        .into_iter()
        .map(|(domain, mode)| {
            let cells: Vec<Option<Stat>> = reports
                .iter()
                .map(|(_, r)| match domain {
                    Some(d) => r.per_domain.get(&d).and_then(|m| m.get(&mode)).copied(),
                    None => r.summary.get(&mode).copied(),
                })
                .collect();
            let deltas = cells
                .iter()
                .map(|c| match (c, cells[0]) {
                    (Some(c), Some(base)) => Some(c.mean - base.mean),
                    _ => None,
                })
                .collect();
            ComparisonRow {
                domain,
                mode,
                cells,
                deltas,
            }
        })
        .collect();
    Ok(Comparison {
        labels: reports.iter().map(|(l, _)| l.clone()).collect(),
        rows,
    })
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8} {:<20}", "domain", "mode");
        for l in &self.labels {
            let _ = write!(out, " {:>16}", truncate(l, 16));
        }
        for l in self.labels.iter().skip(1) {
            let _ = write!(out, " {:>10}", format!("d:{}", truncate(l, 8)));
        }
        out.push('\n');
        for r in &self.rows {
            let domain = r.domain.map_or_else(|| "avg".to_string(), |d| d.to_string());
            let _ = write!(out, "{:<8} {:<20}", domain, r.mode);
            for c in &r.cells {
                let _ = write!(out, " {:>16}", c.map_or_else(|| "-".to_string(), |s| s.display()));
            }
            for d in r.deltas.iter().skip(1) {
                let _ = write!(
                    out,
                    " {:>10}",
                    d.map_or_else(|| "-".to_string(), |d| format!("{:+.2}", 100.0 * d))
                );
            }
            out.push('\n');
        }
        out
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
