//! Config-driven experiment runner and its artifacts.

mod config;
mod report;

pub use config::{
    apply_override, AdapterModeName, AdapterSection, DistributionName, DiversifySection, ExperimentConfig,
    FederationSection, ModelSection, StrategyName,
};
pub use report::{compare, Comparison, ComparisonRow, RunReport, SeedResult, Stat, REPORT_SCHEMA, REPORT_VERSION};

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::domains::build_benchmark;
use crate::error::Result;
use crate::federation::{evaluate, run_federation, stream_rng, ClientState, InferenceMode, LedgerRow};
use crate::model::{save_checkpoint, Model, ModelBundle};

/// RNG stream for model initialization; client streams start at 1.
const INIT_STREAM: u64 = 1 << 32;

/// Ledger row with its seed; csv cannot flatten nested structs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedLedgerRow {
    pub seed: u64,
    pub round: usize,
    pub client_id: usize,
    pub split: String,
    pub accuracy: Option<f64>,
    #[serde(rename = "L_CE")]
    pub l_ce: Option<f64>,
    #[serde(rename = "L_CACL")]
    pub l_cacl: Option<f64>,
    #[serde(rename = "L_CAFL")]
    pub l_cafl: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: Option<f64>,
}

impl SeedLedgerRow {
    fn new(seed: u64, r: LedgerRow) -> Self {
        Self {
            seed,
            round: r.round,
            client_id: r.client_id,
            split: r.split,
            accuracy: r.accuracy,
            l_ce: r.l_ce,
            l_cacl: r.l_cacl,
            l_cafl: r.l_cafl,
            l_total: r.l_total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub best_round: usize,
    pub best: ModelBundle,
    pub seconds: f64,
}

/// Everything a run produces. Wall-clock lives only in `artifacts`, so the
/// report itself is a pure function of the config.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub ledger: Vec<SeedLedgerRow>,
    pub artifacts: Vec<SeedArtifacts>,
}

/// Inference modes evaluated on the held-out domain.
pub fn inference_modes(cfg: &ExperimentConfig, seed: u64) -> Vec<InferenceMode> {
    let mut modes = vec![InferenceMode::EvalGlobal];
    if cfg.adapter.enabled {
        modes.push(InferenceMode::Adaptive);
    }
    modes.push(InferenceMode::FixedAlpha {
        value: cfg.adapter.fixed_value,
    });
    modes.push(InferenceMode::RandomAlpha { seed });
    modes
}

fn headline(cfg: &ExperimentConfig) -> InferenceMode {
    match cfg.adapter.mode {
        AdapterModeName::Learned if cfg.adapter.enabled => InferenceMode::Adaptive,
        AdapterModeName::Learned => InferenceMode::EvalGlobal,
        AdapterModeName::Fixed => InferenceMode::FixedAlpha {
            value: cfg.adapter.fixed_value,
        },
        AdapterModeName::Random => InferenceMode::RandomAlpha { seed: 0 },
    }
}

/// Trains and evaluates one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(SeedResult, Vec<LedgerRow>, SeedArtifacts)> {
    let start = Instant::now();
    let settings = cfg.federation_settings();
    let bench = build_benchmark(&cfg.benchmark, seed)?;
    let hidden = cfg.adapter.enabled.then_some(cfg.adapter.hidden_dim);
    let init = Model::new(cfg.net_config(), hidden, &mut stream_rng(seed, INIT_STREAM))?;
    let mut clients: Vec<ClientState> = bench
        .clients
        .iter()
        .map(|c| ClientState::new(c.clone(), init.clone(), &settings, seed))
        .collect();
    log::info!(
        "seed {seed}: {} clients, held-out domain {}",
        clients.len(),
        bench.test_domain
    );
    let outcome = run_federation(&mut clients, init, &settings, seed)?;
    let mut accuracy = BTreeMap::new();
    for mode in inference_modes(cfg, seed) {
        let acc = evaluate(&outcome.best, &bench.test, mode)?;
        log::info!("seed {seed}: {} held-out accuracy {:.4}", mode.label(), acc);
        accuracy.insert(mode.label(), acc);
    }
    let result = SeedResult {
        seed,
        test_domain: bench.test_domain,
        benchmark_fingerprint: bench.fingerprint(),
        best_round: outcome.best_round,
        round_scores: outcome.round_scores,
        accuracy,
    };
    let artifacts = SeedArtifacts {
        seed,
        best_round: outcome.best_round,
        best: outcome.best.export(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((result, outcome.ledger, artifacts))
}

/// Runs every seed in order.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut seeds = Vec::new();
    let mut ledger = Vec::new();
    let mut artifacts = Vec::new();
    for &seed in &cfg.seeds {
        let (result, rows, art) = run_seed(cfg, seed)?;
        ledger.extend(rows.into_iter().map(|r| SeedLedgerRow::new(seed, r)));
        seeds.push(result);
        artifacts.push(art);
    }
    let mut h = Sha256::new();
    for s in &seeds {
        h.update(s.seed.to_le_bytes());
        h.update(s.benchmark_fingerprint.as_bytes());
    }
    let mut report = RunReport {
        schema: REPORT_SCHEMA.into(),
        version: REPORT_VERSION,
        config_hash: cfg.hash(),
        benchmark_hash: hex::encode(h.finalize()),
        headline_mode: headline(cfg).label(),
        config: cfg.clone(),
        seeds,
        summary: BTreeMap::new(),
        per_domain: BTreeMap::new(),
    };
    report.summarize();
    Ok(RunOutput {
        report,
        ledger,
        artifacts,
    })
}

#[derive(Serialize)]
struct Timing<'a> {
    config_hash: &'a str,
    seconds_per_seed: BTreeMap<u64, f64>,
    total_seconds: f64,
}

/// Writes report.json, ledger.csv, timing.json and checkpoints/ into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    out.report.save(&dir.join("report.json"))?;
    let mut w = csv::Writer::from_path(dir.join("ledger.csv"))?;
    for r in &out.ledger {
        w.serialize(r)?;
    }
    w.flush()?;
    for a in &out.artifacts {
        let meta = BTreeMap::from([
            ("config_hash".to_string(), out.report.config_hash.clone()),
            ("seed".to_string(), a.seed.to_string()),
            ("round".to_string(), a.best_round.to_string()),
        ]);
        save_checkpoint(
            &dir.join("checkpoints").join(format!("seed{}_best.json", a.seed)),
            &a.best,
            &meta,
        )?;
    }
    let timing = Timing {
        config_hash: &out.report.config_hash,
        seconds_per_seed: out.artifacts.iter().map(|a| (a.seed, a.seconds)).collect(),
        total_seconds: out.artifacts.iter().map(|a| a.seconds).sum(),
    };
    std::fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
    Ok(())
}
