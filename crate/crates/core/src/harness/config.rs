use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::DEFAULT_HIDDEN;
use crate::diversify::{LossWeights, MixDistribution};
use crate::domains::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::federation::{AdapterSettings, FederationSettings, StatsSynthesis, Strategy};
use crate::nn::NetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Fedavg,
    Fedprox,
    Fedbn,
    Silobn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionName {
    Uniform,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterModeName {
    Learned,
    Fixed,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let n = NetConfig::default();
        Self {
            widths: n.widths,
            strides: n.strides,
            kernel: n.kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub enabled: bool,
    pub hidden_dim: usize,
    /// Which alpha rule is reported as the headline adapted accuracy.
    pub mode: AdapterModeName,
    pub fixed_value: f64,
    /// Stop adapter gradients at the statistics-difference input.
    pub detach_input: bool,
    pub warmup_rounds: usize,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            enabled: true,
            hidden_dim: DEFAULT_HIDDEN,
            mode: AdapterModeName::Learned,
            fixed_value: 0.5,
            detach_input: true,
            warmup_rounds: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub strategy: StrategyName,
    pub prox_mu: f64,
    pub rounds: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub validate_every: usize,
    /// Clients per round; 0 means all.
    pub participants: usize,
    pub synthesis: StatsSynthesis,
    pub parallel: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        let f = FederationSettings::default();
        Self {
            strategy: StrategyName::Silobn,
            prox_mu: 0.1,
            rounds: f.rounds,
            iterations: f.iterations,
            batch_size: f.batch_size,
            lr: f.lr,
            momentum: f.momentum,
            validate_every: f.validate_every,
            participants: 0,
            synthesis: f.synthesis,
            parallel: f.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversifySection {
    pub enabled: bool,
    pub distribution: DistributionName,
    pub low: f64,
    pub high: f64,
    pub value: f64,
    /// Detach the diversified features inside the feature loss.
    pub stop_gradient: bool,
    /// Rounds of plain cross-entropy training before diversification starts.
    pub warmup_rounds: usize,
}

impl Default for DiversifySection {
    fn default() -> Self {
        Self {
            enabled: true,
            distribution: DistributionName::Uniform,
            low: 0.0,
            high: 1.0,
            value: 0.5,
            stop_gradient: false,
            warmup_rounds: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub benchmark: BenchmarkConfig,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub federation: FederationSection,
    pub diversify: DiversifySection,
    pub loss: LossWeights,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3],
            output: PathBuf::from("runs/default"),
            benchmark: BenchmarkConfig::default(),
            model: ModelSection::default(),
            adapter: AdapterSection::default(),
            federation: FederationSection::default(),
            diversify: DiversifySection::default(),
            loss: LossWeights::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    /// Reads `path`, applies `key=value` overrides, validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut table = parse_table(&text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds: duplicates are not allowed".into()));
        }
        self.benchmark.validate()?;
        self.net_config().validate()?;
        if !(0.0..=1.0).contains(&self.adapter.fixed_value) {
            return Err(Error::Config(format!(
                "adapter.fixed_value must lie in [0, 1], got {}",
                self.adapter.fixed_value
            )));
        }
        if self.adapter.mode == AdapterModeName::Learned && !self.adapter.enabled {
            log::debug!("adapter disabled; learned mode is not evaluated");
        }
        if let Some(p) = self.federation_settings().participants {
            if p > self.benchmark.clients_per_domain * (self.benchmark.domains - 1) {
                return Err(Error::Config(format!(
                    "federation.participants {p} exceeds the number of clients"
                )));
            }
        }
        self.federation_settings().validate()
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: self.benchmark.channels,
            widths: self.model.widths.clone(),
            strides: self.model.strides.clone(),
            kernel: self.model.kernel,
            classes: self.benchmark.classes,
        }
    }

    pub fn federation_settings(&self) -> FederationSettings {
        let f = &self.federation;
        let d = &self.diversify;
        FederationSettings {
            strategy: match f.strategy {
                StrategyName::Fedavg => Strategy::FedAvg,
                StrategyName::Fedprox => Strategy::FedProx { mu: f.prox_mu },
                StrategyName::Fedbn => Strategy::FedBn,
                StrategyName::Silobn => Strategy::SiloBn,
            },
            rounds: f.rounds,
            iterations: f.iterations,
            batch_size: f.batch_size,
            lr: f.lr,
            momentum: f.momentum,
            validate_every: f.validate_every,
            participants: (f.participants > 0).then_some(f.participants),
            diversify: d.enabled.then_some(match d.distribution {
                DistributionName::Uniform => MixDistribution::Uniform {
                    low: d.low,
                    high: d.high,
                },
                DistributionName::Fixed => MixDistribution::Fixed { value: d.value },
            }),
            loss: self.loss,
            stop_gradient: d.stop_gradient,
            diversify_warmup: d.warmup_rounds,
            adapter: self.adapter.enabled.then_some(AdapterSettings {
                hidden: self.adapter.hidden_dim,
                detach_input: self.adapter.detach_input,
                warmup_rounds: self.adapter.warmup_rounds,
            }),
            synthesis: f.synthesis,
            parallel: f.parallel,
        }
    }

    /// SHA-256 of every setting that can change a result. The output
    /// directory and the scheduling flag are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        c.federation.parallel = false;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("config syntax: {}", e.message().trim())))
}

/// `a.b.c=value`. The value is read as a TOML value, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
