use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Array, ArrayKind, ModelBundle};

/// Server aggregation rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    FedAvg,
    /// FedAvg plus a proximal penalty `(mu/2)*||w - w_G||^2` on the client.
    FedProx {
        mu: f64,
    },
    /// BN statistics and BN affine stay on the client.
    FedBn,
    /// BN statistics stay on the client.
    SiloBn,
}

impl Strategy {
    /// Whether arrays of `kind` are averaged and broadcast. Global BN
    /// statistics are never averaged; the server synthesizes them.
    pub fn shares(&self, kind: ArrayKind) -> bool {
        match kind {
            ArrayKind::BnGlobalStats => false,
            ArrayKind::BnLocalStats => matches!(self, Strategy::FedAvg | Strategy::FedProx { .. }),
            ArrayKind::BnAffine => !matches!(self, Strategy::FedBn),
            ArrayKind::FeatureWeights | ArrayKind::Classifier | ArrayKind::Adapter => true,
        }
    }

    pub fn prox_mu(&self) -> f64 {
        match self {
            Strategy::FedProx { mu } => *mu,
            _ => 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::FedBn => "fedbn",
            Strategy::SiloBn => "silobn",
        }
    }
}

/// `n_k / n` for every participant.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Protocol("no participants to aggregate".into()));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Protocol("participants hold no samples".into()));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// `sum_k (n_k / n) * w_k` for every key passing `select`. All bundles must
/// carry the same selected keys with the same shapes.
pub fn weighted_average(
    bundles: &[&ModelBundle],
    sizes: &[usize],
    select: impl Fn(ArrayKind) -> bool,
) -> Result<ModelBundle> {
    if bundles.len() != sizes.len() {
        return Err(Error::Protocol(format!(
            "{} bundles but {} sizes",
            bundles.len(),
            sizes.len()
        )));
    }
    let weights = aggregation_weights(sizes)?;
    let mut out = ModelBundle::new();
    for (key, first) in bundles[0] {
        if !select(ArrayKind::of(key)) {
            continue;
        }
        let mut acc = vec![0.0; first.data.len()];
        for (b, w) in bundles.iter().zip(&weights) {
            let arr = b
                .get(key)
                .ok_or_else(|| Error::Protocol(format!("participant is missing {key}")))?;
            if arr.shape != first.shape {
                return Err(Error::Protocol(format!(
                    "{key}: shapes {:?} and {:?} disagree",
                    first.shape, arr.shape
                )));
            }
            for (a, v) in acc.iter_mut().zip(&arr.data) {
                *a += w * v;
            }
        }
        out.insert(
            key.clone(),
            Array {
                shape: first.shape.clone(),
                data: acc,
            },
        );
    }
    for b in &bundles[1..] {
        if let Some(extra) = b
            .keys()
            .find(|k| select(ArrayKind::of(k)) && !bundles[0].contains_key(*k))
        {
            return Err(Error::Protocol(format!("participant carries unexpected {extra}")));
        }
    }
    Ok(out)
}

/// Averages exactly the arrays `strategy` shares.
pub fn aggregate(bundles: &[&ModelBundle], sizes: &[usize], strategy: Strategy) -> Result<ModelBundle> {
    weighted_average(bundles, sizes, |k| strategy.shares(k))
}

/// How client running statistics combine into global statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSynthesis {
    /// Pooled variance by the law of total variance.
    #[default]
    TotalVariance,
    /// Weighted mean of client variances, ignoring the spread of means.
    MeanOfVariances,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-layer global statistics from per-client, per-layer running stats.
pub fn synthesize_global_stats(
    clients: &[Vec<LayerStats>],
    sizes: &[usize],
    method: StatsSynthesis,
) -> Result<Vec<LayerStats>> {
    let weights = aggregation_weights(sizes)?;
    if clients.len() != weights.len() {
        return Err(Error::Protocol("statistics and sizes disagree in length".into()));
    }
    let layers = clients[0].len();
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let c = clients[0][l].mean.len();
        let mut mean = vec![0.0; c];
        let mut second = vec![0.0; c];
        for (stats, w) in clients.iter().zip(&weights) {
            let s = stats
                .get(l)
                .filter(|s| s.mean.len() == c && s.var.len() == c)
                .ok_or_else(|| Error::Protocol(format!("BN layer {l} is incongruent across clients")))?;
            for j in 0..c {
                mean[j] += w * s.mean[j];
                second[j] += match method {
                    StatsSynthesis::TotalVariance => w * (s.var[j] + s.mean[j] * s.mean[j]),
                    StatsSynthesis::MeanOfVariances => w * s.var[j],
                };
            }
        }
        let mut var = match method {
            StatsSynthesis::TotalVariance => second.iter().zip(&mean).map(|(s, m)| s - m * m).collect(),
            StatsSynthesis::MeanOfVariances => second,
        };
        let negative = var.iter().filter(|v: &&f64| **v < 0.0).count();
        if negative > 0 {
            log::warn!("BN layer {l}: {negative} synthesized variance(s) below zero, clamped");
            var.iter_mut().for_each(|v: &mut f64| *v = v.max(0.0));
        }
        out.push(LayerStats { mean, var });
    }
    Ok(out)
}

/// Running statistics of every BN layer in a bundle, in layer order.
pub fn local_stats_of(bundle: &ModelBundle) -> Result<Vec<LayerStats>> {
    let mut out = Vec::new();
    for l in 0.. {
        let (Some(m), Some(v)) = (
            bundle.get(&format!("block{l}.bn.local_mean")),
            bundle.get(&format!("block{l}.bn.local_var")),
        ) else {
            break;
        };
        out.push(LayerStats {
            mean: m.data.clone(),
            var: v.data.clone(),
        });
    }
    if out.is_empty() {
        return Err(Error::Protocol("bundle carries no BN statistics".into()));
    }
    Ok(out)
}

/// Writes global statistics into a bundle.
pub fn insert_global_stats(bundle: &mut ModelBundle, stats: &[LayerStats]) {
    for (l, s) in stats.iter().enumerate() {
        let c = s.mean.len();
        bundle.insert(
            format!("block{l}.bn.global_mean"),
            Array {
                shape: vec![c],
                data: s.mean.clone(),
            },
        );
        bundle.insert(
            format!("block{l}.bn.global_var"),
            Array {
                shape: vec![c],
                data: s.var.clone(),
            },
        );
    }
}
