//! Federated training: client rounds, server aggregation, model selection.

mod aggregate;
mod client;
mod eval;

pub use aggregate::{
    aggregate, aggregation_weights, insert_global_stats, local_stats_of, synthesize_global_stats, weighted_average,
    LayerStats, StatsSynthesis, Strategy,
};
pub use client::{ClientState, ClientUpdate};
pub use eval::{argmax_rows, evaluate, predict, InferenceMode, EVAL_CHUNK};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diversify::{LossWeights, MixDistribution};
use crate::error::{Error, Result};
use crate::model::{ArrayKind, Model};

/// Independent ChaCha stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSettings {
    pub hidden: usize,
    pub detach_input: bool,
    /// Rounds before the adapter starts training.
    pub warmup_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSettings {
    pub strategy: Strategy,
    pub rounds: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub validate_every: usize,
    /// Clients sampled per round; all when `None`.
    pub participants: Option<usize>,
    /// Mixing distribution; diversification is off when `None`.
    pub diversify: Option<MixDistribution>,
    pub loss: LossWeights,
    pub stop_gradient: bool,
    /// Rounds of plain cross-entropy training before diversification starts.
    pub diversify_warmup: usize,
    pub adapter: Option<AdapterSettings>,
    pub synthesis: StatsSynthesis,
    pub parallel: bool,
}

impl Default for FederationSettings {
    fn default() -> Self {
        Self {
            strategy: Strategy::SiloBn,
            rounds: 40,
            iterations: 200,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.5,
            validate_every: 20,
            participants: None,
            diversify: Some(MixDistribution::default()),
            loss: LossWeights::default(),
            stop_gradient: false,
            diversify_warmup: 0,
            adapter: Some(AdapterSettings {
                hidden: crate::adapter::DEFAULT_HIDDEN,
                detach_input: true,
                warmup_rounds: 0,
            }),
            synthesis: StatsSynthesis::TotalVariance,
            parallel: true,
        }
    }
}

impl FederationSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("federation: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.validate_every == 0 {
            return bad("validate_every must be positive");
        }
        if self.participants == Some(0) {
            return bad("participants must be positive");
        }
        if let Strategy::FedProx { mu } = self.strategy {
            if !(mu >= 0.0 && mu.is_finite()) {
                return bad("prox_mu must be non-negative");
            }
        }
        if let Some(d) = &self.diversify {
            d.validate()?;
        }
        if let Some(a) = &self.adapter {
            if a.hidden == 0 {
                return bad("adapter hidden_dim must be positive");
            }
        }
        self.loss.validate()
    }
}

/// One line of the metrics ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
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

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    /// Server model of the best round (round 0 is the initial model).
    pub best: Model,
    pub best_round: usize,
    /// Mean participant validation accuracy per round, starting at round 1.
    pub round_scores: Vec<f64>,
    pub ledger: Vec<LedgerRow>,
    pub last: Model,
}

fn choose_participants(k: usize, m: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match m {
        Some(m) if m < k => {
            let mut ids = sample(rng, k, m).into_vec();
            ids.sort_unstable();
            ids
        }
        _ => (0..k).collect(),
    }
}

/// Runs all rounds. Client work may run in parallel; the reduction always
/// walks participants in client-id order, so results do not depend on
/// scheduling.
pub fn run_federation(
    clients: &mut [ClientState],
    init: Model,
    settings: &FederationSettings,
    seed: u64,
) -> Result<FederationOutcome> {
    settings.validate()?;
    if clients.is_empty() {
        return Err(Error::Protocol("federation needs at least one client".into()));
    }
    for (i, c) in clients.iter().enumerate() {
        if c.id != i {
            return Err(Error::Protocol(format!("client at position {i} has id {}", c.id)));
        }
    }
    let strategy = settings.strategy;
    let mut server = init;
    let mut server_rng = stream_rng(seed, 0);
    let mut best = server.clone();
    let mut best_round = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut round_scores = Vec::with_capacity(settings.rounds);
    let mut ledger = Vec::new();

    for round in 0..settings.rounds {
        let chosen = choose_participants(clients.len(), settings.participants, &mut server_rng);
        let broadcast = server.export();
        let work = |c: &mut ClientState| c.local_update(&broadcast, settings, round);
        let updates: Vec<ClientUpdate> = if settings.parallel {
            clients
                .par_iter_mut()
                .filter(|c| chosen.contains(&c.id))
                .map(work)
                .collect::<Result<_>>()?
        } else {
            clients
                .iter_mut()
                .filter(|c| chosen.contains(&c.id))
                .map(work)
                .collect::<Result<_>>()?
        };

        let bundles: Vec<_> = updates.iter().map(|u| &u.bundle).collect();
        let sizes: Vec<usize> = updates.iter().map(|u| u.n_train).collect();
        let mut merged = aggregate(&bundles, &sizes, strategy)?;
        // arrays the clients keep still get a server-side average so the
        // server model is complete for evaluation; they are never broadcast
        merged.extend(weighted_average(&bundles, &sizes, |k| {
            !strategy.shares(k) && k != ArrayKind::BnGlobalStats
        })?);
        let stats: Vec<_> = updates
            .iter()
            .map(|u| local_stats_of(&u.bundle))
            .collect::<Result<_>>()?;
        insert_global_stats(
            &mut merged,
            &synthesize_global_stats(&stats, &sizes, settings.synthesis)?,
        );
        server.import(&merged, |_| true)?;

        let mut total = 0.0;
        for u in &updates {
            let val = &clients[u.client_id].data.val;
            let acc = if val.is_empty() {
                None
            } else {
                Some(evaluate(&server, val, InferenceMode::EvalGlobal)?)
            };
            total += acc.unwrap_or(0.0);
            let l = u.mean_loss;
            let r = round + 1;
            ledger.push(LedgerRow {
                round: r,
                client_id: u.client_id,
                split: "train".into(),
                accuracy: None,
                l_ce: Some(l.ce),
                l_cacl: Some(l.cacl),
                l_cafl: Some(l.cafl),
                l_total: Some(l.total),
            });
            ledger.push(LedgerRow {
                round: r,
                client_id: u.client_id,
                split: "val_local".into(),
                accuracy: u.val_accuracy,
                l_ce: None,
                l_cacl: None,
                l_cafl: None,
                l_total: None,
            });
            ledger.push(LedgerRow {
                round: r,
                client_id: u.client_id,
                split: "val_global".into(),
                accuracy: acc,
                l_ce: None,
                l_cacl: None,
                l_cafl: None,
                l_total: None,
            });
        }
        let score = total / updates.len() as f64;
        round_scores.push(score);
        log::info!(
            "round {}/{}: mean participant validation accuracy {:.4}",
            round + 1,
            settings.rounds,
            score
        );
        if score > best_score {
            best_score = score;
            best_round = round + 1;
            best = server.clone();
        }
    }
    Ok(FederationOutcome {
        best,
        best_round,
        round_scores,
        ledger,
        last: server,
    })
}
