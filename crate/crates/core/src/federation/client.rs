use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate, InferenceMode};
use super::{stream_rng, FederationSettings};
use crate::adapter::adapter_train_step;
use crate::diversify::{local_loss, sample_mix_context, LossComponents};
use crate::domains::ClientData;
use crate::error::{Error, Result};
use crate::model::{ArrayKind, Model, ModelBundle};
use crate::optim::{gradients, Sgd};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: ClientData,
    pub model: Model,
    main_opt: Sgd,
    adapter_opt: Sgd,
    rng: ChaCha8Rng,
    adapter_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

/// What a client sends back after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub bundle: ModelBundle,
    pub n_train: usize,
    /// Local validation accuracy of the uploaded snapshot, if validated.
    pub val_accuracy: Option<f64>,
    /// Iteration the snapshot was taken after.
    pub snapshot_iteration: usize,
    /// Loss components averaged over the round.
    pub mean_loss: LossComponents,
    pub mean_adapter_loss: Option<f64>,
}

impl ClientState {
    pub fn new(data: ClientData, model: Model, settings: &FederationSettings, seed: u64) -> Self {
        let id = data.id as u64;
        let n = data.train.len();
        Self {
            id: data.id,
            data,
            model,
            main_opt: Sgd::new(settings.lr, settings.momentum),
            adapter_opt: Sgd::new(settings.lr, settings.momentum),
            rng: stream_rng(seed, 2 * id + 1),
            adapter_rng: stream_rng(seed, 2 * id + 2),
            order: (0..n).collect(),
            cursor: n,
        }
    }

    /// Next mini-batch of training indices; reshuffles once per pass and
    /// drops the incomplete tail.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let b = batch_size.min(self.order.len());
        if self.cursor + b > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        out
    }

    /// One update of the backbone and classifier. The adapter is untouched.
    pub fn main_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        settings: &FederationSettings,
        anchor: Option<&[Vec<f64>]>,
    ) -> Result<LossComponents> {
        let net = &mut self.model.net;
        let ctx = settings.diversify.map(|d| sample_mix_context(net, d, &mut self.rng));
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let loss = local_loss(
            net,
            &mut g,
            &bound,
            xv,
            labels,
            ctx.as_ref(),
            settings.loss,
            settings.stop_gradient,
        )?;
        if !loss.components.total.is_finite() {
            return Err(Error::Numerical(format!(
                "client {}: local loss is {} (CE {}, CACL {}, CAFL {})",
                self.id, loss.components.total, loss.components.ce, loss.components.cacl, loss.components.cafl
            )));
        }
        g.backward(loss.total)?;
        let mut grads = gradients(&g, &bound.vars());
        let mu = settings.strategy.prox_mu();
        if let (Some(anchor), true) = (anchor, mu > 0.0) {
            for ((grad, p), a) in grads.iter_mut().zip(net.params()).zip(anchor) {
                for ((gv, w), w0) in grad.iter_mut().zip(p.data()).zip(a) {
                    *gv += mu * (w - w0);
                }
            }
        }
        self.main_opt.step(net.params_mut(), &grads)?;
        Ok(loss.components)
    }

    /// One adapter update with the backbone frozen.
    pub fn adapter_step(&mut self, x: &Tensor, labels: &[usize], settings: &FederationSettings) -> Result<Option<f64>> {
        let (Some(adapter), Some(cfg)) = (self.model.adapter.as_mut(), settings.adapter) else {
            return Ok(None);
        };
        let loss = adapter_train_step(
            &mut self.model.net,
            adapter,
            x,
            labels,
            &mut self.adapter_opt,
            &mut self.adapter_rng,
            cfg.detach_input,
        )?;
        Ok(Some(loss))
    }

    /// Loads the broadcast arrays, trains for one round and returns the
    /// best-validating snapshot. `round` counts from 0.
    pub fn local_update(
        &mut self,
        global: &ModelBundle,
        settings: &FederationSettings,
        round: usize,
    ) -> Result<ClientUpdate> {
        let strategy = settings.strategy;
        self.model
            .import(global, |k| strategy.shares(k) || k == ArrayKind::BnGlobalStats)?;
        self.main_opt = Sgd::new(settings.lr, settings.momentum);
        self.adapter_opt = Sgd::new(settings.lr, settings.momentum);

        let anchor: Option<Vec<Vec<f64>>> =
            (strategy.prox_mu() > 0.0).then(|| self.model.net.params().iter().map(|p| p.data().to_vec()).collect());
        let train_adapter = settings.adapter.is_some_and(|a| round >= a.warmup_rounds);
        let warming = round < settings.diversify_warmup && settings.diversify.is_some();
        let plain;
        let settings = if warming {
            plain = FederationSettings {
                diversify: None,
                ..settings.clone()
            };
            &plain
        } else {
            settings
        };
        let validate = !self.data.val.is_empty();
        let cadence = settings.validate_every.max(1);

        let mut best: Option<(f64, Model, usize)> = None;
        let mut sum = LossComponents::default();
        let mut adapter_sum = 0.0;
        let mut adapter_steps = 0;
        for it in 0..settings.iterations {
            let idx = self.next_batch(settings.batch_size);
            let (x, labels) = self.data.train.batch(&idx);
            let c = self
                .main_step(&x, &labels, settings, anchor.as_deref())
                .map_err(|e| annotate(e, round, it))?;
            sum.ce += c.ce;
            sum.cacl += c.cacl;
            sum.cafl += c.cafl;
            sum.total += c.total;
            if train_adapter {
                if let Some(l) = self
                    .adapter_step(&x, &labels, settings)
                    .map_err(|e| annotate(e, round, it))?
                {
                    adapter_sum += l;
                    adapter_steps += 1;
                }
            }
            let done = it + 1;
            if validate && (done % cadence == 0 || done == settings.iterations) {
                let acc = evaluate(&self.model, &self.data.val, InferenceMode::EvalLocal)?;
                if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                    best = Some((acc, self.model.clone(), done));
                }
            }
        }

        let e = settings.iterations.max(1) as f64;
        let mean_loss = LossComponents {
            ce: sum.ce / e,
            cacl: sum.cacl / e,
            cafl: sum.cafl / e,
            total: sum.total / e,
        };
        // the client carries on from the snapshot it uploads
        let (val_accuracy, snapshot_iteration) = match best {
            Some((acc, snapshot, it)) => {
                self.model = snapshot;
                (Some(acc), it)
            }
            None => (None, settings.iterations),
        };
        let bundle = self.model.export();
        Ok(ClientUpdate {
            client_id: self.id,
            bundle,
            n_train: self.data.train.len(),
            val_accuracy,
            snapshot_iteration,
            mean_loss,
            mean_adapter_loss: (adapter_steps > 0).then(|| adapter_sum / adapter_steps as f64),
        })
    }
}

fn annotate(e: Error, round: usize, it: usize) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("round {round}, iteration {it}: {m}")),
        other => other,
    }
}
