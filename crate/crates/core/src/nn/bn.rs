//! Batch normalization with two sets of statistics.
//!
//! Every layer carries its client-local running statistics and a separate
//! copy of the server-synthesized global statistics. Variances are stored,
//! standard deviations are derived on read as `sqrt(var + eps)`.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Server-side statistics injected into a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Graph handles for a layer's affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundAffine {
    pub gamma: Var,
    pub beta: Var,
}

/// Per-sample, per-channel spatial statistics, both `[N, C]`.
#[derive(Debug, Clone, Copy)]
pub struct InstanceStats {
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualBnLayer {
    name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub local_mean: Vec<f64>,
    pub local_var: Vec<f64>,
    pub global: Option<GlobalStats>,
    pub momentum: f64,
    pub eps: f64,
}

/// Mean and `sqrt(var + eps)` over the spatial positions of each sample.
pub fn instance_stats(g: &mut Graph, x: Var, eps: f64) -> Result<InstanceStats> {
    let shape = g.shape(x);
    if shape.len() < 3 {
        return Err(Error::DegenerateSpatial(1));
    }
    let spatial: usize = shape[2..].iter().product();
    if spatial < 2 {
        return Err(Error::DegenerateSpatial(spatial));
    }
    let mu = g.global_avg_pool(x)?;
    let var = g.spatial_var(x)?;
    let shifted = g.add_scalar(var, eps);
    let sigma = g.sqrt(shifted);
    Ok(InstanceStats { mu, sigma })
}

impl DualBnLayer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            local_mean: vec![0.0; channels],
            local_var: vec![1.0; channels],
            global: None,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.local_mean.len()
    }

    pub fn set_global(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(Error::Protocol(format!(
                "{}: global statistics of length {}/{} for {c} channels",
                self.name,
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|v| *v < 0.0 || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numerical(format!("{}: invalid global statistics", self.name)));
        }
        self.global = Some(GlobalStats { mean, var });
        Ok(())
    }

    pub fn global_stats(&self) -> Result<&GlobalStats> {
        self.global
            .as_ref()
            .ok_or_else(|| Error::UninitializedStatistics(self.name.clone()))
    }

    /// `(mu_G, sigma_G)` with `sigma_G = sqrt(var_G + eps)`.
    pub fn global_mean_sigma(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let gs = self.global_stats()?;
        Ok((gs.mean.clone(), self.sigma_of(&gs.var)))
    }

    fn sigma_of(&self, var: &[f64]) -> Vec<f64> {
        var.iter().map(|v| (v + self.eps).sqrt()).collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundAffine {
        if trainable {
            BoundAffine {
                gamma: g.param(&self.gamma),
                beta: g.param(&self.beta),
            }
        } else {
            BoundAffine {
                gamma: g.constant(self.gamma.clone()),
                beta: g.constant(self.beta.clone()),
            }
        }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<(usize, usize)> {
        let s = g.shape(x);
        if s.len() < 2 || s[1] != self.channels() {
            return Err(Error::Dimension {
                op: "batch_norm",
                detail: format!("{} expects {} channels, got {s:?}", self.name, self.channels()),
            });
        }
        Ok((s[0], s[2..].iter().product()))
    }

    /// `[C]` constants repeated into an `[N, C]` constant.
    fn rows(g: &mut Graph, v: &[f64], n: usize) -> Var {
        let data = v.repeat(n);
        g.constant(Tensor::new(&[n, v.len()], data).expect("row broadcast"))
    }

    /// Normalizes `x` with `[N, C]` statistics and applies the affine map.
    pub fn normalize_with(&self, g: &mut Graph, x: Var, mu: Var, sigma: Var, affine: BoundAffine) -> Result<Var> {
        self.check_input(g, x)?;
        let z = g.normalize(x, mu, sigma)?;
        g.channel_affine(z, affine.gamma, affine.beta)
    }

    /// Mini-batch statistics; updates the local running buffers.
    pub fn forward_train(&mut self, g: &mut Graph, x: Var, affine: BoundAffine) -> Result<Var> {
        let (n, spatial) = self.check_input(g, x)?;
        let count = n * spatial;
        if count < 2 {
            return Err(Error::VarianceUndefined {
                layer: self.name.clone(),
                count,
            });
        }
        let mean = g.channel_mean(x)?;
        let var = g.channel_var(x)?;
        let shifted = g.add_scalar(var, self.eps);
        let sigma = g.sqrt(shifted);
        let mu_rows = g.expand_rows(mean, n)?;
        let sigma_rows = g.expand_rows(sigma, n)?;
        let out = self.normalize_with(g, x, mu_rows, sigma_rows, affine)?;

        let unbias = count as f64 / (count - 1) as f64;
        let m = self.momentum;
        for (i, (bm, bv)) in g.data(mean).iter().zip(g.data(var)).enumerate() {
            self.local_mean[i] = (1.0 - m) * self.local_mean[i] + m * bm;
            self.local_var[i] = (1.0 - m) * self.local_var[i] + m * bv * unbias;
        }
        Ok(out)
    }

    /// Normalizes with the client's own running statistics.
    pub fn forward_eval_local(&self, g: &mut Graph, x: Var, affine: BoundAffine) -> Result<Var> {
        let (n, _) = self.check_input(g, x)?;
        let mu = Self::rows(g, &self.local_mean, n);
        let sigma = Self::rows(g, &self.sigma_of(&self.local_var), n);
        self.normalize_with(g, x, mu, sigma, affine)
    }

    /// `gamma * (x - mu_G) / sigma_G + beta`; reads nothing else.
    pub fn forward_eval_global(&self, g: &mut Graph, x: Var, affine: BoundAffine) -> Result<Var> {
        let (n, _) = self.check_input(g, x)?;
        let (mu_g, sigma_g) = self.global_mean_sigma()?;
        let mu = Self::rows(g, &mu_g, n);
        let sigma = Self::rows(g, &sigma_g, n);
        self.normalize_with(g, x, mu, sigma, affine)
    }

    /// Per-sample mixed statistics `u*inst + (1-u)*global`, channel-wise.
    ///
    /// Weights outside `[0, 1]` can push the mixed deviation to zero or
    /// below; such entries are clamped to `eps` and reported.
    pub fn forward_mixed(&self, g: &mut Graph, x: Var, u: &[f64], affine: BoundAffine) -> Result<Var> {
        let (n, _) = self.check_input(g, x)?;
        if u.len() != self.channels() {
            return Err(Error::Config(format!(
                "{}: mixing vector has {} entries for {} channels",
                self.name,
                u.len(),
                self.channels()
            )));
        }
        let (mu_g, sigma_g) = self.global_mean_sigma()?;
        let stats = instance_stats(g, x, self.eps)?;
        let weights = Self::rows(g, u, n);
        let rest: Vec<f64> = u.iter().map(|w| 1.0 - w).collect();
        let mu_part: Vec<f64> = rest.iter().zip(&mu_g).map(|(r, m)| r * m).collect();
        let sigma_part: Vec<f64> = rest.iter().zip(&sigma_g).map(|(r, s)| r * s).collect();
        let mu_part = Self::rows(g, &mu_part, n);
        let sigma_part = Self::rows(g, &sigma_part, n);

        let mu_scaled = g.mul(weights, stats.mu)?;
        let mu = g.add(mu_scaled, mu_part)?;
        let sigma_scaled = g.mul(weights, stats.sigma)?;
        let mut sigma = g.add(sigma_scaled, sigma_part)?;
        if u.iter().any(|w| !(0.0..=1.0).contains(w)) {
            let clamped = g.data(sigma).iter().filter(|s| **s <= self.eps).count();
            if clamped > 0 {
                log::warn!("{}: {clamped} mixed deviation(s) at or below eps, clamped", self.name);
            }
            sigma = g.clamp(sigma, self.eps, f64::INFINITY);
        }
        self.normalize_with(g, x, mu, sigma, affine)
    }

    /// Per-sample interpolation `alpha_i*inst + (1-alpha_i)*global`, with a
    /// scalar `alpha_i` shared across channels.
    pub fn forward_interpolated(
        &self,
        g: &mut Graph,
        x: Var,
        stats: InstanceStats,
        alpha: Var,
        affine: BoundAffine,
    ) -> Result<Var> {
        let (n, _) = self.check_input(g, x)?;
        if g.shape(alpha) != [n] {
            return Err(Error::Dimension {
                op: "interpolated_bn",
                detail: format!("alpha {:?} for batch of {n}", g.shape(alpha)),
            });
        }
        let (mu_g, sigma_g) = self.global_mean_sigma()?;
        let c = self.channels();
        let a = g.expand_cols(alpha, c)?;
        let rest = g.one_minus(a);
        let mu_g = Self::rows(g, &mu_g, n);
        let sigma_g = Self::rows(g, &sigma_g, n);

        let mu_inst = g.mul(a, stats.mu)?;
        let mu_glob = g.mul(rest, mu_g)?;
        let mu = g.add(mu_inst, mu_glob)?;
        let sigma_inst = g.mul(a, stats.sigma)?;
        let sigma_glob = g.mul(rest, sigma_g)?;
        let sigma = g.add(sigma_inst, sigma_glob)?;
        self.normalize_with(g, x, mu, sigma, affine)
    }
}
