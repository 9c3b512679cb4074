//! Feature diversification through mixed instance/global statistics and the
//! client-agnostic feature and classification losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BoundNet, ForwardOutput, NormMode, SmallConvNet, BN_EPS};
use crate::tensor::{Graph, Var};

/// Distribution of the per-channel mixing weights `u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixDistribution {
    Uniform { low: f64, high: f64 },
    Fixed { value: f64 },
}

impl Default for MixDistribution {
    fn default() -> Self {
        MixDistribution::Uniform { low: 0.0, high: 1.0 }
    }
}

impl MixDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MixDistribution::Uniform { low, high } if !(low.is_finite() && high.is_finite()) || low > high => Err(
                Error::Config(format!("diversify: invalid uniform bounds [{low}, {high}]")),
            ),
            MixDistribution::Fixed { value } if !value.is_finite() => {
                Err(Error::Config("diversify: fixed value must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MixDistribution::Uniform { low, high } if low < high => rng.random_range(low..=high),
            MixDistribution::Uniform { low, .. } => low,
            MixDistribution::Fixed { value } => value,
        }
    }
}

/// One mixing vector per BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MixContext {
    pub u: Vec<Vec<f64>>,
    pub distribution: MixDistribution,
}

pub fn sample_mix_context<R: Rng + ?Sized>(
    net: &SmallConvNet,
    distribution: MixDistribution,
    rng: &mut R,
) -> MixContext {
    let u = net
        .bn_channels()
        .into_iter()
        .map(|c| (0..c).map(|_| distribution.draw(rng)).collect())
        .collect();
    MixContext { u, distribution }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Entries whose mixed deviation fell to `eps` or below.
    pub clamped: usize,
}

/// Channel-wise `u*inst + (1-u)*global` for means and standard deviations.
pub fn mix_statistics(
    mu_inst: &[f64],
    sigma_inst: &[f64],
    mu_g: &[f64],
    sigma_g: &[f64],
    u: &[f64],
) -> Result<MixedStats> {
    let c = u.len();
    if [mu_inst.len(), sigma_inst.len(), mu_g.len(), sigma_g.len()]
        .iter()
        .any(|&l| l != c)
    {
        return Err(Error::Dimension {
            op: "mix_statistics",
            detail: format!("all inputs must have {c} channels"),
        });
    }
    let mut clamped = 0;
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for j in 0..c {
        mu.push(u[j] * mu_inst[j] + (1.0 - u[j]) * mu_g[j]);
        let s = u[j] * sigma_inst[j] + (1.0 - u[j]) * sigma_g[j];
        if s <= 0.0 {
            clamped += 1;
            sigma.push(BN_EPS);
        } else {
            sigma.push(s);
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} mixed deviation(s) non-positive, clamped to eps");
    }
    Ok(MixedStats { mu, sigma, clamped })
}

/// Forward pass with every BN layer normalizing by mixed statistics.
/// Running buffers are left untouched.
pub fn diversified_forward(
    net: &mut SmallConvNet,
    g: &mut Graph,
    bound: &BoundNet,
    x: Var,
    ctx: &MixContext,
) -> Result<ForwardOutput> {
    net.forward(g, bound, x, &mut NormMode::Mixed(&ctx.u))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::Config(format!(
                "loss.lambda1 must lie in [0, 1], got {}",
                self.lambda1
            )));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!(
                "loss.lambda2 must be non-negative, got {}",
                self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub cacl: f64,
    pub cafl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LocalLoss {
    pub total: Var,
    pub components: LossComponents,
}

/// Local objective `(1-l1)*CE + l1*CACL + l2*CAFL`.
///
/// The plain branch runs in train-batch mode (so running statistics advance
/// once per call). With `ctx == None` diversification is off and the
/// objective is plain cross-entropy. `stop_gradient` detaches the
/// diversified features inside the feature loss only.
#[allow(clippy::too_many_arguments)]
pub fn local_loss(
    net: &mut SmallConvNet,
    g: &mut Graph,
    bound: &BoundNet,
    x: Var,
    labels: &[usize],
    ctx: Option<&MixContext>,
    weights: LossWeights,
    stop_gradient: bool,
) -> Result<LocalLoss> {
    let plain = net.forward(g, bound, x, &mut NormMode::TrainBatch)?;
    let ce = g.softmax_cross_entropy(plain.logits, labels)?;
    let ce_value = g.data(ce)[0];
    let Some(ctx) = ctx else {
        return Ok(LocalLoss {
            total: ce,
            components: LossComponents {
                ce: ce_value,
                total: ce_value,
                ..Default::default()
            },
        });
    };

    let div = diversified_forward(net, g, bound, x, ctx)?;
    let cacl = g.softmax_cross_entropy(div.logits, labels)?;
    let target = if stop_gradient {
        g.detach(div.features)
    } else {
        div.features
    };
    let cafl = g.mse(plain.features, target)?;

    let a = g.scale(ce, 1.0 - weights.lambda1);
    let b = g.scale(cacl, weights.lambda1);
    let c = g.scale(cafl, weights.lambda2);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LocalLoss {
        total,
        components: LossComponents {
            ce: ce_value,
            cacl: g.data(cacl)[0],
            cafl: g.data(cafl)[0],
            total: g.data(total)[0],
        },
    })
}
