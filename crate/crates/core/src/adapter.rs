//! Instance feature adapter: per-BN-layer networks that predict how far
//! each test sample should move from global towards instance statistics.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{instance_stats, AlphaSource, BoundAffine, DualBnLayer, InstanceStats, NormMode, SmallConvNet};
use crate::optim::{gradients, Sgd};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_HIDDEN: usize = 32;

/// Initial bias on the `epsilon` output, so that untrained adapters start
/// halfway between global and instance statistics.
pub const EPSILON_BIAS_INIT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAdapterLayer {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAdapter {
    pub layers: Vec<AdapterLayer>,
    hidden: usize,
}

impl AdapterLayer {
    fn tensors(&self) -> [&Tensor; 4] {
        [&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]
    }

    pub fn channels(&self) -> usize {
        self.fc1_w.shape()[0] / 2
    }
}

impl InstanceAdapter {
    pub fn new<R: Rng + ?Sized>(channels: &[usize], hidden: usize, rng: &mut R) -> Result<Self> {
        if hidden == 0 || channels.contains(&0) {
            return Err(Error::Config("adapter: dimensions must be positive".into()));
        }
        let mut layers = Vec::with_capacity(channels.len());
        for &c in channels {
            let mut fill = |rows: usize, cols: usize| -> Result<Tensor> {
                let bound = 1.0 / (rows as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
                let data = (0..rows * cols).map(|_| u.sample(rng)).collect();
                Ok(Tensor::new(&[rows, cols], data)?.with_grad())
            };
            let fc1_w = fill(2 * c, hidden)?;
            let fc2_w = fill(hidden, 2)?;
            layers.push(AdapterLayer {
                fc1_w,
                fc1_b: Tensor::zeros(&[hidden]).with_grad(),
                fc2_w,
                fc2_b: Tensor::new(&[2], vec![0.0, EPSILON_BIAS_INIT])?.with_grad(),
            });
        }
        Ok(Self { layers, hidden })
    }

    /// All-zero adapter: every output is `(0, 0)`.
    pub fn zeros(channels: &[usize], hidden: usize) -> Self {
        let layers = channels
            .iter()
            .map(|&c| AdapterLayer {
                fc1_w: Tensor::zeros(&[2 * c, hidden]).with_grad(),
                fc1_b: Tensor::zeros(&[hidden]).with_grad(),
                fc2_w: Tensor::zeros(&[hidden, 2]).with_grad(),
                fc2_b: Tensor::zeros(&[2]).with_grad(),
            })
            .collect();
        Self { layers, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn channels(&self) -> Vec<usize> {
        self.layers.iter().map(AdapterLayer::channels).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            for p in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
                out.push(format!("adapter.{l}.{p}"));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(AdapterLayer::tensors).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.fc1_w, &mut l.fc1_b, &mut l.fc2_w, &mut l.fc2_b])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<BoundAdapterLayer> {
        let mut put = |t: &Tensor| {
            if trainable {
                g.param(t)
            } else {
                g.constant(t.clone())
            }
        };
        self.layers
            .iter()
            .map(|l| BoundAdapterLayer {
                fc1_w: put(&l.fc1_w),
                fc1_b: put(&l.fc1_b),
                fc2_w: put(&l.fc2_w),
                fc2_b: put(&l.fc2_b),
            })
            .collect()
    }

    /// Checks that the adapter lines up with the network's BN layers.
    pub fn check_matches(&self, net: &SmallConvNet) -> Result<()> {
        if self.channels() != net.bn_channels() {
            return Err(Error::Config(format!(
                "adapter channels {:?} do not match BN layers {:?}",
                self.channels(),
                net.bn_channels()
            )));
        }
        Ok(())
    }
}

pub fn bound_vars(layers: &[BoundAdapterLayer]) -> Vec<Var> {
    layers
        .iter()
        .flat_map(|l| [l.fc1_w, l.fc1_b, l.fc2_w, l.fc2_b])
        .collect()
}

/// `[delta; epsilon] = fc2(relu(fc1([mu_inst - mu_G; sigma_inst - sigma_G])))`.
///
/// With `detach_input` the statistic difference is a constant descriptor
/// and no gradient reaches the instance statistics through it.
pub fn adapter_forward(
    g: &mut Graph,
    layer: &BoundAdapterLayer,
    stats: InstanceStats,
    mu_g: &[f64],
    sigma_g: &[f64],
    detach_input: bool,
) -> Result<(Var, Var)> {
    let s = g.shape(stats.mu).to_vec();
    let c = mu_g.len();
    if s.len() != 2 || s[1] != c || sigma_g.len() != c || g.shape(stats.sigma) != s.as_slice() {
        return Err(Error::Config(format!(
            "adapter input: instance stats {s:?} against {c} global channels"
        )));
    }
    if g.shape(layer.fc1_w)[0] != 2 * c {
        return Err(Error::Config(format!(
            "adapter expects {} channels, layer has {c}",
            g.shape(layer.fc1_w)[0] / 2
        )));
    }
    let n = s[0];
    let rows = |g: &mut Graph, v: &[f64]| g.constant(Tensor::new(&[n, c], v.repeat(n)).expect("row broadcast"));
    let (mu, sigma) = if detach_input {
        (g.detach(stats.mu), g.detach(stats.sigma))
    } else {
        (stats.mu, stats.sigma)
    };
    let mg = rows(g, mu_g);
    let sg = rows(g, sigma_g);
    let dmu = g.sub(mu, mg)?;
    let dsigma = g.sub(sigma, sg)?;
    let input = g.concat_cols(dmu, dsigma)?;
    let h = g.matmul(input, layer.fc1_w)?;
    let h = g.add_bias(h, layer.fc1_b)?;
    let h = g.relu(h);
    let out = g.matmul(h, layer.fc2_w)?;
    let out = g.add_bias(out, layer.fc2_b)?;
    Ok((g.column(out, 0)?, g.column(out, 1)?))
}

/// One interpolation weight with the raw adapter outputs behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSample {
    pub alpha: f64,
    pub delta: f64,
    pub epsilon: f64,
    /// Standard normal draw; absent at test time.
    pub z: Option<f64>,
}

pub fn reparam_alpha(delta: f64, epsilon: f64, z: f64) -> f64 {
    (z * delta + epsilon).clamp(0.0, 1.0)
}

pub fn reparam_alpha_train<R: Rng + ?Sized>(delta: &[f64], epsilon: &[f64], rng: &mut R) -> Vec<AlphaSample> {
    delta
        .iter()
        .zip(epsilon)
        .map(|(&d, &e)| {
            let z: f64 = StandardNormal.sample(rng);
            AlphaSample {
                alpha: reparam_alpha(d, e, z),
                delta: d,
                epsilon: e,
                z: Some(z),
            }
        })
        .collect()
}

/// Test-time weight: the noise has zero mean, so only `epsilon` remains.
pub fn alpha_test(_delta: f64, epsilon: f64) -> f64 {
    epsilon.clamp(0.0, 1.0)
}

/// Normalizes `x` with statistics interpolated by a per-sample `alpha`.
pub fn interpolated_bn_forward(
    g: &mut Graph,
    layer: &DualBnLayer,
    x: Var,
    alpha: Var,
    affine: BoundAffine,
) -> Result<Var> {
    let stats = instance_stats(g, x, layer.eps)?;
    layer.forward_interpolated(g, x, stats, alpha, affine)
}

/// Alpha produced by the adapter networks. With a noise source the
/// reparameterized training draw is used, otherwise `clamp(epsilon)`.
pub struct LearnedAlpha<'a> {
    layers: &'a [BoundAdapterLayer],
    noise: Option<&'a mut dyn RngCore>,
    detach_input: bool,
    /// Per layer, per sample record of every alpha produced.
    pub samples: Vec<Vec<AlphaSample>>,
}

impl<'a> LearnedAlpha<'a> {
    pub fn train(layers: &'a [BoundAdapterLayer], rng: &'a mut dyn RngCore, detach_input: bool) -> Self {
        Self {
            layers,
            noise: Some(rng),
            detach_input,
            samples: Vec::new(),
        }
    }

    pub fn test(layers: &'a [BoundAdapterLayer]) -> Self {
        Self {
            layers,
            noise: None,
            detach_input: true,
            samples: Vec::new(),
        }
    }
}

impl AlphaSource for LearnedAlpha<'_> {
    fn alpha(&mut self, g: &mut Graph, layer: usize, bn: &DualBnLayer, stats: InstanceStats) -> Result<Var> {
        let bound = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no adapter for BN layer {layer}")))?;
        let (mu_g, sigma_g) = bn.global_mean_sigma()?;
        let (delta, epsilon) = adapter_forward(g, bound, stats, &mu_g, &sigma_g, self.detach_input)?;
        let n = g.shape(delta)[0];
        let (raw, z) = match self.noise.as_deref_mut() {
            Some(rng) => {
                let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
                let zv = g.constant(Tensor::new(&[n], z.clone())?);
                let scaled = g.mul(zv, delta)?;
                (g.add(scaled, epsilon)?, Some(z))
            }
            None => (epsilon, None),
        };
        let alpha = g.clamp(raw, 0.0, 1.0);
        let record = (0..n)
            .map(|i| AlphaSample {
                alpha: g.data(alpha)[i],
                delta: g.data(delta)[i],
                epsilon: g.data(epsilon)[i],
                z: z.as_ref().map(|z| z[i]),
            })
            .collect();
        self.samples.push(record);
        Ok(alpha)
    }
}

/// The same constant alpha for every sample and layer.
pub struct FixedAlpha(pub f64);

impl AlphaSource for FixedAlpha {
    fn alpha(&mut self, g: &mut Graph, _layer: usize, _bn: &DualBnLayer, stats: InstanceStats) -> Result<Var> {
        let n = g.shape(stats.mu)[0];
        Ok(g.constant(Tensor::full(&[n], self.0)))
    }
}

/// Independent `U(0, 1)` alpha per sample and layer.
pub struct RandomAlpha<'a>(pub &'a mut dyn RngCore);

impl AlphaSource for RandomAlpha<'_> {
    fn alpha(&mut self, g: &mut Graph, _layer: usize, _bn: &DualBnLayer, stats: InstanceStats) -> Result<Var> {
        let n = g.shape(stats.mu)[0];
        let draws: Vec<f64> = (0..n).map(|_| self.0.random::<f64>()).collect();
        Ok(g.constant(Tensor::new(&[n], draws)?))
    }
}

/// Inference-time replacement for the learned adapter output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaMode {
    Learned,
    Fixed { value: f64 },
    Random,
}

/// One adapter update with the main network frozen. Returns the
/// cross-entropy before the update.
pub fn adapter_train_step(
    net: &mut SmallConvNet,
    adapter: &mut InstanceAdapter,
    x: &Tensor,
    labels: &[usize],
    optimizer: &mut Sgd,
    rng: &mut dyn RngCore,
    detach_input: bool,
) -> Result<f64> {
    adapter.check_matches(net)?;
    let mut g = Graph::new();
    let bound_net = net.bind(&mut g, false);
    let bound = adapter.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let mut source = LearnedAlpha::train(&bound, rng, detach_input);
    let out = net.forward(&mut g, &bound_net, xv, &mut NormMode::Interpolated(&mut source))?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    let value = g.data(loss)[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!("adapter loss is {value}")));
    }
    g.backward(loss)?;
    let grads = gradients(&g, &bound_vars(&bound));
    optimizer.step(adapter.params_mut(), &grads)?;
    Ok(value)
}

/// Single deterministic forward with `alpha = clamp(epsilon)` in every layer.
pub fn adaptive_inference(net: &mut SmallConvNet, adapter: &InstanceAdapter, x: &Tensor) -> Result<Tensor> {
    adapter.check_matches(net)?;
    let mut g = Graph::new();
    let bound = adapter.bind(&mut g, false);
    let bound_net = net.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let mut source = LearnedAlpha::test(&bound);
    let out = net.forward(&mut g, &bound_net, xv, &mut NormMode::Interpolated(&mut source))?;
    Ok(g.value(out.logits).clone())
}

/// Interpolated inference with a baseline alpha in place of the adapter.
pub fn baseline_alpha_inference(
    net: &mut SmallConvNet,
    x: &Tensor,
    mode: AlphaMode,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    match mode {
        AlphaMode::Fixed { value } => net.predict(x, &mut NormMode::Interpolated(&mut FixedAlpha(value))),
        AlphaMode::Random => net.predict(x, &mut NormMode::Interpolated(&mut RandomAlpha(rng))),
        AlphaMode::Learned => Err(Error::Usage("learned alpha needs adapter weights".into())),
    }
}
