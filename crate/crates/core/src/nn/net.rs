use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::bn::{instance_stats, BoundAffine, DualBnLayer, InstanceStats};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            kernel: 3,
            classes: 5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.widths.is_empty() {
            return bad("widths must name at least one block");
        }
        if self.strides.len() != self.widths.len() {
            return bad("strides must have one entry per block");
        }
        if self.widths.contains(&0) || self.in_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.strides.contains(&0) {
            return bad("strides must be positive");
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        Ok(())
    }
}

/// Source of per-sample interpolation weights for interpolated BN.
pub trait AlphaSource {
    /// Returns `alpha` of shape `[N]` for BN layer `layer`.
    fn alpha(&mut self, g: &mut Graph, layer: usize, bn: &DualBnLayer, stats: InstanceStats) -> Result<Var>;
}

/// How every BN layer picks its normalization statistics.
pub enum NormMode<'a> {
    /// Mini-batch statistics; running buffers are updated.
    TrainBatch,
    /// The client's running statistics.
    EvalLocal,
    /// Server statistics only.
    EvalGlobal,
    /// Channel-wise mix of instance and global statistics, one `u` per layer.
    Mixed(&'a [Vec<f64>]),
    /// Per-sample scalar interpolation of instance and global statistics.
    Interpolated(&'a mut dyn AlphaSource),
}

impl NormMode<'_> {
    fn name(&self) -> &'static str {
        match self {
            NormMode::TrainBatch => "train-batch",
            NormMode::EvalLocal => "eval-local",
            NormMode::EvalGlobal => "eval-global",
            NormMode::Mixed(_) => "mixed",
            NormMode::Interpolated(_) => "interpolated",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Pooled features entering the classifier, `[N, D]`.
    pub features: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Tensor,
    pub stride: usize,
    pub bn: DualBnLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallConvNet {
    config: NetConfig,
    pub blocks: Vec<ConvBlock>,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundNet {
    pub conv: Vec<Var>,
    pub affine: Vec<BoundAffine>,
    pub classifier_w: Var,
    pub classifier_b: Var,
}

impl BoundNet {
    /// Parameter handles in the same order as [`SmallConvNet::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(3 * self.conv.len() + 2);
        for (c, a) in self.conv.iter().zip(&self.affine) {
            out.extend([*c, a.gamma, a.beta]);
        }
        out.extend([self.classifier_w, self.classifier_b]);
        out
    }
}

impl SmallConvNet {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut c_in = config.in_channels;
        for (i, (&c_out, &stride)) in config.widths.iter().zip(&config.strides).enumerate() {
            let fan_in = (c_in * k * k) as f64;
            let he = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..c_out * c_in * k * k).map(|_| he.sample(rng)).collect();
            blocks.push(ConvBlock {
                conv: Tensor::new(&[c_out, c_in, k, k], w)?.with_grad(),
                stride,
                bn: DualBnLayer::new(format!("block{i}.bn"), c_out),
            });
            c_in = c_out;
        }
        let bound = 1.0 / (c_in as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
        let w: Vec<f64> = (0..c_in * config.classes).map(|_| u.sample(rng)).collect();
        Ok(Self {
            classifier_w: Tensor::new(&[c_in, config.classes], w)?.with_grad(),
            classifier_b: Tensor::zeros(&[config.classes]).with_grad(),
            config,
            blocks,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.widths.last().expect("validated")
    }

    /// BN layers in forward order.
    pub fn bn_layers(&self) -> impl Iterator<Item = &DualBnLayer> {
        self.blocks.iter().map(|b| &b.bn)
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut DualBnLayer> {
        self.blocks.iter_mut().map(|b| &mut b.bn)
    }

    pub fn bn_channels(&self) -> Vec<usize> {
        self.bn_layers().map(DualBnLayer::channels).collect()
    }

    /// Sets every layer's global statistics to mean 0, variance 1.
    pub fn reset_global_stats(&mut self) {
        for bn in self.bn_layers_mut() {
            let c = bn.channels();
            bn.set_global(vec![0.0; c], vec![1.0; c])
                .expect("fresh stats are valid");
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.blocks.len() {
            out.push(format!("block{i}.conv.w"));
            out.push(format!("block{i}.bn.gamma"));
            out.push(format!("block{i}.bn.beta"));
        }
        out.push("classifier.w".into());
        out.push("classifier.b".into());
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv, &b.bn.gamma, &b.bn.beta]);
        }
        out.extend([&self.classifier_w, &self.classifier_b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.classifier_w);
        out.push(&mut self.classifier_b);
        out
    }

    /// Registers parameters in `g`; frozen parameters receive no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundNet {
        let mut conv = Vec::with_capacity(self.blocks.len());
        let mut affine = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            conv.push(if trainable {
                g.param(&b.conv)
            } else {
                g.constant(b.conv.clone())
            });
            affine.push(b.bn.bind(g, trainable));
        }
        let (classifier_w, classifier_b) = if trainable {
            (g.param(&self.classifier_w), g.param(&self.classifier_b))
        } else {
            (
                g.constant(self.classifier_w.clone()),
                g.constant(self.classifier_b.clone()),
            )
        };
        BoundNet {
            conv,
            affine,
            classifier_w,
            classifier_b,
        }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::Dimension {
                op: "forward",
                detail: format!("expected [N, {}, H, W], got {s:?}", self.config.in_channels),
            });
        }
        Ok(())
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &BoundNet,
        x: Var,
        mode: &mut NormMode<'_>,
    ) -> Result<ForwardOutput> {
        self.check_input(g, x)?;
        if let NormMode::Mixed(u) = mode {
            if u.len() != self.blocks.len() {
                return Err(Error::Config(format!(
                    "mixed mode needs {} mixing vectors, got {}",
                    self.blocks.len(),
                    u.len()
                )));
            }
        }
        log::trace!("forward in {} mode", mode.name());
        let pad = self.config.kernel / 2;
        let mut h = x;
        for (l, block) in self.blocks.iter_mut().enumerate() {
            let z = g.conv2d(h, bound.conv[l], block.stride, pad)?;
            let aff = bound.affine[l];
            let y = match mode {
                NormMode::TrainBatch => block.bn.forward_train(g, z, aff)?,
                NormMode::EvalLocal => block.bn.forward_eval_local(g, z, aff)?,
                NormMode::EvalGlobal => block.bn.forward_eval_global(g, z, aff)?,
                NormMode::Mixed(u) => block.bn.forward_mixed(g, z, &u[l], aff)?,
                NormMode::Interpolated(src) => {
                    let stats = instance_stats(g, z, block.bn.eps)?;
                    let alpha = src.alpha(g, l, &block.bn, stats)?;
                    block.bn.forward_interpolated(g, z, stats, alpha, aff)?
                }
            };
            h = g.relu(y);
        }
        let features = g.global_avg_pool(h)?;
        let scores = g.matmul(features, bound.classifier_w)?;
        let logits = g.add_bias(scores, bound.classifier_b)?;
        Ok(ForwardOutput { features, logits })
    }

    /// Inference-only forward with frozen parameters. `TrainBatch` is refused
    /// because it would mutate running statistics.
    pub fn predict(&mut self, x: &Tensor, mode: &mut NormMode<'_>) -> Result<Tensor> {
        if matches!(mode, NormMode::TrainBatch) {
            return Err(Error::Usage("predict does not run in train-batch mode".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, xv, mode)?;
        Ok(g.value(out.logits).clone())
    }
}
