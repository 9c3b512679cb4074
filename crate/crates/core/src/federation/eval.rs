use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adaptive_inference, baseline_alpha_inference, AlphaMode};
use crate::domains::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::NormMode;
use crate::tensor::Tensor;

/// Samples per inference forward; inference is per-sample so the chunking
/// does not change any prediction.
pub const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InferenceMode {
    /// Server statistics only.
    EvalGlobal,
    /// The model's own running statistics.
    EvalLocal,
    /// Learned adapter, `alpha = clamp(epsilon)`.
    Adaptive,
    FixedAlpha {
        value: f64,
    },
    /// Uniform alpha per sample and layer, drawn from `seed`.
    RandomAlpha {
        seed: u64,
    },
}

impl InferenceMode {
    pub fn label(&self) -> String {
        match self {
            InferenceMode::EvalGlobal => "eval_global".into(),
            InferenceMode::EvalLocal => "eval_local".into(),
            InferenceMode::Adaptive => "adaptive".into(),
            InferenceMode::FixedAlpha { value } => format!("fixed_alpha_{value}"),
            InferenceMode::RandomAlpha { .. } => "random_alpha".into(),
        }
    }
}

/// Logits for `x` under `mode`.
pub fn predict(model: &mut Model, x: &Tensor, mode: InferenceMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    match mode {
        InferenceMode::EvalGlobal => model.net.predict(x, &mut NormMode::EvalGlobal),
        InferenceMode::EvalLocal => model.net.predict(x, &mut NormMode::EvalLocal),
        InferenceMode::Adaptive => {
            let adapter = model
                .adapter
                .as_ref()
                .ok_or_else(|| Error::Usage("adaptive inference needs an adapter".into()))?;
            adaptive_inference(&mut model.net, adapter, x)
        }
        InferenceMode::FixedAlpha { value } => {
            baseline_alpha_inference(&mut model.net, x, AlphaMode::Fixed { value }, rng)
        }
        InferenceMode::RandomAlpha { .. } => baseline_alpha_inference(&mut model.net, x, AlphaMode::Random, rng),
    }
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of correct argmax predictions.
pub fn evaluate(model: &Model, data: &Dataset, mode: InferenceMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut model = model.clone();
    let mut rng = match mode {
        InferenceMode::RandomAlpha { seed } => ChaCha8Rng::seed_from_u64(seed),
        _ => ChaCha8Rng::seed_from_u64(0),
    };
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch(chunk);
        let logits = predict(&mut model, &x, mode, &mut rng)?;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
