//! Flat key-to-array model bundles and their on-disk checkpoint format.
//!
//! Checkpoints are JSON documents:
//!
//! ```text
//! { "format": "fedfd-checkpoint", "version": 1, "checksum": "<sha256 hex>",
//!   "meta": { ... },
//!   "arrays": { "<key>": { "shape": [..], "data": "<base64 f64 little-endian>" } } }
//! ```
//!
//! The checksum covers every key, shape and raw float byte, and the meta
//! entries, in key order.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::InstanceAdapter;
use crate::error::{Error, Result};
use crate::nn::{NetConfig, SmallConvNet};
use crate::tensor::Tensor;

type PendingStats = (Option<Vec<f64>>, Option<Vec<f64>>);

pub const CHECKPOINT_FORMAT: &str = "fedfd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    fn of(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn from_vec(v: &[f64]) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }
}

pub type ModelBundle = BTreeMap<String, Array>;

/// Role of an array, derived from its key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArrayKind {
    FeatureWeights,
    BnAffine,
    BnLocalStats,
    BnGlobalStats,
    Classifier,
    Adapter,
}

impl ArrayKind {
    pub fn of(key: &str) -> Self {
        if key.starts_with("adapter.") {
            ArrayKind::Adapter
        } else if key.starts_with("classifier.") {
            ArrayKind::Classifier
        } else if key.ends_with(".bn.gamma") || key.ends_with(".bn.beta") {
            ArrayKind::BnAffine
        } else if key.ends_with(".bn.local_mean") || key.ends_with(".bn.local_var") {
            ArrayKind::BnLocalStats
        } else if key.ends_with(".bn.global_mean") || key.ends_with(".bn.global_var") {
            ArrayKind::BnGlobalStats
        } else {
            ArrayKind::FeatureWeights
        }
    }
}

/// Backbone plus optional instance adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: SmallConvNet,
    pub adapter: Option<InstanceAdapter>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, adapter_hidden: Option<usize>, rng: &mut R) -> Result<Self> {
        let mut net = SmallConvNet::new(config, rng)?;
        net.reset_global_stats();
        let adapter = match adapter_hidden {
            Some(h) => Some(InstanceAdapter::new(&net.bn_channels(), h, rng)?),
            None => None,
        };
        Ok(Self { net, adapter })
    }

    pub fn export(&self) -> ModelBundle {
        let mut out = ModelBundle::new();
        for (name, t) in self.net.param_names().into_iter().zip(self.net.params()) {
            out.insert(name, Array::of(t));
        }
        for (i, bn) in self.net.bn_layers().enumerate() {
            out.insert(format!("block{i}.bn.local_mean"), Array::from_vec(&bn.local_mean));
            out.insert(format!("block{i}.bn.local_var"), Array::from_vec(&bn.local_var));
            if let Some(gs) = &bn.global {
                out.insert(format!("block{i}.bn.global_mean"), Array::from_vec(&gs.mean));
                out.insert(format!("block{i}.bn.global_var"), Array::from_vec(&gs.var));
            }
        }
        if let Some(a) = &self.adapter {
            for (name, t) in a.param_names().into_iter().zip(a.params()) {
                out.insert(name, Array::of(t));
            }
        }
        out
    }

    /// Overwrites every array of `bundle` whose kind passes `select`.
    /// Unknown keys and shape mismatches are protocol errors.
    pub fn import(&mut self, bundle: &ModelBundle, select: impl Fn(ArrayKind) -> bool) -> Result<()> {
        let mismatch = |key: &str, want: &[usize], got: &[usize]| {
            Error::Protocol(format!("{key}: expected shape {want:?}, got {got:?}"))
        };
        let names = self.net.param_names();
        let adapter_names = self.adapter.as_ref().map(|a| a.param_names()).unwrap_or_default();
        let mut params = self.net.params_mut();
        let mut adapter_params = match self.adapter.as_mut() {
            Some(a) => a.params_mut(),
            None => Vec::new(),
        };
        // layer -> (mean, var) as they arrive
        let mut pending_global: BTreeMap<usize, PendingStats> = BTreeMap::new();
        let mut stats_writes = Vec::new();

        for (key, arr) in bundle {
            if !select(ArrayKind::of(key)) {
                continue;
            }
            if let Some(i) = names.iter().position(|n| n == key) {
                let t = &mut params[i];
                if t.shape() != arr.shape.as_slice() {
                    return Err(mismatch(key, t.shape(), &arr.shape));
                }
                t.data_mut().copy_from_slice(&arr.data);
                continue;
            }
            if let Some(i) = adapter_names.iter().position(|n| n == key) {
                let t = &mut adapter_params[i];
                if t.shape() != arr.shape.as_slice() {
                    return Err(mismatch(key, t.shape(), &arr.shape));
                }
                t.data_mut().copy_from_slice(&arr.data);
                continue;
            }
            let (layer, field) =
                parse_stat_key(key).ok_or_else(|| Error::Protocol(format!("unknown bundle key {key}")))?;
            match field {
                "global_mean" => pending_global.entry(layer).or_default().0 = Some(arr.data.clone()),
                "global_var" => pending_global.entry(layer).or_default().1 = Some(arr.data.clone()),
                _ => stats_writes.push((layer, field, arr)),
            }
        }
        drop(params);
        drop(adapter_params);

        let layers = self.net.blocks.len();
        for (layer, field, arr) in stats_writes {
            let bn = &mut self
                .net
                .blocks
                .get_mut(layer)
                .ok_or_else(|| Error::Protocol(format!("no BN layer {layer} (have {layers})")))?
                .bn;
            let c = bn.channels();
            if arr.shape != [c] {
                return Err(mismatch(&format!("block{layer}.bn.{field}"), &[c], &arr.shape));
            }
            let target = if field == "local_mean" {
                &mut bn.local_mean
            } else {
                &mut bn.local_var
            };
            target.copy_from_slice(&arr.data);
        }
        for (layer, (mean, var)) in pending_global {
            let bn = &mut self
                .net
                .blocks
                .get_mut(layer)
                .ok_or_else(|| Error::Protocol(format!("no BN layer {layer} (have {layers})")))?
                .bn;
            match (mean, var) {
                (Some(m), Some(v)) => bn.set_global(m, v)?,
                _ => {
                    return Err(Error::Protocol(format!(
                        "block{layer}: global mean and variance must travel together"
                    )))
                }
            }
        }
        Ok(())
    }
}

fn parse_stat_key(key: &str) -> Option<(usize, &str)> {
    let rest = key.strip_prefix("block")?;
    let (idx, field) = rest.split_once(".bn.")?;
    let field = match field {
        "local_mean" | "local_var" | "global_mean" | "global_var" => field,
        _ => return None,
    };
    Some((idx.parse().ok()?, field))
}

#[derive(Serialize, Deserialize)]
struct StoredArray {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    format: String,
    version: u32,
    checksum: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    arrays: BTreeMap<String, StoredArray>,
}

fn checksum(bundle: &ModelBundle, meta: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (key, arr) in bundle {
        h.update((key.len() as u64).to_le_bytes());
        h.update(key.as_bytes());
        h.update((arr.shape.len() as u64).to_le_bytes());
        for d in &arr.shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &arr.data {
            h.update(v.to_le_bytes());
        }
    }
    for (k, v) in meta {
        h.update((k.len() as u64).to_le_bytes());
        h.update(k.as_bytes());
        h.update((v.len() as u64).to_le_bytes());
        h.update(v.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn encode_checkpoint(bundle: &ModelBundle, meta: &BTreeMap<String, String>) -> Result<String> {
    let arrays = bundle
        .iter()
        .map(|(k, a)| {
            let bytes: Vec<u8> = a.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (
                k.clone(),
                StoredArray {
                    shape: a.shape.clone(),
                    data: B64.encode(bytes),
                },
            )
        })
        .collect();
    let stored = StoredCheckpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        checksum: checksum(bundle, meta),
        meta: meta.clone(),
        arrays,
    };
    Ok(serde_json::to_string_pretty(&stored)?)
}

pub fn decode_checkpoint(text: &str, origin: &Path) -> Result<(ModelBundle, BTreeMap<String, String>)> {
    let format_err = |detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail,
    };
    let stored: StoredCheckpoint =
        serde_json::from_str(text).map_err(|e| format_err(format!("not a checkpoint: {e}")))?;
    if stored.format != CHECKPOINT_FORMAT {
        return Err(format_err(format!("unexpected format tag {:?}", stored.format)));
    }
    if stored.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: stored.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut bundle = ModelBundle::new();
    for (key, arr) in stored.arrays {
        let bytes = B64
            .decode(arr.data.as_bytes())
            .map_err(|e| format_err(format!("{key}: bad base64: {e}")))?;
        let numel: usize = arr.shape.iter().product();
        if bytes.len() != numel * 8 {
            return Err(format_err(format!(
                "{key}: {} bytes for shape {:?}",
                bytes.len(),
                arr.shape
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        bundle.insert(key, Array { shape: arr.shape, data });
    }
    let computed = checksum(&bundle, &stored.meta);
    if computed != stored.checksum {
        return Err(Error::Checksum {
            stored: stored.checksum,
            computed,
        });
    }
    Ok((bundle, stored.meta))
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, meta: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(bundle, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, BTreeMap<String, String>)> {
    let text = std::fs::read_to_string(path)?;
    decode_checkpoint(&text, path)
}
