//! Synthetic multi-domain image classification data.
//!
//! Every class is a procedural shape drawn with random jitter. A domain
//! re-colours images through a per-channel gain and bias and overlays a
//! sinusoidal texture plus pixel noise, which is precisely the kind of
//! shift that moves BN statistics.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled images stored contiguously as `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
}

/// Borrowed view of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledImage<'a> {
    pub pixels: &'a [f64],
    pub label: usize,
}

impl Dataset {
    pub fn new(channels: usize, size: usize, classes: usize, pixels: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per = channels * size * size;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Input(format!(
                "{} pixels for {} images of {channels}x{size}x{size}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::Input(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            channels,
            size,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn get(&self, i: usize) -> LabeledImage<'_> {
        let n = self.image_len();
        LabeledImage {
            pixels: &self.pixels[i * n..(i + 1) * n],
            label: self.labels[i],
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        self.with_contents(pixels, indices.iter().map(|&i| self.labels[i]).collect())
    }

    fn with_contents(&self, pixels: Vec<f64>, labels: Vec<usize>) -> Dataset {
        Dataset {
            channels: self.channels,
            size: self.size,
            classes: self.classes,
            pixels,
            labels,
        }
    }

    /// Images `indices` as an `[B, C, H, W]` tensor, with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sub = self.subset(indices);
        let shape = [indices.len(), self.channels, self.size, self.size];
        (Tensor::new(&shape, sub.pixels).expect("consistent batch"), sub.labels)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// SHA-256 over shape, labels and pixel bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.feed(&mut h);
        hex::encode(h.finalize())
    }

    fn feed(&self, h: &mut Sha256) {
        for d in [self.channels, self.size, self.classes, self.len()] {
            h.update((d as u64).to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        for p in &self.pixels {
            h.update(p.to_le_bytes());
        }
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Whether pixel offset `(dx, dy)`, in units of the shape radius, lies on
/// the shape of `class`.
fn on_shape(class: usize, dx: f64, dy: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    let m = dx.abs().max(dy.abs());
    match class % 10 {
        0 => d < 1.0,
        1 => m < 0.85,
        2 => d > 0.55 && d < 1.0,
        3 => (dx.abs() < 0.3 && dy.abs() < 1.0) || (dy.abs() < 0.3 && dx.abs() < 1.0),
        4 => (dx.abs() - dy.abs()).abs() < 0.3 && m < 1.0,
        5 => dy > -0.8 && dy < 0.8 && dx.abs() < (dy + 0.8) / 1.6,
        6 => m < 1.0 && ((dy + 1.0) * 2.5).floor() as i64 % 2 == 0,
        7 => dx.abs() + dy.abs() < 1.0,
        8 => m < 1.0 && m > 0.6,
        _ => d < 1.0 && dy > 0.0,
    }
}

/// Balanced class-conditional shapes on a dark background; sample `i` has
/// label `i mod classes`.
pub fn generate_base(n: usize, classes: usize, size: usize, channels: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || size < 8 || channels == 0 {
        return Err(Error::Input(format!(
            "need classes >= 2, size >= 8, channels >= 1 (got {classes}, {size}, {channels})"
        )));
    }
    let mut rng = seeded(seed, 1);
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let s = size as f64;
    let mut pixels = Vec::with_capacity(n * channels * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let cx = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
        let cy = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
        let r = s * rng.random_range(0.24..0.34);
        // classes beyond ten reuse the primitives rotated by 45 degrees
        let turn = (class / 10) as f64 * std::f64::consts::FRAC_PI_4 + rng.random_range(-0.2..0.2);
        let (sin, cos) = turn.sin_cos();
        let fg = rng.random_range(0.65..0.95);
        let bg = rng.random_range(0.05..0.25);
        let tint: Vec<f64> = (0..channels).map(|_| rng.random_range(0.9..1.1)).collect();
        let start = pixels.len();
        pixels.resize(start + channels * size * size, 0.0);
        for y in 0..size {
            for x in 0..size {
                let px = (x as f64 + 0.5 - cx) / r;
                let py = (y as f64 + 0.5 - cy) / r;
                let dx = cos * px + sin * py;
                let dy = -sin * px + cos * py;
                let base = if on_shape(class, dx, dy) { fg } else { bg };
                for (c, t) in tint.iter().enumerate() {
                    let v = base * t + noise.sample(&mut rng);
                    pixels[start + (c * size + y) * size + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(channels, size, classes, pixels, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    /// Texture cycles across the image.
    pub frequency: f64,
    pub amplitude: f64,
    pub orientation: f64,
    pub noise: f64,
    /// Per-image spread of gain (log scale) and bias around the domain's.
    #[serde(default)]
    pub style_jitter: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn identity(id: usize, channels: usize) -> Self {
        Self {
            id,
            gain: vec![1.0; channels],
            bias: vec![0.0; channels],
            frequency: 0.0,
            amplitude: 0.0,
            orientation: 0.0,
            noise: 0.0,
            style_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.len() != self.bias.len() {
            return Err(Error::Input(format!("domain {}: gain/bias lengths differ", self.id)));
        }
        if self.gain.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::Input(format!("domain {}: gains must be positive", self.id)));
        }
        if self.amplitude < 0.0 || self.noise < 0.0 || self.style_jitter < 0.0 {
            return Err(Error::Input(format!("domain {}: negative texture strength", self.id)));
        }
        Ok(())
    }

    /// `count` distinct domains. `shift` scales how far gains and biases
    /// move from the identity; `texture` scales the grating amplitude.
    pub fn family(count: usize, channels: usize, shift: f64, texture: f64, noise: f64, seed: u64) -> Vec<DomainSpec> {
        (0..count)
            .map(|id| {
                let mut rng = seeded(seed, 1000 + id as u64);
                let log_gain = Normal::new(0.0, 0.45).expect("valid std");
                DomainSpec {
                    id,
                    gain: (0..channels)
                        .map(|_| (shift * log_gain.sample(&mut rng)).exp())
                        .collect(),
                    bias: (0..channels).map(|_| shift * rng.random_range(-0.3..0.3)).collect(),
                    frequency: rng.random_range(1.0..4.0),
                    amplitude: texture * rng.random_range(0.5..1.0),
                    orientation: rng.random_range(0.0..std::f64::consts::PI),
                    noise,
                    style_jitter: 0.0,
                    seed: seed.wrapping_mul(31).wrapping_add(id as u64),
                }
            })
            .collect()
    }
}

/// `clamp(gain * x + bias + texture, 0, 1)` per channel; labels unchanged.
pub fn apply_domain(images: &Dataset, spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.gain.len() != images.channels {
        return Err(Error::Input(format!(
            "domain {} has {} channels, images have {}",
            spec.id,
            spec.gain.len(),
            images.channels
        )));
    }
    let (c, s) = (images.channels, images.size);
    let mut rng = seeded(spec.seed, 2);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let (sin, cos) = spec.orientation.sin_cos();
    let w = 2.0 * std::f64::consts::PI * spec.frequency / s as f64;
    let mut pixels = images.pixels.clone();
    let mut gain = spec.gain.clone();
    let mut bias = spec.bias.clone();
    for img in pixels.chunks_mut(c * s * s) {
        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        if spec.style_jitter > 0.0 {
            for ch in 0..c {
                let z: f64 = StandardNormal.sample(&mut rng);
                gain[ch] = spec.gain[ch] * (spec.style_jitter * 0.45 * z).exp();
                bias[ch] = spec.bias[ch] + spec.style_jitter * rng.random_range(-0.3..0.3);
            }
        }
        for y in 0..s {
            for x in 0..s {
                let grating = if spec.amplitude > 0.0 {
                    spec.amplitude * (w * (x as f64 * cos + y as f64 * sin) + phase).sin()
                } else {
                    0.0
                };
                for ch in 0..c {
                    let jitter = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    let v = &mut img[(ch * s + y) * s + x];
                    *v = (gain[ch] * *v + bias[ch] + grating + jitter).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(images.with_contents(pixels, images.labels.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub clients: usize,
}

const DIRICHLET_ATTEMPTS: usize = 1000;

/// Splits sample indices among clients. IID deals each class round-robin
/// after shuffling; Dirichlet draws per-class client proportions.
pub fn partition(labels: &[usize], classes: usize, spec: PartitionSpec, seed: u64) -> Result<Vec<Vec<usize>>> {
    let k = spec.clients;
    if k == 0 {
        return Err(Error::Input("partition needs at least one client".into()));
    }
    if labels.len() < k {
        return Err(Error::Input(format!(
            "{} samples cannot fill {k} clients",
            labels.len()
        )));
    }
    let mut rng = seeded(seed, 3);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    let mut parts = vec![Vec::new(); k];
    match spec.mode {
        PartitionMode::Iid => {
            let mut next = 0;
            for members in &by_class {
                for &i in members {
                    parts[next % k].push(i);
                    next += 1;
                }
            }
        }
        PartitionMode::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Input(format!("Dirichlet alpha must be positive, got {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
            let mut attempt = 0;
            loop {
                attempt += 1;
                for p in &mut parts {
                    p.clear();
                }
                for members in &by_class {
                    let mut w: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                    let total: f64 = w.iter().sum();
                    if total > 0.0 {
                        w.iter_mut().for_each(|v| *v /= total);
                    } else {
                        w = vec![0.0; k];
                        w[rng.random_range(0..k)] = 1.0;
                    }
                    let n = members.len();
                    let mut start = 0;
                    let mut acc = 0.0;
                    for (client, share) in w.iter().enumerate() {
                        acc += share;
                        let end = if client + 1 == k {
                            n
                        } else {
                            ((acc * n as f64).round() as usize).min(n)
                        };
                        parts[client].extend_from_slice(&members[start..end.max(start)]);
                        start = end.max(start);
                    }
                }
                if parts.iter().all(|p| !p.is_empty()) {
                    break;
                }
                if attempt >= DIRICHLET_ATTEMPTS {
                    return Err(Error::Input(format!(
                        "Dirichlet({alpha}) left a client empty after {attempt} draws"
                    )));
                }
            }
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Mean over clients of the total-variation distance between each client's
/// label distribution and the uniform one.
pub fn label_skew(parts: &[Vec<usize>], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for p in parts {
        let mut h = vec![0.0; classes];
        for &i in p {
            h[labels[i]] += 1.0;
        }
        let n = p.len().max(1) as f64;
        total += 0.5 * h.iter().map(|c| (c / n - 1.0 / classes as f64).abs()).sum::<f64>();
    }
    total / parts.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub domains: usize,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub clients_per_domain: usize,
    pub train_per_client: usize,
    pub val_fraction: f64,
    pub test_samples: usize,
    /// Held-out domain; when absent it rotates with the seed.
    pub held_out: Option<usize>,
    pub partition: PartitionMode,
    pub shift: f64,
    pub texture: f64,
    pub noise: f64,
    pub style_jitter: f64,
    pub domain_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            classes: 5,
            image_size: 16,
            channels: 3,
            clients_per_domain: 1,
            train_per_client: 600,
            val_fraction: 0.2,
            test_samples: 1000,
            held_out: None,
            partition: PartitionMode::Iid,
            shift: 1.0,
            texture: 0.15,
            noise: 0.05,
            style_jitter: 0.0,
            domain_seed: 2024,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("benchmark: {m}")));
        if self.domains < 2 {
            return bad("at least 2 domains are required".into());
        }
        if self.classes < 2 {
            return bad("at least 2 classes are required".into());
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8".into());
        }
        if self.channels == 0 || self.clients_per_domain == 0 || self.train_per_client == 0 {
            return bad("channels, clients_per_domain and train_per_client must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if self.test_samples == 0 {
            return bad("test_samples must be positive".into());
        }
        if let Some(h) = self.held_out {
            if h >= self.domains {
                return bad(format!("held_out {h} but only {} domains", self.domains));
            }
        }
        if let PartitionMode::Dirichlet { alpha } = self.partition {
            if alpha.is_nan() || alpha <= 0.0 {
                return bad(format!("partition alpha must be positive, got {alpha}"));
            }
        }
        if !(self.shift >= 0.0 && self.texture >= 0.0 && self.noise >= 0.0 && self.style_jitter >= 0.0) {
            return bad("shift, texture, noise and style_jitter must be non-negative".into());
        }
        Ok(())
    }

    pub fn held_out_for(&self, seed: u64) -> usize {
        self.held_out.unwrap_or((seed % self.domains as u64) as usize)
    }

    fn samples_per_client(&self) -> usize {
        (self.train_per_client as f64 / (1.0 - self.val_fraction)).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub id: usize,
    pub domain: usize,
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub clients: Vec<ClientData>,
    pub test: Dataset,
    pub test_domain: usize,
    pub specs: Vec<DomainSpec>,
}

impl Benchmark {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clients {
            h.update((c.domain as u64).to_le_bytes());
            c.train.feed(&mut h);
            c.val.feed(&mut h);
        }
        h.update((self.test_domain as u64).to_le_bytes());
        self.test.feed(&mut h);
        hex::encode(h.finalize())
    }
}

/// Leave-one-domain-out benchmark: clients on every domain but the held-out
/// one, each with an own-domain validation split.
pub fn build_benchmark(cfg: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    cfg.validate()?;
    let mut specs = DomainSpec::family(
        cfg.domains,
        cfg.channels,
        cfg.shift,
        cfg.texture,
        cfg.noise,
        cfg.domain_seed,
    );
    specs.iter_mut().for_each(|d| d.style_jitter = cfg.style_jitter);
    let test_domain = cfg.held_out_for(seed);
    let per_client = cfg.samples_per_client();
    let mut clients = Vec::new();
    let mut test = None;
    for spec in &specs {
        let data_seed = seed.wrapping_mul(1_000_003).wrapping_add(spec.id as u64);
        if spec.id == test_domain {
            let base = generate_base(cfg.test_samples, cfg.classes, cfg.image_size, cfg.channels, data_seed)?;
            test = Some(apply_domain(&base, spec)?);
            continue;
        }
        let pool_size = per_client * cfg.clients_per_domain;
        let base = generate_base(pool_size, cfg.classes, cfg.image_size, cfg.channels, data_seed)?;
        let pool = apply_domain(&base, spec)?;
        let pspec = PartitionSpec {
            mode: cfg.partition,
            clients: cfg.clients_per_domain,
        };
        let parts = partition(pool.labels(), cfg.classes, pspec, data_seed)?;
        for (j, mut idx) in parts.into_iter().enumerate() {
            let mut rng = seeded(data_seed, 100 + j as u64);
            idx.shuffle(&mut rng);
            let n_val = ((idx.len() as f64 * cfg.val_fraction).round() as usize).min(idx.len().saturating_sub(1));
            let (val, train) = idx.split_at(n_val);
            let (mut val, mut train) = (val.to_vec(), train.to_vec());
            val.sort_unstable();
            train.sort_unstable();
            clients.push(ClientData {
                id: clients.len(),
                domain: spec.id,
                train: pool.subset(&train),
                val: pool.subset(&val),
            });
        }
    }
    Ok(Benchmark {
        clients,
        test: test.expect("held-out domain is validated"),
        test_domain,
        specs,
    })
}

const DATASET_MAGIC: &[u8; 8] = b"FFDDATA\x01";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub seed: u64,
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
    pub count: usize,
    /// Free-form description of how the data was produced.
    pub spec: serde_json::Value,
}

/// Binary dump: magic, u32 header length, JSON header, u32 labels, f64
/// pixels (all little-endian), then a SHA-256 of everything before it.
pub fn save_dataset(path: &Path, data: &Dataset, seed: u64, spec: serde_json::Value) -> Result<()> {
    let header = DatasetHeader {
        version: DATASET_VERSION,
        seed,
        channels: data.channels,
        size: data.size,
        classes: data.classes,
        count: data.len(),
        spec,
    };
    let head = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + head.len() + data.len() * (4 + 8 * data.image_len()) + 32);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    for l in &data.labels {
        buf.extend_from_slice(&(*l as u32).to_le_bytes());
    }
    for p in &data.pixels {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Dataset)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let fail = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if buf.len() < DATASET_MAGIC.len() + 4 + 32 || &buf[..8] != DATASET_MAGIC {
        return Err(fail("missing dataset magic"));
    }
    let (body, stored) = buf.split_at(buf.len() - 32);
    let computed = Sha256::digest(body);
    if computed.as_slice() != stored {
        return Err(Error::Checksum {
            stored: hex::encode(stored),
            computed: hex::encode(computed),
        });
    }
    let head_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    let head_end = 12 + head_len;
    if body.len() < head_end {
        return Err(fail("truncated header"));
    }
    let header: DatasetHeader = serde_json::from_slice(&body[12..head_end])?;
    if header.version != DATASET_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: DATASET_VERSION,
        });
    }
    let per = header.channels * header.size * header.size;
    let labels_end = head_end + 4 * header.count;
    if body.len() != labels_end + 8 * per * header.count {
        return Err(fail("payload length disagrees with header"));
    }
    let labels = body[head_end..labels_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let pixels = body[labels_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let data = Dataset::new(header.channels, header.size, header.classes, pixels, labels)?;
    Ok((header, data))
}
