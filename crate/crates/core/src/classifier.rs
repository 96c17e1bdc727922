//! Patch-level discriminative models P(y|x).
//!
//! Two self-contained architectures share one flat parameter vector: plain
//! multinomial softmax regression and a one-hidden-layer ReLU MLP. Features
//! are either raw pixels or per-cell block statistics, z-normalized with
//! statistics frozen at the first fit. Training is seeded mini-batch SGD
//! with momentum; gradients accumulate in batch index order so results are
//! bit-identical across runs and thread counts.

use rand::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchio::Patch;
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    RawPixels,
    BlockStats,
}

/// Feature extraction settings. For `BlockStats` the patch is divided into
/// `block x block` cells and each cell contributes per-channel mean and std
/// (so the dimension is independent of patch size, letting a model trained on
/// random crops score full-size patches).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub block: usize,
}

impl FeatureConfig {
    pub fn block_stats(block: usize) -> Self {
        FeatureConfig { kind: FeatureKind::BlockStats, block }
    }

    pub fn extract(&self, patch: &Patch) -> Result<Vec<f64>> {
        match self.kind {
            FeatureKind::RawPixels => {
                Ok(patch.pixels.iter().map(|&v| v as f64 / 255.0).collect())
            }
            FeatureKind::BlockStats => {
                if self.block == 0 || patch.size % self.block != 0 {
                    return Err(Error::DimensionMismatch(format!(
                        "patch size {} not divisible into {} cells",
                        patch.size, self.block
                    )));
                }
                let cell = patch.size / self.block;
                let mut features = Vec::with_capacity(self.block * self.block * 6);
                for cr in 0..self.block {
                    for cc in 0..self.block {
                        for ch in 0..3 {
                            let mut sum = 0.0;
                            let mut sum_sq = 0.0;
                            for y in 0..cell {
                                for x in 0..cell {
                                    let idx = ((cr * cell + y) * patch.size + cc * cell + x) * 3
                                        + ch;
                                    let v = patch.pixels[idx] as f64 / 255.0;
                                    sum += v;
                                    sum_sq += v * v;
                                }
                            }
                            let n = (cell * cell) as f64;
                            let mean = sum / n;
                            let var = (sum_sq / n - mean * mean).max(0.0);
                            features.push(mean);
                            features.push(var.sqrt());
                        }
                    }
                }
                Ok(features)
            }
        }
    }
}

/// Per-feature normalization statistics, frozen at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    const STD_FLOOR: f64 = 1e-6;

    fn from_features(features: &FeatureMatrix) -> Self {
        let (n, d) = (features.n, features.d);
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| (s / n as f64).sqrt().max(Self::STD_FLOOR))
            .collect();
        NormStats { mean, std }
    }

    fn apply(&self, x: &mut [f64]) {
        for ((v, &m), &s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    fn identity(d: usize) -> Self {
        NormStats { mean: vec![0.0; d], std: vec![1.0; d] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    Softmax,
    Mlp { hidden_units: usize },
}

impl Architecture {
    pub fn param_count(&self, d: usize, c: usize) -> usize {
        match *self {
            Architecture::Softmax => c * d + c,
            Architecture::Mlp { hidden_units: h } => h * d + h + c * h + c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointTag {
    Mid,
    Final,
}

/// A trained (or initialized) model snapshot.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub class_count: usize,
    pub feature_config: FeatureConfig,
    pub norm_stats: NormStats,
    pub theta: Vec<f64>,
    pub checkpoint_tag: CheckpointTag,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    arch: Architecture,
    #[serde(rename = "C")]
    c: usize,
    feature_config: FeatureConfig,
    norm_stats: NormStats,
    theta: Vec<f64>,
}

impl Model {
    /// All-zero parameters: predicts the uniform distribution. Normalization
    /// is the identity; mainly useful for tests and as an explicit baseline.
    pub fn zeroed(
        arch: Architecture,
        class_count: usize,
        feature_config: FeatureConfig,
        feature_dim: usize,
    ) -> Model {
        Model {
            theta: vec![0.0; arch.param_count(feature_dim, class_count)],
            arch,
            class_count,
            feature_config,
            norm_stats: NormStats::identity(feature_dim),
            checkpoint_tag: CheckpointTag::Final,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.norm_stats.mean.len()
    }

    pub fn with_tag(mut self, tag: CheckpointTag) -> Model {
        self.checkpoint_tag = tag;
        self
    }

    /// Versioned JSON; round-trips bit-exactly for finite parameters.
    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: 1,
            arch: self.arch,
            c: self.class_count,
            feature_config: self.feature_config.clone(),
            norm_stats: self.norm_stats.clone(),
            theta: self.theta.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Load a model file; the checkpoint tag is not part of the wire format
    /// and defaults to `Final` (callers re-tag from context).
    pub fn from_json(text: &str) -> Result<Model> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.version != 1 {
            return Err(Error::Malformed {
                path: "<model json>".into(),
                reason: format!("unsupported version {}", file.version),
            });
        }
        let d = file.norm_stats.mean.len();
        if file.norm_stats.std.len() != d || file.theta.len() != file.arch.param_count(d, file.c) {
            return Err(Error::Malformed {
                path: "<model json>".into(),
                reason: "parameter count does not match architecture".into(),
            });
        }
        Ok(Model {
            arch: file.arch,
            class_count: file.c,
            feature_config: file.feature_config,
            norm_stats: file.norm_stats,
            theta: file.theta,
            checkpoint_tag: CheckpointTag::Final,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    /// Epoch fractions in (0,1] at which to snapshot; the last must be 1.0.
    pub snapshot_points: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.5,
            batch_size: 32,
            epochs: 10,
            l2: 1e-4,
            seed: 0,
            snapshot_points: vec![1.0],
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0,1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidConfig("l2 must be finite and >= 0".into()));
        }
        if self.snapshot_points.is_empty()
            || self.snapshot_points.iter().any(|&f| !(f > 0.0 && f <= 1.0))
            || self.snapshot_points.windows(2).any(|w| w[0] >= w[1])
            || *self.snapshot_points.last().unwrap() != 1.0
        {
            return Err(Error::InvalidConfig(
                "snapshot_points must be strictly increasing in (0,1] and end at 1.0".into(),
            ));
        }
        Ok(())
    }
}

/// Row-major dense feature matrix.
struct FeatureMatrix {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl FeatureMatrix {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

fn extract_features(patches: &[(Patch, usize)], feat: &FeatureConfig) -> Result<FeatureMatrix> {
    let rows: Vec<Result<Vec<f64>>> = patches
        .par_iter()
        .map(|(p, _)| feat.extract(p))
        .collect();
    let mut data = Vec::new();
    let mut d = 0usize;
    for (i, r) in rows.into_iter().enumerate() {
        let row = r?;
        if i == 0 {
            d = row.len();
        } else if row.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "patch {i} yields {} features, expected {d}",
                row.len()
            )));
        }
        data.extend_from_slice(&row);
    }
    Ok(FeatureMatrix { data, n: patches.len(), d })
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Forward/backward pass shared by training, loss evaluation and prediction.
struct Net {
    arch: Architecture,
    d: usize,
    c: usize,
}

impl Net {
    fn logits(&self, theta: &[f64], x: &[f64], hidden: Option<&mut Vec<f64>>) -> Vec<f64> {
        match self.arch {
            Architecture::Softmax => {
                let (d, c) = (self.d, self.c);
                let mut logits = vec![0.0; c];
                for (cls, logit) in logits.iter_mut().enumerate() {
                    let w = &theta[cls * d..(cls + 1) * d];
                    let mut acc = theta[c * d + cls];
                    for (wi, xi) in w.iter().zip(x) {
                        acc += wi * xi;
                    }
                    *logit = acc;
                }
                logits
            }
            Architecture::Mlp { hidden_units: h } => {
                let (d, c) = (self.d, self.c);
                let b1 = h * d;
                let w2 = b1 + h;
                let b2 = w2 + c * h;
                let mut act = vec![0.0; h];
                for (j, a) in act.iter_mut().enumerate() {
                    let w = &theta[j * d..(j + 1) * d];
                    let mut acc = theta[b1 + j];
                    for (wi, xi) in w.iter().zip(x) {
                        acc += wi * xi;
                    }
                    *a = acc.max(0.0);
                }
                let mut logits = vec![0.0; c];
                for (cls, logit) in logits.iter_mut().enumerate() {
                    let w = &theta[w2 + cls * h..w2 + (cls + 1) * h];
                    let mut acc = theta[b2 + cls];
                    for (wi, ai) in w.iter().zip(&act) {
                        acc += wi * ai;
                    }
                    *logit = acc;
                }
                if let Some(out) = hidden {
                    *out = act;
                }
                logits
            }
        }
    }

    fn probabilities(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let mut logits = self.logits(theta, x, None);
        softmax_in_place(&mut logits);
        logits
    }

    /// Accumulate one sample's cross-entropy gradient into `grad`; returns
    /// the sample loss.
    fn accumulate(&self, theta: &[f64], x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        match self.arch {
            Architecture::Softmax => {
                let (d, c) = (self.d, self.c);
                let mut p = self.probabilities(theta, x);
                let loss = -p[y].max(f64::MIN_POSITIVE).ln();
                p[y] -= 1.0;
                for (cls, &delta) in p.iter().enumerate() {
                    let w = &mut grad[cls * d..(cls + 1) * d];
                    for (g, xi) in w.iter_mut().zip(x) {
                        *g += delta * xi;
                    }
                    grad[c * d + cls] += delta;
                }
                loss
            }
            Architecture::Mlp { hidden_units: h } => {
                let (d, c) = (self.d, self.c);
                let b1 = h * d;
                let w2 = b1 + h;
                let b2 = w2 + c * h;
                let mut pre = vec![0.0; h];
                let mut act = vec![0.0; h];
                for j in 0..h {
                    let w = &theta[j * d..(j + 1) * d];
                    let mut acc = theta[b1 + j];
                    for (wi, xi) in w.iter().zip(x) {
                        acc += wi * xi;
                    }
                    pre[j] = acc;
                    act[j] = acc.max(0.0);
                }
                let mut logits = vec![0.0; c];
                for (cls, logit) in logits.iter_mut().enumerate() {
                    let w = &theta[w2 + cls * h..w2 + (cls + 1) * h];
                    let mut acc = theta[b2 + cls];
                    for (wi, ai) in w.iter().zip(&act) {
                        acc += wi * ai;
                    }
                    *logit = acc;
                }
                softmax_in_place(&mut logits);
                let loss = -logits[y].max(f64::MIN_POSITIVE).ln();
                logits[y] -= 1.0;
                let delta2 = logits;
                let mut delta1 = vec![0.0; h];
                for (cls, &d2) in delta2.iter().enumerate() {
                    let w = &theta[w2 + cls * h..w2 + (cls + 1) * h];
                    for (d1, wi) in delta1.iter_mut().zip(w) {
                        *d1 += d2 * wi;
                    }
                }
                for j in 0..h {
                    if pre[j] <= 0.0 {
                        delta1[j] = 0.0;
                    }
                }
                for (j, &d1) in delta1.iter().enumerate() {
                    let g = &mut grad[j * d..(j + 1) * d];
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi += d1 * xi;
                    }
                    grad[b1 + j] += d1;
                }
                for (cls, &d2) in delta2.iter().enumerate() {
                    let g = &mut grad[w2 + cls * h..w2 + (cls + 1) * h];
                    for (gi, ai) in g.iter_mut().zip(&act) {
                        *gi += d2 * ai;
                    }
                    grad[b2 + cls] += d2;
                }
                loss
            }
        }
    }
}

fn mean_loss(net: &Net, theta: &[f64], feats: &FeatureMatrix, labels: &[usize], l2: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..feats.n {
        let p = net.probabilities(theta, feats.row(i));
        total += -p[labels[i]].max(f64::MIN_POSITIVE).ln();
    }
    let reg: f64 = theta.iter().map(|t| t * t).sum();
    total / feats.n as f64 + 0.5 * l2 * reg
}

/// Mean cross-entropy gradient over all rows plus the L2 term.
fn full_gradient(
    net: &Net,
    theta: &[f64],
    feats: &FeatureMatrix,
    labels: &[usize],
    l2: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; theta.len()];
    for i in 0..feats.n {
        net.accumulate(theta, feats.row(i), labels[i], &mut grad);
    }
    let n = feats.n as f64;
    for (g, t) in grad.iter_mut().zip(theta) {
        *g = *g / n + l2 * t;
    }
    grad
}

fn glorot_init(arch: &Architecture, d: usize, c: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[domain::INIT]);
    let mut theta = vec![0.0; arch.param_count(d, c)];
    let fill = |slice: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in slice {
            *v = rng.random_range(-limit..limit);
        }
    };
    match *arch {
        Architecture::Softmax => {
            let (w, _b) = theta.split_at_mut(c * d);
            fill(w, d, c, &mut rng);
        }
        Architecture::Mlp { hidden_units: h } => {
            let b1 = h * d;
            let w2_end = b1 + h + c * h;
            fill(&mut theta[..b1], d, h, &mut rng);
            fill(&mut theta[b1 + h..w2_end], h, c, &mut rng);
        }
    }
    theta
}

/// Train by seeded shuffled mini-batch SGD with momentum, minimizing mean
/// cross-entropy plus `(l2/2)||theta||^2`. Returns one deep-copied snapshot
/// per point in `cfg.snapshot_points`, final last. `warm_start` continues
/// from existing parameters with frozen normalization statistics.
pub fn fit(
    patches: &[(Patch, usize)],
    cfg: &TrainConfig,
    feat: &FeatureConfig,
    arch: &Architecture,
    class_count: usize,
    warm_start: Option<&Model>,
) -> Result<Vec<Model>> {
    cfg.validate()?;
    if class_count < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if patches.is_empty() {
        return Err(Error::EmptyInput("no training patches".into()));
    }
    let mut seen = vec![false; class_count];
    for (_, y) in patches {
        if *y >= class_count {
            return Err(Error::InvalidArgument(format!(
                "label {y} outside [0,{class_count})"
            )));
        }
        seen[*y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyClass(missing));
    }

    let mut feats = extract_features(patches, feat)?;
    let labels: Vec<usize> = patches.iter().map(|(_, y)| *y).collect();

    if let Some(w) = warm_start {
        if w.arch != *arch || w.class_count != class_count || w.feature_config != *feat {
            return Err(Error::InvalidArgument(
                "warm start model does not match requested configuration".into(),
            ));
        }
        if w.feature_dim() != feats.d {
            return Err(Error::DimensionMismatch(format!(
                "warm start expects {} features, got {}",
                w.feature_dim(),
                feats.d
            )));
        }
    }
    let norm_stats = match warm_start {
        Some(w) => w.norm_stats.clone(),
        None => NormStats::from_features(&feats),
    };
    for i in 0..feats.n {
        let row = &mut feats.data[i * feats.d..(i + 1) * feats.d];
        norm_stats.apply(row);
    }

    let net = Net { arch: *arch, d: feats.d, c: class_count };
    let mut theta = match warm_start {
        Some(w) => w.theta.clone(),
        None => glorot_init(arch, feats.d, class_count, cfg.seed),
    };
    let mut velocity = vec![0.0; theta.len()];
    let mut grad = vec![0.0; theta.len()];

    let snapshot_epochs: Vec<usize> = cfg
        .snapshot_points
        .iter()
        .map(|f| ((f * cfg.epochs as f64).ceil() as usize).clamp(1, cfg.epochs))
        .collect();

    let mut snapshots: Vec<Model> = Vec::with_capacity(snapshot_epochs.len());
    let n = feats.n;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[domain::SHUFFLE, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            for &i in chunk {
                net.accumulate(&theta, feats.row(i), labels[i], &mut grad);
            }
            let batch_n = chunk.len() as f64;
            for k in 0..theta.len() {
                let g = grad[k] / batch_n + cfg.l2 * theta[k];
                velocity[k] = cfg.momentum * velocity[k] - cfg.learning_rate * g;
                theta[k] += velocity[k];
            }
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("parameters diverged at epoch {epoch}")));
        }
        for (si, &se) in snapshot_epochs.iter().enumerate() {
            if se == epoch {
                let tag = if si + 1 == snapshot_epochs.len() {
                    CheckpointTag::Final
                } else {
                    CheckpointTag::Mid
                };
                snapshots.push(Model {
                    arch: *arch,
                    class_count,
                    feature_config: feat.clone(),
                    norm_stats: norm_stats.clone(),
                    theta: theta.clone(),
                    checkpoint_tag: tag,
                });
            }
        }
    }
    Ok(snapshots)
}

/// Class-probability vector for one patch; entries positive, summing to 1.
pub fn predict_proba(model: &Model, patch: &Patch) -> Result<Vec<f64>> {
    let mut x = model.feature_config.extract(patch)?;
    if x.len() != model.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "patch yields {} features, model expects {}",
            x.len(),
            model.feature_dim()
        )));
    }
    model.norm_stats.apply(&mut x);
    let net = Net { arch: model.arch, d: x.len(), c: model.class_count };
    Ok(net.probabilities(&model.theta, &x))
}

/// Mean cross-entropy over the batch plus `(l2/2)||theta||^2`.
pub fn loss(model: &Model, batch: &[(Patch, usize)], l2: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss over empty batch".into()));
    }
    let mut feats = extract_features(batch, &model.feature_config)?;
    if feats.d != model.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "batch yields {} features, model expects {}",
            feats.d,
            model.feature_dim()
        )));
    }
    for i in 0..feats.n {
        let row = &mut feats.data[i * feats.d..(i + 1) * feats.d];
        model.norm_stats.apply(row);
    }
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
    let net = Net { arch: model.arch, d: feats.d, c: model.class_count };
    Ok(mean_loss(&net, &model.theta, &feats, &labels, l2))
}

/// Compare the analytic gradient against central finite differences on
/// `coords` randomly chosen coordinates; returns the maximum relative error
/// `|ga-gn| / max(|ga|,|gn|,1e-8)`.
pub fn grad_check(
    model: &Model,
    batch: &[(Patch, usize)],
    l2: f64,
    epsilon: f64,
    coords: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    if batch.is_empty() {
        return Err(Error::EmptyInput("grad_check over empty batch".into()));
    }
    let mut feats = extract_features(batch, &model.feature_config)?;
    for i in 0..feats.n {
        let row = &mut feats.data[i * feats.d..(i + 1) * feats.d];
        model.norm_stats.apply(row);
    }
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
    let net = Net { arch: model.arch, d: feats.d, c: model.class_count };
    let analytic = full_gradient(&net, &model.theta, &feats, &labels, l2);
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }

    let p = model.theta.len();
    let mut indices: Vec<usize> = (0..p).collect();
    indices.shuffle(&mut rng::stream(seed, &[domain::GRAD_CHECK]));
    indices.truncate(coords.max(1).min(p));

    let mut theta = model.theta.clone();
    let mut max_rel = 0.0f64;
    for &k in &indices {
        let orig = theta[k];
        theta[k] = orig + epsilon;
        let plus = mean_loss(&net, &theta, &feats, &labels, l2);
        theta[k] = orig - epsilon;
        let minus = mean_loss(&net, &theta, &feats, &labels, l2);
        theta[k] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::NonFinite(format!("numeric gradient at coordinate {k}")));
        }
        let rel = (analytic[k] - numeric).abs()
            / analytic[k].abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Post-activation hidden-layer vector; MLP only.
pub fn hidden_features(model: &Model, patch: &Patch) -> Result<Vec<f64>> {
    let Architecture::Mlp { .. } = model.arch else {
        return Err(Error::InvalidArgument(
            "hidden_features requires an mlp architecture".into(),
        ));
    };
    let mut x = model.feature_config.extract(patch)?;
    if x.len() != model.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "patch yields {} features, model expects {}",
            x.len(),
            model.feature_dim()
        )));
    }
    model.norm_stats.apply(&mut x);
    let net = Net { arch: model.arch, d: x.len(), c: model.class_count };
    let mut hidden = Vec::new();
    net.logits(&model.theta, &x, Some(&mut hidden));
    Ok(hidden)
}
