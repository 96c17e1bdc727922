//! Image-level decision fusion and the aggregation baselines.
//!
//! The learned path concatenates four class histograms of patch predictions
//! (fine/coarse scale x mid/final checkpoint) and feeds them to a multinomial
//! logistic regression: counting evidence rather than pooling it lets a class
//! whose images mix two other classes' patches be recognized by their joint
//! presence. Voting (average pooling), max-pooling, p-norm feature pooling
//! and the whole-image five-crop baseline are provided for comparison.

use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, Model};
use crate::dataset::PreparedImage;
use crate::em::{ProbMap, MODEL_SLOTS};
use crate::error::{Error, Result};
use crate::patchio::image_crop;
use crate::rng::{self, domain};
use crate::synth::SlideImage;

/// Which patches of an image contribute to its histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchSubset {
    /// Every valid patch (test-time histograms).
    All,
    /// Only the per-image fusion hold-out (fusion-training histograms).
    FusionHoldout,
}

/// Concatenated per-model class histograms, block order fine/mid, fine/final,
/// coarse/mid, coarse/final.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionHistogram {
    pub image_id: String,
    pub blocks: [Vec<f64>; 4],
    pub normalized: bool,
}

impl FusionHistogram {
    pub fn concat(&self) -> Vec<f64> {
        self.blocks.concat()
    }
}

/// Sum (optionally mean) of the class-probability vectors over the chosen
/// patches, one block per model slot. `maps` must follow
/// [`MODEL_SLOTS`] order and all belong to the same image.
pub fn image_histogram(
    prep: &PreparedImage,
    maps: &[&ProbMap; 4],
    subset: PatchSubset,
    normalize: bool,
) -> Result<FusionHistogram> {
    let mut blocks: [Vec<f64>; 4] = Default::default();
    for (slot, map) in maps.iter().enumerate() {
        let (scale, tag) = MODEL_SLOTS[slot];
        if map.scale_id != scale || map.checkpoint_tag != tag {
            return Err(Error::InvalidArgument(format!(
                "map in slot {slot} is ({:?},{:?}), expected ({scale:?},{tag:?})",
                map.scale_id, map.checkpoint_tag
            )));
        }
        if map.image_id != prep.image.id {
            return Err(Error::InvalidArgument(format!(
                "map in slot {slot} belongs to {}, expected {}",
                map.image_id, prep.image.id
            )));
        }
        let holdout = prep.holdout(scale);
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for (idx, cell) in map.probs.iter().enumerate() {
            let Some(vector) = cell else { continue };
            if subset == PatchSubset::FusionHoldout && !holdout[idx] {
                continue;
            }
            if sum.is_empty() {
                sum = vec![0.0; vector.len()];
            }
            for (s, &v) in sum.iter_mut().zip(vector) {
                *s += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyInput(format!(
                "empty patch subset for image {} at slot {slot}",
                prep.image.id
            )));
        }
        if normalize {
            for s in &mut sum {
                *s /= count as f64;
            }
        }
        blocks[slot] = sum;
    }
    Ok(FusionHistogram { image_id: prep.image.id.clone(), blocks, normalized: normalize })
}

/// Multinomial logistic regression over fixed-length feature vectors
/// (histograms or pooled features). Weights are row-major C x (D+1) with the
/// bias in the last column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionModel {
    pub class_count: usize,
    pub input_dim: usize,
    pub l2: f64,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub final_grad_norm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FusionModelFile {
    version: u32,
    #[serde(rename = "C")]
    c: usize,
    input_dim: usize,
    l2: f64,
    weights: Vec<f64>,
    iterations: usize,
    final_grad_norm: f64,
}

impl FusionModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&FusionModelFile {
            version: 1,
            c: self.class_count,
            input_dim: self.input_dim,
            l2: self.l2,
            weights: self.weights.clone(),
            iterations: self.iterations,
            final_grad_norm: self.final_grad_norm,
        })?)
    }

    pub fn from_json(text: &str) -> Result<FusionModel> {
        let f: FusionModelFile = serde_json::from_str(text)?;
        if f.version != 1 {
            return Err(Error::Malformed {
                path: "<fusion json>".into(),
                reason: format!("unsupported version {}", f.version),
            });
        }
        if f.weights.len() != f.c * (f.input_dim + 1) {
            return Err(Error::Malformed {
                path: "<fusion json>".into(),
                reason: "weight count does not match dimensions".into(),
            });
        }
        Ok(FusionModel {
            class_count: f.c,
            input_dim: f.input_dim,
            l2: f.l2,
            weights: f.weights,
            iterations: f.iterations,
            final_grad_norm: f.final_grad_norm,
        })
    }

    fn scores(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        (0..self.class_count)
            .map(|c| {
                let row = &self.weights[c * (d + 1)..(c + 1) * (d + 1)];
                let mut acc = row[d];
                for (w, xi) in row[..d].iter().zip(x) {
                    acc += w * xi;
                }
                acc
            })
            .collect()
    }
}

fn softmax(mut scores: Vec<f64>) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in &mut scores {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in &mut scores {
        *s /= sum;
    }
    scores
}

fn fusion_loss_grad(
    weights: &[f64],
    features: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    d: usize,
    l2: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let mut loss = 0.0;
    let mut grad_buf = grad;
    if let Some(g) = grad_buf.as_deref_mut() {
        g.fill(0.0);
    }
    for (x, &y) in features.iter().zip(labels) {
        let mut scores = vec![0.0; class_count];
        for (c, s) in scores.iter_mut().enumerate() {
            let row = &weights[c * (d + 1)..(c + 1) * (d + 1)];
            let mut acc = row[d];
            for (w, xi) in row[..d].iter().zip(x) {
                acc += w * xi;
            }
            *s = acc;
        }
        let probs = softmax(scores);
        loss += -probs[y].max(f64::MIN_POSITIVE).ln();
        if let Some(g) = grad_buf.as_deref_mut() {
            for (c, &p) in probs.iter().enumerate() {
                let delta = p - f64::from(u8::from(c == y));
                let row = &mut g[c * (d + 1)..(c + 1) * (d + 1)];
                for (gi, xi) in row[..d].iter_mut().zip(x) {
                    *gi += delta * xi;
                }
                row[d] += delta;
            }
        }
    }
    let n = features.len() as f64;
    loss /= n;
    let reg: f64 = weights.iter().map(|w| w * w).sum();
    loss += 0.5 * l2 * reg;
    if let Some(g) = grad_buf.as_deref_mut() {
        for (gi, &w) in g.iter_mut().zip(weights) {
            *gi = *gi / n + l2 * w;
        }
    }
    loss
}

/// Fit by full-batch gradient descent with backtracking line search until the
/// gradient infinity-norm drops below 1e-6 or 10000 iterations. The objective
/// is convex, so the final loss is independent of the seeded initialization.
pub fn fit_fusion(
    features: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    l2: f64,
    seed: u64,
) -> Result<FusionModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::EmptyInput("features and labels must be non-empty and equal".into()));
    }
    if class_count < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::DimensionMismatch("inconsistent feature dimensions".into()));
    }
    let mut seen = vec![false; class_count];
    for &y in labels {
        if y >= class_count {
            return Err(Error::InvalidArgument(format!("label {y} outside [0,{class_count})")));
        }
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::EmptyClass(missing));
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::InvalidConfig("l2 must be finite and >= 0".into()));
    }

    let mut rng = rng::stream(seed, &[domain::FUSION_INIT]);
    let mut weights: Vec<f64> = (0..class_count * (d + 1))
        .map(|_| rng.random_range(-0.01..0.01))
        .collect();
    let mut grad = vec![0.0; weights.len()];
    let mut step = 1.0f64;
    let mut iterations = 0usize;
    let mut grad_norm = f64::INFINITY;
    for it in 0..10_000 {
        iterations = it + 1;
        let loss =
            fusion_loss_grad(&weights, features, labels, class_count, d, l2, Some(&mut grad));
        grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < 1e-6 {
            iterations = it;
            break;
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        // Armijo backtracking; the step grows again after acceptance so a
        // single cautious iteration does not slow the rest.
        loop {
            let candidate: Vec<f64> = weights
                .iter()
                .zip(&grad)
                .map(|(w, g)| w - step * g)
                .collect();
            let cand_loss =
                fusion_loss_grad(&candidate, features, labels, class_count, d, l2, None);
            if cand_loss <= loss - 1e-4 * step * g2 {
                weights = candidate;
                step = (step * 2.0).min(1e6);
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                weights = candidate;
                break;
            }
        }
    }
    Ok(FusionModel {
        class_count,
        input_dim: d,
        l2,
        weights,
        iterations,
        final_grad_norm: grad_norm,
    })
}

fn argmax_smallest(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted label and probability vector; ties resolve to the smallest
/// class index.
pub fn predict_fusion(model: &FusionModel, features: &[f64]) -> Result<(usize, Vec<f64>)> {
    if features.len() != model.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "expected {} inputs, got {}",
            model.input_dim,
            features.len()
        )));
    }
    let probs = softmax(model.scores(features));
    Ok((argmax_smallest(&probs), probs))
}

/// Voting (average pooling): argmax of the mean probability vector over
/// valid patches.
pub fn vote_predict(map: &ProbMap) -> Result<usize> {
    let mut mean: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for cell in map.probs.iter().flatten() {
        if mean.is_empty() {
            mean = vec![0.0; cell.len()];
        }
        for (m, &v) in mean.iter_mut().zip(cell) {
            *m += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyInput(format!("no valid patches in map {}", map.image_id)));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    Ok(argmax_smallest(&mean))
}

/// Max pooling (standard multi-instance): the class of the globally highest
/// patch probability; ties resolve to the smallest (row, col, class).
pub fn max_predict(map: &ProbMap) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for r in 0..map.rows {
        for c in 0..map.cols {
            if let Some(vector) = map.get(r, c) {
                for (class, &p) in vector.iter().enumerate() {
                    if best.map_or(true, |(bp, _)| p > bp) {
                        best = Some((p, class));
                    }
                }
            }
        }
    }
    best.map(|(_, class)| class)
        .ok_or_else(|| Error::EmptyInput(format!("no valid patches in map {}", map.image_id)))
}

/// Elementwise p-norm pooling: ((1/N) * sum |f_i|^p)^(1/p).
pub fn pnorm_pool(vectors: &[Vec<f64>], p: f64) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        return Err(Error::EmptyInput("p-norm pooling over empty set".into()));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("p must be >= 1, got {p}")));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::DimensionMismatch("inconsistent vector dimensions".into()));
    }
    let n = vectors.len() as f64;
    let mut pooled = vec![0.0; d];
    for v in vectors {
        for (acc, &x) in pooled.iter_mut().zip(v) {
            *acc += x.abs().powf(p);
        }
    }
    for acc in &mut pooled {
        *acc = (*acc / n).powf(1.0 / p);
    }
    Ok(pooled)
}

/// Top-left, top-right, bottom-left, bottom-right and center crop offsets.
pub fn five_crop_offsets(height: usize, width: usize, crop: usize) -> [(usize, usize); 5] {
    [
        (0, 0),
        (0, width - crop),
        (height - crop, 0),
        (height - crop, width - crop),
        ((height - crop) / 2, (width - crop) / 2),
    ]
}

/// Whole-image baseline prediction: mean class probabilities over the five
/// standard crops under a classifier trained on whole-image crops.
pub fn five_crop_predict(model: &Model, image: &SlideImage, crop_size: usize) -> Result<Vec<f64>> {
    if crop_size > image.width || crop_size > image.height {
        return Err(Error::InvalidArgument(format!(
            "crop {crop_size} larger than image {}x{}",
            image.width, image.height
        )));
    }
    let offsets = five_crop_offsets(image.height, image.width, crop_size);
    let mut mean = vec![0.0; model.class_count];
    for (off_r, off_c) in offsets {
        let crop = image_crop(image, off_r, off_c, crop_size)?;
        let probs = classifier::predict_proba(model, &crop)?;
        for (m, p) in mean.iter_mut().zip(&probs) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= 5.0;
    }
    Ok(mean)
}

/// Seeded whole-image training crops for the five-crop baseline, `count` per
/// image, labeled with the image label.
pub fn random_image_crops(
    image: &SlideImage,
    crop_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<crate::patchio::Patch>> {
    if crop_size > image.width || crop_size > image.height {
        return Err(Error::InvalidArgument(format!(
            "crop {crop_size} larger than image {}x{}",
            image.width, image.height
        )));
    }
    let mut rng = rng::stream(seed, &[domain::IMAGE_CROP, rng::id_hash(&image.id)]);
    (0..count)
        .map(|_| {
            let off_r = rng.random_range(0..=image.height - crop_size);
            let off_c = rng.random_range(0..=image.width - crop_size);
            image_crop(image, off_r, off_c, crop_size)
        })
        .collect()
}

/// Histogram CSV: image_id, label, then the 4C concatenated values.
pub fn write_histograms_csv(
    path: &Path,
    items: &[(FusionHistogram, usize)],
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let width = items.first().map_or(0, |(h, _)| h.concat().len());
    let header: Vec<String> = (0..width).map(|i| format!("h{i}")).collect();
    writeln!(w, "image_id,label,{}", header.join(","))?;
    for (hist, label) in items {
        let values: Vec<String> = hist.concat().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{}", hist.image_id, label, values.join(","))?;
    }
    w.flush()?;
    Ok(())
}
