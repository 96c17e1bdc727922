//! Shared command plumbing: corpus loading, split handling, probability
//! maps, histograms and the aggregation rules that turn patch maps into
//! image-level predictions with per-class scores.

use std::path::Path;

use patchem_core::classifier::Model;
use patchem_core::dataset::PreparedDataset;
use patchem_core::em::{self, ProbMap};
use patchem_core::eval::SplitPlan;
use patchem_core::fusion::{self, FusionHistogram, FusionModel, PatchSubset};
use patchem_core::synth::{self, OracleMask, SlideImage};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

pub struct Corpus {
    pub images: Vec<SlideImage>,
    pub oracle_masks: Option<Vec<OracleMask>>,
    pub class_count: usize,
}

pub fn load_corpus(dir: &Path) -> CliResult<Corpus> {
    let (images, oracle_masks) = synth::read_corpus(dir)
        .map_err(|e| CliError::data(format!("cannot load corpus from {}: {e}", dir.display())))?;
    if images.is_empty() {
        return Err(CliError::data(format!("corpus at {} is empty", dir.display())));
    }
    let class_count = images.iter().map(|i| i.label).max().unwrap_or(0) + 1;
    Ok(Corpus { images, oracle_masks, class_count })
}

pub fn split_items(images: &[SlideImage]) -> Vec<(String, String)> {
    images.iter().map(|i| (i.id.clone(), i.group_id.clone())).collect()
}

/// Partition the corpus per the plan; every plan id must exist.
pub fn partition(
    corpus: &Corpus,
    plan: &SplitPlan,
) -> CliResult<(Vec<SlideImage>, Vec<SlideImage>)> {
    let find = |id: &String| -> CliResult<SlideImage> {
        corpus
            .images
            .iter()
            .find(|i| &i.id == id)
            .cloned()
            .ok_or_else(|| CliError::data(format!("split references unknown image {id}")))
    };
    let train = plan.train_image_ids.iter().map(find).collect::<CliResult<_>>()?;
    let test = plan.test_image_ids.iter().map(find).collect::<CliResult<_>>()?;
    Ok((train, test))
}

/// Per image, the four probability maps in model-slot order.
pub fn slot_maps(models: &[Model], dataset: &PreparedDataset) -> CliResult<Vec<[ProbMap; 4]>> {
    let per_slot: Vec<Vec<ProbMap>> = models
        .iter()
        .zip(em::MODEL_SLOTS)
        .map(|(model, (scale, _))| Ok(em::compute_prob_maps(model, dataset, scale)?))
        .collect::<CliResult<_>>()?;
    let mut out = Vec::with_capacity(dataset.images.len());
    for i in 0..dataset.images.len() {
        out.push([
            per_slot[0][i].clone(),
            per_slot[1][i].clone(),
            per_slot[2][i].clone(),
            per_slot[3][i].clone(),
        ]);
    }
    Ok(out)
}

/// Scale-fused final-checkpoint maps (the substrate for voting and
/// max-pooling).
pub fn fused_final_maps(
    maps: &[[ProbMap; 4]],
    dataset: &PreparedDataset,
) -> CliResult<Vec<ProbMap>> {
    maps.iter()
        .map(|m| {
            Ok(em::fuse_scales(
                &m[1],
                &m[3],
                &dataset.fine_scale,
                &dataset.coarse_scale,
            )?)
        })
        .collect()
}

pub fn histograms(
    dataset: &PreparedDataset,
    maps: &[[ProbMap; 4]],
    subset: PatchSubset,
    normalize: bool,
) -> CliResult<Vec<(FusionHistogram, usize)>> {
    dataset
        .images
        .iter()
        .zip(maps)
        .map(|(prep, m)| {
            let hist = fusion::image_histogram(
                prep,
                &[&m[0], &m[1], &m[2], &m[3]],
                subset,
                normalize,
            )?;
            Ok((hist, prep.label()))
        })
        .collect()
}

/// Image-level predictions plus a per-class score vector per image (the
/// score feeds mAP).
pub struct Predictions {
    pub labels: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

pub fn predict_vote(fused: &[ProbMap]) -> CliResult<Predictions> {
    let mut labels = Vec::with_capacity(fused.len());
    let mut scores = Vec::with_capacity(fused.len());
    for map in fused {
        labels.push(fusion::vote_predict(map)?);
        scores.push(mean_vector(map)?);
    }
    Ok(Predictions { labels, scores })
}

pub fn predict_smi(fused: &[ProbMap]) -> CliResult<Predictions> {
    let mut labels = Vec::with_capacity(fused.len());
    let mut scores = Vec::with_capacity(fused.len());
    for map in fused {
        labels.push(fusion::max_predict(map)?);
        // Per-class score: the maximum probability any patch assigns it.
        let c = map.class_count();
        let mut maxima = vec![0.0f64; c];
        for cell in map.probs.iter().flatten() {
            for (m, &p) in maxima.iter_mut().zip(cell) {
                *m = m.max(p);
            }
        }
        scores.push(maxima);
    }
    Ok(Predictions { labels, scores })
}

pub fn predict_lr(
    model: &FusionModel,
    hists: &[(FusionHistogram, usize)],
) -> CliResult<Predictions> {
    let mut labels = Vec::with_capacity(hists.len());
    let mut scores = Vec::with_capacity(hists.len());
    for (hist, _) in hists {
        let (label, probs) = fusion::predict_fusion(model, &hist.concat())?;
        labels.push(label);
        scores.push(probs);
    }
    Ok(Predictions { labels, scores })
}

fn mean_vector(map: &ProbMap) -> CliResult<Vec<f64>> {
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
        return Err(CliError::runtime(format!("map {} has no valid patches", map.image_id)));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    Ok(mean)
}

/// Train the fusion stage from hold-out histograms of the training images.
pub fn fit_fusion_stage(
    config: &PipelineConfig,
    train_dataset: &PreparedDataset,
    train_maps: &[[ProbMap; 4]],
) -> CliResult<(FusionModel, Vec<(FusionHistogram, usize)>)> {
    let hists = histograms(
        train_dataset,
        train_maps,
        PatchSubset::FusionHoldout,
        config.fusion.normalize,
    )?;
    let features: Vec<Vec<f64>> = hists.iter().map(|(h, _)| h.concat()).collect();
    let labels: Vec<usize> = hists.iter().map(|(_, y)| *y).collect();
    let model = fusion::fit_fusion(
        &features,
        &labels,
        train_dataset.class_count,
        config.fusion.l2,
        config.seed,
    )?;
    Ok((model, hists))
}

pub fn prepare_with(
    config: &PipelineConfig,
    images: Vec<SlideImage>,
    class_count: usize,
) -> CliResult<PreparedDataset> {
    Ok(PreparedDataset::prepare(images, class_count, &config.prepare_config())?)
}

/// Fine-scale final/ mid checkpoints are slots 1/0; convenience for heatmaps.
pub fn fused_value_grid(
    config: &PipelineConfig,
    dataset: &PreparedDataset,
    maps: &[[ProbMap; 4]],
    index: usize,
) -> CliResult<em::ValueGrid> {
    let prep = &dataset.images[index];
    let fused = em::fuse_scales(
        &maps[index][1],
        &maps[index][3],
        &dataset.fine_scale,
        &dataset.coarse_scale,
    )?;
    let values = em::true_label_values(&fused, prep.label());
    if config.em.smoothing_enabled {
        Ok(em::gaussian_smooth(&values, config.em.sigma)?)
    } else {
        Ok(values)
    }
}

/// Recompute selection masks for a whole dataset under the given models,
/// mirroring one E-step of the configured EM.
pub fn recompute_masks(
    config: &PipelineConfig,
    dataset: &PreparedDataset,
    maps: &[[ProbMap; 4]],
) -> CliResult<Vec<em::HiddenMask>> {
    let labels = dataset.labels();
    let grids: Vec<em::ValueGrid> = (0..dataset.images.len())
        .map(|i| fused_value_grid(config, dataset, maps, i))
        .collect::<CliResult<_>>()?;
    let masks = match config.em.selection_mode {
        em::SelectionMode::Percentile => em::select_discriminative(
            &grids,
            &labels,
            dataset.class_count,
            config.em.p1,
            config.em.p2,
        )?,
        em::SelectionMode::SmiTop1 => em::smi_select(&grids)?,
    };
    Ok(masks)
}

/// Pooled hidden-feature vector per image (3-norm over valid fine patches).
pub fn pooled_hidden_features(
    model: &Model,
    dataset: &PreparedDataset,
    p: f64,
) -> CliResult<Vec<Vec<f64>>> {
    dataset
        .images
        .iter()
        .map(|prep| {
            let vectors: Vec<Vec<f64>> = prep
                .fine
                .patches
                .iter()
                .filter(|patch| patch.valid)
                .map(|patch| Ok(patchem_core::classifier::hidden_features(model, patch)?))
                .collect::<CliResult<_>>()?;
            Ok(fusion::pnorm_pool(&vectors, p)?)
        })
        .collect()
}

/// Train-side helper for the whole-image baseline.
pub fn train_image_model(
    config: &PipelineConfig,
    train_images: &[SlideImage],
    class_count: usize,
    crop_size: usize,
    epochs: usize,
) -> CliResult<Model> {
    let mut crops = Vec::new();
    for image in train_images {
        for crop in fusion::random_image_crops(
            image,
            crop_size,
            config.image_baseline.crops_per_image,
            config.seed,
        )? {
            crops.push((crop, image.label));
        }
    }
    let mut train = config.train_setup().train;
    train.epochs = epochs;
    train.snapshot_points = vec![1.0];
    let models = patchem_core::classifier::fit(
        &crops,
        &train,
        &config.classifier.feature,
        &config.classifier.arch,
        class_count,
        None,
    )?;
    Ok(models.into_iter().next_back().expect("fit returns snapshots"))
}

pub fn predict_five_crop(
    model: &Model,
    images: &[SlideImage],
    crop_size: usize,
) -> CliResult<Predictions> {
    let mut labels = Vec::with_capacity(images.len());
    let mut scores = Vec::with_capacity(images.len());
    for image in images {
        let probs = fusion::five_crop_predict(model, image, crop_size)?;
        let mut best = 0usize;
        for (i, &v) in probs.iter().enumerate().skip(1) {
            if v > probs[best] {
                best = i;
            }
        }
        labels.push(best);
        scores.push(probs);
    }
    Ok(Predictions { labels, scores })
}



