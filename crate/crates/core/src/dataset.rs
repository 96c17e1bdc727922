//! Prepared per-image data: grids at both scales plus the per-scale fusion
//! hold-out flags.
//!
//! A fixed fraction of each image's valid patches is held out from patch
//! classifier training and used to build the histograms that train the
//! image-level fusion model, so the fusion stage never sees probabilities
//! the classifier memorized.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchio::{extract_grid, PatchGrid, ScaleId, ScaleSpec};
use crate::rng::{self, domain};
use crate::synth::SlideImage;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub coarse_factor: usize,
    pub min_foreground: f64,
    pub bg_luma_threshold: f64,
    pub holdout_frac: f64,
    pub seed: u64,
}

impl PrepareConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.holdout_frac) {
            return Err(Error::InvalidConfig("holdout_frac must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.min_foreground) {
            return Err(Error::InvalidConfig("min_foreground must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.bg_luma_threshold) {
            return Err(Error::InvalidConfig("bg_luma_threshold must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub image: SlideImage,
    pub fine: PatchGrid,
    pub coarse: PatchGrid,
    pub fine_holdout: Vec<bool>,
    pub coarse_holdout: Vec<bool>,
}

impl PreparedImage {
    pub fn label(&self) -> usize {
        self.image.label
    }

    pub fn grid(&self, scale: ScaleId) -> &PatchGrid {
        match scale {
            ScaleId::Fine => &self.fine,
            ScaleId::Coarse => &self.coarse,
        }
    }

    pub fn holdout(&self, scale: ScaleId) -> &[bool] {
        match scale {
            ScaleId::Fine => &self.fine_holdout,
            ScaleId::Coarse => &self.coarse_holdout,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub images: Vec<PreparedImage>,
    pub class_count: usize,
    pub fine_scale: ScaleSpec,
    pub coarse_scale: ScaleSpec,
}

impl PreparedDataset {
    pub fn prepare(
        images: Vec<SlideImage>,
        class_count: usize,
        cfg: &PrepareConfig,
    ) -> Result<PreparedDataset> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::EmptyInput("no images to prepare".into()));
        }
        if images.iter().any(|img| img.label >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "image label outside [0,{class_count})"
            )));
        }
        let fine_scale = ScaleSpec::fine(cfg.patch_size, cfg.stride)?;
        let coarse_scale = ScaleSpec::coarse(cfg.coarse_factor, cfg.patch_size, cfg.stride)?;
        let prepared: Vec<Result<PreparedImage>> = images
            .into_par_iter()
            .map(|image| {
                let fine = extract_grid(&image, &fine_scale, cfg.min_foreground, cfg.bg_luma_threshold)?;
                let coarse =
                    extract_grid(&image, &coarse_scale, cfg.min_foreground, cfg.bg_luma_threshold)?;
                let fine_holdout = sample_holdout(&fine, cfg.holdout_frac, cfg.seed, &image.id);
                let coarse_holdout = sample_holdout(&coarse, cfg.holdout_frac, cfg.seed, &image.id);
                Ok(PreparedImage { image, fine, coarse, fine_holdout, coarse_holdout })
            })
            .collect();
        let mut out = Vec::with_capacity(prepared.len());
        for p in prepared {
            out.push(p?);
        }
        Ok(PreparedDataset {
            images: out,
            class_count,
            fine_scale,
            coarse_scale,
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|p| p.label()).collect()
    }

    pub fn image_index(&self, image_id: &str) -> Result<usize> {
        self.images
            .iter()
            .position(|p| p.image.id == image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }
}

/// Pick round(frac * valid_count) valid patches (at least one when frac > 0)
/// as the fusion hold-out, but never the last patch: training always keeps
/// at least one. Keyed on the image id so the choice is stable under dataset
/// reordering.
fn sample_holdout(grid: &PatchGrid, frac: f64, seed: u64, image_id: &str) -> Vec<bool> {
    let mut holdout = vec![false; grid.patches.len()];
    if frac <= 0.0 {
        return holdout;
    }
    let valid_idx: Vec<usize> = grid
        .patches
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.valid.then_some(i))
        .collect();
    if valid_idx.len() < 2 {
        return holdout;
    }
    let count = ((frac * valid_idx.len() as f64 + 0.5).floor() as usize)
        .clamp(1, valid_idx.len() - 1);
    let mut rng = rng::stream(
        seed,
        &[domain::HOLDOUT, grid.scale_id.index() as u64, rng::id_hash(image_id)],
    );
    for chosen in sample(&mut rng, valid_idx.len(), count) {
        holdout[valid_idx[chosen]] = true;
    }
    holdout
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, example_archetypes, ClassSpec, CorpusSpec};

    fn tiny_corpus() -> Vec<SlideImage> {
        let spec = CorpusSpec {
            archetypes: example_archetypes(),
            background_archetype: 0,
            classes: vec![
                ClassSpec { label: 0, discriminative_archetypes: vec![1], disc_fraction: 0.3, is_mixed: false },
                ClassSpec { label: 1, discriminative_archetypes: vec![2], disc_fraction: 0.3, is_mixed: false },
            ],
            images_per_class: 2,
            images_per_group: 1,
            image_size: 128,
            patch_size: 32,
            cluster_blob_count: 1,
        };
        generate_dataset(&spec, 5).unwrap().0
    }

    fn config() -> PrepareConfig {
        PrepareConfig {
            patch_size: 32,
            stride: 32,
            coarse_factor: 2,
            min_foreground: 0.3,
            bg_luma_threshold: 0.85,
            holdout_frac: 0.1,
            seed: 7,
        }
    }

    #[test]
    fn prepares_both_scales_with_holdout() {
        let ds = PreparedDataset::prepare(tiny_corpus(), 2, &config()).unwrap();
        assert_eq!(ds.images.len(), 4);
        for p in &ds.images {
            assert_eq!((p.fine.rows, p.fine.cols), (4, 4));
            assert_eq!((p.coarse.rows, p.coarse.cols), (2, 2));
            let fine_held = p.fine_holdout.iter().filter(|&&b| b).count();
            // round(0.1 * 16) = 2
            assert_eq!(fine_held, 2);
            let coarse_held = p.coarse_holdout.iter().filter(|&&b| b).count();
            assert_eq!(coarse_held, 1); // at least one
            for (i, held) in p.fine_holdout.iter().enumerate() {
                if *held {
                    assert!(p.fine.patches[i].valid);
                }
            }
        }
    }

    #[test]
    fn holdout_is_stable_under_reordering() {
        let mut images = tiny_corpus();
        let ds_a = PreparedDataset::prepare(images.clone(), 2, &config()).unwrap();
        images.reverse();
        let ds_b = PreparedDataset::prepare(images, 2, &config()).unwrap();
        for pa in &ds_a.images {
            let idx = ds_b.image_index(&pa.image.id).unwrap();
            assert_eq!(pa.fine_holdout, ds_b.images[idx].fine_holdout);
        }
    }

    #[test]
    fn zero_holdout_frac_holds_nothing_out() {
        let cfg = PrepareConfig { holdout_frac: 0.0, ..config() };
        let ds = PreparedDataset::prepare(tiny_corpus(), 2, &cfg).unwrap();
        for p in &ds.images {
            assert!(p.fine_holdout.iter().all(|&b| !b));
        }
    }
}
