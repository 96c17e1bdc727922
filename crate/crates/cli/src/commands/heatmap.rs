//! `patchem heatmap`: smoothed true-label probability map and selection mask
//! for one image, as ASCII PGM files with the grid dimensions in the header.

use patchem_core::em;

use crate::artifacts::{self, OutputDir};
use crate::config::PipelineConfig;
use crate::error::CliResult;
use crate::pipeline;

pub fn cmd_heatmap(config: &PipelineConfig, image_id: &str) -> CliResult<()> {
    let corpus = pipeline::load_corpus(&config.paths.dataset_dir)?;
    let root = config.paths.output_dir.clone();
    let models = artifacts::read_models(&root)?;

    // Selection thresholds are class-wide, so maps are computed for the whole
    // corpus and the requested image is rendered from that E-step.
    let dataset = pipeline::prepare_with(config, corpus.images.clone(), corpus.class_count)?;
    let index = dataset.image_index(image_id)?;
    let maps = pipeline::slot_maps(&models, &dataset)?;
    let smoothed = pipeline::fused_value_grid(config, &dataset, &maps, index)?;
    let masks = pipeline::recompute_masks(config, &dataset, &maps)?;

    let mut out = OutputDir::create(&root)?;
    let value_rel = format!("heatmaps/{image_id}_smoothed.pgm");
    let mask_rel = format!("heatmaps/{image_id}_mask.pgm");
    std::fs::create_dir_all(out.path("heatmaps"))
        .map_err(|e| crate::error::CliError::data(format!("cannot create heatmaps dir: {e}")))?;
    em::write_value_pgm(&out.path(&value_rel), &smoothed)?;
    out.register(&value_rel);
    em::write_mask_pgm(&out.path(&mask_rel), &masks[index])?;
    out.register(&mask_rel);
    log::info!("wrote {value_rel} and {mask_rel}");
    out.finish()
}
