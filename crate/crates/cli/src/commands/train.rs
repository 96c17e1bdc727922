//! `patchem train`: grouped split, EM over the training images, fusion
//! training on hold-out histograms, and persistence of every artifact.

use patchem_core::em;
use patchem_core::eval::split_by_group;
use patchem_core::fusion;

use crate::artifacts::{self, OutputDir};
use crate::config::PipelineConfig;
use crate::error::CliResult;
use crate::pipeline;

pub fn cmd_train(config: &PipelineConfig) -> CliResult<()> {
    let corpus = pipeline::load_corpus(&config.paths.dataset_dir)?;
    let plan = split_by_group(
        &pipeline::split_items(&corpus.images),
        config.eval.train_frac,
        config.seed,
    )?;
    let (train_images, _) = pipeline::partition(&corpus, &plan)?;
    log::info!(
        "training on {} images, holding out {} for evaluation",
        plan.train_image_ids.len(),
        plan.test_image_ids.len()
    );

    let dataset = pipeline::prepare_with(config, train_images, corpus.class_count)?;
    let result = em::run_em(&dataset, &config.em, &config.train_setup())?;
    for stats in &result.history {
        log::info!(
            "iteration {}: mask change {:.4}, mean training loss {:.4}",
            stats.iteration,
            stats.mask_change_fraction,
            stats.mean_training_loss
        );
    }

    let maps = pipeline::slot_maps(&result.models, &dataset)?;
    let (fusion_model, hists) = pipeline::fit_fusion_stage(config, &dataset, &maps)?;

    let mut out = OutputDir::create(&config.paths.output_dir)?;
    artifacts::write_models(&mut out, &result.models)?;
    artifacts::write_fusion(&mut out, &fusion_model)?;
    artifacts::write_history(&mut out, &result.history)?;
    artifacts::write_masks(&mut out, &result.masks)?;
    artifacts::write_split(&mut out, &plan)?;
    fusion::write_histograms_csv(&out.path("histograms_train.csv"), &hists)?;
    out.register("histograms_train.csv");
    out.write_json("config_echo.json", &config.echo())?;
    out.finish()
}
