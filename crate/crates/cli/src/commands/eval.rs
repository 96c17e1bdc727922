//! `patchem eval`: score the held-out split with the persisted models and
//! write the metrics report.

use patchem_core::eval::Report;
use patchem_core::fusion::{self, PatchSubset};

use crate::artifacts::{self, OutputDir};
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline;

pub fn cmd_eval(config: &PipelineConfig) -> CliResult<()> {
    let corpus = pipeline::load_corpus(&config.paths.dataset_dir)?;
    let root = config.paths.output_dir.clone();
    let plan = artifacts::read_split(&root)?;
    let models = artifacts::read_models(&root)?;
    let fusion_model = artifacts::read_fusion(&root)?;
    let (_, test_images) = pipeline::partition(&corpus, &plan)?;
    if test_images.is_empty() {
        return Err(CliError::data("split has no test images"));
    }

    let dataset = pipeline::prepare_with(config, test_images, corpus.class_count)?;
    let maps = pipeline::slot_maps(&models, &dataset)?;
    let hists = pipeline::histograms(&dataset, &maps, PatchSubset::All, config.fusion.normalize)?;
    let predictions = pipeline::predict_lr(&fusion_model, &hists)?;
    let truth = dataset.labels();

    let report = Report::from_predictions(
        &truth,
        &predictions.labels,
        &predictions.scores,
        corpus.class_count,
        config.echo(),
        config.seed,
    )?;
    log::info!(
        "test accuracy {:.4}, mAP {:.4} over {} images",
        report.accuracy,
        report.mean_average_precision,
        truth.len()
    );

    let cm = patchem_core::eval::confusion_matrix(&truth, &predictions.labels, corpus.class_count)?;
    let mut out = OutputDir::create(&root)?;
    out.write_json("report.json", &report)?;
    out.write_text("report.txt", &report.to_text_table())?;
    out.write_text("confusion.csv", &cm.to_csv())?;
    fusion::write_histograms_csv(&out.path("histograms_test.csv"), &hists)?;
    out.register("histograms_test.csv");
    out.finish()
}
