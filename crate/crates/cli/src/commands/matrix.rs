//! `patchem matrix`: run the method grid {vote, max-pooling, histogram-LR}
//! x {EM on, EM off}, plus the no-smoothing ablation, top-1 selection,
//! the whole-image five-crop baseline, 3-norm feature pooling with LR, and a
//! majority-class chance row. One table comes out, with accuracy and mAP per
//! method, budget-matched so "EM off" spends the same epochs as the EM runs.

use serde::Serialize;

use patchem_core::classifier::Architecture;
use patchem_core::dataset::PreparedDataset;
use patchem_core::em::{self, EmConfig, SelectionMode};
use patchem_core::eval::{accuracy, confusion_matrix, mean_average_precision, split_by_group};
use patchem_core::fusion::{self, PatchSubset};

use crate::artifacts::OutputDir;
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, Predictions};

#[derive(Debug, Clone, Serialize)]
struct VariantRow {
    method: String,
    acc: f64,
    map: f64,
}

#[derive(Debug, Serialize)]
struct MatrixReport {
    rows: Vec<VariantRow>,
    config_echo: serde_json::Value,
    seed: u64,
}

fn score(preds: &Predictions, truth: &[usize], class_count: usize) -> CliResult<(f64, f64)> {
    let cm = confusion_matrix(truth, &preds.labels, class_count)?;
    let acc = accuracy(&cm)?;
    let map = mean_average_precision(&preds.scores, truth, class_count)?;
    Ok((acc, map))
}

enum Aggregate {
    Vote,
    Smi,
    Lr,
}

/// Evaluate one trained model set under the requested aggregators.
fn aggregate_rows(
    config: &PipelineConfig,
    models: &[patchem_core::classifier::Model],
    train_ds: &PreparedDataset,
    test_ds: &PreparedDataset,
    truth: &[usize],
    variants: &[(&str, Aggregate)],
    rows: &mut Vec<VariantRow>,
) -> CliResult<()> {
    let test_maps = pipeline::slot_maps(models, test_ds)?;
    let fused_test = pipeline::fused_final_maps(&test_maps, test_ds)?;
    for (name, aggregate) in variants {
        let preds = match aggregate {
            Aggregate::Vote => pipeline::predict_vote(&fused_test)?,
            Aggregate::Smi => pipeline::predict_smi(&fused_test)?,
            Aggregate::Lr => {
                let train_maps = pipeline::slot_maps(models, train_ds)?;
                let (fusion_model, _) = pipeline::fit_fusion_stage(config, train_ds, &train_maps)?;
                let hists = pipeline::histograms(
                    test_ds,
                    &test_maps,
                    PatchSubset::All,
                    config.fusion.normalize,
                )?;
                pipeline::predict_lr(&fusion_model, &hists)?
            }
        };
        let (acc, map) = score(&preds, truth, test_ds.class_count)?;
        log::info!("{name}: acc {acc:.4}, mAP {map:.4}");
        rows.push(VariantRow { method: name.to_string(), acc, map });
    }
    Ok(())
}

fn render_table(rows: &[VariantRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<24}{:>8}{:>8}\n", "method", "acc", "map"));
    for row in rows {
        out.push_str(&format!("{:<24}{:>8.4}{:>8.4}\n", row.method, row.acc, row.map));
    }
    out
}

pub fn cmd_matrix(config: &PipelineConfig) -> CliResult<()> {
    let corpus = pipeline::load_corpus(&config.paths.dataset_dir)?;
    let plan = split_by_group(
        &pipeline::split_items(&corpus.images),
        config.eval.train_frac,
        config.seed,
    )?;
    let (train_images, test_images) = pipeline::partition(&corpus, &plan)?;
    if test_images.is_empty() {
        return Err(CliError::data("split has no test images"));
    }
    let train_ds = pipeline::prepare_with(config, train_images.clone(), corpus.class_count)?;
    let test_ds = pipeline::prepare_with(config, test_images.clone(), corpus.class_count)?;
    let truth: Vec<usize> = test_ds.labels();
    let setup = config.train_setup();

    let budget = config.em.max_iters * config.em.epochs_per_m;
    let mut rows: Vec<VariantRow> = Vec::new();

    // EM off: one M-step over all valid patches with the full epoch budget.
    let plain_cfg = EmConfig { max_iters: 1, epochs_per_m: budget, ..config.em.clone() };
    log::info!("training plain models ({budget} epochs, no EM)");
    let plain = em::run_em(&train_ds, &plain_cfg, &setup)?;
    aggregate_rows(
        config,
        &plain.models,
        &train_ds,
        &test_ds,
        &truth,
        &[
            ("cnn-vote", Aggregate::Vote),
            ("cnn-smi", Aggregate::Smi),
            ("cnn-lr", Aggregate::Lr),
        ],
        &mut rows,
    )?;

    log::info!("training EM models ({} iterations)", config.em.max_iters);
    let em_on = em::run_em(&train_ds, &config.em, &setup)?;
    aggregate_rows(
        config,
        &em_on.models,
        &train_ds,
        &test_ds,
        &truth,
        &[
            ("em-cnn-vote", Aggregate::Vote),
            ("em-cnn-smi", Aggregate::Smi),
            ("em-cnn-lr", Aggregate::Lr),
        ],
        &mut rows,
    )?;

    log::info!("training EM models without spatial smoothing");
    let nosmooth_cfg = EmConfig { smoothing_enabled: false, ..config.em.clone() };
    let nosmooth = em::run_em(&train_ds, &nosmooth_cfg, &setup)?;
    aggregate_rows(
        config,
        &nosmooth.models,
        &train_ds,
        &test_ds,
        &truth,
        &[("em-cnn-lr-nosmooth", Aggregate::Lr)],
        &mut rows,
    )?;

    log::info!("training with top-1 selection");
    let smi_cfg = EmConfig { selection_mode: SelectionMode::SmiTop1, ..config.em.clone() };
    let smi_sel = em::run_em(&train_ds, &smi_cfg, &setup)?;
    aggregate_rows(
        config,
        &smi_sel.models,
        &train_ds,
        &test_ds,
        &truth,
        &[("smi-cnn-smi", Aggregate::Smi)],
        &mut rows,
    )?;

    // Whole-image five-crop baseline.
    let min_side = corpus.images.iter().map(|i| i.width.min(i.height)).min().unwrap_or(0);
    let crop_size = config.image_baseline.crop_size.unwrap_or(min_side / 2).max(8);
    if crop_size <= min_side {
        log::info!("training whole-image baseline (crop {crop_size})");
        let image_model = pipeline::train_image_model(
            config,
            &train_images,
            corpus.class_count,
            crop_size,
            budget,
        )?;
        let preds = pipeline::predict_five_crop(&image_model, &test_images, crop_size)?;
        let (acc, map) = score(&preds, &truth, corpus.class_count)?;
        log::info!("cnn-image: acc {acc:.4}, mAP {map:.4}");
        rows.push(VariantRow { method: "cnn-image".into(), acc, map });
    } else {
        log::warn!("cnn-image skipped: crop {crop_size} exceeds smallest image side {min_side}");
    }

    // 3-norm pooled hidden features + LR over the plain models (MLP only).
    if matches!(config.classifier.arch, Architecture::Mlp { .. }) {
        let fine_final = &plain.models[1];
        let train_features = pipeline::pooled_hidden_features(fine_final, &train_ds, 3.0)?;
        let test_features = pipeline::pooled_hidden_features(fine_final, &test_ds, 3.0)?;
        let fusion_model = fusion::fit_fusion(
            &train_features,
            &train_ds.labels(),
            corpus.class_count,
            config.fusion.l2,
            config.seed,
        )?;
        let mut labels = Vec::new();
        let mut scores = Vec::new();
        for f in &test_features {
            let (label, probs) = fusion::predict_fusion(&fusion_model, f)?;
            labels.push(label);
            scores.push(probs);
        }
        let preds = Predictions { labels, scores };
        let (acc, map) = score(&preds, &truth, corpus.class_count)?;
        log::info!("cnn-fea-lr: acc {acc:.4}, mAP {map:.4}");
        rows.push(VariantRow { method: "cnn-fea-lr".into(), acc, map });
    } else {
        log::warn!("cnn-fea-lr skipped: requires an mlp architecture");
    }

    // Chance: majority training class with uniform scores.
    let mut class_counts = vec![0usize; corpus.class_count];
    for img in &train_images {
        class_counts[img.label] += 1;
    }
    let majority = class_counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| c)
        .unwrap_or(0);
    let chance = Predictions {
        labels: vec![majority; truth.len()],
        scores: vec![vec![1.0 / corpus.class_count as f64; corpus.class_count]; truth.len()],
    };
    let (acc, map) = score(&chance, &truth, corpus.class_count)?;
    rows.push(VariantRow { method: "chance".into(), acc, map });

    let mut out = OutputDir::create(&config.paths.output_dir)?;
    out.write_text("matrix.txt", &render_table(&rows))?;
    out.write_json(
        "matrix.json",
        &MatrixReport { rows, config_echo: config.echo(), seed: config.seed },
    )?;
    out.finish()
}
