//! Scratch pilot harness for tuning acceptance corpora. Deleted before
//! finalization.

use patchem_core::classifier::{Architecture, FeatureConfig, TrainConfig};
use patchem_core::dataset::{PrepareConfig, PreparedDataset};
use patchem_core::em::{self, EmConfig, SelectionMode, TrainSetup};
use patchem_core::eval::split_by_group;
use patchem_core::fusion;
use patchem_core::patchio::{AugmentConfig, StainBasis};
use patchem_core::synth::{self, ClassSpec, CorpusSpec, TextureArchetype};

fn archetypes() -> Vec<TextureArchetype> {
    synth::example_archetypes()
}

fn setup(seed: u64) -> TrainSetup {
    TrainSetup {
        train: TrainConfig {
            learning_rate: 0.05,
            momentum: 0.5,
            batch_size: 32,
            epochs: 2,
            l2: 1e-4,
            seed,
            snapshot_points: vec![1.0],
        },
        arch: Architecture::Mlp { hidden_units: 64 },
        feature: FeatureConfig::block_stats(8),
        augment: AugmentConfig { crop_size: 24, stain_sigma: 0.05 },
        stain_basis: StainBasis::default_he(),
    }
}

fn prep_cfg(seed: u64) -> PrepareConfig {
    PrepareConfig {
        patch_size: 32,
        stride: 32,
        coarse_factor: 4,
        min_foreground: 0.3,
        bg_luma_threshold: 0.85,
        holdout_frac: 0.1,
        seed,
    }
}

fn clustered_corpus() -> CorpusSpec {
    CorpusSpec {
        archetypes: archetypes(),
        background_archetype: 0,
        classes: vec![
            ClassSpec { label: 0, discriminative_archetypes: vec![1], disc_fraction: 0.3, is_mixed: false },
            ClassSpec { label: 1, discriminative_archetypes: vec![2], disc_fraction: 0.3, is_mixed: false },
            ClassSpec { label: 2, discriminative_archetypes: vec![3], disc_fraction: 0.3, is_mixed: false },
        ],
        images_per_class: 30,
        images_per_group: 2,
        image_size: 256,
        patch_size: 32,
        cluster_blob_count: 2,
    }
}

#[test]
#[ignore]
fn pilot_c5_em_recovery() {
    for (p1, p2) in [(0.6, 0.5), (0.65, 0.55), (0.68, 0.6), (0.72, 0.65)] {
        let mut f1s = Vec::new();
        let mut f1s_iter1 = Vec::new();
        for seed in 0..3u64 {
            let spec = clustered_corpus();
            let (images, oracle) = synth::generate_dataset(&spec, 1000 + seed).unwrap();
            let ds = PreparedDataset::prepare(images, 3, &prep_cfg(seed)).unwrap();
            let em_cfg = EmConfig {
                p1,
                p2,
                sigma: 1.0,
                epochs_per_m: 2,
                max_iters: 6,
                change_tol: 0.02,
                smoothing_enabled: true,
                selection_mode: SelectionMode::Percentile,
            };
            let start = std::time::Instant::now();
            let result = em::run_em(&ds, &em_cfg, &setup(seed)).unwrap();
            let iter1 = em::run_em(&ds, &EmConfig { max_iters: 1, ..em_cfg }, &setup(seed)).unwrap();
            let f1 = em::mask_f1(&result.masks, &oracle).unwrap();
            let f1_1 = em::mask_f1(&iter1.masks, &oracle).unwrap();
            println!(
                "p1={p1} p2={p2} seed={seed}: F1 {f1:.4} (iter1 {f1_1:.4}, {} iters, {:?})",
                result.history.len(),
                start.elapsed()
            );
            f1s.push(f1);
            f1s_iter1.push(f1_1);
        }
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        let mean1 = f1s_iter1.iter().sum::<f64>() / f1s_iter1.len() as f64;
        println!("p1={p1} p2={p2}: mean F1 {mean:.4}, iter1 {mean1:.4}");
    }
}

/// Classes share hue and frequency and differ only in expected blob count,
/// so any single patch is genuinely ambiguous (Poisson overlap) while a
/// region of patches is informative: the regime where spatial smoothing has
/// evidence to pool.
fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).map(|v| v.parse().unwrap()).unwrap_or(default)
}

fn envu(name: &str, default: usize) -> usize {
    std::env::var(name).map(|v| v.parse().unwrap()).unwrap_or(default)
}

fn noisy_clustered_corpus(density_step: f64, noise: f64) -> CorpusSpec {
    let image_size = envu("PILOT_SIZE", 320);
    let disc = envf("PILOT_DISC", 0.35);
    let bg_density = envf("PILOT_BG_DENSITY", 4.0);
    let arch = vec![
        TextureArchetype { id: 0, base_hue: 0.62, spatial_frequency: 3.0, blob_density: bg_density, noise_sigma: noise },
        TextureArchetype { id: 1, base_hue: 0.62, spatial_frequency: 3.0, blob_density: 1.0, noise_sigma: noise },
        TextureArchetype { id: 2, base_hue: 0.62, spatial_frequency: 3.0, blob_density: 1.0 + density_step, noise_sigma: noise },
        TextureArchetype { id: 3, base_hue: 0.62, spatial_frequency: 3.0, blob_density: 1.0 + 2.0 * density_step, noise_sigma: noise },
    ];
    CorpusSpec {
        archetypes: arch,
        background_archetype: 0,
        classes: vec![
            ClassSpec { label: 0, discriminative_archetypes: vec![1], disc_fraction: disc, is_mixed: false },
            ClassSpec { label: 1, discriminative_archetypes: vec![2], disc_fraction: disc, is_mixed: false },
            ClassSpec { label: 2, discriminative_archetypes: vec![3], disc_fraction: disc, is_mixed: false },
        ],
        images_per_class: envu("PILOT_IMAGES", 30),
        images_per_group: 2,
        image_size,
        patch_size: 32,
        cluster_blob_count: envu("PILOT_BLOBS", 2),
    }
}

#[test]
#[ignore]
fn pilot_c6_smoothing_ablation() {
    let density_step: f64 = std::env::var("PILOT_DENSITY").map(|v| v.parse().unwrap()).unwrap_or(2.0);
    let noise: f64 = std::env::var("PILOT_NOISE").map(|v| v.parse().unwrap()).unwrap_or(0.05);
    println!("density_step={density_step} noise={noise}");
    let seeds: u64 = envu("PILOT_SEEDS", 3) as u64;
    let mut on_f1 = Vec::new();
    let mut off_f1 = Vec::new();
    let mut on_acc = Vec::new();
    let mut off_acc = Vec::new();
    for seed in 0..seeds {
        let spec = noisy_clustered_corpus(density_step, noise);
        let (images, oracle) = synth::generate_dataset(&spec, 2000 + seed).unwrap();
        let items: Vec<(String, String)> =
            images.iter().map(|i| (i.id.clone(), i.group_id.clone())).collect();
        let plan = split_by_group(&items, 0.8, seed).unwrap();
        let train: Vec<_> = images
            .iter()
            .filter(|i| plan.train_image_ids.contains(&i.id))
            .cloned()
            .collect();
        let test: Vec<_> = images
            .iter()
            .filter(|i| plan.test_image_ids.contains(&i.id))
            .cloned()
            .collect();
        let train_ds = PreparedDataset::prepare(train, 3, &prep_cfg(seed)).unwrap();
        let test_ds = PreparedDataset::prepare(test, 3, &prep_cfg(seed)).unwrap();
        for smoothing in [true, false] {
            let em_cfg = EmConfig {
                p1: envf("PILOT_P1", 0.62),
                p2: envf("PILOT_P2", 0.55),
                sigma: envf("PILOT_SIGMA", 1.0),
                epochs_per_m: 2,
                max_iters: 6,
                change_tol: envf("PILOT_TOL", 0.02),
                smoothing_enabled: smoothing,
                selection_mode: SelectionMode::Percentile,
            };
            let result = em::run_em(&train_ds, &em_cfg, &setup(seed)).unwrap();
            let f1 = em::mask_f1(&result.masks, &oracle).unwrap();
            // fusion eval
            let acc = lr_accuracy(&result.models, &train_ds, &test_ds, seed);
            println!("seed={seed} smoothing={smoothing}: F1 {f1:.4} acc {acc:.4}");
            if smoothing {
                on_f1.push(f1);
                on_acc.push(acc);
            } else {
                off_f1.push(f1);
                off_acc.push(acc);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "smoothing on: F1 {:.4} acc {:.4}; off: F1 {:.4} acc {:.4}",
        mean(&on_f1),
        mean(&on_acc),
        mean(&off_f1),
        mean(&off_acc)
    );
}

fn lr_accuracy(
    models: &[patchem_core::classifier::Model],
    train_ds: &PreparedDataset,
    test_ds: &PreparedDataset,
    seed: u64,
) -> f64 {
    let slot_maps = |ds: &PreparedDataset| -> Vec<[em::ProbMap; 4]> {
        let per: Vec<Vec<em::ProbMap>> = models
            .iter()
            .zip(em::MODEL_SLOTS)
            .map(|(m, (scale, _))| em::compute_prob_maps(m, ds, scale).unwrap())
            .collect();
        (0..ds.images.len())
            .map(|i| {
                [per[0][i].clone(), per[1][i].clone(), per[2][i].clone(), per[3][i].clone()]
            })
            .collect()
    };
    let train_maps = slot_maps(train_ds);
    let test_maps = slot_maps(test_ds);
    let hist = |ds: &PreparedDataset, maps: &[[em::ProbMap; 4]], subset| -> Vec<(Vec<f64>, usize)> {
        ds.images
            .iter()
            .zip(maps)
            .map(|(p, m)| {
                let h = fusion::image_histogram(p, &[&m[0], &m[1], &m[2], &m[3]], subset, true)
                    .unwrap();
                (h.concat(), p.label())
            })
            .collect()
    };
    let train_h = hist(train_ds, &train_maps, fusion::PatchSubset::FusionHoldout);
    let feats: Vec<Vec<f64>> = train_h.iter().map(|(f, _)| f.clone()).collect();
    let labels: Vec<usize> = train_h.iter().map(|(_, y)| *y).collect();
    let fm = fusion::fit_fusion(&feats, &labels, train_ds.class_count, 1e-3, seed).unwrap();
    let test_h = hist(test_ds, &test_maps, fusion::PatchSubset::All);
    let correct = test_h
        .iter()
        .filter(|(f, y)| fusion::predict_fusion(&fm, f).unwrap().0 == *y)
        .count();
    correct as f64 / test_h.len() as f64
}

#[test]
#[ignore]
fn pilot_c4_mixed_fusion() {
    for seed in 0..3u64 {
        let spec = CorpusSpec {
            archetypes: archetypes(),
            background_archetype: 0,
            classes: vec![
                ClassSpec { label: 0, discriminative_archetypes: vec![1], disc_fraction: 0.5, is_mixed: false },
                ClassSpec { label: 1, discriminative_archetypes: vec![2], disc_fraction: 0.5, is_mixed: false },
                ClassSpec { label: 2, discriminative_archetypes: vec![1, 2], disc_fraction: 0.5, is_mixed: true },
            ],
            images_per_class: 30,
            images_per_group: 2,
            image_size: 320,
            patch_size: 32,
            cluster_blob_count: 3,
        };
        // class imbalance comes from having M images half as often
        let (mut images, _oracle) = synth::generate_dataset(&spec, 3000 + seed).unwrap();
        images.retain(|img| {
            if img.label == 2 {
                // keep only even-numbered M images -> 15 of 30
                let idx: usize = img.id[5..].parse().unwrap();
                idx % 2 == 0
            } else {
                true
            }
        });
        let items: Vec<(String, String)> =
            images.iter().map(|i| (i.id.clone(), i.group_id.clone())).collect();
        let plan = split_by_group(&items, 0.8, seed).unwrap();
        let train: Vec<_> = images
            .iter()
            .filter(|i| plan.train_image_ids.contains(&i.id))
            .cloned()
            .collect();
        let test: Vec<_> = images
            .iter()
            .filter(|i| plan.test_image_ids.contains(&i.id))
            .cloned()
            .collect();
        let n_m_test = test.iter().filter(|i| i.label == 2).count();
        let train_ds = PreparedDataset::prepare(train, 3, &prep_cfg(seed)).unwrap();
        let test_ds = PreparedDataset::prepare(test, 3, &prep_cfg(seed)).unwrap();
        let em_cfg = EmConfig {
            p1: 0.2,
            p2: 0.15,
            sigma: 1.0,
            epochs_per_m: 12,
            max_iters: 1,
            change_tol: 0.02,
            smoothing_enabled: true,
            selection_mode: SelectionMode::Percentile,
        };
        let start = std::time::Instant::now();
        let result = em::run_em(&train_ds, &em_cfg, &setup(seed)).unwrap();

        // fusion LR
        let acc = lr_accuracy(&result.models, &train_ds, &test_ds, seed);
        // F on class M per aggregator
        let f_m = f_scores_on_m(&result.models, &train_ds, &test_ds, seed);
        println!(
            "seed={seed}: {} M test images, lr acc {acc:.4}, F(M): lr {:.3} vote {:.3} max {:.3} ({:?})",
            n_m_test, f_m.0, f_m.1, f_m.2, start.elapsed()
        );
    }
}

fn f_scores_on_m(
    models: &[patchem_core::classifier::Model],
    train_ds: &PreparedDataset,
    test_ds: &PreparedDataset,
    seed: u64,
) -> (f64, f64, f64) {
    use patchem_core::eval::{confusion_matrix, f_score};
    let truth = test_ds.labels();
    let slot_maps = |ds: &PreparedDataset| -> Vec<[em::ProbMap; 4]> {
        let per: Vec<Vec<em::ProbMap>> = models
            .iter()
            .zip(em::MODEL_SLOTS)
            .map(|(m, (scale, _))| em::compute_prob_maps(m, ds, scale).unwrap())
            .collect();
        (0..ds.images.len())
            .map(|i| [per[0][i].clone(), per[1][i].clone(), per[2][i].clone(), per[3][i].clone()])
            .collect()
    };
    let train_maps = slot_maps(train_ds);
    let test_maps = slot_maps(test_ds);
    let fused: Vec<em::ProbMap> = test_maps
        .iter()
        .map(|m| em::fuse_scales(&m[1], &m[3], &test_ds.fine_scale, &test_ds.coarse_scale).unwrap())
        .collect();

    // LR
    let hist = |ds: &PreparedDataset, maps: &[[em::ProbMap; 4]], subset| -> Vec<(Vec<f64>, usize)> {
        ds.images
            .iter()
            .zip(maps)
            .map(|(p, m)| {
                let h = fusion::image_histogram(p, &[&m[0], &m[1], &m[2], &m[3]], subset, true)
                    .unwrap();
                (h.concat(), p.label())
            })
            .collect()
    };
    let train_h = hist(train_ds, &train_maps, fusion::PatchSubset::FusionHoldout);
    let feats: Vec<Vec<f64>> = train_h.iter().map(|(f, _)| f.clone()).collect();
    let labels: Vec<usize> = train_h.iter().map(|(_, y)| *y).collect();
    let fm = fusion::fit_fusion(&feats, &labels, 3, 1e-3, seed).unwrap();
    let test_h = hist(test_ds, &test_maps, fusion::PatchSubset::All);
    let lr_preds: Vec<usize> =
        test_h.iter().map(|(f, _)| fusion::predict_fusion(&fm, f).unwrap().0).collect();
    let vote_preds: Vec<usize> = fused.iter().map(|m| fusion::vote_predict(m).unwrap()).collect();
    let max_preds: Vec<usize> = fused.iter().map(|m| fusion::max_predict(m).unwrap()).collect();
    let f_of = |preds: &[usize]| {
        let cm = confusion_matrix(&truth, preds, 3).unwrap();
        f_score(&cm, 2)
    };
    (f_of(&lr_preds), f_of(&vote_preds), f_of(&max_preds))
}

#[test]
#[ignore]
fn pilot_c7_dispersed_vs_five_crop() {
    for seed in 0..3u64 {
        let arch = vec![
            TextureArchetype { id: 0, base_hue: 0.09, spatial_frequency: 1.0, blob_density: 1.0, noise_sigma: 0.04 },
            TextureArchetype { id: 1, base_hue: 0.62, spatial_frequency: 2.0, blob_density: 1.0, noise_sigma: 0.08 },
            TextureArchetype { id: 2, base_hue: 0.62, spatial_frequency: 6.0, blob_density: 1.0, noise_sigma: 0.08 },
            TextureArchetype { id: 3, base_hue: 0.62, spatial_frequency: 10.0, blob_density: 1.0, noise_sigma: 0.08 },
        ];
        let spec = CorpusSpec {
            archetypes: arch,
            background_archetype: 0,
            classes: vec![
                ClassSpec { label: 0, discriminative_archetypes: vec![1], disc_fraction: 0.2, is_mixed: false },
                ClassSpec { label: 1, discriminative_archetypes: vec![2], disc_fraction: 0.2, is_mixed: false },
                ClassSpec { label: 2, discriminative_archetypes: vec![3], disc_fraction: 0.2, is_mixed: false },
            ],
            images_per_class: 30,
            images_per_group: 2,
            image_size: 256,
            patch_size: 32,
            cluster_blob_count: 6,
        };
        let (images, _) = synth::generate_dataset(&spec, 4000 + seed).unwrap();
        let items: Vec<(String, String)> =
            images.iter().map(|i| (i.id.clone(), i.group_id.clone())).collect();
        let plan = split_by_group(&items, 0.8, seed).unwrap();
        let train: Vec<_> = images
            .iter()
            .filter(|i| plan.train_image_ids.contains(&i.id))
            .cloned()
            .collect();
        let test: Vec<_> = images
            .iter()
            .filter(|i| plan.test_image_ids.contains(&i.id))
            .cloned()
            .collect();
        let train_ds = PreparedDataset::prepare(train.clone(), 3, &prep_cfg(seed)).unwrap();
        let test_ds = PreparedDataset::prepare(test.clone(), 3, &prep_cfg(seed)).unwrap();
        let em_cfg = EmConfig {
            p1: 0.75,
            p2: 0.7,
            sigma: 1.0,
            epochs_per_m: 2,
            max_iters: 6,
            change_tol: 0.02,
            smoothing_enabled: true,
            selection_mode: SelectionMode::Percentile,
        };
        let start = std::time::Instant::now();
        let result = em::run_em(&train_ds, &em_cfg, &setup(seed)).unwrap();
        let em_acc = lr_accuracy(&result.models, &train_ds, &test_ds, seed);

        // five-crop baseline: 12-epoch budget, 5 crops/image, crop 128
        let mut crops = Vec::new();
        for image in &train {
            for crop in fusion::random_image_crops(image, 128, 5, seed).unwrap() {
                crops.push((crop, image.label));
            }
        }
        let cfg = TrainConfig { epochs: 12, ..setup(seed).train };
        let img_model = patchem_core::classifier::fit(
            &crops,
            &cfg,
            &FeatureConfig::block_stats(8),
            &Architecture::Mlp { hidden_units: 64 },
            3,
            None,
        )
        .unwrap()
        .pop()
        .unwrap();
        let correct = test
            .iter()
            .filter(|img| {
                let probs = fusion::five_crop_predict(&img_model, img, 128).unwrap();
                let pred = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                pred == img.label
            })
            .count();
        let img_acc = correct as f64 / test.len() as f64;
        println!(
            "seed={seed}: em-lr acc {em_acc:.4} vs five-crop {img_acc:.4} (gap {:.4}, {:?})",
            em_acc - img_acc,
            start.elapsed()
        );
    }
}
