//! Seeded synthetic slide corpus.
//!
//! Images are tilings of textured patches. Each class plants a handful of
//! axis-aligned rectangular regions of its discriminative archetype(s) into a
//! background archetype shared by every class, so non-discriminative patches
//! carry no label information. The planted layout is recorded as an
//! [`OracleMask`], giving ground truth for selection-quality measurements.
//! A "mixed" class lists two or more archetypes that are each owned by some
//! pure class; every mixed image contains at least one region of each, so no
//! single-patch rule can separate it from the pure classes.
//!
//! Generation is a pure function of `(spec, seed)`: per-image RNG streams are
//! derived by hashing, so parallel generation order never changes output.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_distr::Poisson;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, ManifestEntry};
use crate::rng::{self, domain};

/// Procedural texture family; stands in for a tissue subtype's appearance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureArchetype {
    pub id: usize,
    /// Hue in [0,1).
    pub base_hue: f64,
    /// Sinusoidal modulation, cycles per patch.
    pub spatial_frequency: f64,
    /// Expected dark blobs per patch (Poisson).
    pub blob_density: f64,
    /// Per-pixel intensity noise std in [0,1].
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub label: usize,
    pub discriminative_archetypes: Vec<usize>,
    /// Fraction of patches per image that are discriminative, in (0,1].
    pub disc_fraction: f64,
    /// True requires >=2 archetypes, each guaranteed present in every image.
    pub is_mixed: bool,
}

/// One synthetic "whole slide": row-major RGB8 pixels plus its image-level
/// label and patient-analog group id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlideImage {
    pub id: String,
    pub group_id: String,
    pub label: usize,
    pub width: usize,
    pub height: usize,
    #[serde(skip)]
    pub pixels: Vec<u8>,
}

/// Ground-truth hidden labels: true iff the patch was drawn from a
/// discriminative archetype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleMask {
    pub image_id: String,
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<bool>,
}

impl OracleMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.cols + col]
    }

    pub fn true_count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub archetypes: Vec<TextureArchetype>,
    /// Archetype id used for every non-discriminative patch, in all classes.
    pub background_archetype: usize,
    pub classes: Vec<ClassSpec>,
    pub images_per_class: usize,
    /// Consecutive images of a class share a group id in runs of this size.
    pub images_per_group: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of contiguous rectangular discriminative regions per image.
    pub cluster_blob_count: usize,
}

impl CorpusSpec {
    fn archetype(&self, id: usize) -> Result<&TextureArchetype> {
        self.archetypes
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("archetype id {id} not defined")))
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.patch_size < 8 {
            return Err(Error::InvalidConfig("patch_size must be >= 8".into()));
        }
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.images_per_class == 0 || self.images_per_group == 0 {
            return Err(Error::InvalidConfig(
                "images_per_class and images_per_group must be positive".into(),
            ));
        }
        if self.cluster_blob_count == 0 {
            return Err(Error::InvalidConfig("cluster_blob_count must be >= 1".into()));
        }
        self.archetype(self.background_archetype)?;
        let grid = self.grid_side() * self.grid_side();
        for class in &self.classes {
            if !(class.disc_fraction > 0.0 && class.disc_fraction <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "class {}: disc_fraction {} outside (0,1]",
                    class.label, class.disc_fraction
                )));
            }
            if class.disc_fraction * (grid as f64) < 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "class {}: disc_fraction*grid < 1",
                    class.label
                )));
            }
            if class.discriminative_archetypes.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "class {}: no discriminative archetypes",
                    class.label
                )));
            }
            for &id in &class.discriminative_archetypes {
                self.archetype(id)?;
                if id == self.background_archetype {
                    return Err(Error::InvalidConfig(format!(
                        "class {}: background archetype cannot be discriminative",
                        class.label
                    )));
                }
            }
            if class.is_mixed {
                if class.discriminative_archetypes.len() < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "mixed class {} needs >= 2 archetypes",
                        class.label
                    )));
                }
                // A mixed class may not own any archetype exclusively.
                for &id in &class.discriminative_archetypes {
                    let shared = self.classes.iter().any(|other| {
                        !other.is_mixed && other.discriminative_archetypes.contains(&id)
                    });
                    if !shared {
                        return Err(Error::InvalidConfig(format!(
                            "mixed class {}: archetype {} not owned by any pure class",
                            class.label, id
                        )));
                    }
                }
            }
        }
        let labels: Vec<usize> = self.classes.iter().map(|c| c.label).collect();
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        if sorted != (0..self.classes.len()).collect::<Vec<_>>() {
            return Err(Error::InvalidConfig(
                "class labels must be exactly 0..C-1".into(),
            ));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Round half-up to an u8, clamping to [0,255].
pub(crate) fn quantize(v: f64) -> u8 {
    let x = (v * 255.0 + 0.5).floor();
    x.clamp(0.0, 255.0) as u8
}

const TEXTURE_SATURATION: f64 = 0.55;
const TEXTURE_VALUE: f64 = 0.70;
const MODULATION_AMPLITUDE: f64 = 0.22;
const BLOB_SHADE: f64 = 0.55;
const MAX_BLOBS_PER_PATCH: usize = 64;

/// Deterministic textured RGB block for `(archetype, seed)`.
///
/// Degenerate parameters (zero frequency, density and noise) yield a
/// constant-color block.
pub fn texture_patch(arch: &TextureArchetype, patch_size: usize, seed: u64) -> Result<Vec<u8>> {
    if patch_size < 8 {
        return Err(Error::InvalidArgument(format!(
            "patch_size {patch_size} < 8"
        )));
    }
    let mut rng = rng::stream(seed, &[domain::SYNTH_PATCH, arch.id as u64]);
    let base = hsv_to_rgb(arch.base_hue, TEXTURE_SATURATION, TEXTURE_VALUE);
    let size = patch_size as f64;

    let blob_count = if arch.blob_density > 0.0 {
        let poisson = Poisson::new(arch.blob_density)
            .map_err(|e| Error::InvalidArgument(format!("blob_density: {e}")))?;
        (rng.sample(poisson) as usize).min(MAX_BLOBS_PER_PATCH)
    } else {
        0
    };
    let blobs: Vec<(f64, f64, f64)> = (0..blob_count)
        .map(|_| {
            let cy = rng.random_range(0.0..size);
            let cx = rng.random_range(0.0..size);
            let radius = rng.random_range(size / 16.0..=size / 8.0);
            (cy, cx, radius)
        })
        .collect();

    let freq = arch.spatial_frequency;
    let mut pixels = vec![0u8; patch_size * patch_size * 3];
    for r in 0..patch_size {
        for c in 0..patch_size {
            let u = (c as f64 + 0.5) / size;
            let v = (r as f64 + 0.5) / size;
            let modulation =
                1.0 + MODULATION_AMPLITUDE * (TAU * freq * u).sin() * (TAU * freq * v).cos();
            let mut shade = 1.0;
            for &(cy, cx, radius) in &blobs {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= radius * radius {
                    shade = BLOB_SHADE;
                    break;
                }
            }
            // One luminance-noise draw per pixel keeps hue stable and the
            // draw count independent of the other parameters.
            let noise: f64 = rng.sample(rand_distr::StandardNormal);
            let noise = noise * arch.noise_sigma;
            let idx = (r * patch_size + c) * 3;
            for ch in 0..3 {
                pixels[idx + ch] = quantize(base[ch] * modulation * shade + noise);
            }
        }
    }
    Ok(pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Region {
    row: usize,
    col: usize,
    height: usize,
    width: usize,
    archetype: usize,
}

impl Region {
    fn area(&self) -> usize {
        self.height * self.width
    }

    fn overlaps(&self, other: &Region) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }
}

/// All (h,w) factor pairs of `area` that fit a rows x cols grid.
fn factor_pairs(area: usize, rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for h in 1..=area.min(rows) {
        if area % h == 0 {
            let w = area / h;
            if w <= cols {
                pairs.push((h, w));
            }
        }
    }
    pairs
}

fn try_place(
    dims: (usize, usize),
    rows: usize,
    cols: usize,
    placed: &[Region],
    archetype: usize,
    rng: &mut impl Rng,
) -> Option<Region> {
    let (h, w) = dims;
    let mut candidates = Vec::new();
    for row in 0..=(rows - h) {
        for col in 0..=(cols - w) {
            let candidate = Region { row, col, height: h, width: w, archetype };
            if placed.iter().all(|r| !candidate.overlaps(r)) {
                candidates.push(candidate);
            }
        }
    }
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}

/// Plant non-overlapping rectangles whose total area equals `total` within
/// +-1 patch. Blob areas are split as evenly as possible; an area that has no
/// fitting factorization or free placement is nudged by one patch. An early
/// placement can box in a later one (dense layouts), so the whole layout is
/// retried with fresh randomness before giving up.
fn plant_regions(
    rows: usize,
    cols: usize,
    total: usize,
    blob_count: usize,
    archetypes: &[usize],
    rng: &mut impl Rng,
) -> Result<Vec<Region>> {
    const ATTEMPTS: usize = 64;
    let mut last_err = None;
    for _ in 0..ATTEMPTS {
        match plant_regions_once(rows, cols, total, blob_count, archetypes, rng) {
            Ok(regions) => return Ok(regions),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt ran"))
}

fn plant_regions_once(
    rows: usize,
    cols: usize,
    total: usize,
    blob_count: usize,
    archetypes: &[usize],
    rng: &mut impl Rng,
) -> Result<Vec<Region>> {
    debug_assert!(blob_count >= 1 && blob_count <= total);
    let base = total / blob_count;
    let mut areas: Vec<usize> = (0..blob_count)
        .map(|i| base + usize::from(i < total % blob_count))
        .collect();
    // Largest blobs first: easier to place while the grid is empty.
    areas.sort_unstable_by(|a, b| b.cmp(a));

    let mut placed: Vec<Region> = Vec::with_capacity(blob_count);
    let mut drift: i64 = 0;
    for (i, &target) in areas.iter().enumerate() {
        let archetype = archetypes[i % archetypes.len()];
        let mut area_options = vec![target];
        if target > 1 && drift >= 0 {
            area_options.push(target - 1);
        }
        area_options.push(target + 1);
        if target > 1 {
            area_options.push(target - 1);
        }
        let mut region = None;
        'outer: for &area in &area_options {
            if (drift + area as i64 - target as i64).abs() > 1 {
                continue;
            }
            let mut pairs = factor_pairs(area, rows, cols);
            pairs.shuffle(rng);
            for dims in pairs {
                if let Some(r) = try_place(dims, rows, cols, &placed, archetype, rng) {
                    region = Some(r);
                    break 'outer;
                }
            }
        }
        let region = region.ok_or_else(|| {
            Error::InvalidConfig(format!(
                "could not place a {target}-patch region in a {rows}x{cols} grid; \
                 lower disc_fraction or cluster_blob_count"
            ))
        })?;
        drift += region.area() as i64 - target as i64;
        placed.push(region);
    }
    Ok(placed)
}

/// Blob count for one image: at least one region per required archetype,
/// and regions of at least two patches whenever the total allows, so every
/// discriminative patch has a discriminative 4-neighbor.
fn effective_blob_count(requested: usize, total: usize, archetype_count: usize) -> Result<usize> {
    let mut blobs = requested.clamp(1, total);
    if total >= 4 {
        blobs = blobs.min(total / 2);
    }
    if blobs < archetype_count {
        blobs = archetype_count;
    }
    if blobs > total || (total >= 4 && blobs > total / 2) {
        return Err(Error::InvalidConfig(format!(
            "cannot cover {archetype_count} archetypes with clustered regions from \
             {total} discriminative patches"
        )));
    }
    Ok(blobs)
}

fn generate_image(
    spec: &CorpusSpec,
    class: &ClassSpec,
    class_index: usize,
    image_index: usize,
    seed: u64,
) -> Result<(SlideImage, OracleMask)> {
    let side = spec.grid_side();
    let n_patches = side * side;
    let total = ((class.disc_fraction * n_patches as f64).round() as usize).clamp(1, n_patches);
    let blob_count = effective_blob_count(
        spec.cluster_blob_count,
        total,
        class.discriminative_archetypes.len(),
    )?;

    let image_seed = rng::mix(seed, &[domain::SYNTH_IMAGE, class_index as u64, image_index as u64]);
    let mut layout_rng = rng::stream(image_seed, &[domain::SYNTH_LAYOUT]);
    let regions = plant_regions(
        side,
        side,
        total,
        blob_count,
        &class.discriminative_archetypes,
        &mut layout_rng,
    )?;

    let id = format!("c{}_i{:03}", class.label, image_index);
    let group_id = format!("c{}_g{:03}", class.label, image_index / spec.images_per_group);

    let mut pixels = vec![0u8; spec.image_size * spec.image_size * 3];
    let mut grid = vec![false; n_patches];
    for pr in 0..side {
        for pc in 0..side {
            let region = regions.iter().find(|r| r.contains(pr, pc));
            let archetype_id = region.map_or(spec.background_archetype, |r| r.archetype);
            grid[pr * side + pc] = region.is_some();
            let arch = spec.archetype(archetype_id)?;
            let patch_seed = rng::mix(image_seed, &[domain::SYNTH_PATCH, pr as u64, pc as u64]);
            let block = texture_patch(arch, spec.patch_size, patch_seed)?;
            for r in 0..spec.patch_size {
                let src = r * spec.patch_size * 3;
                let dst = ((pr * spec.patch_size + r) * spec.image_size + pc * spec.patch_size) * 3;
                pixels[dst..dst + spec.patch_size * 3]
                    .copy_from_slice(&block[src..src + spec.patch_size * 3]);
            }
        }
    }

    let image = SlideImage {
        id: id.clone(),
        group_id,
        label: class.label,
        width: spec.image_size,
        height: spec.image_size,
        pixels,
    };
    let mask = OracleMask { image_id: id, rows: side, cols: side, grid };
    Ok((image, mask))
}

/// Generate the full corpus; bit-exact for a fixed `(spec, seed)`.
pub fn generate_dataset(spec: &CorpusSpec, seed: u64) -> Result<(Vec<SlideImage>, Vec<OracleMask>)> {
    spec.validate()?;
    let jobs: Vec<(usize, &ClassSpec, usize)> = spec
        .classes
        .iter()
        .enumerate()
        .flat_map(|(ci, class)| (0..spec.images_per_class).map(move |k| (ci, class, k)))
        .collect();
    let results: Vec<Result<(SlideImage, OracleMask)>> = jobs
        .par_iter()
        .map(|&(ci, class, k)| generate_image(spec, class, ci, k, seed))
        .collect();
    let mut images = Vec::with_capacity(results.len());
    let mut masks = Vec::with_capacity(results.len());
    for r in results {
        let (img, mask) = r?;
        images.push(img);
        masks.push(mask);
    }
    Ok((images, masks))
}

/// Test-harness accessor: the stored grid for `image_id`, unmodified.
pub fn oracle_hidden_labels<'a>(masks: &'a [OracleMask], image_id: &str) -> Result<&'a OracleMask> {
    masks
        .iter()
        .find(|m| m.image_id == image_id)
        .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
}

/// Write images as PPM, the manifest as JSON Lines, and oracle masks as one
/// JSON file keyed by image id (row-major boolean arrays).
pub fn write_corpus(dir: &Path, images: &[SlideImage], masks: &[OracleMask]) -> Result<Vec<PathBuf>> {
    let image_dir = dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let mut produced = Vec::new();
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        let rel = format!("images/{}.ppm", img.id);
        let path = dir.join(&rel);
        io::write_ppm(&path, img.width, img.height, &img.pixels)?;
        produced.push(path);
        entries.push(ManifestEntry {
            id: img.id.clone(),
            group: img.group_id.clone(),
            label: img.label,
            path: rel,
            width: img.width,
            height: img.height,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    io::write_manifest(&manifest, &entries)?;
    produced.push(manifest);

    let mut by_id: BTreeMap<String, Vec<Vec<bool>>> = BTreeMap::new();
    for m in masks {
        let rows: Vec<Vec<bool>> = m.grid.chunks(m.cols).map(|r| r.to_vec()).collect();
        by_id.insert(m.image_id.clone(), rows);
    }
    let mask_path = dir.join("oracle_masks.json");
    let file = std::fs::File::create(&mask_path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &by_id)?;
    produced.push(mask_path);
    Ok(produced)
}

/// Read a corpus written by [`write_corpus`]. Oracle masks are optional: a
/// real deployment would not have them.
pub fn read_corpus(dir: &Path) -> Result<(Vec<SlideImage>, Option<Vec<OracleMask>>)> {
    let entries = io::read_manifest(&dir.join("manifest.jsonl"))?;
    let mut images = Vec::with_capacity(entries.len());
    for e in &entries {
        let (width, height, pixels) = io::read_ppm(&dir.join(&e.path))?;
        if width != e.width || height != e.height {
            return Err(Error::Malformed {
                path: e.path.clone(),
                reason: format!(
                    "manifest says {}x{}, file is {}x{}",
                    e.width, e.height, width, height
                ),
            });
        }
        images.push(SlideImage {
            id: e.id.clone(),
            group_id: e.group.clone(),
            label: e.label,
            width,
            height,
            pixels,
        });
    }
    let mask_path = dir.join("oracle_masks.json");
    let masks = if mask_path.exists() {
        let text = std::fs::read_to_string(&mask_path)?;
        let by_id: BTreeMap<String, Vec<Vec<bool>>> = serde_json::from_str(&text)?;
        let mut masks = Vec::with_capacity(by_id.len());
        for (image_id, rows) in by_id {
            let r = rows.len();
            let c = rows.first().map_or(0, |row| row.len());
            if rows.iter().any(|row| row.len() != c) {
                return Err(Error::Malformed {
                    path: mask_path.display().to_string(),
                    reason: format!("ragged mask for {image_id}"),
                });
            }
            masks.push(OracleMask {
                image_id,
                rows: r,
                cols: c,
                grid: rows.into_iter().flatten().collect(),
            });
        }
        Some(masks)
    } else {
        None
    };
    Ok((images, masks))
}

/// Archetype set used by the default configuration and the test corpora:
/// id 0 is the shared background, ids 1..=4 are class-discriminative.
pub fn example_archetypes() -> Vec<TextureArchetype> {
    vec![
        TextureArchetype { id: 0, base_hue: 0.09, spatial_frequency: 1.0, blob_density: 1.0, noise_sigma: 0.04 },
        TextureArchetype { id: 1, base_hue: 0.62, spatial_frequency: 3.0, blob_density: 3.0, noise_sigma: 0.05 },
        TextureArchetype { id: 2, base_hue: 0.33, spatial_frequency: 5.0, blob_density: 2.0, noise_sigma: 0.05 },
        TextureArchetype { id: 3, base_hue: 0.83, spatial_frequency: 2.0, blob_density: 4.0, noise_sigma: 0.05 },
        TextureArchetype { id: 4, base_hue: 0.48, spatial_frequency: 6.0, blob_density: 1.5, noise_sigma: 0.05 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            archetypes: example_archetypes(),
            background_archetype: 0,
            classes: vec![
                ClassSpec { label: 0, discriminative_archetypes: vec![1], disc_fraction: 0.3, is_mixed: false },
                ClassSpec { label: 1, discriminative_archetypes: vec![2], disc_fraction: 0.3, is_mixed: false },
                ClassSpec { label: 2, discriminative_archetypes: vec![1, 2], disc_fraction: 0.3, is_mixed: true },
            ],
            images_per_class: 4,
            images_per_group: 2,
            image_size: 256,
            patch_size: 32,
            cluster_blob_count: 2,
        }
    }

    #[test]
    fn dataset_shape_matches_spec() {
        let spec = CorpusSpec { images_per_class: 50, image_size: 256, ..small_spec() };
        let (images, masks) = generate_dataset(&spec, 7).unwrap();
        assert_eq!(images.len(), 150);
        assert_eq!(masks.len(), 150);
        for m in &masks {
            assert_eq!((m.rows, m.cols), (8, 8));
        }
    }

    #[test]
    fn disc_fraction_one_means_all_true() {
        let mut spec = small_spec();
        spec.classes = vec![
            ClassSpec { label: 0, discriminative_archetypes: vec![1], disc_fraction: 1.0, is_mixed: false },
            ClassSpec { label: 1, discriminative_archetypes: vec![2], disc_fraction: 1.0, is_mixed: false },
        ];
        spec.images_per_class = 2;
        spec.image_size = 128;
        let (_, masks) = generate_dataset(&spec, 3).unwrap();
        for m in &masks {
            assert_eq!(m.true_count(), m.rows * m.cols);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let (a_imgs, a_masks) = generate_dataset(&spec, 99).unwrap();
        let (b_imgs, b_masks) = generate_dataset(&spec, 99).unwrap();
        for (a, b) in a_imgs.iter().zip(&b_imgs) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.pixels, b.pixels);
        }
        assert_eq!(a_masks, b_masks);
        let (c_imgs, _) = generate_dataset(&spec, 100).unwrap();
        assert!(a_imgs.iter().zip(&c_imgs).any(|(a, c)| a.pixels != c.pixels));
    }

    #[test]
    fn mask_density_matches_disc_fraction_within_one_patch() {
        let spec = small_spec();
        let (_, masks) = generate_dataset(&spec, 5).unwrap();
        let expected = (0.3f64 * 64.0).round();
        for m in &masks {
            assert!((m.true_count() as f64 - expected).abs() <= 1.0, "{}", m.image_id);
        }
    }

    #[test]
    fn discriminative_patches_are_clustered() {
        let spec = small_spec();
        let (_, masks) = generate_dataset(&spec, 11).unwrap();
        for m in &masks {
            for r in 0..m.rows {
                for c in 0..m.cols {
                    if !m.get(r, c) {
                        continue;
                    }
                    let mut has_neighbor = false;
                    if r > 0 && m.get(r - 1, c) {
                        has_neighbor = true;
                    }
                    if r + 1 < m.rows && m.get(r + 1, c) {
                        has_neighbor = true;
                    }
                    if c > 0 && m.get(r, c - 1) {
                        has_neighbor = true;
                    }
                    if c + 1 < m.cols && m.get(r, c + 1) {
                        has_neighbor = true;
                    }
                    assert!(has_neighbor, "isolated patch at ({r},{c}) in {}", m.image_id);
                }
            }
        }
    }

    #[test]
    fn mixed_class_images_contain_every_archetype() {
        let spec = small_spec();
        let (images, _) = generate_dataset(&spec, 13).unwrap();
        // Archetypes 1 and 2 have different hues, so compare region pixels to
        // freshly generated reference patches is overkill; the layout already
        // guarantees presence. Check via the planted regions instead: rerun
        // layout planting for one mixed image.
        let class = &spec.classes[2];
        assert!(class.is_mixed);
        let image_seed = rng::mix(13, &[domain::SYNTH_IMAGE, 2, 0]);
        let mut layout_rng = rng::stream(image_seed, &[domain::SYNTH_LAYOUT]);
        let total = (0.3f64 * 64.0).round() as usize;
        let blobs = effective_blob_count(spec.cluster_blob_count, total, 2).unwrap();
        let regions =
            plant_regions(8, 8, total, blobs, &class.discriminative_archetypes, &mut layout_rng)
                .unwrap();
        for &arch in &class.discriminative_archetypes {
            assert!(regions.iter().any(|r| r.archetype == arch));
        }
        assert_eq!(images.len(), 12);
    }

    #[test]
    fn degenerate_texture_is_constant() {
        let arch = TextureArchetype {
            id: 9,
            base_hue: 0.5,
            spatial_frequency: 0.0,
            blob_density: 0.0,
            noise_sigma: 0.0,
        };
        let block = texture_patch(&arch, 16, 4).unwrap();
        let first = [block[0], block[1], block[2]];
        for px in block.chunks(3) {
            assert_eq!(px, first);
        }
    }

    #[test]
    fn texture_rejects_small_patch() {
        let arch = &example_archetypes()[1];
        assert!(texture_patch(arch, 4, 0).is_err());
    }

    #[test]
    fn seeds_change_pixels_but_not_statistics() {
        let arch = &example_archetypes()[1];
        let a = texture_patch(arch, 32, 1).unwrap();
        let b = texture_patch(arch, 32, 2).unwrap();
        assert_ne!(a, b);

        // Population statistics of the per-patch mean over 1000 seeds; two
        // held-out seeds must land within 3 sigma of the population mean.
        let mean_of = |pixels: &[u8]| -> f64 {
            pixels.iter().map(|&v| v as f64).sum::<f64>() / pixels.len() as f64
        };
        let population: Vec<f64> = (10..1010)
            .map(|s| mean_of(&texture_patch(arch, 32, s).unwrap()))
            .collect();
        let mu = population.iter().sum::<f64>() / population.len() as f64;
        let var = population.iter().map(|m| (m - mu).powi(2)).sum::<f64>()
            / population.len() as f64;
        let sigma = var.sqrt().max(1e-9);
        for held_out in [1u64, 2] {
            let m = mean_of(&texture_patch(arch, 32, held_out).unwrap());
            assert!((m - mu).abs() <= 3.0 * sigma, "mean {m} vs population {mu} +- 3*{sigma}");
        }
    }

    #[test]
    fn oracle_lookup() {
        let spec = small_spec();
        let (_, masks) = generate_dataset(&spec, 21).unwrap();
        let m = oracle_hidden_labels(&masks, "c0_i001").unwrap();
        assert_eq!((m.rows, m.cols), (8, 8));
        assert!(matches!(
            oracle_hidden_labels(&masks, "nope"),
            Err(Error::UnknownImage(_))
        ));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec();
        spec.classes[0].disc_fraction = 0.0;
        assert!(generate_dataset(&spec, 1).is_err());
        let mut spec = small_spec();
        spec.classes[0].disc_fraction = 1.5;
        assert!(generate_dataset(&spec, 1).is_err());
        let mut spec = small_spec();
        spec.image_size = 250; // not divisible by 32
        assert!(generate_dataset(&spec, 1).is_err());
        let mut spec = small_spec();
        spec.classes.truncate(1);
        assert!(generate_dataset(&spec, 1).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec { images_per_class: 2, image_size: 128, ..small_spec() };
        let (images, masks) = generate_dataset(&spec, 17).unwrap();
        write_corpus(dir.path(), &images, &masks).unwrap();
        let (back_images, back_masks) = read_corpus(dir.path()).unwrap();
        assert_eq!(back_images.len(), images.len());
        for (a, b) in images.iter().zip(&back_images) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.group_id, b.group_id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.pixels, b.pixels);
        }
        let back_masks = back_masks.unwrap();
        for m in &masks {
            let b = oracle_hidden_labels(&back_masks, &m.image_id).unwrap();
            assert_eq!(b, m);
        }
    }
}
