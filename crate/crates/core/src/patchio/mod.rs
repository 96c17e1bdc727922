//! Grid patch extraction at two scales, validity filtering, and the three
//! training-time augmentations: random sub-crop, dihedral transform, and
//! stain-magnitude perturbation in optical-density space (see [`stain`]).

pub mod stain;

pub use stain::{od_to_rgb, rgb_to_od, stain_perturb, StainBasis};

use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::synth::SlideImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleId {
    Fine,
    Coarse,
}

impl ScaleId {
    pub fn index(self) -> usize {
        match self {
            ScaleId::Fine => 0,
            ScaleId::Coarse => 1,
        }
    }
}

/// Geometry of one extraction scale. The fine scale reads the image at native
/// resolution; the coarse scale reads it box-filtered by `downsample_factor`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub scale_id: ScaleId,
    pub downsample_factor: usize,
    pub patch_size: usize,
    pub stride: usize,
}

impl ScaleSpec {
    pub fn fine(patch_size: usize, stride: usize) -> Result<Self> {
        Self::new(ScaleId::Fine, 1, patch_size, stride)
    }

    pub fn coarse(factor: usize, patch_size: usize, stride: usize) -> Result<Self> {
        Self::new(ScaleId::Coarse, factor, patch_size, stride)
    }

    fn new(scale_id: ScaleId, factor: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 || stride > patch_size {
            return Err(Error::InvalidConfig(format!(
                "stride {stride} must be in 1..=patch_size {patch_size}"
            )));
        }
        match scale_id {
            ScaleId::Fine if factor != 1 => {
                return Err(Error::InvalidConfig("fine scale requires factor 1".into()))
            }
            ScaleId::Coarse if factor < 2 => {
                return Err(Error::InvalidConfig("coarse factor must be > 1".into()))
            }
            _ => {}
        }
        Ok(ScaleSpec { scale_id, downsample_factor: factor, patch_size, stride })
    }
}

/// One grid patch: an owned RGB block plus its grid coordinates and validity.
#[derive(Debug, Clone)]
pub struct Patch {
    pub image_id: String,
    pub scale_id: ScaleId,
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub pixels: Vec<u8>,
    pub valid: bool,
}

impl Patch {
    pub fn from_pixels(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(Error::DimensionMismatch(format!(
                "patch buffer is {} bytes, expected {}",
                pixels.len(),
                size * size * 3
            )));
        }
        Ok(Patch {
            image_id: String::new(),
            scale_id: ScaleId::Fine,
            row: 0,
            col: 0,
            size,
            pixels,
            valid: true,
        })
    }

    pub fn rgb(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.size + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Row-major grid of patches for one image at one scale.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub image_id: String,
    pub scale_id: ScaleId,
    pub rows: usize,
    pub cols: usize,
    pub patches: Vec<Patch>,
}

impl PatchGrid {
    pub fn patch(&self, row: usize, col: usize) -> &Patch {
        &self.patches[row * self.cols + col]
    }

    pub fn valid_count(&self) -> usize {
        self.patches.iter().filter(|p| p.valid).count()
    }

    /// Debug dump: validity bitmap as a 0/1 string.
    pub fn debug_json(&self) -> String {
        #[derive(Serialize)]
        struct GridDebug<'a> {
            image_id: &'a str,
            scale: &'a ScaleId,
            rows: usize,
            cols: usize,
            valid: String,
        }
        let valid: String = self
            .patches
            .iter()
            .map(|p| if p.valid { '1' } else { '0' })
            .collect();
        serde_json::to_string(&GridDebug {
            image_id: &self.image_id,
            scale: &self.scale_id,
            rows: self.rows,
            cols: self.cols,
            valid,
        })
        .expect("grid debug serialization cannot fail")
    }
}

/// Box-filter downsample by an integer factor; each output pixel is the mean
/// of a factor x factor block, rounded half-up.
pub fn downsample(image: &SlideImage, factor: usize) -> Result<SlideImage> {
    if factor == 0 {
        return Err(Error::InvalidArgument("factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    if image.width % factor != 0 || image.height % factor != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} not divisible by factor {}",
            image.width, image.height, factor
        )));
    }
    let w = image.width / factor;
    let h = image.height / factor;
    let n = (factor * factor) as u32;
    let mut pixels = vec![0u8; w * h * 3];
    for oy in 0..h {
        for ox in 0..w {
            let mut sums = [0u32; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let src = ((oy * factor + dy) * image.width + ox * factor + dx) * 3;
                    for ch in 0..3 {
                        sums[ch] += image.pixels[src + ch] as u32;
                    }
                }
            }
            let dst = (oy * w + ox) * 3;
            for ch in 0..3 {
                // round(sum/n) half-up in integer arithmetic
                pixels[dst + ch] = ((2 * sums[ch] + n) / (2 * n)) as u8;
            }
        }
    }
    Ok(SlideImage {
        id: image.id.clone(),
        group_id: image.group_id.clone(),
        label: image.label,
        width: w,
        height: h,
        pixels,
    })
}

/// Fraction of pixels whose relative luminance is below `bg_luma_threshold`.
/// Background is near-white, so low-luminance pixels count as foreground.
pub fn foreground_fraction(patch: &Patch, bg_luma_threshold: f64) -> f64 {
    let mut fg = 0usize;
    let total = patch.size * patch.size;
    for px in patch.pixels.chunks_exact(3) {
        let luma =
            (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64) / 255.0;
        if luma < bg_luma_threshold {
            fg += 1;
        }
    }
    fg as f64 / total as f64
}

/// Tile the (downsampled) image into a stride-spaced grid and mark each patch
/// valid iff its foreground fraction reaches `min_foreground`.
pub fn extract_grid(
    image: &SlideImage,
    scale: &ScaleSpec,
    min_foreground: f64,
    bg_luma_threshold: f64,
) -> Result<PatchGrid> {
    let ds = downsample(image, scale.downsample_factor)?;
    let size = scale.patch_size;
    if ds.width < size || ds.height < size {
        return Err(Error::DimensionMismatch(format!(
            "patch {size} larger than downsampled image {}x{}",
            ds.width, ds.height
        )));
    }
    let rows = (ds.height - size) / scale.stride + 1;
    let cols = (ds.width - size) / scale.stride + 1;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let y0 = r * scale.stride;
            let x0 = c * scale.stride;
            let mut pixels = vec![0u8; size * size * 3];
            for y in 0..size {
                let src = ((y0 + y) * ds.width + x0) * 3;
                let dst = y * size * 3;
                pixels[dst..dst + size * 3].copy_from_slice(&ds.pixels[src..src + size * 3]);
            }
            let mut patch = Patch {
                image_id: image.id.clone(),
                scale_id: scale.scale_id,
                row: r,
                col: c,
                size,
                pixels,
                valid: true,
            };
            patch.valid = foreground_fraction(&patch, bg_luma_threshold) >= min_foreground;
            patches.push(patch);
        }
    }
    Ok(PatchGrid { image_id: image.id.clone(), scale_id: scale.scale_id, rows, cols, patches })
}

/// Dihedral-group transform of a square patch.
///
/// `k < 4`: rotate clockwise by k*90 degrees, one 90-degree step mapping
/// (r,c) -> (c, S-1-r). `k >= 4`: mirror horizontally, then rotate by
/// (k-4)*90 degrees.
pub fn dihedral(patch: &Patch, k: u8) -> Result<Patch> {
    if k > 7 {
        return Err(Error::InvalidArgument(format!("dihedral k {k} outside 0..=7")));
    }
    if patch.pixels.len() != patch.size * patch.size * 3 {
        return Err(Error::DimensionMismatch("patch is not square".into()));
    }
    let s = patch.size;
    let mut out = patch.clone();
    if k >= 4 {
        mirror_horizontal(&mut out.pixels, s);
    }
    for _ in 0..(k % 4) {
        rotate_cw(&mut out.pixels, s);
    }
    Ok(out)
}

fn rotate_cw(pixels: &mut Vec<u8>, s: usize) {
    let src = pixels.clone();
    for r in 0..s {
        for c in 0..s {
            let from = (r * s + c) * 3;
            let to = (c * s + (s - 1 - r)) * 3;
            pixels[to..to + 3].copy_from_slice(&src[from..from + 3]);
        }
    }
}

fn mirror_horizontal(pixels: &mut [u8], s: usize) {
    for r in 0..s {
        for c in 0..s / 2 {
            for ch in 0..3 {
                pixels.swap((r * s + c) * 3 + ch, (r * s + (s - 1 - c)) * 3 + ch);
            }
        }
    }
}

/// Uniformly random `crop_size` sub-block; deterministic under `seed`.
pub fn random_subcrop(patch: &Patch, crop_size: usize, seed: u64) -> Result<Patch> {
    let mut rng = rng::stream(seed, &[domain::AUGMENT]);
    let max_off = patch
        .size
        .checked_sub(crop_size)
        .ok_or_else(|| Error::InvalidArgument(format!(
            "crop {crop_size} larger than patch {}",
            patch.size
        )))?;
    let off_r = rng.random_range(0..=max_off);
    let off_c = rng.random_range(0..=max_off);
    Ok(subcrop(patch, off_r, off_c, crop_size))
}

/// Cut a square `size` block out of a full image at the given offset; used by
/// the whole-image baseline, which treats crops as patches.
pub fn image_crop(image: &SlideImage, off_r: usize, off_c: usize, size: usize) -> Result<Patch> {
    if off_r + size > image.height || off_c + size > image.width {
        return Err(Error::InvalidArgument(format!(
            "crop {size} at ({off_r},{off_c}) exceeds image {}x{}",
            image.width, image.height
        )));
    }
    let mut pixels = vec![0u8; size * size * 3];
    for y in 0..size {
        let src = ((off_r + y) * image.width + off_c) * 3;
        let dst = y * size * 3;
        pixels[dst..dst + size * 3].copy_from_slice(&image.pixels[src..src + size * 3]);
    }
    Ok(Patch {
        image_id: image.id.clone(),
        scale_id: ScaleId::Fine,
        row: 0,
        col: 0,
        size,
        pixels,
        valid: true,
    })
}

fn subcrop(patch: &Patch, off_r: usize, off_c: usize, crop_size: usize) -> Patch {
    let mut pixels = vec![0u8; crop_size * crop_size * 3];
    for y in 0..crop_size {
        let src = ((off_r + y) * patch.size + off_c) * 3;
        let dst = y * crop_size * 3;
        pixels[dst..dst + crop_size * 3].copy_from_slice(&patch.pixels[src..src + crop_size * 3]);
    }
    Patch { size: crop_size, pixels, ..patch.clone() }
}

/// Augmentation parameters. Stain factors are sampled once per patch from
/// Normal(1, stain_sigma^2) and clamped to [0.5, 1.5].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub stain_sigma: f64,
}

/// Resolved augmentation choices for one patch.
#[derive(Debug, Clone, Copy)]
pub struct AugmentChoice {
    pub off_r: usize,
    pub off_c: usize,
    pub dihedral_k: u8,
    pub alpha_h: f64,
    pub alpha_e: f64,
}

/// Sample the augmentation choices for one patch. Draw order is fixed:
/// row offset, column offset, dihedral k, alpha_h, alpha_e.
pub fn sample_augment_choice(
    patch_size: usize,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<AugmentChoice> {
    if cfg.crop_size > patch_size {
        return Err(Error::InvalidArgument(format!(
            "crop {} larger than patch {patch_size}",
            cfg.crop_size
        )));
    }
    if !(cfg.stain_sigma >= 0.0 && cfg.stain_sigma.is_finite()) {
        return Err(Error::InvalidArgument("stain_sigma must be finite and >= 0".into()));
    }
    let mut rng = rng::stream(seed, &[domain::AUGMENT]);
    let max_off = patch_size - cfg.crop_size;
    let off_r = rng.random_range(0..=max_off);
    let off_c = rng.random_range(0..=max_off);
    let dihedral_k = rng.random_range(0..8u8);
    let draw_alpha = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        if cfg.stain_sigma == 0.0 {
            1.0
        } else {
            let normal = rand_distr::Normal::new(1.0, cfg.stain_sigma).expect("sigma checked");
            rng.sample(normal).clamp(0.5, 1.5)
        }
    };
    let alpha_h = draw_alpha(&mut rng);
    let alpha_e = draw_alpha(&mut rng);
    Ok(AugmentChoice { off_r, off_c, dihedral_k, alpha_h, alpha_e })
}

/// Apply explicit augmentation choices: sub-crop, then dihedral, then stain
/// perturbation (skipped when both factors are exactly 1).
pub fn augment_with(
    patch: &Patch,
    crop_size: usize,
    basis: &StainBasis,
    choice: &AugmentChoice,
) -> Result<Patch> {
    let cropped = subcrop(patch, choice.off_r, choice.off_c, crop_size);
    let flipped = dihedral(&cropped, choice.dihedral_k)?;
    if choice.alpha_h == 1.0 && choice.alpha_e == 1.0 {
        Ok(flipped)
    } else {
        stain_perturb(&flipped, basis, choice.alpha_h, choice.alpha_e)
    }
}

/// Seeded composition of all three augmentations.
pub fn augment(
    patch: &Patch,
    cfg: &AugmentConfig,
    basis: &StainBasis,
    seed: u64,
) -> Result<Patch> {
    let choice = sample_augment_choice(patch.size, cfg, seed)?;
    augment_with(patch, cfg.crop_size, basis, &choice)
}
