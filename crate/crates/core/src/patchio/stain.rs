//! Stain color deconvolution in optical-density space.
//!
//! Under the Beer-Lambert model, OD = -ln(I/I0) mixes linearly over stains:
//! od = M^T c where the rows of M are unit-norm stain vectors and c the
//! per-pixel stain concentrations. Perturbing the magnitude of the H and E
//! concentrations and recomposing simulates staining variation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchio::Patch;

/// Optical density of one channel; intensities are floored at 1 so the
/// transform stays finite.
fn od_from_intensity(intensity: f64) -> f64 {
    -(intensity.max(1.0) / 255.0).ln()
}

/// RGB8 -> OD triple.
pub fn rgb_to_od(px: [u8; 3]) -> [f64; 3] {
    [
        od_from_intensity(px[0] as f64),
        od_from_intensity(px[1] as f64),
        od_from_intensity(px[2] as f64),
    ]
}

/// OD triple -> RGB8, rounding half-up and clamping to [0,255].
pub fn od_to_rgb(od: [f64; 3]) -> [u8; 3] {
    let mut out = [0u8; 3];
    for ch in 0..3 {
        let v = (255.0 * (-od[ch]).exp() + 0.5).floor();
        out[ch] = v.clamp(0.0, 255.0) as u8;
    }
    out
}

/// 3x3 matrix of unit-norm optical-density stain vectors, rows ordered
/// Hematoxylin, Eosin, residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StainBasis {
    rows: [[f64; 3]; 3],
    #[serde(skip)]
    inverse_t: [[f64; 3]; 3],
}

/// Hematoxylin and eosin OD directions from the standard color-deconvolution
/// literature; normalized at construction, residual = normalized H x E.
const LITERATURE_H: [f64; 3] = [0.65, 0.70, 0.29];
const LITERATURE_E: [f64; 3] = [0.07, 0.99, 0.11];

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    Some(inv)
}

fn frobenius(m: &[[f64; 3]; 3]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn transpose(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

impl StainBasis {
    /// Validates unit row norms (1e-9) and conditioning (Frobenius condition
    /// number < 100).
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if (norm(*row) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "stain row {i} has norm {}, expected 1",
                    norm(*row)
                )));
            }
        }
        let inverse = invert3(&rows)
            .ok_or_else(|| Error::SingularBasis("matrix is not invertible".into()))?;
        let cond = frobenius(&rows) * frobenius(&inverse);
        if cond >= 100.0 {
            return Err(Error::SingularBasis(format!("condition number {cond:.1} >= 100")));
        }
        Ok(StainBasis { rows, inverse_t: transpose(&inverse) })
    }

    pub fn default_he() -> Self {
        let h = normalized(LITERATURE_H);
        let e = normalized(LITERATURE_E);
        let residual = normalized(cross(h, e));
        StainBasis::new([h, e, residual]).expect("literature basis is well conditioned")
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    /// Stain concentrations for an OD vector: c = M^-T od.
    pub fn concentrations(&self, od: [f64; 3]) -> [f64; 3] {
        let m = &self.inverse_t;
        [
            m[0][0] * od[0] + m[0][1] * od[1] + m[0][2] * od[2],
            m[1][0] * od[0] + m[1][1] * od[1] + m[1][2] * od[2],
            m[2][0] * od[0] + m[2][1] * od[1] + m[2][2] * od[2],
        ]
    }

    /// Recompose an OD vector from concentrations: od = M^T c.
    pub fn compose(&self, conc: [f64; 3]) -> [f64; 3] {
        let m = &self.rows;
        [
            m[0][0] * conc[0] + m[1][0] * conc[1] + m[2][0] * conc[2],
            m[0][1] * conc[0] + m[1][1] * conc[1] + m[2][1] * conc[2],
            m[0][2] * conc[0] + m[1][2] * conc[1] + m[2][2] * conc[2],
        ]
    }
}

impl PartialEq for StainBasis {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
    }
}

/// Multiply the H and E stain concentrations of every pixel by `alpha_h` and
/// `alpha_e`; the residual channel is untouched. Factors must be positive;
/// the seeded augmentation path clamps its samples to [0.5, 1.5], but direct
/// callers may pass any positive factor.
pub fn stain_perturb(
    patch: &Patch,
    basis: &StainBasis,
    alpha_h: f64,
    alpha_e: f64,
) -> Result<Patch> {
    for (name, a) in [("alpha_h", alpha_h), ("alpha_e", alpha_e)] {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} must be positive, got {a}")));
        }
    }
    let mut out = patch.clone();
    for px in out.pixels.chunks_exact_mut(3) {
        let od = rgb_to_od([px[0], px[1], px[2]]);
        let mut conc = basis.concentrations(od);
        conc[0] *= alpha_h;
        conc[1] *= alpha_e;
        let rgb = od_to_rgb(basis.compose(conc));
        px.copy_from_slice(&rgb);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchio::Patch;

    /// Independent decomposition: solve M^T c = od by Gaussian elimination,
    /// written without reference to the inverse cached in StainBasis.
    pub(crate) fn decompose_oracle(basis: &StainBasis, od: [f64; 3]) -> [f64; 3] {
        let rows = basis.rows();
        // a = M^T as an augmented system [a | od]
        let mut a = [[0.0f64; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = rows[j][i];
            }
            a[i][3] = od[i];
        }
        for col in 0..3 {
            let pivot = (col..3)
                .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            for row in 0..3 {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for k in col..4 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        [a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]]
    }

    #[test]
    fn od_white_is_zero_and_round_trips() {
        assert_eq!(rgb_to_od([255, 255, 255]), [0.0, 0.0, 0.0]);
        for v in 1..=255u8 {
            let od = rgb_to_od([v, v, v]);
            assert_eq!(od_to_rgb(od), [v, v, v], "intensity {v}");
        }
    }

    #[test]
    fn od_hand_value() {
        // -ln(93.75/255) = ln(2.72)
        let od = od_from_intensity(93.75);
        assert!((od - 2.72f64.ln()).abs() < 1e-12);
        assert!((od - 1.000632).abs() < 1e-4);
    }

    #[test]
    fn default_basis_is_unit_norm_and_well_conditioned() {
        let basis = StainBasis::default_he();
        for row in basis.rows() {
            assert!((norm(*row) - 1.0).abs() < 1e-9);
        }
        // Round trip through concentrations is the identity on OD vectors.
        let od = [0.3, 0.7, 0.2];
        let back = basis.compose(basis.concentrations(od));
        for ch in 0..3 {
            assert!((back[ch] - od[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_bases_are_rejected() {
        assert!(StainBasis::new([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        let v = normalized([0.6, 0.7, 0.3]);
        assert!(StainBasis::new([v, v, v]).is_err());
    }

    #[test]
    fn unit_alphas_are_identity_within_quantization() {
        let basis = StainBasis::default_he();
        let mut pixels = Vec::new();
        let mut rng = crate::rng::stream(5, &[9]);
        use rand::Rng;
        for _ in 0..16 * 16 * 3 {
            pixels.push(rng.random::<u8>());
        }
        let p = Patch::from_pixels(16, pixels).unwrap();
        let out = stain_perturb(&p, &basis, 1.0, 1.0).unwrap();
        for (a, b) in p.pixels.iter().zip(&out.pixels) {
            assert!((*a as i16 - *b as i16).abs() <= 2, "{a} vs {b}");
        }
    }

    #[test]
    fn white_is_fixed_point_for_any_alphas() {
        let basis = StainBasis::default_he();
        let p = Patch::from_pixels(8, vec![255; 8 * 8 * 3]).unwrap();
        let out = stain_perturb(&p, &basis, 1.4, 0.6).unwrap();
        assert_eq!(out.pixels, p.pixels);
    }

    #[test]
    fn doubling_h_doubles_decomposed_concentration() {
        let basis = StainBasis::default_he();
        // Build a pure-H patch: concentration (1,0,0) recomposed to RGB.
        let rgb = od_to_rgb(basis.compose([1.0, 0.0, 0.0]));
        let p = Patch::from_pixels(8, rgb.repeat(64)).unwrap();
        let original = decompose_oracle(&basis, rgb_to_od(p.rgb(0, 0)));
        let out = stain_perturb(&p, &basis, 2.0, 1.0).unwrap();
        let perturbed = decompose_oracle(&basis, rgb_to_od(out.rgb(0, 0)));
        let ratio = perturbed[0] / original[0];
        assert!((ratio - 2.0).abs() <= 0.02, "ratio {ratio}");
    }

    #[test]
    fn rejects_non_positive_alphas() {
        let basis = StainBasis::default_he();
        let p = Patch::from_pixels(8, vec![100; 8 * 8 * 3]).unwrap();
        assert!(stain_perturb(&p, &basis, 0.0, 1.0).is_err());
        assert!(stain_perturb(&p, &basis, 1.0, -1.0).is_err());
    }
}
