//! Image-quality metrics on plain `f64` fields, restricted to valid pixels.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, shape_err, Error, Result};
use crate::phantom::kspace;
use crate::Field;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
pub const MS_SSIM_WINDOW: usize = 11;
pub const GAUSSIAN_SIGMA: f64 = 1.5;
pub const MS_SSIM_LEVELS: usize = 3;
pub const HF_CUTOFF: f64 = 0.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const CANONICAL_SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Floor applied to contrast-structure terms before taking logarithms.
pub const CS_FLOOR: f64 = 1e-6;

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// The first `levels` canonical scale weights, rescaled to sum to one.
pub fn scale_weights(levels: usize) -> Result<Vec<f64>> {
    if levels == 0 || levels > CANONICAL_SCALE_WEIGHTS.len() {
        return Err(config_err(format!("MS-SSIM supports 1 to 5 levels, got {levels}")));
    }
    let w = &CANONICAL_SCALE_WEIGHTS[..levels];
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / total).collect())
}

/// Largest level count whose coarsest image still fits one window.
pub fn max_levels(size: usize, window: usize) -> usize {
    let mut levels = 0;
    let mut s = size;
    while s >= window && levels < CANONICAL_SCALE_WEIGHTS.len() {
        levels += 1;
        s /= 2;
    }
    levels
}

fn check_pair(a: &Field, b: &Field) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!("images differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_mask(a: &Field, mask: &Array2<bool>) -> Result<usize> {
    if a.dim() != mask.dim() {
        return Err(shape_err(format!("mask {:?} does not match image {:?}", mask.dim(), a.dim())));
    }
    let valid = mask.iter().filter(|v| **v).count();
    if valid == 0 {
        return Err(Error::Degenerate("mask has no valid pixels".into()));
    }
    Ok(valid)
}

pub fn mse(s: &Field, i: &Field, mask: &Array2<bool>) -> Result<f64> {
    check_pair(s, i)?;
    let valid = check_mask(s, mask)?;
    let mut total = 0.0;
    Zip::from(s).and(i).and(mask).for_each(|a, b, &m| {
        if m {
            total += (a - b) * (a - b);
        }
    });
    Ok(total / valid as f64)
}

pub fn psnr(s: &Field, i: &Field, mask: &Array2<bool>, data_range: f64) -> Result<f64> {
    let err = mse(s, i, mask)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / err).log10()).min(PSNR_CAP_DB))
}

pub fn mean_abs_error(s: &Field, i: &Field, mask: &Array2<bool>) -> Result<f64> {
    check_pair(s, i)?;
    let valid = check_mask(s, mask)?;
    let mut total = 0.0;
    Zip::from(s).and(i).and(mask).for_each(|a, b, &m| {
        if m {
            total += (a - b).abs();
        }
    });
    Ok(total / valid as f64)
}

/// Luminance and contrast-structure terms at every window position that
/// fits inside the image and, when a mask is given, covers only valid pixels.
fn local_terms(x: &Field, y: &Field, taps: &[f64], mask: Option<&Array2<bool>>, range: f64) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = x.dim();
    let k = taps.len();
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let mut lum = Vec::new();
    let mut cs = Vec::new();
    if h < k || w < k {
        return (lum, cs);
    }
    for r in 0..=h - k {
        'pos: for c in 0..=w - k {
            if let Some(m) = mask {
                for dr in 0..k {
                    for dc in 0..k {
                        if !m[[r + dr, c + dc]] {
                            continue 'pos;
                        }
                    }
                }
            }
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in 0..k {
                for dc in 0..k {
                    let g = taps[dr] * taps[dc];
                    let a = x[[r + dr, c + dc]];
                    let b = y[[r + dr, c + dc]];
                    mx += g * a;
                    my += g * b;
                    xx += g * (a * a);
                    yy += g * (b * b);
                    xy += g * (a * b);
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            lum.push((2.0 * mx * my + c1) / (mx * mx + my * my + c1));
            cs.push((2.0 * cov + c2) / (vx + vy + c2));
        }
    }
    (lum, cs)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Single-scale SSIM averaged over windows whose pixels are all valid.
pub fn ssim(s: &Field, i: &Field, mask: &Array2<bool>) -> Result<f64> {
    check_pair(s, i)?;
    check_mask(s, mask)?;
    let taps = gaussian_taps(SSIM_WINDOW, GAUSSIAN_SIGMA);
    let (lum, cs) = local_terms(s, i, &taps, Some(mask), 1.0);
    if lum.is_empty() {
        return Err(Error::Degenerate("no window lies entirely inside the valid region".into()));
    }
    let vals: Vec<f64> = lum.iter().zip(&cs).map(|(l, c)| l * c).collect();
    Ok(mean(&vals))
}

fn average_pool(x: &Field) -> Field {
    let (h, w) = (x.nrows() / 2, x.ncols() / 2);
    Array2::from_shape_fn((h, w), |(r, c)| {
        (x[[2 * r, 2 * c]] + x[[2 * r + 1, 2 * c]] + x[[2 * r, 2 * c + 1]] + x[[2 * r + 1, 2 * c + 1]]) / 4.0
    })
}

/// MS-SSIM window side: the standard one, or the largest odd side that fits a smaller image.
pub fn ms_ssim_window(size: usize) -> usize {
    if size >= MS_SSIM_WINDOW {
        MS_SSIM_WINDOW
    } else {
        (size.max(1) - 1) | 1
    }
}

/// Default level count, reduced for images too small to hold every level.
pub fn levels_for(size: usize) -> usize {
    MS_SSIM_LEVELS.min(max_levels(size, ms_ssim_window(size))).max(1)
}

/// Multi-scale SSIM with an 11-tap Gaussian window and 2x2 average pooling between scales.
pub fn ms_ssim(s: &Field, i: &Field, levels: usize) -> Result<f64> {
    check_pair(s, i)?;
    let weights = scale_weights(levels)?;
    let size = s.nrows().min(s.ncols());
    let window = ms_ssim_window(size);
    if levels > max_levels(size, window) {
        return Err(config_err(format!("{levels} MS-SSIM levels need at least {} pixels", MS_SSIM_WINDOW << (levels - 1))));
    }
    let taps = gaussian_taps(window, GAUSSIAN_SIGMA);
    let (mut x, mut y) = (s.clone(), i.clone());
    let mut log_sum = 0.0;
    for (j, w) in weights.iter().enumerate() {
        let (lum, cs) = local_terms(&x, &y, &taps, None, 1.0);
        let term = if j + 1 == levels {
            mean(&lum.iter().zip(&cs).map(|(l, c)| l * c).collect::<Vec<_>>())
        } else {
            mean(&cs)
        };
        log_sum += w * term.max(CS_FLOOR).ln();
        x = average_pool(&x);
        y = average_pool(&y);
    }
    Ok(log_sum.exp())
}

/// MS-SSIM of the two images after zeroing invalid pixels in both.
pub fn ms_ssim_masked(s: &Field, i: &Field, mask: &Array2<bool>) -> Result<f64> {
    check_pair(s, i)?;
    check_mask(s, mask)?;
    let keep = mask.mapv(|m| if m { 1.0 } else { 0.0 });
    ms_ssim(&(s * &keep), &(i * &keep), levels_for(s.nrows().min(s.ncols())))
}

/// Fraction of spectral energy outside the centred window of side `cutoff * N`.
pub fn hf_energy(s: &Field, cutoff_fraction: f64) -> Result<f64> {
    if !(cutoff_fraction > 0.0 && cutoff_fraction < 1.0) {
        return Err(arg_err(format!("cutoff fraction must lie in (0, 1), got {cutoff_fraction}")));
    }
    let k = kspace::forward_dft(s)?;
    let big = k.size();
    let side = ((cutoff_fraction * big as f64).round() as usize).max(1);
    let lo = big / 2 - side / 2;
    let hi = lo + side;
    let mut total = 0.0;
    let mut inner = 0.0;
    for ((r, c), v) in k.values.indexed_iter() {
        let e = v.norm_sqr();
        total += e;
        if (lo..hi).contains(&r) && (lo..hi).contains(&c) {
            inner += e;
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(((total - inner) / total).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub hf_energy: f64,
    pub valid_pixel_count: usize,
}

impl MetricReport {
    /// All metrics of `s` against ground truth `i`; sharpness is measured on the masked output.
    pub fn compute(s: &Field, i: &Field, mask: &Array2<bool>) -> Result<Self> {
        let valid_pixel_count = check_mask(s, mask)?;
        let masked = s * &mask.mapv(|m| if m { 1.0 } else { 0.0 });
        Ok(MetricReport {
            psnr: psnr(s, i, mask, 1.0)?,
            ssim: ssim(s, i, mask)?,
            ms_ssim: ms_ssim_masked(s, i, mask)?,
            hf_energy: hf_energy(&masked, HF_CUTOFF)?,
            valid_pixel_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.random::<f64>())
    }

    fn full(n: usize) -> Array2<bool> {
        Array2::from_elem((n, n), true)
    }

    #[test]
    fn psnr_cap_and_uniform_error() {
        let x = random(16, 1);
        assert_eq!(psnr(&x, &x, &full(16), 1.0).unwrap(), PSNR_CAP_DB);
        let y = &x + 0.1;
        assert!((psnr(&y, &x, &full(16), 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let x = random(8, 1);
        let none = Array2::from_elem((8, 8), false);
        assert!(matches!(psnr(&x, &x, &none, 1.0), Err(Error::Degenerate(_))));
        assert!(matches!(mean_abs_error(&x, &x, &none), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let (a, b) = (random(16, 2), random(16, 3));
        let m = full(16);
        assert!((ssim(&a, &a, &m).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b, &m).unwrap(), ssim(&b, &a, &m).unwrap());
    }

    #[test]
    fn ms_ssim_identity_and_level_limit() {
        let a = random(64, 4);
        assert_eq!(ms_ssim(&a, &a, 3).unwrap(), 1.0);
        assert!(matches!(ms_ssim(&a, &a, 4), Err(Error::Config(_))));
        assert_eq!(max_levels(64, MS_SSIM_WINDOW), 3);
    }

    #[test]
    fn ms_ssim_of_binary_inverse_is_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((64, 64), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let inv = x.mapv(|v| 1.0 - v);
        assert!(ms_ssim(&x, &inv, 3).unwrap() < 0.2);
    }

    #[test]
    fn hf_energy_extremes() {
        let flat = Array2::from_elem((16, 16), 0.7);
        assert!(hf_energy(&flat, 0.5).unwrap() < 1e-12);
        let checker = Array2::from_shape_fn((16, 16), |(r, c)| if (r + c) % 2 == 0 { 1.0 } else { -1.0 });
        assert!((hf_energy(&checker, 0.5).unwrap() - 1.0).abs() < 1e-12);
        assert!(hf_energy(&flat, 1.0).is_err());
        assert!(hf_energy(&flat, 0.0).is_err());
    }

    #[test]
    fn scale_weights_renormalized() {
        let w = scale_weights(3).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[1] / w[0] - 0.2856 / 0.0448).abs() < 1e-9);
    }
}
