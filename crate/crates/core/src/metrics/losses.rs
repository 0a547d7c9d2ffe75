//! Differentiable training losses on `(B, 1, H, W)` tensors.

use candle_core::{Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use super::quality::{gaussian_taps, levels_for, max_levels, ms_ssim_window, scale_weights, CS_FLOOR, GAUSSIAN_SIGMA};
use crate::error::{arg_err, config_err, shape_err, Error, Result};
use crate::model::Critic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_adv: f64,
    pub gp_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.84, lambda_adv: 0.0, gp_weight: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(arg_err(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lambda_adv >= 0.0) || !(self.gp_weight >= 0.0) {
            return Err(arg_err("adversarial and penalty weights must be non-negative"));
        }
        Ok(())
    }
}

fn check_images(s: &Tensor, i: &Tensor) -> Result<usize> {
    let (b, c, _, _) = s.dims4()?;
    if s.dims() != i.dims() || c != 1 {
        return Err(shape_err(format!("expected matching (B, 1, H, W) images, got {:?} and {:?}", s.dims(), i.dims())));
    }
    Ok(b)
}

/// Per-sample mean absolute error over valid pixels; `mask` holds 0/1 values.
pub fn pixel_loss(s: &Tensor, i: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_images(s, i)?;
    if mask.dims() != s.dims() {
        return Err(shape_err("mask must match the images"));
    }
    let mask = mask.to_dtype(s.dtype())?;
    let counts = mask.sum((1, 2, 3))?;
    if counts.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?.iter().any(|c| *c == 0.0) {
        return Err(Error::Degenerate("a sample has no valid pixels".into()));
    }
    let abs = (s - i)?.abs()?.mul(&mask)?;
    Ok(abs.sum((1, 2, 3))?.div(&counts)?)
}

/// Banded `(len - k + 1, len)` matrix applying the Gaussian taps at every valid offset.
fn gaussian_band(len: usize, taps: &[f64], like: &Tensor) -> Result<Tensor> {
    let out = len + 1 - taps.len();
    let mut m = vec![0.0; out * len];
    for r in 0..out {
        m[r * len + r..r * len + r + taps.len()].copy_from_slice(taps);
    }
    Ok(Tensor::from_vec(m, (out, len), &Device::Cpu)?.to_dtype(like.dtype())?)
}

/// Per-sample luminance and contrast-structure means at one scale.
fn scale_terms(x: &Tensor, y: &Tensor, taps: &[f64]) -> Result<(Tensor, Tensor)> {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (b, _, h, w) = x.dims4()?;
    let rows = gaussian_band(h, taps, x)?;
    let cols = gaussian_band(w, taps, x)?.t()?;
    let stacked = Tensor::cat(&[x, y, &x.sqr()?, &y.sqr()?, &(x * y)?], 0)?.reshape((5 * b, h, w))?;
    // Separable valid filtering as two matrix products.
    let f = rows.broadcast_matmul(&stacked)?.broadcast_matmul(&cols)?;
    let part = |k: usize| f.narrow(0, k * b, b);
    let (mx, my, xx, yy, xy) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let mxy = (&mx * &my)?;
    let vx = (xx - mx.sqr()?)?;
    let vy = (yy - my.sqr()?)?;
    let cov = (xy - &mxy)?;
    let lum = ((mxy * 2.0)? + c1)?.div(&((mx.sqr()? + my.sqr()?)? + c1)?)?;
    let cs = ((cov * 2.0)? + c2)?.div(&((vx + vy)? + c2)?)?;
    let lcs = (&lum * &cs)?;
    Ok((lcs.mean((1, 2))?, cs.mean((1, 2))?))
}

/// Per-sample multi-scale SSIM, differentiable in both inputs.
pub fn ms_ssim(x: &Tensor, y: &Tensor, levels: usize) -> Result<Tensor> {
    check_images(x, y)?;
    let weights = scale_weights(levels)?;
    let (_, _, h, w) = x.dims4()?;
    let window = ms_ssim_window(h.min(w));
    if levels > max_levels(h.min(w), window) {
        return Err(config_err(format!("{levels} MS-SSIM levels do not fit a {h}x{w} image")));
    }
    let taps = gaussian_taps(window, GAUSSIAN_SIGMA);
    let (mut a, mut b) = (x.clone(), y.clone());
    let mut log_sum: Option<Tensor> = None;
    for (j, wt) in weights.iter().enumerate() {
        let (full, cs) = scale_terms(&a, &b, &taps)?;
        let term = if j + 1 == levels { full } else { cs };
        let contrib = (term.clamp(CS_FLOOR, f64::INFINITY)?.log()? * *wt)?;
        log_sum = Some(match log_sum {
            Some(s) => (s + contrib)?,
            None => contrib,
        });
        if j + 1 < levels {
            a = a.avg_pool2d(2)?;
            b = b.avg_pool2d(2)?;
        }
    }
    Ok(log_sum.expect("at least one level").exp()?)
}

/// Per-sample `1 - MS-SSIM` of the masked images.
pub fn structural_loss(s: &Tensor, i: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.to_dtype(s.dtype())?;
    let (_, _, h, w) = s.dims4()?;
    let value = ms_ssim(&s.mul(&mask)?, &i.mul(&mask)?, levels_for(h.min(w)))?;
    Ok(value.affine(-1.0, 1.0)?)
}

/// Per-sample loss components.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub pixel: Tensor,
    pub structural: Tensor,
    /// Generator adversarial term `-critic(S)` when a critic is in play.
    pub adversarial: Option<Tensor>,
}

impl LossTerms {
    pub fn new(s: &Tensor, i: &Tensor, mask: &Tensor, adversarial: Option<Tensor>) -> Result<Self> {
        Ok(LossTerms { pixel: pixel_loss(s, i, mask)?, structural: structural_loss(s, i, mask)?, adversarial })
    }

    /// Batch mean of `(1 - alpha) * pixel + alpha * structural + lambda_b * adversarial` with one weight per sample.
    pub fn weighted(&self, alpha: f64, lambdas: &[f64]) -> Result<Tensor> {
        let b = self.pixel.dim(0)?;
        if lambdas.len() != b {
            return Err(shape_err(format!("{} adversarial weights for a batch of {b}", lambdas.len())));
        }
        let mut per = ((&self.pixel * (1.0 - alpha))? + (&self.structural * alpha)?)?;
        if let Some(adv) = &self.adversarial {
            if lambdas.iter().any(|l| *l != 0.0) {
                let lam = Tensor::from_vec(lambdas.to_vec(), b, &Device::Cpu)?.to_dtype(adv.dtype())?;
                per = (per + adv.mul(&lam)?)?;
            }
        }
        Ok(per.mean(0)?)
    }
}

/// Scalar training objective with one adversarial weight for the whole batch.
pub fn total_loss(s: &Tensor, i: &Tensor, mask: &Tensor, weights: &LossWeights, generator_adv_term: Option<&Tensor>) -> Result<Tensor> {
    weights.validate()?;
    let terms = LossTerms::new(s, i, mask, generator_adv_term.cloned())?;
    let b = terms.pixel.dim(0)?;
    terms.weighted(weights.alpha, &vec![weights.lambda_adv; b])
}

#[derive(Debug, Clone)]
pub struct WganLosses {
    /// Value of `mean D(fake) - mean D(real) + gp * mean (|grad D(x_hat)| - 1)^2`.
    pub critic_loss: f64,
    /// Scalar whose parameter gradient equals that of `critic_loss`.
    pub critic_objective: Tensor,
    pub generator_loss: Tensor,
    pub gradient_penalty: f64,
    /// Input-gradient norm at each interpolate.
    pub grad_norms: Vec<f64>,
}

/// Gradient of the summed critic score with respect to its input.
pub fn critic_input_gradient(critic: &dyn Critic, x: &Tensor) -> Result<Tensor> {
    let var = Var::from_tensor(&x.detach())?;
    let score = critic.score(var.as_tensor())?.sum_all()?;
    let grads = score.backward()?;
    match grads.get(var.as_tensor()) {
        Some(g) => Ok(g.detach()),
        None => Ok(x.zeros_like()?),
    }
}

/// Wasserstein critic and generator losses with a gradient penalty at the
/// interpolates `eps * real + (1 - eps) * fake`.
///
/// The penalty's parameter gradient is obtained without second-order
/// differentiation: with `g = grad_x D(x_hat)` and the detached direction
/// `u = 2 (|g| - 1) g / |g|`, the directional derivative `<u, grad_x D>` has
/// the same parameter gradient as `(|g| - 1)^2`.
pub fn wgan_losses(critic: &dyn Critic, real: &Tensor, fake: &Tensor, gp_weight: f64, eps: &[f64]) -> Result<WganLosses> {
    let b = check_images(real, fake)?;
    if eps.len() != b {
        return Err(shape_err(format!("{} interpolation weights for a batch of {b}", eps.len())));
    }
    let d_real = critic.score(real)?;
    let d_fake = critic.score(fake)?;
    let wasserstein = (d_fake.mean(0)? - d_real.mean(0)?)?;
    let generator_loss = d_fake.mean(0)?.neg()?;

    let e = Tensor::from_vec(eps.to_vec(), (b, 1, 1, 1), &Device::Cpu)?.to_dtype(real.dtype())?;
    let real_d = real.detach();
    let fake_d = fake.detach();
    let x_hat = (real_d.broadcast_mul(&e)? + fake_d.broadcast_mul(&e.affine(-1.0, 1.0)?)?)?;
    let g = critic_input_gradient(critic, &x_hat)?;
    let grad_norms = g.sqr()?.sum((1, 2, 3))?.sqrt()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let gradient_penalty = grad_norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / b as f64;
    let coef: Vec<f64> = grad_norms.iter().map(|&n| if n > 0.0 { 2.0 * (n - 1.0) / n } else { 0.0 }).collect();
    let coef = Tensor::from_vec(coef, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(g.dtype())?;
    let direction = g.broadcast_mul(&coef)?;
    let (_, tangent) = critic.score_with_tangent(&x_hat, &direction)?;
    let surrogate = tangent.mean(0)?;

    let critic_objective = if gp_weight != 0.0 { (&wasserstein + (surrogate * gp_weight)?)? } else { wasserstein.clone() };
    let w_value = wasserstein.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    Ok(WganLosses {
        critic_loss: w_value + gp_weight * gradient_penalty,
        critic_objective,
        generator_loss,
        gradient_penalty,
        grad_norms,
    })
}

/// Mean of a rank-0 or single-element tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.flatten_all()?.mean(D::Minus1)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    struct ConstantCritic(f64);

    impl Critic for ConstantCritic {
        fn score(&self, x: &Tensor) -> Result<Tensor> {
            Ok(Tensor::full(self.0, x.dim(0)?, &Device::Cpu)?)
        }
        fn score_with_tangent(&self, x: &Tensor, _v: &Tensor) -> Result<(Tensor, Tensor)> {
            let s = self.score(x)?;
            Ok((s.clone(), s.zeros_like()?))
        }
    }

    #[test]
    fn pixel_loss_constant_offset() {
        let i = random((2, 1, 8, 8), 1);
        let s = (&i + 0.1).unwrap();
        let mask = i.ones_like().unwrap();
        for v in pixel_loss(&s, &i, &mask).unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 0.1).abs() < 1e-12);
        }
        assert!(matches!(pixel_loss(&s, &i, &mask.zeros_like().unwrap()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ms_ssim_self_is_one() {
        let x = random((2, 1, 64, 64), 2);
        assert_eq!(ms_ssim(&x, &x, 3).unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
        assert!(matches!(ms_ssim(&x, &x, 4), Err(Error::Config(_))));
    }

    #[test]
    fn total_loss_zero_at_truth() {
        let x = random((2, 1, 64, 64), 3);
        let mask = x.ones_like().unwrap();
        let l = total_loss(&x, &x, &mask, &LossWeights::default(), None).unwrap();
        assert_eq!(scalar(&l).unwrap(), 0.0);
    }

    #[test]
    fn constant_critic_losses() {
        let real = random((3, 1, 16, 16), 4);
        let fake = random((3, 1, 16, 16), 5);
        let w = wgan_losses(&ConstantCritic(0.7), &real, &fake, 10.0, &[0.2, 0.5, 0.9]).unwrap();
        assert!((w.critic_loss - 10.0).abs() < 1e-12);
        assert!((scalar(&w.generator_loss).unwrap() + 0.7).abs() < 1e-12);
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gp_weight: -1.0, ..Default::default() }.validate().is_err());
    }
}
