use candle_core::Tensor;

use crate::error::{shape_err, Result};

/// Added to the variance before the square root.
pub const NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel standardization over the spatial dims of `(B, C, H, W)`.
pub fn instance_normalize(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(shape_err(format!("instance norm expects (B, C, H, W), got {:?}", x.dims())));
    }
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    let std = (var + NORM_EPS)?.sqrt()?;
    Ok(centered.broadcast_div(&std)?)
}

/// `scale * (x - mean) / std + shift` with per-sample `(B, C)` scale and shift.
pub fn conditional_instance_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let normalized = instance_normalize(x)?;
    modulate(&normalized, scale, shift)
}

/// Channel-wise affine modulation with `(B, C)` or `(1, C)` parameters.
pub fn modulate(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let expect = |t: &Tensor| -> Result<Tensor> {
        let (tb, tc) = t.dims2()?;
        if tc != c || (tb != b && tb != 1) {
            return Err(shape_err(format!("modulation {:?} does not fit features {:?}", t.dims(), x.dims())));
        }
        Ok(t.reshape((tb, tc, 1, 1))?)
    };
    Ok(x.broadcast_mul(&expect(scale)?)?.broadcast_add(&expect(shift)?)?)
}

/// Parametric rectifier with one trainable slope per channel.
pub fn prelu(x: &Tensor, slope: &Tensor) -> Result<Tensor> {
    let c = slope.dim(0)?;
    let slope = slope.reshape((1, c, 1, 1))?;
    let neg = x.neg()?.relu()?;
    Ok((x.relu()? - neg.broadcast_mul(&slope)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, DType};
    use rand::{Rng, SeedableRng};

    fn features(seed: u64) -> (Tensor, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..2 * 3 * 5 * 4).map(|_| rng.random_range(-2.0..3.0)).collect();
        (Tensor::from_vec(v.clone(), (2, 3, 5, 4), &Device::Cpu).unwrap(), v)
    }

    #[test]
    fn identity_modulation_standardizes() {
        let (x, _) = features(1);
        let ones = Tensor::ones((2, 3), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        let y = conditional_instance_norm(&x, &ones, &zeros).unwrap();
        let mean = y.mean_keepdim((2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let var = y.sqr().unwrap().mean_keepdim((2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (m, v) in mean.iter().zip(var.iter()) {
            assert!(m.abs() < 1e-5);
            assert!((v.sqrt() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_scale_gives_constant_shift() {
        let (x, _) = features(2);
        let zeros = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let shift = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6], (2, 3), &Device::Cpu).unwrap();
        let y = conditional_instance_norm(&x, &zeros, &shift).unwrap();
        let expected = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        for b in 0..2 {
            for c in 0..3 {
                let plane = y.get(b).unwrap().get(c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                assert!(plane.iter().all(|v| *v == expected[b * 3 + c]));
            }
        }
    }

    #[test]
    fn zero_variance_channel_stays_finite() {
        let x = Tensor::ones((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y = instance_normalize(&x).unwrap();
        assert!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| v.is_finite() && *v == 0.0));
    }

    #[test]
    fn prelu_slopes() {
        let x = Tensor::from_vec(vec![-2.0, 3.0, -1.0, 4.0], (1, 2, 1, 2), &Device::Cpu).unwrap();
        let slope = Tensor::from_vec(vec![0.5, 0.1], 2, &Device::Cpu).unwrap();
        let y = prelu(&x, &slope).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![-1.0, 3.0, -0.1, 4.0]);
    }

    #[test]
    fn mismatched_modulation_rejected() {
        let (x, _) = features(3);
        let bad = Tensor::ones((2, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(modulate(&x, &bad, &bad).is_err());
    }
}
