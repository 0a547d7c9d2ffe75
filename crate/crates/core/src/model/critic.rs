//! Unconditional Wasserstein critic: four stride-2 convolutions and two dense layers.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetConfig;
use super::params::{leaky_relu, normal_values, Linear, ParamStore};
use crate::error::{shape_err, Result};

pub const CRITIC_SLOPE: f64 = 0.2;
const CRITIC_STREAM: u64 = 11;

/// A scalar-valued image critic that can also push a tangent through itself.
pub trait Critic {
    /// `(B, 1, N, N)` images to `(B,)` scores.
    fn score(&self, x: &Tensor) -> Result<Tensor>;
    /// Scores together with the directional derivative of each score at `x` along `v`.
    /// The derivative stays differentiable with respect to the critic's parameters.
    fn score_with_tangent(&self, x: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)>;
}

#[derive(Debug, Clone)]
struct ConvStage {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConvCritic {
    store: ParamStore,
    stages: Vec<ConvStage>,
    hidden: Linear,
    out: Linear,
    grid_size: usize,
}

fn leaky_tangent(z: &Tensor, dz: &Tensor) -> Result<Tensor> {
    let pos = z.ge(0.0)?.to_dtype(z.dtype())?.detach();
    let gain = ((pos * (1.0 - CRITIC_SLOPE))? + CRITIC_SLOPE)?;
    Ok((dz * gain)?)
}

impl ConvCritic {
    pub fn new(config: &NetConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(CRITIC_STREAM);
        let mut store = ParamStore::new(dtype);
        let mut stages = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in config.critic_channels.iter().enumerate() {
            let std = (2.0 / (c_in * 16) as f64).sqrt();
            let weight =
                store.insert(format!("critic.conv.{i}.weight"), &[c_out, c_in, 4, 4], normal_values(&mut rng, c_out * c_in * 16, std))?;
            let bias = store.insert(format!("critic.conv.{i}.bias"), &[c_out], vec![0.0; c_out])?;
            stages.push(ConvStage { weight, bias });
            c_in = c_out;
        }
        let side = config.grid_size >> config.critic_channels.len();
        let flat = c_in * side * side;
        let h = config.critic_hidden;
        let hidden = Linear::new(&mut store, "critic.fc.0", flat, h, (2.0 / flat as f64).sqrt(), vec![0.0; h], &mut rng)?;
        let out = Linear::new(&mut store, "critic.fc.1", h, 1, (1.0 / h as f64).sqrt(), vec![0.0], &mut rng)?;
        Ok(ConvCritic { store, stages, hidden, out, grid_size: config.grid_size })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h != self.grid_size || w != self.grid_size {
            return Err(shape_err(format!("critic expects (B, 1, {g}, {g}), got {:?}", x.dims(), g = self.grid_size)));
        }
        Ok(())
    }

    fn conv(&self, stage: &ConvStage, x: &Tensor, with_bias: bool) -> Result<Tensor> {
        let y = x.conv2d(&stage.weight, 1, 2, 1, 1)?;
        if with_bias {
            let c = stage.bias.dim(0)?;
            Ok(y.broadcast_add(&stage.bias.reshape((1, c, 1, 1))?)?)
        } else {
            Ok(y)
        }
    }
}

impl Critic for ConvCritic {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let x = x.to_dtype(self.store.dtype())?;
        let mut a = x;
        for stage in &self.stages {
            a = leaky_relu(&self.conv(stage, &a, true)?, CRITIC_SLOPE)?;
        }
        let flat = a.flatten_from(1)?;
        let h = leaky_relu(&self.hidden.forward(&flat)?, CRITIC_SLOPE)?;
        Ok(self.out.forward(&h)?.squeeze(1)?)
    }

    fn score_with_tangent(&self, x: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(x)?;
        if v.dims() != x.dims() {
            return Err(shape_err("tangent must match the input shape"));
        }
        let dtype = self.store.dtype();
        let (mut a, mut da) = (x.to_dtype(dtype)?, v.to_dtype(dtype)?);
        for stage in &self.stages {
            let z = self.conv(stage, &a, true)?;
            let dz = self.conv(stage, &da, false)?;
            da = leaky_tangent(&z, &dz)?;
            a = leaky_relu(&z, CRITIC_SLOPE)?;
        }
        let (flat, dflat) = (a.flatten_from(1)?, da.flatten_from(1)?);
        let z = self.hidden.forward(&flat)?;
        let dz = dflat.matmul(&self.hidden.weight.t()?)?;
        let dh = leaky_tangent(&z, &dz)?;
        let h = leaky_relu(&z, CRITIC_SLOPE)?;
        let score = self.out.forward(&h)?.squeeze(1)?;
        let tangent = dh.matmul(&self.out.weight.t()?)?.squeeze(1)?;
        Ok((score, tangent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Variant;
    use candle_core::Device;
    use rand::Rng;

    fn toy() -> ConvCritic {
        let mut cfg = NetConfig::desk(Variant::Unconditioned);
        cfg.grid_size = 16;
        cfg.critic_channels = vec![2, 3, 4, 5];
        cfg.critic_hidden = 6;
        ConvCritic::new(&cfg, 3, DType::F64).unwrap()
    }

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn one_score_per_image() {
        let c = toy();
        let s = c.score(&random((3, 1, 16, 16), 1)).unwrap();
        assert_eq!(s.dims(), &[3]);
        assert!(c.score(&random((3, 1, 8, 8), 1)).is_err());
    }

    #[test]
    fn tangent_matches_finite_difference() {
        let c = toy();
        let x = random((2, 1, 16, 16), 4);
        let v = random((2, 1, 16, 16), 5);
        let (s, t) = c.score_with_tangent(&x, &v).unwrap();
        assert_eq!(s.to_vec1::<f64>().unwrap(), c.score(&x).unwrap().to_vec1::<f64>().unwrap());
        let h = 1e-6;
        let plus = c.score(&(&x + (&v * h).unwrap()).unwrap()).unwrap().to_vec1::<f64>().unwrap();
        let minus = c.score(&(&x - (&v * h).unwrap()).unwrap()).unwrap().to_vec1::<f64>().unwrap();
        for (i, t) in t.to_vec1::<f64>().unwrap().iter().enumerate() {
            let fd = (plus[i] - minus[i]) / (2.0 * h);
            assert!((t - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{t} vs {fd}");
        }
    }
}
