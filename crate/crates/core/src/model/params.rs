use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable arrays. Names are stable and double as checkpoint keys.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore { vars: BTreeMap::new(), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars.get(name).ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter's value in place, keeping its shape and dtype.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.get(name)?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

pub(crate) fn normal_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        weight_std: f64,
        bias: Vec<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{prefix}.weight"),
            &[fan_out, fan_in],
            normal_values(rng, fan_in * fan_out, weight_std),
        )?;
        let bias = store.insert(format!("{prefix}.bias"), &[fan_out], bias)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Shared trunk plus one output head per modulated layer.
#[derive(Debug, Clone)]
pub struct MultiHeadMlp {
    trunk: Vec<Linear>,
    heads: Vec<Linear>,
}

impl MultiHeadMlp {
    /// `head_bias(i)` gives the initial bias of head `i`; head weights start near zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        depth: usize,
        width: usize,
        head_sizes: &[usize],
        head_bias: impl Fn(usize, &mut ChaCha8Rng) -> Vec<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut trunk = Vec::with_capacity(depth - 1);
        let mut fan_in = input;
        for i in 0..depth - 1 {
            let std = (2.0 / fan_in as f64).sqrt();
            trunk.push(Linear::new(store, &format!("{prefix}.trunk.{i}"), fan_in, width, std, vec![0.0; width], rng)?);
            fan_in = width;
        }
        let head_std = 1e-2 / (width as f64).sqrt();
        let mut heads = Vec::with_capacity(head_sizes.len());
        for (i, &size) in head_sizes.iter().enumerate() {
            let bias = head_bias(i, rng);
            heads.push(Linear::new(store, &format!("{prefix}.head.{i}"), width, size, head_std, bias, rng)?);
        }
        Ok(MultiHeadMlp { trunk, heads })
    }

    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.trunk {
            h = leaky_relu(&layer.forward(&h)?, 0.2)?;
        }
        Ok(h)
    }

    pub fn head(&self, i: usize, hidden: &Tensor) -> Result<Tensor> {
        self.heads[i].forward(hidden)
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Closed-form parameter count.
    pub fn param_count(input: usize, depth: usize, width: usize, head_sizes: &[usize]) -> usize {
        let mut n = Linear::param_count(input, width);
        n += (depth - 2) * Linear::param_count(width, width);
        n + head_sizes.iter().map(|&s| Linear::param_count(width, s)).sum::<usize>()
    }
}
