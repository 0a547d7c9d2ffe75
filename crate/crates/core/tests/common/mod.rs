//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mcm_sr::metrics::losses::{scalar, total_loss, LossWeights};
use mcm_sr::model::{ConditionTuple, Generator, GeneratorInputs, MlpShape, NetConfig, Variant};
use mcm_sr::phantom::kspace;
use mcm_sr::{Field, Metabolite};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_field(n: usize, seed: u64) -> Field {
    let mut r = rng(seed);
    Array2::from_shape_fn((n, n), |_| r.random::<f64>())
}

pub fn random_mask(n: usize, keep: f64, seed: u64) -> Array2<bool> {
    let mut r = rng(seed);
    Array2::from_shape_fn((n, n), |_| r.random::<f64>() < keep)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn tensor4(values: &[f64], dims: (usize, usize, usize, usize), dtype: DType) -> Tensor {
    Tensor::from_vec(values.to_vec(), dims, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Zero-padded 3x3 cross-correlation with per-sample filters `w[b][o][i][kh][kw]`.
pub fn conv3x3_oracle(x: &[f64], (b, c_in, h, w): (usize, usize, usize, usize), filt: impl Fn(usize, usize, usize, usize, usize) -> f64, c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * c_out * h * w];
    for n in 0..b {
        for o in 0..c_out {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0;
                    for i in 0..c_in {
                        for kr in 0..3 {
                            for kc in 0..3 {
                                let (rr, cc) = (r as isize + kr as isize - 1, c as isize + kc as isize - 1);
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                acc += filt(n, o, i, kr, kc) * x[((n * c_in + i) * h + rr as usize) * w + cc as usize];
                            }
                        }
                    }
                    out[((n * c_out + o) * h + r) * w + c] = acc;
                }
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian evaluated at integer offsets from the centre.
pub fn gauss(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|k| (-((k as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// SSIM over 7x7 Gaussian windows fully inside the valid region, unit data range.
pub fn ssim_oracle(x: &Field, y: &Field, mask: &Array2<bool>) -> f64 {
    let g = gauss(7, 1.5);
    let (c1, c2) = (1e-4, 9e-4);
    let (h, w) = x.dim();
    let mut vals = Vec::new();
    for r in 0..=h - 7 {
        for c in 0..=w - 7 {
            let mut ok = true;
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..7 {
                for j in 0..7 {
                    ok &= mask[[r + i, c + j]];
                    mx += g[i] * g[j] * x[[r + i, c + j]];
                    my += g[i] * g[j] * y[[r + i, c + j]];
                }
            }
            if !ok {
                continue;
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..7 {
                for j in 0..7 {
                    let (a, b) = (x[[r + i, c + j]] - mx, y[[r + i, c + j]] - my);
                    vx += g[i] * g[j] * a * a;
                    vy += g[i] * g[j] * b * b;
                    cov += g[i] * g[j] * a * b;
                }
            }
            vals.push((2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

pub fn masked_pairs<'a>(x: &'a Field, y: &'a Field, mask: &'a Array2<bool>) -> impl Iterator<Item = (f64, f64)> + 'a {
    x.iter().zip(y.iter()).zip(mask.iter()).filter(|(_, m)| **m).map(|((a, b), _)| (*a, *b))
}

pub fn psnr_oracle(x: &Field, y: &Field, mask: &Array2<bool>) -> f64 {
    let (mut se, mut k) = (0.0, 0.0);
    for (a, b) in masked_pairs(x, y, mask) {
        se += (a - b) * (a - b);
        k += 1.0;
    }
    let mse = se / k;
    if mse == 0.0 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

pub fn l1_oracle(x: &Field, y: &Field, mask: &Array2<bool>) -> f64 {
    let v: Vec<f64> = masked_pairs(x, y, mask).map(|(a, b)| (a - b).abs()).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Two-sided signed-rank p-value by enumerating every sign assignment of the non-zero differences.
pub fn wilcoxon_enumeration(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|v| {
            let less = abs.iter().filter(|u| *u < v).count() as f64;
            let equal = abs.iter().filter(|u| *u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let centre = total / 2.0;
    let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let dev = (observed - centre).abs();
    let mut extreme = 0u64;
    for signs in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w - centre).abs() >= dev - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

/// Very small network on a 16x16 grid for finite-difference checks.
pub fn toy_config(variant: Variant) -> NetConfig {
    let small = MlpShape { depth: 2, width: 4 };
    NetConfig {
        variant,
        channels: vec![2, 3, 4, 5, 6],
        grid_size: 16,
        scale_net: small,
        norm_net: small,
        baseline_net: small,
        embed_dim: 3,
        critic_channels: vec![2, 3, 4, 5],
        critic_hidden: 4,
    }
}

pub struct ToyBatch {
    pub inputs: GeneratorInputs,
    pub target: Tensor,
    pub mask: Tensor,
    pub conds: Vec<ConditionTuple>,
}

pub fn toy_batch(size: usize, n: usize, batch: usize, dtype: DType, seed: u64) -> ToyBatch {
    let mut lows = Vec::new();
    let mut targets = Vec::new();
    let mut t1 = Vec::new();
    let mut flair = Vec::new();
    let mut mask = Vec::new();
    for k in 0..batch as u64 {
        let target = random_field(size, seed * 10 + k);
        lows.extend(kspace::degrade(&target, n).unwrap().iter().copied());
        targets.extend(target.iter().copied());
        t1.extend(random_field(size, seed * 10 + k + 100).iter().copied());
        flair.extend(random_field(size, seed * 10 + k + 200).iter().copied());
        mask.extend(random_mask(size, 0.9, seed * 10 + k + 300).iter().map(|&m| f64::from(u8::from(m))));
    }
    let dims = (batch, 1, size, size);
    let metabolites = [Metabolite::Gly, Metabolite::Naa, Metabolite::TCho, Metabolite::Ins];
    ToyBatch {
        inputs: GeneratorInputs { lowres: tensor4(&lows, dims, dtype), t1: tensor4(&t1, dims, dtype), flair: tensor4(&flair, dims, dtype) },
        target: tensor4(&targets, dims, dtype),
        mask: tensor4(&mask, dims, dtype),
        conds: (0..batch).map(|k| ConditionTuple::new(n, metabolites[k % 4], 0.02 + 0.03 * k as f64)).collect(),
    }
}

pub fn generator_loss(g: &Generator, b: &ToyBatch) -> Tensor {
    let out = g.forward(&b.inputs, &b.conds).unwrap();
    total_loss(&out.output, &b.target, &b.mask, &LossWeights::default(), None).unwrap()
}

/// Largest relative error between analytic and central-difference gradients over
/// `per_tensor` sampled entries of every parameter.
pub fn generator_gradient_check(g: &Generator, b: &ToyBatch, per_tensor: usize, h: f64, seed: u64) -> (f64, usize, String) {
    let loss = generator_loss(g, b);
    let grads = loss.backward().unwrap();
    let mut r = rng(seed);
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (name, var) in g.params().iter() {
        let analytic = match grads.get(var.as_tensor()) {
            Some(t) => flat(t),
            None => vec![0.0; var.elem_count()],
        };
        let base = flat(var.as_tensor());
        for _ in 0..per_tensor.min(base.len()) {
            let idx = r.random_range(0..base.len());
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap().to_dtype(var.dtype()).unwrap()).unwrap();
                scalar(&generator_loss(g, b)).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), var.dims(), &Device::Cpu).unwrap().to_dtype(var.dtype()).unwrap()).unwrap();
            let a = analytic[idx];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            checked += 1;
            if err > worst.0 {
                worst = (err, format!("{name}[{idx}]: analytic {a:.6e} vs numeric {fd:.6e}"));
            }
        }
    }
    (worst.0, checked, worst.1)
}

/// Small on-disk dataset of `size`×`size` cases with nearly complete quality masks.
pub fn write_small_dataset(dir: &std::path::Path, size: usize, count: usize) -> Vec<String> {
    let spec = mcm_sr::phantom::PhantomSpec { grid_size: size, dropout_fraction: 0.0, border_band: 0, seed: 5, ..Default::default() };
    mcm_sr::phantom::write_dataset(dir, &spec, count).unwrap();
    (0..count).map(mcm_sr::phantom::case_id).collect()
}

/// Save an untrained toy generator as if it were the best checkpoint of a training run.
pub fn save_toy_run(run_dir: &std::path::Path, net: &NetConfig, train: &mcm_sr::train::TrainConfig) -> std::path::PathBuf {
    std::fs::create_dir_all(run_dir).unwrap();
    let g = Generator::new(net.clone(), train.seed, DType::F32).unwrap();
    let meta = mcm_sr::model::CheckpointMeta {
        seed: train.seed,
        train_config: Some(serde_json::to_value(train).unwrap()),
        epoch: Some(0),
        ..Default::default()
    };
    let path = run_dir.join("best.ckpt");
    mcm_sr::model::save_checkpoint(&path, &g, meta).unwrap();
    path
}

pub fn toy32(variant: Variant) -> NetConfig {
    NetConfig { grid_size: 32, ..toy_config(variant) }
}
