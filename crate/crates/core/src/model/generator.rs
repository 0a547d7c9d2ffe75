//! Multi-encoder U-Net built from multi-conditional blocks.
//!
//! Each block is a 3x3 convolution whose filters are modulated by the
//! condition (Filter Scaling: one scalar per `C_out x C_in` filter), followed
//! by conditional instance normalization driven by the adversarial weight and
//! a per-channel PReLU. Three encoders (low-resolution map, T1, FLAIR) are
//! fused level by level; one decoder with skip connections produces a
//! residual on top of the zero-filled input, and hard data consistency
//! restores the measured k-space band.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ConditionTuple, NetConfig, Variant, NUM_ENCODERS, NUM_LEVELS};
use super::consistency::BandProjector;
use super::conv::per_sample_conv3x3;
use super::norm::{instance_normalize, modulate, prelu};
use super::params::{normal_values, MultiHeadMlp, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::metabolite::Metabolite;

pub const ENCODER_NAMES: [&str; NUM_ENCODERS] = ["lr", "t1", "flair"];

/// Multiplier applied to the adversarial weight before it enters the normalization MLP.
pub const LAMBDA_INPUT_SCALE: f64 = 10.0;

// Independent RNG streams so that variants built from the same seed share base weights.
const STREAM_BASE: u64 = 1;
const STREAM_COND: u64 = 2;
const STREAM_EMBED: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    /// Output head layers skip normalization and rectification.
    pub normalized: bool,
}

/// Every convolution of the generator, in forward order.
pub fn layer_plan(channels: &[usize]) -> Vec<LayerSpec> {
    let mut plan = Vec::new();
    let spec = |name: String, c_in, c_out, normalized| LayerSpec { name, c_in, c_out, normalized };
    for enc in ENCODER_NAMES {
        for l in 0..NUM_LEVELS {
            let c_in = if l == 0 { 1 } else { channels[l - 1] };
            plan.push(spec(format!("enc.{enc}.{l}"), c_in, channels[l], true));
        }
    }
    for l in 0..NUM_LEVELS {
        plan.push(spec(format!("fuse.{l}"), NUM_ENCODERS * channels[l], channels[l], true));
    }
    for l in (0..NUM_LEVELS - 1).rev() {
        plan.push(spec(format!("dec.{l}"), channels[l + 1] + channels[l], channels[l], true));
    }
    plan.push(spec("head".into(), channels[0], 1, false));
    plan
}

#[derive(Debug, Clone)]
struct ConvLayer {
    spec: LayerSpec,
    weight: Option<Tensor>,
    /// Only the output head has a bias; normalization would cancel the others.
    bias: Option<Tensor>,
    slope: Option<Tensor>,
    /// Position among normalized layers.
    norm_slot: Option<usize>,
}

/// Forced settings used to check that conditioning reduces to the plain network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    /// Use scale 1 for every filter instead of the scale MLP's output.
    pub unit_filter_scales: bool,
    /// Use scale 1 and shift 0 in every conditional normalization.
    pub identity_norm: bool,
}

/// Batched generator inputs, each `(B, 1, N, N)`.
#[derive(Debug, Clone)]
pub struct GeneratorInputs {
    /// Zero-filled reconstruction of the measured low-resolution k-space.
    pub lowres: Tensor,
    pub t1: Tensor,
    pub flair: Tensor,
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// Network output before data consistency.
    pub raw: Tensor,
    /// Output after hard data consistency.
    pub output: Tensor,
}

struct LayerMods {
    weights: Vec<Tensor>,
    norm: Vec<Option<(Tensor, Tensor)>>,
    feature: Vec<Option<(Tensor, Tensor)>>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: NetConfig,
    store: ParamStore,
    layers: Vec<ConvLayer>,
    embed: Option<Tensor>,
    scale_net: Option<MultiHeadMlp>,
    norm_net: Option<MultiHeadMlp>,
    feature_net: Option<MultiHeadMlp>,
    hyper_net: Option<MultiHeadMlp>,
    projector: BandProjector,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Generator {
    pub fn new(config: NetConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let variant = config.variant;
        let plan = layer_plan(&config.channels);
        let mut store = ParamStore::new(dtype);
        let mut base_rng = stream(seed, STREAM_BASE);

        let mut layers = Vec::with_capacity(plan.len());
        let mut norm_slots = 0;
        for spec in &plan {
            let fan_in = spec.c_in * 9;
            let mut std = (2.0 / fan_in as f64).sqrt();
            if !spec.normalized {
                std *= 0.1;
            }
            let count = spec.c_out * spec.c_in * 9;
            let init = normal_values(&mut base_rng, count, std);
            let weight = if variant == Variant::Hypernet {
                None
            } else {
                Some(store.insert(format!("{}.weight", spec.name), &[spec.c_out, spec.c_in, 3, 3], init)?)
            };
            let bias = if spec.normalized {
                None
            } else {
                Some(store.insert(format!("{}.bias", spec.name), &[spec.c_out], vec![0.0; spec.c_out])?)
            };
            let (slope, norm_slot) = if spec.normalized {
                let s = store.insert(format!("{}.prelu", spec.name), &[spec.c_out], vec![0.25; spec.c_out])?;
                norm_slots += 1;
                (Some(s), Some(norm_slots - 1))
            } else {
                (None, None)
            };
            layers.push(ConvLayer { spec: spec.clone(), weight, bias, slope, norm_slot });
        }

        let mut cond_rng = stream(seed, STREAM_COND);
        let filter_sizes: Vec<usize> = plan.iter().map(|s| s.c_out * s.c_in).collect();
        let norm_sizes: Vec<usize> = plan.iter().filter(|s| s.normalized).map(|s| 2 * s.c_out).collect();
        let affine_bias = |sizes: &[usize], i: usize| {
            let c = sizes[i] / 2;
            let mut b = vec![1.0; c];
            b.extend(std::iter::repeat_n(0.0, c));
            b
        };

        let embed = if variant.is_metabolite_aware() {
            let mut rng = stream(seed, STREAM_EMBED);
            let vals = normal_values(&mut rng, Metabolite::COUNT * config.embed_dim, 1.0);
            Some(store.insert("embed.table", &[Metabolite::COUNT, config.embed_dim], vals)?)
        } else {
            None
        };

        let scale_net = if variant.uses_filter_scaling() {
            let input = 1 + if variant.is_metabolite_aware() { config.embed_dim } else { 0 };
            Some(MultiHeadMlp::new(
                &mut store,
                "scale_net",
                input,
                config.scale_net.depth,
                config.scale_net.width,
                &filter_sizes,
                |i, _| vec![1.0; filter_sizes[i]],
                &mut cond_rng,
            )?)
        } else {
            None
        };

        let norm_net = if variant.is_conditioned() {
            Some(MultiHeadMlp::new(
                &mut store,
                "norm_net",
                1,
                config.norm_net.depth,
                config.norm_net.width,
                &norm_sizes,
                |i, _| affine_bias(&norm_sizes, i),
                &mut cond_rng,
            )?)
        } else {
            None
        };

        let feature_net = if variant == Variant::AmLayer {
            Some(MultiHeadMlp::new(
                &mut store,
                "am_net",
                1,
                config.baseline_net.depth,
                config.baseline_net.width,
                &norm_sizes,
                |i, _| affine_bias(&norm_sizes, i),
                &mut cond_rng,
            )?)
        } else {
            None
        };

        let hyper_net = if variant == Variant::Hypernet {
            let kernel_sizes: Vec<usize> = filter_sizes.iter().map(|s| s * 9).collect();
            let stds: Vec<f64> = plan
                .iter()
                .map(|s| {
                    let std = (2.0 / (s.c_in * 9) as f64).sqrt();
                    if s.normalized {
                        std
                    } else {
                        std * 0.1
                    }
                })
                .collect();
            Some(MultiHeadMlp::new(
                &mut store,
                "hyper_net",
                1,
                config.baseline_net.depth,
                config.baseline_net.width,
                &kernel_sizes,
                |i, rng| normal_values(rng, kernel_sizes[i], stds[i]),
                &mut cond_rng,
            )?)
        } else {
            None
        };

        let projector = BandProjector::new(config.grid_size, dtype)?;
        Ok(Generator { config, store, layers, embed, scale_net, norm_net, feature_net, hyper_net, projector })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn projector(&self) -> &BandProjector {
        &self.projector
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Row of the trainable embedding table for `m`.
    pub fn metabolite_embed(&self, m: Metabolite) -> Result<Tensor> {
        let table = self
            .embed
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} has no metabolite embedding", self.variant())))?;
        Ok(table.get(m.index())?)
    }

    /// `[n / N]`, extended with the metabolite embedding for metabolite-aware variants; `(B, 1)` or `(B, 1 + E)`.
    pub fn condition_vector(&self, conds: &[ConditionTuple]) -> Result<Tensor> {
        let dev = Device::Cpu;
        let big = self.config.grid_size as f64;
        let ratios: Vec<f64> = conds.iter().map(|c| c.n as f64 / big).collect();
        let res = Tensor::from_vec(ratios, (conds.len(), 1), &dev)?.to_dtype(self.dtype())?;
        match &self.embed {
            Some(table) if self.variant().is_metabolite_aware() => {
                let ids: Vec<u32> = conds.iter().map(|c| c.metabolite.index() as u32).collect();
                let ids = Tensor::from_vec(ids, conds.len(), &dev)?;
                let rows = table.index_select(&ids, 0)?;
                Ok(Tensor::cat(&[&res, &rows], 1)?)
            }
            _ => Ok(res),
        }
    }

    fn lambda_input(&self, conds: &[ConditionTuple]) -> Result<Tensor> {
        let vals: Vec<f64> = conds.iter().map(|c| c.lambda_adv * LAMBDA_INPUT_SCALE).collect();
        Ok(Tensor::from_vec(vals, (conds.len(), 1), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    fn layer_mods(&self, conds: &[ConditionTuple], ov: Overrides) -> Result<LayerMods> {
        let b = conds.len();
        let mut weights = Vec::with_capacity(self.layers.len());
        let scale_hidden = match (&self.scale_net, ov.unit_filter_scales) {
            (Some(net), false) => Some(net.trunk(&self.condition_vector(conds)?)?),
            _ => None,
        };
        let hyper_hidden = match &self.hyper_net {
            Some(net) => Some(net.trunk(&self.condition_vector(conds)?)?),
            None => None,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let (c_out, c_in) = (layer.spec.c_out, layer.spec.c_in);
            let w = if let (Some(net), Some(h)) = (&self.hyper_net, &hyper_hidden) {
                net.head(i, h)?.reshape((b, c_out, c_in, 3, 3))?
            } else {
                let base = layer.weight.as_ref().expect("non-hypernet layers own weights").unsqueeze(0)?;
                match (&self.scale_net, &scale_hidden) {
                    (Some(net), Some(h)) => {
                        let scales = net.head(i, h)?.reshape((b, c_out, c_in, 1, 1))?;
                        base.broadcast_mul(&scales)?
                    }
                    _ => base,
                }
            };
            weights.push(w);
        }

        let slots = self.layers.iter().filter(|l| l.norm_slot.is_some()).count();
        let affine = |net: &Option<MultiHeadMlp>, input: Option<Tensor>, skip: bool| -> Result<Vec<Option<(Tensor, Tensor)>>> {
            match (net, input) {
                (Some(net), Some(x)) if !skip => {
                    let h = net.trunk(&x)?;
                    (0..slots)
                        .map(|s| {
                            let out = net.head(s, &h)?;
                            let c = out.dim(1)? / 2;
                            Ok(Some((out.narrow(1, 0, c)?, out.narrow(1, c, c)?)))
                        })
                        .collect()
                }
                _ => Ok(vec![None; slots]),
            }
        };
        let norm_input = if self.norm_net.is_some() { Some(self.lambda_input(conds)?) } else { None };
        let norm = affine(&self.norm_net, norm_input, ov.identity_norm)?;
        let feat_input = if self.feature_net.is_some() { Some(self.condition_vector(conds)?) } else { None };
        let feature = affine(&self.feature_net, feat_input, false)?;
        Ok(LayerMods { weights, norm, feature })
    }

    fn block(&self, idx: usize, x: &Tensor, mods: &LayerMods) -> Result<Tensor> {
        let layer = &self.layers[idx];
        let y = per_sample_conv3x3(x, &mods.weights[idx])?;
        let Some(slot) = layer.norm_slot else {
            let c = layer.spec.c_out;
            let bias = layer.bias.as_ref().expect("the head carries a bias");
            return Ok(y.broadcast_add(&bias.reshape((1, c, 1, 1))?)?);
        };
        let mut y = instance_normalize(&y)?;
        if let Some((scale, shift)) = &mods.norm[slot] {
            y = modulate(&y, scale, shift)?;
        }
        if let Some((scale, shift)) = &mods.feature[slot] {
            y = modulate(&y, scale, shift)?;
        }
        prelu(&y, layer.slope.as_ref().expect("normalized layers carry a slope"))
    }

    fn check_inputs(&self, inputs: &GeneratorInputs, conds: &[ConditionTuple]) -> Result<usize> {
        let big = self.config.grid_size;
        let b = conds.len();
        for (name, t) in [("lowres", &inputs.lowres), ("t1", &inputs.t1), ("flair", &inputs.flair)] {
            if t.dims() != [b, 1, big, big] {
                return Err(shape_err(format!("{name} must be ({b}, 1, {big}, {big}), got {:?}", t.dims())));
            }
        }
        for c in conds {
            c.validate(big)?;
        }
        Ok(b)
    }

    pub fn forward(&self, inputs: &GeneratorInputs, conds: &[ConditionTuple]) -> Result<GeneratorOutput> {
        self.forward_with(inputs, conds, Overrides::default())
    }

    pub fn forward_with(&self, inputs: &GeneratorInputs, conds: &[ConditionTuple], ov: Overrides) -> Result<GeneratorOutput> {
        let measured: Vec<usize> = conds.iter().map(|c| c.n).collect();
        self.forward_measured(inputs, conds, &measured, ov)
    }

    /// Forward pass where the conditioning resolution may differ from the
    /// resolution actually measured; data consistency always uses `measured`.
    pub fn forward_measured(
        &self,
        inputs: &GeneratorInputs,
        conds: &[ConditionTuple],
        measured: &[usize],
        ov: Overrides,
    ) -> Result<GeneratorOutput> {
        self.check_inputs(inputs, conds)?;
        if measured.len() != conds.len() {
            return Err(shape_err(format!("{} measured resolutions for {} conditions", measured.len(), conds.len())));
        }
        let dtype = self.dtype();
        let lowres = inputs.lowres.to_dtype(dtype)?;
        let sources = [lowres.clone(), inputs.t1.to_dtype(dtype)?, inputs.flair.to_dtype(dtype)?];
        let mods = self.layer_mods(conds, ov)?;

        let mut idx = 0;
        let mut encoded: Vec<Vec<Tensor>> = Vec::with_capacity(NUM_ENCODERS);
        for src in &sources {
            let mut x = src.clone();
            let mut levels = Vec::with_capacity(NUM_LEVELS);
            for l in 0..NUM_LEVELS {
                if l > 0 {
                    x = max_pool2(&x)?;
                }
                x = self.block(idx, &x, &mods)?;
                idx += 1;
                levels.push(x.clone());
            }
            encoded.push(levels);
        }
        let mut fused = Vec::with_capacity(NUM_LEVELS);
        for l in 0..NUM_LEVELS {
            let parts: Vec<&Tensor> = encoded.iter().map(|e| &e[l]).collect();
            fused.push(self.block(idx, &Tensor::cat(&parts, 1)?, &mods)?);
            idx += 1;
        }
        let mut d = fused[NUM_LEVELS - 1].clone();
        for l in (0..NUM_LEVELS - 1).rev() {
            let (_, _, h, w) = fused[l].dims4()?;
            let up = d.upsample_nearest2d(h, w)?;
            d = self.block(idx, &Tensor::cat(&[&up, &fused[l]], 1)?, &mods)?;
            idx += 1;
        }
        let residual = self.block(idx, &d, &mods)?;
        let raw = (&lowres + residual)?;
        let output = self.projector.data_consistency(&raw, &lowres, measured)?;
        Ok(GeneratorOutput { raw, output })
    }
}

/// Exact trainable parameter count of a configuration, from layer arithmetic alone.
/// 2x2 max pooling, stride 2. Built from a reshape and a reduction because the
/// gradient of candle's `max_pool2d` is scaled by the window area.
fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    let x = x.narrow(2, 0, 2 * h2)?.narrow(3, 0, 2 * w2)?;
    Ok(x.reshape((b, c, h2, 2, w2, 2))?.max(5)?.max(3)?)
}

pub fn count_params(config: &NetConfig) -> usize {
    let plan = layer_plan(&config.channels);
    let variant = config.variant;
    let mut total = 0;
    for s in &plan {
        if variant != Variant::Hypernet {
            total += s.c_out * s.c_in * 9;
        }
        // Normalized layers carry PReLU slopes, the head a bias.
        total += s.c_out;
    }
    let filter_sizes: Vec<usize> = plan.iter().map(|s| s.c_out * s.c_in).collect();
    let norm_sizes: Vec<usize> = plan.iter().filter(|s| s.normalized).map(|s| 2 * s.c_out).collect();
    if variant.is_metabolite_aware() {
        total += Metabolite::COUNT * config.embed_dim;
    }
    if variant.uses_filter_scaling() {
        let input = 1 + if variant.is_metabolite_aware() { config.embed_dim } else { 0 };
        total += MultiHeadMlp::param_count(input, config.scale_net.depth, config.scale_net.width, &filter_sizes);
    }
    if variant.is_conditioned() {
        total += MultiHeadMlp::param_count(1, config.norm_net.depth, config.norm_net.width, &norm_sizes);
    }
    if variant == Variant::AmLayer {
        total += MultiHeadMlp::param_count(1, config.baseline_net.depth, config.baseline_net.width, &norm_sizes);
    }
    if variant == Variant::Hypernet {
        let kernel_sizes: Vec<usize> = filter_sizes.iter().map(|s| s * 9).collect();
        total += MultiHeadMlp::param_count(1, config.baseline_net.depth, config.baseline_net.width, &kernel_sizes);
    }
    total
}
