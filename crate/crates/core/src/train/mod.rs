//! Conditioned adversarial training loop.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::DType;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{collate, grid_samples, predict, Batch, FoldData, Sample};
use crate::error::{config_err, Error, Result};
use crate::metabolite::Metabolite;
use crate::metrics::losses::{scalar, wgan_losses, LossTerms};
use crate::metrics::{psnr, ssim};
use crate::model::{config_hash, save_checkpoint, CheckpointMeta, ConditionTuple, ConvCritic, Critic, Generator, NetConfig, Variant};
use crate::phantom::{AugmentDraw, PhantomCase};

/// Even resolutions the conditioned networks are trained on.
pub const TRAIN_RESOLUTIONS: [usize; 9] = [16, 18, 20, 22, 24, 26, 28, 30, 32];
pub const LAMBDA_MAX: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(config_err(format!("unknown preset `{other}`"))),
        }
    }
}

impl Preset {
    pub fn net_config(self, variant: Variant) -> NetConfig {
        match self {
            Preset::Desk => NetConfig::desk(variant),
            Preset::Paper => NetConfig::paper(variant),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Resolutions drawn uniformly per sample.
    pub n_values: Vec<usize>,
    /// Adversarial weights are drawn uniformly from `[0, lambda_max]`.
    pub lambda_max: f64,
    pub alpha: f64,
    pub gp_weight: f64,
    pub critic_steps_per_gen: usize,
    /// Random flips, quarter turns and shifts per sample.
    pub augment: bool,
    /// Stop after this many generator steps in total.
    pub max_steps: Option<usize>,
    /// Resolutions used for model selection.
    pub val_n_values: Vec<usize>,
    pub double_precision: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            preset: Preset::Paper,
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_values: TRAIN_RESOLUTIONS.to_vec(),
            lambda_max: LAMBDA_MAX,
            alpha: 0.84,
            gp_weight: 10.0,
            critic_steps_per_gen: 1,
            augment: true,
            max_steps: None,
            val_n_values: TRAIN_RESOLUTIONS.to_vec(),
            double_precision: false,
            seed,
        }
    }

    /// Short schedule on the reduced network.
    pub fn desk(seed: u64) -> Self {
        TrainConfig { preset: Preset::Desk, epochs: 20, learning_rate: 1e-3, ..Self::paper(seed) }
    }

    pub fn preset(preset: Preset, seed: u64) -> Self {
        match preset {
            Preset::Desk => Self::desk(seed),
            Preset::Paper => Self::paper(seed),
        }
    }

    /// Restrict training and validation to one resolution, as for single-scale networks.
    pub fn single_resolution(mut self, n: usize) -> Self {
        self.n_values = vec![n];
        self.val_n_values = vec![n];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.critic_steps_per_gen == 0 {
            return Err(config_err("batch size, epochs and critic steps must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(config_err("learning rate must be positive"));
        }
        if self.n_values.is_empty() || self.n_values.iter().chain(&self.val_n_values).any(|n| *n < 2 || n % 2 != 0) {
            return Err(config_err("resolutions must be even and at least 2"));
        }
        if self.val_n_values.is_empty() {
            return Err(config_err("validation needs at least one resolution"));
        }
        if !(self.lambda_max >= 0.0) || !(0.0..=1.0).contains(&self.alpha) || !(self.gp_weight >= 0.0) {
            return Err(config_err("loss weights out of range"));
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    /// Draw a full condition: resolution, metabolite and adversarial weight.
    pub fn sample_condition<R: Rng + ?Sized>(&self, rng: &mut R) -> ConditionTuple {
        let m = Metabolite::ALL[rng.random_range(0..Metabolite::COUNT)];
        self.sample_condition_for(rng, m)
    }

    /// Draw resolution and adversarial weight for a map of metabolite `m`.
    pub fn sample_condition_for<R: Rng + ?Sized>(&self, rng: &mut R, m: Metabolite) -> ConditionTuple {
        let n = self.n_values[rng.random_range(0..self.n_values.len())];
        let lambda = if self.lambda_max > 0.0 { rng.random_range(0.0..=self.lambda_max) } else { 0.0 };
        ConditionTuple::new(n, m, lambda)
    }
}

/// Batch-mean loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub pixel: f64,
    pub structural: f64,
    /// Mean over the batch of `lambda_b * (-critic(S_b))`.
    pub adversarial_weighted: f64,
    pub total: f64,
    pub critic_loss: Option<f64>,
    pub gradient_penalty: Option<f64>,
    pub lambda_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub ssim: f64,
    pub psnr: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub critic: ConvCritic,
    gen_opt: AdamW,
    critic_opt: AdamW,
    step: usize,
    track_gradients: bool,
    touched: BTreeSet<String>,
}

const CRITIC_SEED_OFFSET: u64 = 0x5eed;

fn any_nonzero(grads: &GradStore, var: &candle_core::Var) -> Result<bool> {
    match grads.get(var.as_tensor()) {
        Some(g) => Ok(scalar(&g.abs()?.max_all()?)? > 0.0),
        None => Ok(false),
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, net: NetConfig) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype();
        let generator = Generator::new(net.clone(), config.seed, dtype)?;
        let critic = ConvCritic::new(&net, config.seed.wrapping_add(CRITIC_SEED_OFFSET), dtype)?;
        let params = |lr| ParamsAdamW { lr, beta1: config.adam_beta1, beta2: config.adam_beta2, eps: config.adam_eps, weight_decay: 0.0 };
        let gen_opt = AdamW::new(generator.params().vars(), params(config.learning_rate))?;
        let critic_opt = AdamW::new(critic.params().vars(), params(config.learning_rate))?;
        Ok(Trainer { config, generator, critic, gen_opt, critic_opt, step: 0, track_gradients: false, touched: BTreeSet::new() })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Record which generator parameters receive a non-zero gradient from now on.
    pub fn track_gradients(&mut self, on: bool) {
        self.track_gradients = on;
    }

    /// Generator parameters that have not received a non-zero gradient while tracking.
    pub fn untouched_parameters(&self) -> Vec<String> {
        self.generator.params().names().filter(|n| !self.touched.contains(*n)).map(String::from).collect()
    }

    /// One critic update (skipped when every adversarial weight is zero) then one generator update.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<StepLosses> {
        let lambdas: Vec<f64> = batch.conds.iter().map(|c| c.lambda_adv).collect();
        let adversarial = lambdas.iter().any(|l| *l > 0.0);
        let out = self.generator.forward(&batch.inputs, &batch.conds)?;
        let masked_out = out.output.mul(&batch.mask)?;
        let real = batch.target.mul(&batch.mask)?;

        let (mut critic_loss, mut gradient_penalty) = (None, None);
        if adversarial {
            for _ in 0..self.config.critic_steps_per_gen {
                let eps: Vec<f64> = (0..lambdas.len()).map(|_| rng.random::<f64>()).collect();
                let w = wgan_losses(&self.critic, &real, &masked_out.detach(), self.config.gp_weight, &eps)?;
                let grads = w.critic_objective.backward()?;
                self.critic_opt.step(&grads)?;
                critic_loss = Some(w.critic_loss);
                gradient_penalty = Some(w.gradient_penalty);
            }
        }

        let adv = if adversarial { Some(self.critic.score(&masked_out)?.neg()?) } else { None };
        let terms = LossTerms::new(&out.output, &batch.target, &batch.mask, adv)?;
        let loss = terms.weighted(self.config.alpha, &lambdas)?;
        let pixel = scalar(&terms.pixel.mean(0)?)?;
        let structural = scalar(&terms.structural.mean(0)?)?;
        let adversarial_weighted = match &terms.adversarial {
            Some(a) => {
                let vals = a.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                vals.iter().zip(&lambdas).map(|(a, l)| a * l).sum::<f64>() / lambdas.len() as f64
            }
            None => 0.0,
        };
        let total = scalar(&loss)?;
        self.step += 1;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: json!({
                    "pixel": pixel, "structural": structural, "adversarial_weighted": adversarial_weighted,
                    "critic_loss": critic_loss, "conditions": batch.conds,
                })
                .to_string(),
            });
        }
        let grads = loss.backward()?;
        if self.track_gradients {
            for (name, var) in self.generator.params().iter() {
                if !self.touched.contains(name) && any_nonzero(&grads, var)? {
                    self.touched.insert(name.to_string());
                }
            }
        }
        self.gen_opt.step(&grads)?;
        Ok(StepLosses {
            step: self.step,
            pixel,
            structural,
            adversarial_weighted,
            total,
            critic_loss,
            gradient_penalty,
            lambda_mean: lambdas.iter().sum::<f64>() / lambdas.len() as f64,
        })
    }

    /// Mean SSIM and PSNR at zero adversarial weight over every case, metabolite and validation resolution.
    pub fn validate(&self, cases: &[PhantomCase]) -> Result<ValMetrics> {
        validate_generator(&self.generator, cases, &self.config.val_n_values)
    }
}

pub fn validate_generator(generator: &Generator, cases: &[PhantomCase], ns: &[usize]) -> Result<ValMetrics> {
    if cases.is_empty() {
        return Err(config_err("validation set is empty"));
    }
    let samples = grid_samples(cases, &Metabolite::ALL, ns, 0.0)?;
    let outputs = predict(generator, &samples)?;
    let (mut s, mut p) = (0.0, 0.0);
    for (sample, out) in samples.iter().zip(&outputs) {
        s += ssim(out, &sample.target, &sample.mask)?;
        p += psnr(out, &sample.target, &sample.mask, 1.0)?;
    }
    let k = samples.len() as f64;
    Ok(ValMetrics { ssim: s / k, psnr: p / k })
}

/// Shuffled (case, metabolite) pairs for one epoch.
pub fn epoch_order(num_cases: usize, seed: u64, epoch: usize) -> Vec<(usize, Metabolite)> {
    let mut items: Vec<(usize, Metabolite)> =
        (0..num_cases).flat_map(|c| Metabolite::ALL.into_iter().map(move |m| (c, m))).collect();
    let mut rng = epoch_rng(seed, epoch, 0);
    items.shuffle(&mut rng);
    items
}

fn epoch_rng(seed: u64, epoch: usize, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64 + 1) << 8) | lane);
    rng
}

/// Assemble the batches of one epoch; each sample draws its own condition and augmentation.
pub fn epoch_batches(config: &TrainConfig, cases: &[PhantomCase], epoch: usize) -> Result<Vec<Vec<Sample>>> {
    let order = epoch_order(cases.len(), config.seed, epoch);
    let mut rng = epoch_rng(config.seed, epoch, 1);
    let mut batches = Vec::new();
    for chunk in order.chunks(config.batch_size) {
        let mut samples = Vec::with_capacity(chunk.len());
        for &(c, m) in chunk {
            let cond = config.sample_condition_for(&mut rng, m);
            let draw = if config.augment { AugmentDraw::sample(&mut rng) } else { AugmentDraw::default() };
            samples.push(Sample::augmented(&cases[c], cond, &draw)?);
        }
        batches.push(samples);
    }
    Ok(batches)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_ssim: f64,
    pub val_psnr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_epoch: usize,
    pub best_val_ssim: f64,
    pub epochs: Vec<EpochRecord>,
    /// Generator parameters that never received a non-zero gradient in the first epoch.
    pub untouched_parameters: Vec<String>,
    pub critic_updates: usize,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const TRAIN_SUMMARY: &str = "train_summary.json";

fn write_record(log: &mut BufWriter<File>, value: serde_json::Value) -> Result<()> {
    serde_json::to_writer(&mut *log, &value)?;
    log.write_all(b"\n")?;
    Ok(())
}

/// Full training run; writes checkpoints, a JSON-lines log and a summary into `out_dir`.
pub fn train(config: &TrainConfig, net: &NetConfig, data: &FoldData, out_dir: &Path) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(config_err("training set is empty"));
    }
    fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(config.clone(), net.clone())?;
    let hash = config_hash(&(config, net))?;
    let meta = |epoch: usize, val: f64| CheckpointMeta {
        seed: config.seed,
        train_config_hash: hash.clone(),
        train_config: serde_json::to_value(config).ok(),
        epoch: Some(epoch),
        val_ssim: Some(val),
    };
    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path)?);
    write_record(&mut log, json!({"kind": "start", "variant": net.variant, "config": config, "net": net, "config_hash": hash}))?;

    let mut epochs = Vec::new();
    let (mut best_epoch, mut best_val) = (0, f64::NEG_INFINITY);
    let mut untouched = Vec::new();
    let mut critic_updates = 0;
    let best_path = out_dir.join(BEST_CHECKPOINT);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        trainer.track_gradients(epoch == 0);
        let mut rng = epoch_rng(config.seed, epoch, 2);
        let mut losses = Vec::new();
        let mut stop = false;
        for samples in epoch_batches(config, &data.train, epoch)? {
            let batch = collate(&samples, config.dtype())?;
            let step = match trainer.train_step(&batch, &mut rng) {
                Ok(s) => s,
                Err(e @ Error::NonFinite { .. }) => {
                    write_record(&mut log, json!({"kind": "abort", "epoch": epoch, "error": e.to_string()}))?;
                    log.flush()?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if step.critic_loss.is_some() {
                critic_updates += config.critic_steps_per_gen;
            }
            losses.push(step.total);
            write_record(&mut log, json!({"kind": "step", "epoch": epoch, "losses": step}))?;
            if config.max_steps.is_some_and(|m| trainer.steps_taken() >= m) {
                stop = true;
                break;
            }
        }
        if epoch == 0 {
            untouched = trainer.untouched_parameters();
        }
        let val = trainer.validate(&data.val)?;
        finish_epoch(&mut epochs, epoch, &losses, val, started);
        if val.ssim > best_val {
            (best_epoch, best_val) = (epoch, val.ssim);
            save_checkpoint(&best_path, &trainer.generator, meta(epoch, val.ssim))?;
        }
        write_record(&mut log, json!({"kind": "epoch", "record": epochs.last()}))?;
        log.flush()?;
        log::info!("epoch {epoch}: loss {:.5} val ssim {:.4}", epochs.last().map(|e| e.train_loss).unwrap_or(0.0), val.ssim);
        if stop {
            break;
        }
    }
    let last = epochs.last().expect("at least one epoch");
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_path, &trainer.generator, meta(last.epoch, last.val_ssim))?;
    log.flush()?;
    let outcome = TrainOutcome {
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        log: log_path,
        best_epoch,
        best_val_ssim: best_val,
        epochs,
        untouched_parameters: untouched,
        critic_updates,
    };
    fs::write(out_dir.join(TRAIN_SUMMARY), serde_json::to_vec_pretty(&outcome)?)?;
    Ok(outcome)
}

fn finish_epoch(epochs: &mut Vec<EpochRecord>, epoch: usize, losses: &[f64], val: ValMetrics, started: Instant) {
    epochs.push(EpochRecord {
        epoch,
        steps: losses.len(),
        train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        val_ssim: val.ssim,
        val_psnr: val.psnr,
        seconds: started.elapsed().as_secs_f64(),
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_frequencies_are_uniform() {
        let cfg = TrainConfig::desk(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 100_000;
        let mut counts = [0usize; 9];
        for _ in 0..draws {
            let c = cfg.sample_condition(&mut rng);
            assert!(c.n % 2 == 0 && (0.0..=0.1).contains(&c.lambda_adv));
            counts[(c.n - 16) / 2] += 1;
        }
        let expected = draws as f64 / 9.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // 8 degrees of freedom, 0.1% critical value.
        assert!(chi2 < 26.12, "chi2 {chi2}");
        for o in counts {
            assert!((o as f64 / draws as f64 - 1.0 / 9.0).abs() < 0.01);
        }
    }

    #[test]
    fn epoch_order_is_a_deterministic_permutation() {
        let a = epoch_order(5, 3, 0);
        assert_eq!(a, epoch_order(5, 3, 0));
        assert_ne!(a, epoch_order(5, 3, 1));
        assert_eq!(a.len(), 35);
        let set: BTreeSet<(usize, Metabolite)> = a.into_iter().collect();
        assert_eq!(set.len(), 35);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::desk(0) }.validate().is_err());
        assert!(TrainConfig { n_values: vec![15], ..TrainConfig::desk(0) }.validate().is_err());
        TrainConfig::paper(0).validate().unwrap();
        assert_eq!(TrainConfig::paper(0).learning_rate, 1e-4);
    }
}
