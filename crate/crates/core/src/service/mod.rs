//! Checkpoint-backed inference: request and response types, the pure inference
//! functions, and the HTTP front end in [`http`].

pub mod http;

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{predict, Sample};
use crate::error::{arg_err, config_err, Error, Result};
use crate::eval::render::{encode_png, shared_range};
use crate::metabolite::Metabolite;
use crate::metrics::MetricReport;
use crate::model::{load_checkpoint, CheckpointHeader, ConditionTuple, Generator, Variant};
use crate::phantom::{self, kspace, CaseManifest, PhantomCase};
use crate::train::{LAMBDA_MAX, TRAIN_RESOLUTIONS};
use crate::Field;

pub const MAX_SWEEP: usize = 8;
/// Largest tolerated relative deviation of the served k-space window from the measurement.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-4;

/// A loaded model; immutable and shareable across threads.
#[derive(Debug)]
pub struct ModelHandle {
    pub generator: Generator,
    pub header: CheckpointHeader,
    pub path: PathBuf,
}

pub fn load_model(path: &Path) -> Result<ModelHandle> {
    if !path.is_file() {
        return Err(Error::Load(format!("checkpoint {} does not exist", path.display())));
    }
    let (generator, header) = load_checkpoint(path)?;
    Ok(ModelHandle { generator, header, path: path.to_path_buf() })
}

impl ModelHandle {
    pub fn variant(&self) -> Variant {
        self.generator.variant()
    }

    pub fn grid_size(&self) -> usize {
        self.generator.config().grid_size
    }

    fn train_value(&self, key: &str) -> Option<serde_json::Value> {
        self.header.meta.train_config.as_ref().map(|v| v[key].clone())
    }

    /// Resolutions seen in training.
    pub fn training_resolutions(&self) -> Vec<usize> {
        self.train_value("n_values").and_then(|v| serde_json::from_value(v).ok()).unwrap_or_else(|| TRAIN_RESOLUTIONS.to_vec())
    }

    /// Upper end of the adversarial weights seen in training.
    pub fn training_lambda_max(&self) -> f64 {
        self.train_value("lambda_max").and_then(|v| v.as_f64()).unwrap_or(LAMBDA_MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub variant: Variant,
    pub checkpoint: String,
    pub dtype: String,
    pub grid_size: usize,
    pub parameters: usize,
    pub training_resolutions: Vec<usize>,
    pub training_lambda_max: f64,
    pub epoch: Option<usize>,
    pub val_ssim: Option<f64>,
}

pub fn health(handle: &ModelHandle) -> Health {
    Health {
        status: "ok".into(),
        variant: handle.variant(),
        checkpoint: handle.path.display().to_string(),
        dtype: handle.header.dtype.clone(),
        grid_size: handle.grid_size(),
        parameters: handle.generator.param_count(),
        training_resolutions: handle.training_resolutions(),
        training_lambda_max: handle.training_lambda_max(),
        epoch: handle.header.meta.epoch,
        val_ssim: handle.header.meta.val_ssim,
    }
}

/// A row-major float array, carried as base64 of little-endian f32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatArray {
    pub shape: [usize; 2],
    pub data: String,
}

impl FloatArray {
    pub fn encode(f: &Field) -> Self {
        let bytes: Vec<u8> = f.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        FloatArray { shape: [f.nrows(), f.ncols()], data: B64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Field> {
        let bytes = B64.decode(&self.data).map_err(|e| arg_err(format!("invalid base64 array: {e}")))?;
        let [h, w] = self.shape;
        if bytes.len() != h * w * 4 {
            return Err(arg_err(format!("array of shape {h}x{w} needs {} bytes, got {}", h * w * 4, bytes.len())));
        }
        let vals: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(arg_err("array holds non-finite values"));
        }
        Ok(Array2::from_shape_vec((h, w), vals).expect("length checked"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    /// Base64 8-bit grayscale PNG on the response's shared intensity range.
    pub png: String,
    pub values: FloatArray,
}

/// Acquisition supplied directly: the zero-filled image on the full grid and the anatomical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlinePayload {
    pub lowres: FloatArray,
    pub t1: FloatArray,
    pub flair: FloatArray,
    pub mask: Option<FloatArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRequest {
    #[serde(default)]
    pub case_id: Option<String>,
    #[serde(default)]
    pub inline: Option<InlinePayload>,
    pub n: usize,
    pub metabolite: String,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub include_baseline: bool,
    #[serde(default)]
    pub include_ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub sr_image: Image,
    pub baseline_image: Option<Image>,
    pub gt_image: Option<Image>,
    pub metrics: Option<MetricReport>,
    pub baseline_metrics: Option<MetricReport>,
    pub condition_echo: ConditionTuple,
    pub display_range: [f64; 2],
    /// Relative deviation of the output's measured k-space window from the measurement.
    pub consistency_residual: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    #[serde(default)]
    pub case_id: Option<String>,
    #[serde(default)]
    pub inline: Option<InlinePayload>,
    pub n: usize,
    pub metabolite: String,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub include_baseline: bool,
    #[serde(default)]
    pub include_ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepItem {
    pub lambda: f64,
    pub sr_image: Image,
    pub metrics: Option<MetricReport>,
    pub consistency_residual: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub items: Vec<SweepItem>,
    pub baseline_image: Option<Image>,
    pub gt_image: Option<Image>,
    pub baseline_metrics: Option<MetricReport>,
    pub display_range: [f64; 2],
    pub n: usize,
    pub metabolite: Metabolite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub grid_size: usize,
    pub metabolites: Vec<Metabolite>,
    pub has_ground_truth: bool,
}

/// Cases available under `data_dir`; an empty directory yields an empty catalog.
pub fn list_cases(data_dir: &Path) -> Result<Vec<CaseEntry>> {
    let mut out = Vec::new();
    for dir in phantom::list_case_dirs(data_dir)? {
        let manifest: CaseManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let names: Vec<&str> = manifest.fields.iter().map(|f| f.name.as_str()).collect();
        let metabolites: Vec<Metabolite> =
            Metabolite::ALL.into_iter().filter(|m| names.contains(&phantom::met_field_name(*m).as_str())).collect();
        out.push(CaseEntry {
            case_id: manifest.case_id,
            grid_size: manifest.shape[0],
            has_ground_truth: metabolites.len() == Metabolite::COUNT,
            metabolites,
        });
    }
    Ok(out)
}

pub fn list_metabolites() -> Vec<&'static str> {
    Metabolite::names()
}

/// Fetch one case by id; ids are plain names, never paths.
pub fn open_case(data_dir: &Path, case_id: &str) -> Result<PhantomCase> {
    let plain = !case_id.is_empty() && case_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    let dir = data_dir.join(case_id);
    if !plain || !dir.join("manifest.json").is_file() {
        return Err(Error::NotFound(format!("case `{case_id}`")));
    }
    phantom::read_case(&dir)
}

/// The measured input and, when known, the truth it was measured from.
struct Acquisition {
    sample: Sample,
    truth: Option<Field>,
}

fn acquire(
    handle: &ModelHandle,
    data_dir: Option<&Path>,
    case_id: Option<&str>,
    inline: Option<&InlinePayload>,
    cond: ConditionTuple,
) -> Result<Acquisition> {
    let size = handle.grid_size();
    cond.validate(size)?;
    match (case_id, inline) {
        (Some(id), None) => {
            let dir = data_dir.ok_or_else(|| config_err("the service was started without a data directory"))?;
            let case = open_case(dir, id)?;
            if case.size() != size {
                return Err(arg_err(format!("case {id} is {}x{0} but the model expects {size}x{size}", case.size())));
            }
            let sample = Sample::new(&case, cond)?;
            Ok(Acquisition { truth: Some(sample.target.clone()), sample })
        }
        (None, Some(p)) => {
            let fields = [p.lowres.decode()?, p.t1.decode()?, p.flair.decode()?];
            if fields.iter().any(|f| f.dim() != (size, size)) {
                return Err(arg_err(format!("inline arrays must be {size}x{size}")));
            }
            let mask = match &p.mask {
                Some(m) => {
                    let m = m.decode()?;
                    if m.dim() != (size, size) {
                        return Err(arg_err(format!("inline mask must be {size}x{size}")));
                    }
                    m.mapv(|v| v > 0.5)
                }
                None => Array2::from_elem((size, size), true),
            };
            let [lowres, t1, flair] = fields;
            let sample = Sample {
                case_id: "inline".into(),
                cond,
                measured_n: cond.n,
                target: Array2::zeros((size, size)),
                lowres,
                t1,
                flair,
                mask,
            };
            Ok(Acquisition { sample, truth: None })
        }
        _ => Err(arg_err("give exactly one of case_id or inline")),
    }
}

fn condition_warnings(handle: &ModelHandle, cond: &ConditionTuple) -> Vec<String> {
    let mut w = Vec::new();
    let lmax = handle.training_lambda_max();
    if cond.lambda_adv > LAMBDA_MAX || cond.lambda_adv > lmax {
        w.push(format!("lambda {} is outside the training range [0, {}]; output is extrapolated", cond.lambda_adv, lmax.min(LAMBDA_MAX)));
    }
    let ns = handle.training_resolutions();
    let (lo, hi) = (ns.iter().min().copied().unwrap_or(0), ns.iter().max().copied().unwrap_or(0));
    if !ns.contains(&cond.n) {
        w.push(format!("resolution {} was not seen in training ({lo}..={hi}); output is extrapolated", cond.n));
    }
    w
}

/// Relative distance between the output's central `n`×`n` k-space window and the measurement's.
pub fn consistency_residual(output: &Field, measured: &Field, n: usize) -> Result<f64> {
    let a = kspace::kspace_truncate(output, n)?;
    let b = kspace::kspace_truncate(measured, n)?;
    let diff: f64 = a.values.iter().zip(b.values.iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
    let base = b.energy();
    Ok(if base > 0.0 { (diff / base).sqrt() } else { diff.sqrt() })
}

fn checked_residual(output: &Field, measured: &Field, n: usize, self_check: bool) -> Result<f64> {
    let r = consistency_residual(output, measured, n)?;
    if self_check && !(r <= CONSISTENCY_TOLERANCE) {
        return Err(Error::Consistency(format!("k-space window deviates by {r:.3e} (tolerance {CONSISTENCY_TOLERANCE:.0e})")));
    }
    Ok(r)
}

fn image(f: &Field, range: (f64, f64)) -> Result<Image> {
    Ok(Image { png: B64.encode(encode_png(f, range.0, range.1)?), values: FloatArray::encode(f) })
}

fn masked_metrics(out: &Field, truth: Option<&Field>, mask: &Array2<bool>) -> Result<Option<MetricReport>> {
    truth.map(|t| MetricReport::compute(out, t, mask)).transpose()
}

/// Super-resolves one zero-filled acquisition given as raw arrays on the model grid.
/// Returns the output and its k-space consistency residual.
pub fn super_resolve(handle: &ModelHandle, lowres: Field, t1: Field, flair: Field, cond: ConditionTuple) -> Result<(Field, f64)> {
    let size = handle.grid_size();
    cond.validate(size)?;
    if [&lowres, &t1, &flair].iter().any(|f| f.dim() != (size, size)) {
        return Err(arg_err(format!("inputs must be {size}x{size}")));
    }
    let sample = Sample {
        case_id: "raw".into(),
        cond,
        measured_n: cond.n,
        target: Array2::zeros((size, size)),
        lowres,
        t1,
        flair,
        mask: Array2::from_elem((size, size), true),
    };
    let output = predict(&handle.generator, std::slice::from_ref(&sample))?.remove(0);
    let residual = consistency_residual(&output, &sample.lowres, cond.n)?;
    Ok((output, residual))
}

pub fn infer(handle: &ModelHandle, data_dir: Option<&Path>, req: &InferRequest, self_check: bool) -> Result<InferResponse> {
    let metabolite: Metabolite = req.metabolite.parse()?;
    let cond = ConditionTuple::new(req.n, metabolite, req.lambda);
    let acq = acquire(handle, data_dir, req.case_id.as_deref(), req.inline.as_ref(), cond)?;
    let output = predict(&handle.generator, std::slice::from_ref(&acq.sample))?.remove(0);
    let residual = checked_residual(&output, &acq.sample.lowres, req.n, self_check)?;
    let truth = acq.truth.as_ref();
    let gt = truth.filter(|_| req.include_ground_truth);
    let range = shared_range(&[Some(&output), gt].into_iter().flatten().collect::<Vec<_>>());
    Ok(InferResponse {
        sr_image: image(&output, range)?,
        baseline_image: if req.include_baseline { Some(image(&acq.sample.lowres, range)?) } else { None },
        gt_image: gt.map(|g| image(g, range)).transpose()?,
        metrics: masked_metrics(&output, truth, &acq.sample.mask)?,
        baseline_metrics: if req.include_baseline { masked_metrics(&acq.sample.lowres, truth, &acq.sample.mask)? } else { None },
        condition_echo: cond,
        display_range: [range.0, range.1],
        consistency_residual: residual,
        warnings: condition_warnings(handle, &cond),
    })
}

pub fn infer_sweep(handle: &ModelHandle, data_dir: Option<&Path>, req: &SweepRequest, self_check: bool) -> Result<SweepResponse> {
    if req.lambdas.is_empty() || req.lambdas.len() > MAX_SWEEP {
        return Err(arg_err(format!("a sweep takes 1 to {MAX_SWEEP} lambda values, got {}", req.lambdas.len())));
    }
    let metabolite: Metabolite = req.metabolite.parse()?;
    let conds: Vec<ConditionTuple> = req.lambdas.iter().map(|&l| ConditionTuple::new(req.n, metabolite, l)).collect();
    let acq = acquire(handle, data_dir, req.case_id.as_deref(), req.inline.as_ref(), conds[0])?;
    for c in &conds {
        c.validate(handle.grid_size())?;
    }
    let samples: Vec<Sample> = conds.iter().map(|&c| acq.sample.with_condition(c)).collect();
    let outputs = predict(&handle.generator, &samples)?;
    let truth = acq.truth.as_ref();
    let gt = truth.filter(|_| req.include_ground_truth);
    let range = shared_range(&outputs.iter().chain(gt).collect::<Vec<_>>());
    let mut items = Vec::with_capacity(outputs.len());
    for (c, out) in conds.iter().zip(&outputs) {
        items.push(SweepItem {
            lambda: c.lambda_adv,
            sr_image: image(out, range)?,
            metrics: masked_metrics(out, truth, &acq.sample.mask)?,
            consistency_residual: checked_residual(out, &acq.sample.lowres, req.n, self_check)?,
            warnings: condition_warnings(handle, c),
        });
    }
    Ok(SweepResponse {
        items,
        baseline_image: if req.include_baseline { Some(image(&acq.sample.lowres, range)?) } else { None },
        gt_image: gt.map(|g| image(g, range)).transpose()?,
        baseline_metrics: if req.include_baseline { masked_metrics(&acq.sample.lowres, truth, &acq.sample.mask)? } else { None },
        display_range: [range.0, range.1],
        n: req.n,
        metabolite,
    })
}
