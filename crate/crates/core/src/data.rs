//! Turning phantom cases into network inputs, and running batched prediction.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::error::{config_err, Result};
use crate::metabolite::Metabolite;
use crate::model::{ConditionTuple, Generator, GeneratorInputs, Overrides};
use crate::phantom::{self, kspace, AugmentDraw, PhantomCase, SplitPlan};
use crate::Field;

/// Cases of one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub train: Vec<PhantomCase>,
    pub val: Vec<PhantomCase>,
    pub test: Vec<PhantomCase>,
}

pub fn load_cases(data_dir: &Path, ids: &[String]) -> Result<Vec<PhantomCase>> {
    ids.iter()
        .map(|id| {
            let dir = data_dir.join(id);
            if !dir.join("manifest.json").is_file() {
                return Err(config_err(format!("case `{id}` not found under {}", data_dir.display())));
            }
            phantom::read_case(&dir)
        })
        .collect()
}

pub fn load_fold(data_dir: &Path, plan: &SplitPlan, fold: usize) -> Result<FoldData> {
    let f = plan.fold(fold)?;
    Ok(FoldData { train: load_cases(data_dir, &f.train)?, val: load_cases(data_dir, &f.val)?, test: load_cases(data_dir, &f.test)? })
}

/// One network input and its target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub case_id: String,
    pub cond: ConditionTuple,
    /// Resolution of the measurement, which the condition may misstate.
    pub measured_n: usize,
    /// Zero-filled reconstruction of the truncated k-space.
    pub lowres: Field,
    pub t1: Field,
    pub flair: Field,
    pub target: Field,
    pub mask: Array2<bool>,
}

impl Sample {
    /// Degrade the condition's metabolite map of `case` to `cond.n`.
    pub fn new(case: &PhantomCase, cond: ConditionTuple) -> Result<Self> {
        Self::augmented(case, cond, &AugmentDraw::default())
    }

    /// As [`Sample::new`] after applying the same geometric draw to every field.
    pub fn augmented(case: &PhantomCase, cond: ConditionTuple, draw: &AugmentDraw) -> Result<Self> {
        cond.validate(case.size())?;
        let target = draw.apply(case.map(cond.metabolite));
        Ok(Sample {
            case_id: case.case_id.clone(),
            cond,
            measured_n: cond.n,
            lowres: kspace::degrade(&target, cond.n)?,
            t1: draw.apply(&case.t1),
            flair: draw.apply(&case.flair),
            target,
            mask: draw.apply(&case.quality_mask),
        })
    }

    /// Swap in a different conditioning tuple without touching the data.
    pub fn with_condition(&self, cond: ConditionTuple) -> Self {
        Sample { cond, ..self.clone() }
    }
}

/// Stacked tensors for a list of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: GeneratorInputs,
    pub target: Tensor,
    pub mask: Tensor,
    pub conds: Vec<ConditionTuple>,
    pub measured: Vec<usize>,
}

fn stack(fields: impl Iterator<Item = Vec<f64>>, b: usize, n: usize, dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = fields.flatten().collect();
    Ok(Tensor::from_vec(flat, (b, 1, n, n), &Device::Cpu)?.to_dtype(dtype)?)
}

fn values(f: &Field) -> Vec<f64> {
    f.iter().copied().collect()
}

pub fn collate(samples: &[Sample], dtype: DType) -> Result<Batch> {
    let b = samples.len();
    if b == 0 {
        return Err(config_err("cannot build an empty batch"));
    }
    let n = samples[0].target.nrows();
    let inputs = GeneratorInputs {
        lowres: stack(samples.iter().map(|s| values(&s.lowres)), b, n, dtype)?,
        t1: stack(samples.iter().map(|s| values(&s.t1)), b, n, dtype)?,
        flair: stack(samples.iter().map(|s| values(&s.flair)), b, n, dtype)?,
    };
    Ok(Batch {
        inputs,
        target: stack(samples.iter().map(|s| values(&s.target)), b, n, dtype)?,
        mask: stack(samples.iter().map(|s| s.mask.iter().map(|&m| f64::from(u8::from(m))).collect()), b, n, dtype)?,
        conds: samples.iter().map(|s| s.cond).collect(),
        measured: samples.iter().map(|s| s.measured_n).collect(),
    })
}

/// Rows of a `(B, 1, N, N)` tensor as fields.
pub fn tensor_to_fields(t: &Tensor) -> Result<Vec<Field>> {
    let (b, _, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec()).expect("shape fits"))
        .collect())
}

pub const PREDICT_BATCH: usize = 16;

/// Data-consistent outputs for every sample, in order.
pub fn predict(generator: &Generator, samples: &[Sample]) -> Result<Vec<Field>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        let batch = collate(chunk, generator.dtype())?;
        let y = generator.forward_measured(&batch.inputs, &batch.conds, &batch.measured, Overrides::default())?;
        out.extend(tensor_to_fields(&y.output.detach())?);
    }
    Ok(out)
}

/// Every (case, metabolite) pair at every listed resolution with a fixed adversarial weight.
pub fn grid_samples(cases: &[PhantomCase], metabolites: &[Metabolite], ns: &[usize], lambda: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(cases.len() * metabolites.len() * ns.len());
    for case in cases {
        for &m in metabolites {
            for &n in ns {
                out.push(Sample::new(case, ConditionTuple::new(n, m, lambda))?);
            }
        }
    }
    Ok(out)
}
