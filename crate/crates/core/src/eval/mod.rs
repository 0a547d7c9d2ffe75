//! Comparative evaluation: per-record metrics, method summaries, paired tests,
//! condition-match matrices, adversarial-weight sweeps and trade-off curves.

pub mod pipeline;
pub mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{grid_samples, predict, Sample};
use crate::error::{config_err, Error, Result};
use crate::metabolite::Metabolite;
use crate::metrics::wilcoxon::average_ranks;
use crate::metrics::{ssim, wilcoxon_signed_rank, MetricReport, WilcoxonResult};
use crate::model::{ConditionTuple, Generator, Variant};
use crate::phantom::{kspace, PhantomCase};
use crate::train::TRAIN_RESOLUTIONS;
use crate::Field;

pub const SWEEP_LAMBDAS: [f64; 4] = [0.0, 0.03, 0.06, 0.09];
pub const CURVE_LAMBDAS: [f64; 11] = [0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1];
pub const MIN_CURVE_LAMBDAS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub fold: usize,
    pub case_id: String,
    pub metabolite: Metabolite,
    pub n: usize,
    pub lambda: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub hf_energy: f64,
}

type PairKey = (usize, String, Metabolite, usize, u64);

impl EvalRecord {
    fn key(&self) -> PairKey {
        (self.fold, self.case_id.clone(), self.metabolite, self.n, self.lambda.to_bits())
    }
}

/// Metrics for every case, metabolite, resolution and adversarial weight, conditioned on the truth.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_variant(
    generator: &Generator,
    expected: Option<Variant>,
    method: &str,
    fold: usize,
    cases: &[PhantomCase],
    n_list: &[usize],
    lambda_list: &[f64],
) -> Result<Vec<EvalRecord>> {
    if let Some(v) = expected {
        if v != generator.variant() {
            return Err(config_err(format!("checkpoint holds variant {} but {v} was requested", generator.variant())));
        }
    }
    if n_list.is_empty() || lambda_list.is_empty() {
        return Err(config_err("evaluation needs at least one resolution and one adversarial weight"));
    }
    let mut records = Vec::with_capacity(cases.len() * Metabolite::COUNT * n_list.len() * lambda_list.len());
    for case in cases {
        for &lambda in lambda_list {
            let samples = grid_samples(std::slice::from_ref(case), &Metabolite::ALL, n_list, lambda)?;
            let outputs = predict(generator, &samples)?;
            for (s, out) in samples.iter().zip(&outputs) {
                let r = MetricReport::compute(out, &s.target, &s.mask)?;
                records.push(EvalRecord {
                    method: method.to_string(),
                    fold,
                    case_id: s.case_id.clone(),
                    metabolite: s.cond.metabolite,
                    n: s.cond.n,
                    lambda,
                    psnr: r.psnr,
                    ssim: r.ssim,
                    ms_ssim: r.ms_ssim,
                    hf_energy: r.hf_energy,
                });
            }
        }
    }
    Ok(records)
}

/// Mean and sample standard deviation; the deviation is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MeanStd { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub group: String,
    pub records: usize,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub ms_ssim: MeanStd,
    pub hf_energy: MeanStd,
}

impl MethodSummary {
    pub fn of(group: impl Into<String>, records: &[&EvalRecord]) -> Self {
        let col = |f: fn(&EvalRecord) -> f64| MeanStd::of(&records.iter().map(|r| f(r)).collect::<Vec<_>>());
        MethodSummary {
            group: group.into(),
            records: records.len(),
            psnr: col(|r| r.psnr),
            ssim: col(|r| r.ssim),
            ms_ssim: col(|r| r.ms_ssim),
            hf_energy: col(|r| r.hf_energy),
        }
    }
}

/// Summaries of the records grouped by `key`, in key order.
pub fn summarize_by<K: Ord + fmt::Display>(records: &[EvalRecord], key: impl Fn(&EvalRecord) -> K) -> Vec<MethodSummary> {
    let mut groups: BTreeMap<K, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(key(r)).or_default().push(r);
    }
    groups.into_iter().map(|(k, rs)| MethodSummary::of(k.to_string(), &rs)).collect()
}

pub fn summarize(records: &[EvalRecord]) -> Vec<MethodSummary> {
    summarize_by(records, |r| r.method.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub method_a: String,
    pub method_b: String,
    pub pairs: usize,
    /// `None` when every paired difference is zero.
    pub psnr: Option<WilcoxonResult>,
    pub ssim: Option<WilcoxonResult>,
    pub notes: Vec<String>,
    pub summary_a: MethodSummary,
    pub summary_b: MethodSummary,
}

fn keyed<'a>(records: &'a [EvalRecord], side: &str) -> Result<BTreeMap<PairKey, &'a EvalRecord>> {
    let mut out = BTreeMap::new();
    for r in records {
        if out.insert(r.key(), r).is_some() {
            return Err(Error::Pairing(format!(
                "duplicate {side} record for case {} {} n={} lambda={}",
                r.case_id, r.metabolite, r.n, r.lambda
            )));
        }
    }
    Ok(out)
}

fn single_method(records: &[EvalRecord], side: &str) -> Result<String> {
    let first = records.first().ok_or_else(|| Error::Pairing(format!("no {side} records")))?;
    if records.iter().any(|r| r.method != first.method) {
        return Err(Error::Pairing(format!("{side} records mix several methods")));
    }
    Ok(first.method.clone())
}

/// Two-sided paired Wilcoxon tests on PSNR and SSIM of `b` against `a`.
pub fn compare_methods(records_a: &[EvalRecord], records_b: &[EvalRecord]) -> Result<SignificanceReport> {
    let method_a = single_method(records_a, "first")?;
    let method_b = single_method(records_b, "second")?;
    let a = keyed(records_a, "first")?;
    let b = keyed(records_b, "second")?;
    if let Some(k) = a.keys().find(|k| !b.contains_key(*k)).or_else(|| b.keys().find(|k| !a.contains_key(*k))) {
        return Err(Error::Pairing(format!(
            "record for fold {} case {} {} n={} lambda={} has no partner",
            k.0,
            k.1,
            k.2,
            k.3,
            f64::from_bits(k.4)
        )));
    }
    let pa: Vec<&EvalRecord> = a.values().copied().collect();
    let pb: Vec<&EvalRecord> = b.values().copied().collect();
    let mut notes = Vec::new();
    let mut test = |name: &str, f: fn(&EvalRecord) -> f64| -> Result<Option<WilcoxonResult>> {
        let xa: Vec<f64> = pa.iter().map(|r| f(r)).collect();
        let xb: Vec<f64> = pb.iter().map(|r| f(r)).collect();
        match wilcoxon_signed_rank(&xa, &xb) {
            Ok(w) => Ok(Some(w)),
            Err(Error::Degenerate(_)) => {
                notes.push(format!("{name}: all paired differences are zero; no p-value"));
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };
    let psnr = test("psnr", |r| r.psnr)?;
    let ssim = test("ssim", |r| r.ssim)?;
    Ok(SignificanceReport {
        summary_a: MethodSummary::of(&method_a, &pa),
        summary_b: MethodSummary::of(&method_b, &pb),
        method_a,
        method_b,
        pairs: pa.len(),
        psnr,
        ssim,
        notes,
    })
}

/// Restrict two record sets to the keys they share.
pub fn common_records(a: &[EvalRecord], b: &[EvalRecord]) -> (Vec<EvalRecord>, Vec<EvalRecord>) {
    let ka: BTreeSet<PairKey> = a.iter().map(EvalRecord::key).collect();
    let kb: BTreeSet<PairKey> = b.iter().map(EvalRecord::key).collect();
    let keep = |rs: &[EvalRecord], other: &BTreeSet<PairKey>| rs.iter().filter(|r| other.contains(&r.key())).cloned().collect();
    (keep(a, &kb), keep(b, &ka))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Resolution,
    Metabolite,
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resolution" => Ok(Axis::Resolution),
            "metabolite" => Ok(Axis::Metabolite),
            other => Err(config_err(format!("unknown axis `{other}`; expected resolution or metabolite"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Resolution => "resolution",
            Axis::Metabolite => "metabolite",
        })
    }
}

/// Mean SSIM with `cells[conditioned][true]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMatchMatrix {
    pub axis: Axis,
    pub method: String,
    pub values: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl ConditionMatchMatrix {
    pub fn side(&self) -> usize {
        self.values.len()
    }

    pub fn diagonal_mean(&self) -> f64 {
        (0..self.side()).map(|i| self.cells[i][i]).sum::<f64>() / self.side() as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let k = self.side();
        let sum: f64 = (0..k).flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| self.cells[i][j]).sum();
        sum / (k * (k - 1)) as f64
    }

    /// True values whose matched cell does not beat the mean of the mismatched cells in its column.
    pub fn failing_columns(&self) -> Vec<String> {
        let k = self.side();
        (0..k)
            .filter(|&j| {
                let off = (0..k).filter(|&i| i != j).map(|i| self.cells[i][j]).sum::<f64>() / (k - 1) as f64;
                self.cells[j][j] <= off
            })
            .map(|j| self.values[j].clone())
            .collect()
    }
}

fn mean_ssim(generator: &Generator, samples: &[Sample]) -> Result<f64> {
    let outputs = predict(generator, samples)?;
    let mut total = 0.0;
    for (s, out) in samples.iter().zip(&outputs) {
        total += ssim(out, &s.target, &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// Evaluate every true value of `axis` under every conditioned value, at λ = 0.
pub fn condition_match_matrix(generator: &Generator, cases: &[PhantomCase], axis: Axis) -> Result<ConditionMatchMatrix> {
    let variant = generator.variant();
    let supported = match axis {
        Axis::Resolution => variant.is_conditioned(),
        Axis::Metabolite => variant.is_metabolite_aware(),
    };
    if !supported {
        return Err(config_err(format!("variant {variant} is not conditioned on the {axis} axis")));
    }
    if cases.is_empty() {
        return Err(config_err("condition-match matrix needs at least one case"));
    }
    let (values, cells) = match axis {
        Axis::Resolution => {
            let ns = TRAIN_RESOLUTIONS;
            let mut cells = vec![vec![0.0; ns.len()]; ns.len()];
            for (j, &true_n) in ns.iter().enumerate() {
                let truth = grid_samples(cases, &Metabolite::ALL, &[true_n], 0.0)?;
                for (i, &cond_n) in ns.iter().enumerate() {
                    let swapped: Vec<Sample> = truth
                        .iter()
                        .map(|s| s.with_condition(ConditionTuple { n: cond_n, ..s.cond }))
                        .collect();
                    cells[i][j] = mean_ssim(generator, &swapped)?;
                }
            }
            (ns.iter().map(|n| n.to_string()).collect(), cells)
        }
        Axis::Metabolite => {
            let ms = Metabolite::ALL;
            let mut cells = vec![vec![0.0; ms.len()]; ms.len()];
            for (j, &true_m) in ms.iter().enumerate() {
                let truth = grid_samples(cases, &[true_m], &TRAIN_RESOLUTIONS, 0.0)?;
                for (i, &cond_m) in ms.iter().enumerate() {
                    let swapped: Vec<Sample> = truth
                        .iter()
                        .map(|s| s.with_condition(ConditionTuple { metabolite: cond_m, ..s.cond }))
                        .collect();
                    cells[i][j] = mean_ssim(generator, &swapped)?;
                }
            }
            (ms.iter().map(|m| m.name().to_string()).collect(), cells)
        }
    };
    Ok(ConditionMatchMatrix { axis, method: variant.name().to_string(), values, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPanel {
    pub label: String,
    pub lambda: Option<f64>,
    #[serde(skip)]
    pub image: Field,
    /// Against ground truth; absent for the ground-truth panel itself.
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub case_id: String,
    pub metabolite: Metabolite,
    pub n: usize,
    pub panels: Vec<SweepPanel>,
}

fn masked(f: &Field, mask: &ndarray::Array2<bool>) -> Field {
    let mut out = f.clone();
    out.zip_mut_with(mask, |v, &m| {
        if !m {
            *v = 0.0;
        }
    });
    out
}

/// Zero-filled baseline, the output at each λ, then ground truth, left to right.
pub fn lambda_sweep(generator: &Generator, case: &PhantomCase, metabolite: Metabolite, n: usize, lambdas: &[f64]) -> Result<LambdaSweep> {
    let samples: Vec<Sample> =
        lambdas.iter().map(|&l| Sample::new(case, ConditionTuple::new(n, metabolite, l))).collect::<Result<_>>()?;
    let outputs = predict(generator, &samples)?;
    let target = case.map(metabolite);
    let mask = &case.quality_mask;
    let baseline = kspace::degrade(target, n)?;
    let mut panels = vec![SweepPanel {
        label: "zero-fill".into(),
        lambda: None,
        metrics: Some(MetricReport::compute(&baseline, target, mask)?),
        image: masked(&baseline, mask),
    }];
    for (&l, out) in lambdas.iter().zip(&outputs) {
        panels.push(SweepPanel {
            label: format!("lambda={l}"),
            lambda: Some(l),
            metrics: Some(MetricReport::compute(out, target, mask)?),
            image: masked(out, mask),
        });
    }
    panels.push(SweepPanel { label: "ground truth".into(), lambda: None, metrics: None, image: masked(target, mask) });
    Ok(LambdaSweep { case_id: case.case_id.clone(), metabolite, n, panels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurves {
    pub method: String,
    pub lambdas: Vec<f64>,
    pub counts: Vec<usize>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub hf_energy: Vec<f64>,
}

/// Per-λ means over every other key.
pub fn tradeoff_curves(records: &[EvalRecord]) -> Result<TradeoffCurves> {
    let mut groups: BTreeMap<u64, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        if !r.lambda.is_finite() || r.lambda < 0.0 {
            return Err(config_err(format!("record with invalid lambda {}", r.lambda)));
        }
        // Non-negative floats order like their bit patterns.
        groups.entry(r.lambda.to_bits()).or_default().push(r);
    }
    if groups.len() < MIN_CURVE_LAMBDAS {
        return Err(config_err(format!("trade-off curves need at least {MIN_CURVE_LAMBDAS} lambda values, got {}", groups.len())));
    }
    let mean = |rs: &[&EvalRecord], f: fn(&EvalRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
    let mut c = TradeoffCurves {
        method: records[0].method.clone(),
        lambdas: vec![],
        counts: vec![],
        psnr: vec![],
        ssim: vec![],
        hf_energy: vec![],
    };
    for (bits, rs) in &groups {
        c.lambdas.push(f64::from_bits(*bits));
        c.counts.push(rs.len());
        c.psnr.push(mean(rs, |r| r.psnr));
        c.ssim.push(mean(rs, |r| r.ssim));
        c.hf_energy.push(mean(rs, |r| r.hf_energy));
    }
    Ok(c)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(crate::error::arg_err("spearman needs two equal-length series of at least 2 values"));
    }
    let (rx, _) = average_ranks(x);
    let (ry, _) = average_ranks(y);
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate("constant series has no rank correlation".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: &str, case: &str, n: usize, psnr: f64, ssim: f64) -> EvalRecord {
        EvalRecord {
            method: method.into(),
            fold: 0,
            case_id: case.into(),
            metabolite: Metabolite::Gly,
            n,
            lambda: 0.0,
            psnr,
            ssim,
            ms_ssim: ssim,
            hf_energy: 0.1,
        }
    }

    fn set(method: &str, shift: f64) -> Vec<EvalRecord> {
        (0..8).map(|i| record(method, &format!("c{i}"), 16, 20.0 + i as f64 * 0.7 + shift, 0.5 + 0.01 * i as f64)).collect()
    }

    #[test]
    fn identical_sets_are_degenerate() {
        let a = set("a", 0.0);
        let r = compare_methods(&a, &a).unwrap();
        assert!(r.psnr.is_none() && r.ssim.is_none());
        assert_eq!(r.notes.len(), 2);
    }

    #[test]
    fn uniform_shift_is_significant() {
        let a = set("a", 0.0);
        let b = set("b", 0.5);
        let r = compare_methods(&a, &b).unwrap();
        let p = r.psnr.unwrap();
        assert!(p.p_value < 0.05, "{p:?}");
        assert_eq!(r.pairs, 8);
        assert!((r.summary_b.psnr.mean - r.summary_a.psnr.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_keys_are_rejected() {
        let a = set("a", 0.0);
        let mut b = set("b", 0.5);
        b[3].n = 18;
        assert!(matches!(compare_methods(&a, &b), Err(Error::Pairing(_))));
        let mut dup = set("b", 0.5);
        dup[1].case_id = "c0".into();
        assert!(matches!(compare_methods(&a, &dup), Err(Error::Pairing(_))));
    }

    #[test]
    fn summary_matches_direct_computation() {
        let a = set("a", 0.0);
        let s = &summarize(&a)[0];
        let vals: Vec<f64> = a.iter().map(|r| r.psnr).collect();
        let m = vals.iter().sum::<f64>() / 8.0;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 7.0).sqrt();
        assert!((s.psnr.mean - m).abs() < 1e-12 && (s.psnr.std - sd).abs() < 1e-12);
    }

    #[test]
    fn curves_need_three_lambdas() {
        let mut rs = set("a", 0.0);
        assert!(matches!(tradeoff_curves(&rs), Err(Error::Config(_))));
        for (i, r) in rs.iter_mut().enumerate() {
            r.lambda = [0.0, 0.05, 0.1][i % 3];
        }
        let c = tradeoff_curves(&rs).unwrap();
        assert_eq!(c.lambdas, vec![0.0, 0.05, 0.1]);
        assert_eq!(c.counts, vec![3, 3, 2]);
        let zero: Vec<f64> = rs.iter().filter(|r| r.lambda == 0.0).map(|r| r.psnr).collect();
        assert!((c.psnr[0] - zero.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn matrix_failing_columns() {
        let m = ConditionMatchMatrix {
            axis: Axis::Metabolite,
            method: "x".into(),
            values: vec!["a".into(), "b".into(), "c".into()],
            cells: vec![vec![0.9, 0.5, 0.1], vec![0.2, 0.8, 0.9], vec![0.1, 0.4, 0.3]],
        };
        assert_eq!(m.failing_columns(), vec!["c".to_string()]);
        assert!((m.diagonal_mean() - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.off_diagonal_mean() - 2.2 / 6.0).abs() < 1e-12);
    }
}
