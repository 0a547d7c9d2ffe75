//! File-level drivers behind the `mcm eval` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::render::{encode_strip, heatmap_svg, line_panels_svg, shared_range};
use super::{
    common_records, compare_methods, condition_match_matrix, evaluate_variant, lambda_sweep, summarize,
    tradeoff_curves, Axis, ConditionMatchMatrix, EvalRecord, LambdaSweep, MethodSummary, SignificanceReport, TradeoffCurves,
};
use crate::data::{load_cases, load_fold};
use crate::error::{config_err, Result};
use crate::metabolite::Metabolite;
use crate::model::{load_checkpoint, read_header, CheckpointHeader, Generator, Variant};
use crate::phantom::SplitPlan;
use crate::train::TRAIN_RESOLUTIONS;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
/// Method every other table1 row is tested against.
pub const REFERENCE_METHOD: &str = "filter_scaling_met";

/// A finished training run found under a checkpoint directory.
#[derive(Debug, Clone)]
pub struct RunInfo {
    pub checkpoint: PathBuf,
    pub header: CheckpointHeader,
    pub variant: Variant,
    pub n_values: Vec<usize>,
    pub lambda_max: f64,
}

impl RunInfo {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let header = read_header(path)?;
        let tc = header.meta.train_config.as_ref();
        let n_values = tc
            .and_then(|v| serde_json::from_value::<Vec<usize>>(v["n_values"].clone()).ok())
            .unwrap_or_else(|| TRAIN_RESOLUTIONS.to_vec());
        let lambda_max = tc.and_then(|v| v["lambda_max"].as_f64()).unwrap_or(0.0);
        Ok(RunInfo { checkpoint: path.to_path_buf(), variant: header.config.variant, header, n_values, lambda_max })
    }

    pub fn adversarial(&self) -> bool {
        self.lambda_max > 0.0
    }

    /// Resolutions the run should be scored on.
    pub fn eval_resolutions(&self) -> Vec<usize> {
        if self.variant == Variant::SingleScale {
            self.n_values.clone()
        } else {
            TRAIN_RESOLUTIONS.to_vec()
        }
    }

    pub fn load(&self) -> Result<Generator> {
        Ok(load_checkpoint(&self.checkpoint)?.0)
    }
}

/// Every `<dir>/<run>/best.ckpt`, ordered by run directory name.
pub fn discover_runs(ckpt_dir: &Path) -> Result<Vec<RunInfo>> {
    if !ckpt_dir.is_dir() {
        return Err(config_err(format!("checkpoint directory {} does not exist", ckpt_dir.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(ckpt_dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    dirs.iter().map(|d| d.join(BEST_CHECKPOINT)).filter(|p| p.is_file()).map(|p| RunInfo::from_checkpoint(&p)).collect()
}

/// Where a figure's checkpoint comes from: an explicit file or a search over runs.
#[derive(Debug, Clone)]
pub enum ModelSource {
    Checkpoint(PathBuf),
    Directory(PathBuf),
}

impl ModelSource {
    fn pick(&self, want: impl Fn(&RunInfo) -> bool, what: &str) -> Result<RunInfo> {
        match self {
            ModelSource::Checkpoint(p) => RunInfo::from_checkpoint(p),
            ModelSource::Directory(d) => discover_runs(d)?
                .into_iter()
                .find(want)
                .ok_or_else(|| config_err(format!("no {what} run under {}", d.display()))),
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

const SUMMARY_HEADER: &str = "records,psnr_mean,psnr_std,ssim_mean,ssim_std,ms_ssim_mean,ms_ssim_std,hf_energy_mean,hf_energy_std";

fn summary_row(s: &MethodSummary) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        s.records, s.psnr.mean, s.psnr.std, s.ssim.mean, s.ssim.std, s.ms_ssim.mean, s.ms_ssim.std, s.hf_energy.mean, s.hf_energy.std
    )
}

fn p_cell(w: &Option<crate::metrics::WilcoxonResult>) -> String {
    w.map(|w| format!("{:.6e}", w.p_value)).unwrap_or_else(|| "NA".into())
}

fn test_cases(data_dir: &Path, splits: &Path, fold: usize) -> Result<Vec<crate::phantom::PhantomCase>> {
    let plan = SplitPlan::read(splits)?;
    Ok(load_fold(data_dir, &plan, fold)?.test)
}

#[derive(Debug, Clone, Serialize)]
pub struct Table1Outcome {
    pub records: usize,
    pub summaries: Vec<MethodSummary>,
    pub significance: Vec<SignificanceReport>,
    pub files: Vec<PathBuf>,
}

/// Score every λ = 0 run on the test fold and write records, summaries and paired tests.
pub fn table1(ckpt_dir: &Path, data_dir: &Path, splits: &Path, fold: usize, out: &Path) -> Result<Table1Outcome> {
    let runs: Vec<RunInfo> = discover_runs(ckpt_dir)?.into_iter().filter(|r| !r.adversarial()).collect();
    if runs.is_empty() {
        return Err(config_err(format!("no non-adversarial runs under {}", ckpt_dir.display())));
    }
    let cases = test_cases(data_dir, splits, fold)?;
    fs::create_dir_all(out)?;
    let mut records = Vec::new();
    let mut params: Vec<(String, usize)> = Vec::new();
    for run in &runs {
        let generator = run.load()?;
        let method = run.variant.name();
        log::info!("table1: scoring {} ({})", method, run.checkpoint.display());
        records.extend(evaluate_variant(&generator, Some(run.variant), method, fold, &cases, &run.eval_resolutions(), &[0.0])?);
        if !params.iter().any(|(m, _)| m == method) {
            params.push((method.to_string(), generator.param_count()));
        }
    }
    let files = vec![
        out.join("table1_records.jsonl"),
        out.join("table1_summary.csv"),
        out.join("table1_by_n.csv"),
        out.join("table1_significance.csv"),
        out.join("table1_significance.json"),
    ];
    write_jsonl(&files[0], &records)?;

    let summaries = summarize(&records);
    let mut csv = format!("method,parameters,{SUMMARY_HEADER}\n");
    for s in &summaries {
        let p = params.iter().find(|(m, _)| *m == s.group).map(|(_, p)| *p).unwrap_or(0);
        csv += &format!("{},{p},{}\n", s.group, summary_row(s));
    }
    fs::write(&files[1], csv)?;

    let mut csv = format!("method,n,{SUMMARY_HEADER}\n");
    let mut groups: BTreeMap<(&str, usize), Vec<&EvalRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.method.as_str(), r.n)).or_default().push(r);
    }
    for ((m, n), rs) in groups {
        csv += &format!("{m},{n},{}\n", summary_row(&MethodSummary::of(m, &rs)));
    }
    fs::write(&files[2], csv)?;

    let mut significance = Vec::new();
    let by_method = |m: &str| records.iter().filter(|r| r.method == m).cloned().collect::<Vec<_>>();
    let reference = by_method(REFERENCE_METHOD);
    if !reference.is_empty() {
        for s in summaries.iter().filter(|s| s.group != REFERENCE_METHOD) {
            let (a, b) = common_records(&reference, &by_method(&s.group));
            significance.push(compare_methods(&b, &a)?);
        }
    }
    let mut csv = String::from("method_a,method_b,pairs,psnr_p,ssim_p,notes\n");
    for r in &significance {
        csv += &format!("{},{},{},{},{},{}\n", r.method_a, r.method_b, r.pairs, p_cell(&r.psnr), p_cell(&r.ssim), r.notes.join("; "));
    }
    fs::write(&files[3], csv)?;
    write_json(&files[4], &significance)?;
    Ok(Table1Outcome { records: records.len(), summaries, significance, files })
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Outcome {
    pub matrix: ConditionMatchMatrix,
    pub files: Vec<PathBuf>,
}

pub fn fig2(source: &ModelSource, data_dir: &Path, splits: &Path, fold: usize, axis: Axis, out: &Path) -> Result<Fig2Outcome> {
    let run = match axis {
        Axis::Resolution => source.pick(|r| r.variant == Variant::FilterScaling && !r.adversarial(), "filter_scaling")?,
        Axis::Metabolite => source.pick(|r| r.variant == Variant::FilterScalingMet && !r.adversarial(), "filter_scaling_met")?,
    };
    let cases = test_cases(data_dir, splits, fold)?;
    let matrix = condition_match_matrix(&run.load()?, &cases, axis)?;
    fs::create_dir_all(out)?;
    let files = vec![out.join(format!("fig2_{axis}.json")), out.join(format!("fig2_{axis}.csv")), out.join(format!("fig2_{axis}.svg"))];
    write_json(&files[0], &matrix)?;
    let mut csv = format!("conditioned\\true,{}\n", matrix.values.join(","));
    for (v, row) in matrix.values.iter().zip(&matrix.cells) {
        csv += &format!("{v},{}\n", row.iter().map(|c| format!("{c:.6}")).collect::<Vec<_>>().join(","));
    }
    fs::write(&files[1], csv)?;
    let title = format!("{} condition match: mean SSIM", matrix.method);
    fs::write(&files[2], heatmap_svg(&title, &format!("conditioned {axis}"), &format!("true {axis}"), &matrix.values, &matrix.cells))?;
    Ok(Fig2Outcome { matrix, files })
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig3Outcome {
    pub sweep: LambdaSweep,
    pub files: Vec<PathBuf>,
}

pub fn fig3(
    source: &ModelSource,
    data_dir: &Path,
    case_id: &str,
    metabolite: Metabolite,
    n: usize,
    lambdas: &[f64],
    out: &Path,
) -> Result<Fig3Outcome> {
    let run = source.pick(RunInfo::adversarial, "adversarially trained")?;
    if !run.adversarial() {
        log::warn!("{} was trained without the adversarial loss; the sweep will show little change", run.checkpoint.display());
    }
    let case = load_cases(data_dir, &[case_id.to_string()])?.remove(0);
    let sweep = lambda_sweep(&run.load()?, &case, metabolite, n, lambdas)?;
    fs::create_dir_all(out)?;
    let stem = format!("fig3_{case_id}_{}_n{n}", metabolite.name());
    let files = vec![out.join(format!("{stem}.png")), out.join(format!("{stem}.json"))];
    let images: Vec<_> = sweep.panels.iter().map(|p| &p.image).collect();
    let (lo, hi) = shared_range(&images);
    let text: Vec<(String, String)> = sweep
        .panels
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let m = p.metrics.map(|m| format!("PSNR {:.2} / SSIM {:.4} / HF {:.4}", m.psnr, m.ssim, m.hf_energy)).unwrap_or_default();
            (format!("panel{i}"), format!("{}: {m}", p.label))
        })
        .collect();
    fs::write(&files[0], encode_strip(&images, lo, hi, &text)?)?;
    write_json(&files[1], &sweep)?;
    Ok(Fig3Outcome { sweep, files })
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig4Outcome {
    pub curves: TradeoffCurves,
    pub files: Vec<PathBuf>,
}

pub fn fig4(source: &ModelSource, data_dir: &Path, splits: &Path, fold: usize, lambdas: &[f64], out: &Path) -> Result<Fig4Outcome> {
    let run = source.pick(RunInfo::adversarial, "adversarially trained")?;
    let cases = test_cases(data_dir, splits, fold)?;
    let records = evaluate_variant(&run.load()?, None, run.variant.name(), fold, &cases, &run.eval_resolutions(), lambdas)?;
    let curves = tradeoff_curves(&records)?;
    fs::create_dir_all(out)?;
    let files = vec![
        out.join("fig4_records.jsonl"),
        out.join("fig4_curves.json"),
        out.join("fig4_curves.csv"),
        out.join("fig4_curves.svg"),
    ];
    write_jsonl(&files[0], &records)?;
    write_json(&files[1], &curves)?;
    let mut csv = String::from("lambda,records,psnr,ssim,hf_energy\n");
    for i in 0..curves.lambdas.len() {
        csv += &format!("{},{},{:.6},{:.6},{:.6}\n", curves.lambdas[i], curves.counts[i], curves.psnr[i], curves.ssim[i], curves.hf_energy[i]);
    }
    fs::write(&files[2], csv)?;
    let series = [("PSNR (dB)", &curves.psnr[..]), ("SSIM", &curves.ssim[..]), ("high-frequency energy", &curves.hf_energy[..])];
    fs::write(&files[3], line_panels_svg("lambda", &curves.lambdas, &series))?;
    Ok(Fig4Outcome { curves, files })
}
