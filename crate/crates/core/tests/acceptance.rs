//! Acceptance run: hard numerical invariants (1-7) and the desk-scale
//! end-to-end pipeline with its trained-behaviour checks (8-12).
//!
//! Prints one PASS/FAIL line per criterion and exits non-zero on any failure.
//! Set `MCM_ACCEPTANCE_REUSE=1` to keep finished training runs from an earlier
//! invocation instead of retraining them.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use rand::Rng;

use common::*;
use mcm_sr::eval::pipeline::read_records;
use mcm_sr::eval::{spearman, ConditionMatchMatrix, TradeoffCurves};
use mcm_sr::metrics::losses::{ms_ssim as ms_ssim_tensor, pixel_loss, scalar, total_loss, LossWeights};
use mcm_sr::metrics::{mean_abs_error, ms_ssim, psnr, ssim, wilcoxon_signed_rank, WilcoxonMethod};
use mcm_sr::model::{
    conditional_instance_norm, count_params, filter_scaled_conv, BandProjector, Generator, NetConfig, Variant,
};
use mcm_sr::phantom::{kspace, SplitPlan};
use mcm_sr::train::TRAIN_RESOLUTIONS;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_dft() -> Outcome {
    let mut worst_rt: f64 = 0.0;
    let mut worst_idem: f64 = 0.0;
    let mut r = rng(1);
    for k in 0..100 {
        let x = random_field(64, 1000 + k);
        let back = kspace::inverse_dft(&kspace::forward_dft(&x).unwrap()).unwrap();
        worst_rt = worst_rt.max(rel_err(back.as_slice().unwrap(), x.as_slice().unwrap()));
        let n = TRAIN_RESOLUTIONS[r.random_range(0..TRAIN_RESOLUTIONS.len())];
        let once = kspace::degrade(&x, n).unwrap();
        let twice = kspace::degrade(&once, n).unwrap();
        worst_idem = worst_idem.max(rel_err(twice.as_slice().unwrap(), once.as_slice().unwrap()));
    }
    check(worst_rt < 1e-6 && worst_idem < 1e-6, format!("round trip {worst_rt:.2e}, truncate-zero-fill idempotence {worst_idem:.2e} (100 fields, tol 1e-6)"))
}

fn window_err(out: &Array2<f64>, measured: &Array2<f64>, n: usize) -> f64 {
    let a = kspace::kspace_truncate(out, n).unwrap();
    let b = kspace::kspace_truncate(measured, n).unwrap();
    let num: f64 = a.values.iter().zip(b.values.iter()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    num / b.energy().sqrt()
}

fn c2_consistency() -> Outcome {
    let mut worst_window: f64 = 0.0;
    let mut worst_twice: f64 = 0.0;
    for dtype in [DType::F64, DType::F32] {
        let proj = BandProjector::new(64, dtype).unwrap();
        let ns = [16, 22, 32, 64];
        let b = ns.len();
        let mut raw = Vec::new();
        let mut low = Vec::new();
        let mut lows = Vec::new();
        for (k, &n) in ns.iter().enumerate() {
            let gt = random_field(64, 50 + k as u64);
            let l = kspace::degrade(&gt, n).unwrap();
            raw.extend(random_field(64, 70 + k as u64).iter().copied());
            low.extend(l.iter().copied());
            lows.push(l);
        }
        let raw = tensor4(&raw, (b, 1, 64, 64), dtype);
        let low = tensor4(&low, (b, 1, 64, 64), dtype);
        let once = proj.data_consistency(&raw, &low, &ns).unwrap();
        let twice = proj.data_consistency(&once, &low, &ns).unwrap();
        worst_twice = worst_twice.max(rel_err(&flat(&twice), &flat(&once)));
        let o = flat(&once);
        for (k, &n) in ns.iter().enumerate() {
            let img = Array2::from_shape_vec((64, 64), o[k * 4096..(k + 1) * 4096].to_vec()).unwrap();
            worst_window = worst_window.max(window_err(&img, &lows[k], n));
        }
    }
    // The spectral (f64) implementation too.
    let gt = random_field(64, 90);
    let measured = kspace::kspace_truncate(&gt, 20).unwrap();
    let out = kspace::data_consistency(&random_field(64, 91), &measured).unwrap();
    worst_window = worst_window.max(window_err(&out, &kspace::degrade(&gt, 20).unwrap(), 20));
    let again = kspace::data_consistency(&out, &measured).unwrap();
    worst_twice = worst_twice.max(rel_err(again.as_slice().unwrap(), out.as_slice().unwrap()));
    check(worst_window < 1e-5 && worst_twice < 1e-5, format!("window deviation {worst_window:.2e}, idempotence {worst_twice:.2e} (tol 1e-5, f32 and f64)"))
}

fn c3_filter_scaling() -> Outcome {
    let (b, ci, co, h, w) = (3, 4, 5, 9, 7);
    let mut r = rng(3);
    let x: Vec<f64> = (0..b * ci * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
    let wt: Vec<f64> = (0..co * ci * 9).map(|_| r.random_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..co).map(|_| r.random_range(-1.0..1.0)).collect();
    let sc: Vec<f64> = (0..b * co * ci).map(|_| r.random_range(0.2..2.0)).collect();
    let xt = tensor4(&x, (b, ci, h, w), DType::F64);
    let wtt = tensor4(&wt, (co, ci, 3, 3), DType::F64);
    let bt = Tensor::from_vec(bias.clone(), co, &Device::Cpu).unwrap();
    let ones = Tensor::ones((co, ci), DType::F64, &Device::Cpu).unwrap();
    let plain = flat(&filter_scaled_conv(&xt, &wtt, Some(&bt), None).unwrap());
    let unit = flat(&filter_scaled_conv(&xt, &wtt, Some(&bt), Some(&ones)).unwrap());
    let exact = plain == unit;
    let add_bias = |mut v: Vec<f64>| {
        for (k, val) in v.iter_mut().enumerate() {
            *val += bias[(k / (h * w)) % co];
        }
        v
    };
    let oracle_plain = add_bias(conv3x3_oracle(&x, (b, ci, h, w), |_, o, i, kr, kc| wt[((o * ci + i) * 3 + kr) * 3 + kc], co));
    let plain_err = rel_err(&plain, &oracle_plain);
    let st = Tensor::from_vec(sc.clone(), (b, co, ci), &Device::Cpu).unwrap();
    let scaled = flat(&filter_scaled_conv(&xt, &wtt, Some(&bt), Some(&st)).unwrap());
    let oracle = add_bias(conv3x3_oracle(&x, (b, ci, h, w), |n, o, i, kr, kc| wt[((o * ci + i) * 3 + kr) * 3 + kc] * sc[(n * co + o) * ci + i], co));
    let scaled_err = rel_err(&scaled, &oracle);
    let mut worst32: f64 = 0.0;
    {
        let x32 = xt.to_dtype(DType::F32).unwrap();
        let w32 = wtt.to_dtype(DType::F32).unwrap();
        let s32 = st.to_dtype(DType::F32).unwrap();
        let out = flat(&filter_scaled_conv(&x32, &w32, None, Some(&s32)).unwrap());
        let no_bias = conv3x3_oracle(&x, (b, ci, h, w), |n, o, i, kr, kc| wt[((o * ci + i) * 3 + kr) * 3 + kc] * sc[(n * co + o) * ci + i], co);
        worst32 = worst32.max(rel_err(&out, &no_bias));
    }
    check(
        exact && plain_err < 1e-12 && scaled_err < 1e-6 && worst32 < 1e-6,
        format!("unit scales bit-identical: {exact}; plain vs loop {plain_err:.1e}; scaled vs materialized {scaled_err:.1e} (f64), {worst32:.1e} (f32)"),
    )
}

fn c4_cin() -> Outcome {
    let (b, c, h, w) = (2, 6, 12, 10);
    let mut r = rng(4);
    let x: Vec<f64> = (0..b * c * h * w).map(|_| r.random_range(-3.0..5.0)).collect();
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for dtype in [DType::F32, DType::F64] {
        let xt = tensor4(&x, (b, c, h, w), dtype);
        let ones = Tensor::ones((b, c), dtype, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros((b, c), dtype, &Device::Cpu).unwrap();
        let y = flat(&conditional_instance_norm(&xt, &ones, &zeros).unwrap());
        for ch in y.chunks(h * w) {
            let m = ch.iter().sum::<f64>() / ch.len() as f64;
            let s = (ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ch.len() as f64).sqrt();
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((s - 1.0).abs());
        }
    }
    let scale: Vec<f64> = (0..b * c).map(|_| r.random_range(0.5..2.0)).collect();
    let shift: Vec<f64> = (0..b * c).map(|_| r.random_range(-1.0..1.0)).collect();
    let got = flat(
        &conditional_instance_norm(
            &tensor4(&x, (b, c, h, w), DType::F64),
            &Tensor::from_vec(scale.clone(), (b, c), &Device::Cpu).unwrap(),
            &Tensor::from_vec(shift.clone(), (b, c), &Device::Cpu).unwrap(),
        )
        .unwrap(),
    );
    let mut oracle = vec![0.0; x.len()];
    for k in 0..b * c {
        let ch = &x[k * h * w..(k + 1) * h * w];
        let m = ch.iter().sum::<f64>() / ch.len() as f64;
        let var = ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ch.len() as f64;
        for (j, v) in ch.iter().enumerate() {
            oracle[k * h * w + j] = scale[k] * (v - m) / (var + 1e-5).sqrt() + shift[k];
        }
    }
    let err = rel_err(&got, &oracle);
    check(
        worst_mean < 1e-5 && worst_std < 1e-4 && err < 1e-10,
        format!("identity modulation |mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}; loop oracle {err:.1e}"),
    )
}

fn c5_gradients() -> Outcome {
    // Loss gradient with respect to the output image.
    let batch = toy_batch(16, 8, 2, DType::F64, 5);
    let s0 = flat(&batch.inputs.lowres);
    let sv = Var::from_tensor(&batch.inputs.lowres).unwrap();
    let w = LossWeights::default();
    let loss = total_loss(sv.as_tensor(), &batch.target, &batch.mask, &w, None).unwrap();
    let g = flat(loss.backward().unwrap().get(sv.as_tensor()).unwrap());
    let mut r = rng(55);
    let h = 1e-6;
    let mut worst_s: f64 = 0.0;
    for _ in 0..60 {
        let idx = r.random_range(0..s0.len());
        let eval = |d: f64| {
            let mut v = s0.clone();
            v[idx] += d;
            scalar(&total_loss(&tensor4(&v, (2, 1, 16, 16), DType::F64), &batch.target, &batch.mask, &w, None).unwrap()).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        worst_s = worst_s.max((g[idx] - fd).abs() / g[idx].abs().max(fd.abs()).max(1e-6));
    }
    let mut lines = vec![format!("d loss/d S {worst_s:.1e}")];
    let mut ok = worst_s < 1e-3;
    for variant in [Variant::FilterScalingMet, Variant::Hypernet, Variant::AmLayer] {
        let gen = Generator::new(toy_config(variant), 9, DType::F64).unwrap();
        let (worst, checked, at) = generator_gradient_check(&gen, &batch, 2, 1e-6, 77);
        ok &= worst < 1e-3;
        lines.push(format!("{variant} {worst:.1e} over {checked} entries"));
        if worst >= 1e-3 {
            lines.push(format!("worst at {at}"));
        }
    }
    check(ok, format!("{} (tol 1e-3, f64, 16x16)", lines.join("; ")))
}

fn c6_metrics() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let x = random_field(64, 61);
    let same = ms_ssim(&x, &x, 3).unwrap();
    let xt = tensor4(x.as_slice().unwrap(), (1, 1, 64, 64), DType::F64);
    let same_t = flat(&ms_ssim_tensor(&xt, &xt, 3).unwrap())[0];
    ok &= (same - 1.0).abs() < 1e-12 && (same_t - 1.0).abs() < 1e-12;
    notes.push(format!("MS-SSIM(x,x) {same} / {same_t}"));
    let mut worst: f64 = 0.0;
    for k in 0..5 {
        let a = random_field(32, 600 + k);
        let b = a.mapv(|v| v * 0.8 + 0.05) + random_field(32, 700 + k).mapv(|v| 0.1 * v);
        let mask = random_mask(32, 0.97, 800 + k);
        worst = worst.max((ssim(&a, &b, &mask).unwrap() - ssim_oracle(&a, &b, &mask)).abs());
        worst = worst.max((psnr(&a, &b, &mask, 1.0).unwrap() - psnr_oracle(&a, &b, &mask)).abs());
        worst = worst.max((mean_abs_error(&a, &b, &mask).unwrap() - l1_oracle(&a, &b, &mask)).abs());
        let mf: Vec<f64> = mask.iter().map(|&m| f64::from(u8::from(m))).collect();
        let pl = flat(
            &pixel_loss(
                &tensor4(a.as_slice().unwrap(), (1, 1, 32, 32), DType::F64),
                &tensor4(b.as_slice().unwrap(), (1, 1, 32, 32), DType::F64),
                &tensor4(&mf, (1, 1, 32, 32), DType::F64),
            )
            .unwrap(),
        )[0];
        worst = worst.max((pl - l1_oracle(&a, &b, &mask)).abs());
    }
    ok &= worst < 1e-6;
    notes.push(format!("SSIM/PSNR/L1 vs loops {worst:.1e}"));
    let mut r = rng(66);
    let mut worst_p: f64 = 0.0;
    let mut cases = 0;
    for n in 5..=10 {
        for trial in 0..40 {
            let a: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            // Small integer differences produce ties and zeros.
            let b: Vec<f64> = a.iter().map(|v| v + if trial % 2 == 0 { r.random_range(-3i32..=4) as f64 } else { r.random_range(-1.0..1.5) }).collect();
            let want = if a.iter().zip(&b).all(|(x, y)| x == y) { continue } else { wilcoxon_enumeration(&a, &b) };
            match wilcoxon_signed_rank(&a, &b) {
                Ok(res) => {
                    ok &= res.method == WilcoxonMethod::Exact;
                    worst_p = worst_p.max((res.p_value - want).abs());
                    cases += 1;
                }
                Err(mcm_sr::Error::Degenerate(_)) => {}
                Err(e) => return Err(format!("wilcoxon failed: {e}")),
            }
        }
    }
    let six = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap().p_value;
    ok &= worst_p < 1e-9 && (six - 0.03125).abs() < 1e-12;
    notes.push(format!("Wilcoxon vs enumeration {worst_p:.1e} over {cases} samples (n 5..=10), six positive pairs p={six}"));
    check(ok, notes.join("; "))
}

fn c7_param_order() -> Outcome {
    let order = [Variant::Unconditioned, Variant::AmLayer, Variant::FilterScaling, Variant::FilterScalingMet, Variant::Hypernet];
    let counts: Vec<usize> = order.iter().map(|&v| count_params(&NetConfig::paper(v))).collect();
    let increasing = counts.windows(2).all(|w| w[0] < w[1]);
    let mut built_ok = true;
    for v in order {
        let c = NetConfig::desk(v);
        built_ok &= Generator::new(c.clone(), 0, DType::F32).unwrap().param_count() == count_params(&c);
    }
    let listing: Vec<String> = order.iter().zip(&counts).map(|(v, c)| format!("{v} {c}")).collect();
    check(increasing && built_ok, format!("{} (instantiated counts agree: {built_ok})", listing.join(" < ")))
}

// ---- desk-scale pipeline ----

const SEED: &str = "0";
const FOLD: &str = "0";

struct Pipeline {
    root: PathBuf,
    data: PathBuf,
    splits: PathBuf,
    runs: PathBuf,
    results: PathBuf,
    fig3_case: String,
    log: Vec<String>,
    failure: Option<String>,
}

fn mcm(args: &[&str]) -> Result<String, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_mcm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("could not launch mcm: {e}"))?;
    if !out.status.success() {
        return Err(format!("`mcm {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    eprintln!("  [{:>6.1}s] mcm {}", start.elapsed().as_secs_f64(), args.join(" "));
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// (run directory, variant, extra training flags)
fn training_grid() -> Vec<(&'static str, &'static str, Vec<&'static str>)> {
    vec![
        ("unconditioned", "unconditioned", vec!["--lambda-max", "0"]),
        ("am_layer", "am_layer", vec!["--lambda-max", "0"]),
        ("hypernet", "hypernet", vec!["--lambda-max", "0"]),
        ("filter_scaling", "filter_scaling", vec!["--lambda-max", "0"]),
        ("filter_scaling_met", "filter_scaling_met", vec!["--lambda-max", "0"]),
        ("single_scale_16", "single_scale", vec!["--lambda-max", "0", "--single-n", "16"]),
        ("single_scale_24", "single_scale", vec!["--lambda-max", "0", "--single-n", "24"]),
        ("single_scale_32", "single_scale", vec!["--lambda-max", "0", "--single-n", "32"]),
        ("filter_scaling_met_adv", "filter_scaling_met", vec![]),
    ]
}

const TRAIN_ARTIFACTS: [&str; 4] = ["best.ckpt", "final.ckpt", "train_log.jsonl", "train_summary.json"];

fn run_pipeline(reuse: bool) -> Pipeline {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if !reuse && root.exists() {
        std::fs::remove_dir_all(&root).expect("clear previous acceptance run");
    }
    std::fs::create_dir_all(&root).unwrap();
    let mut pl = Pipeline {
        data: root.join("data"),
        splits: root.join("splits.json"),
        runs: root.join("runs"),
        results: root.join("results"),
        root,
        fig3_case: String::new(),
        log: Vec::new(),
        failure: None,
    };
    let result = (|| -> Result<(), String> {
        if !(reuse && pl.data.join("dataset.json").is_file()) {
            mcm(&["phantom", "generate", "--out", p(&pl.data), "--cases", "64", "--seed", SEED])?;
        }
        mcm(&["phantom", "splits", "--dir", p(&pl.data), "--folds", "5", "--seed", SEED, "--out", p(&pl.splits)])?;
        for (dir, variant, extra) in training_grid() {
            let out = pl.runs.join(dir);
            if reuse && TRAIN_ARTIFACTS.iter().all(|f| out.join(f).is_file()) {
                pl.log.push(format!("reused {dir}"));
                continue;
            }
            let mut args = vec![
                "train", "--data", p(&pl.data), "--splits", p(&pl.splits), "--fold", FOLD, "--variant", variant,
                "--preset", "desk", "--out", p(&out), "--seed", SEED,
            ];
            args.extend(extra.iter().copied());
            mcm(&args)?;
        }
        let plan = SplitPlan::read(&pl.splits).map_err(|e| e.to_string())?;
        pl.fig3_case = plan.fold(0).map_err(|e| e.to_string())?.test[0].clone();
        let common = ["--data", p(&pl.data), "--splits", p(&pl.splits), "--fold", FOLD, "--out", p(&pl.results)];
        let mut t1 = vec!["eval", "table1", "--ckpt-dir", p(&pl.runs)];
        t1.extend(common);
        mcm(&t1)?;
        for axis in ["resolution", "metabolite"] {
            let mut a = vec!["eval", "fig2", "--axis", axis, "--ckpt-dir", p(&pl.runs)];
            a.extend(common);
            mcm(&a)?;
        }
        mcm(&[
            "eval", "fig3", "--case", &pl.fig3_case, "--lambdas", "0,0.03,0.06,0.09", "--ckpt-dir", p(&pl.runs), "--data", p(&pl.data),
            "--out", p(&pl.results),
        ])?;
        let mut f4 = vec!["eval", "fig4", "--ckpt-dir", p(&pl.runs)];
        f4.extend(common);
        mcm(&f4)?;
        Ok(())
    })();
    if let Err(e) = result {
        pl.failure = Some(e);
    }
    pl
}

fn require_pipeline(pl: &Pipeline) -> Result<(), String> {
    match &pl.failure {
        Some(e) => Err(format!("pipeline did not complete: {e}")),
        None => Ok(()),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, k) = v.fold((0.0, 0usize), |(s, k), x| (s + x, k + 1));
    s / k as f64
}

fn c8_parity(pl: &Pipeline) -> Outcome {
    require_pipeline(pl)?;
    let recs = read_records(&pl.results.join("table1_records.jsonl")).map_err(|e| e.to_string())?;
    let ns = [16usize, 24, 32];
    let pick = |m: &str| mean(recs.iter().filter(|r| r.method == m && ns.contains(&r.n)).map(|r| r.ssim));
    let fs = pick("filter_scaling");
    let ss = pick("single_scale");
    let per_n: Vec<String> = ns
        .iter()
        .map(|&n| {
            let f = mean(recs.iter().filter(|r| r.method == "filter_scaling" && r.n == n).map(|r| r.ssim));
            let s = mean(recs.iter().filter(|r| r.method == "single_scale" && r.n == n).map(|r| r.ssim));
            format!("n={n}: {f:.4} vs {s:.4}")
        })
        .collect();
    check((fs - ss).abs() <= 0.01, format!("filter_scaling {fs:.4} vs single-scale {ss:.4}, |diff| {:.4} (tol 0.01); {}", (fs - ss).abs(), per_n.join(", ")))
}

fn read_matrix(path: &Path) -> Result<ConditionMatchMatrix, String> {
    serde_json::from_slice(&std::fs::read(path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

fn c9_condition_match(pl: &Pipeline) -> Outcome {
    require_pipeline(pl)?;
    let res = read_matrix(&pl.results.join("fig2_resolution.json"))?;
    let met = read_matrix(&pl.results.join("fig2_metabolite.json"))?;
    let square = res.cells.len() == 9 && res.cells.iter().all(|r| r.len() == 9) && met.cells.len() == 7 && met.cells.iter().all(|r| r.len() == 7);
    let res_ok = res.diagonal_mean() > res.off_diagonal_mean();
    let failing = met.failing_columns();
    check(
        square && res_ok && failing.len() <= 1,
        format!(
            "resolution diag {:.4} vs off {:.4}; metabolite diag {:.4} vs off {:.4}, failing metabolites {:?} (allowed 1)",
            res.diagonal_mean(),
            res.off_diagonal_mean(),
            met.diagonal_mean(),
            met.off_diagonal_mean(),
            failing
        ),
    )
}

fn c10_metabolite_gain(pl: &Pipeline) -> Outcome {
    require_pipeline(pl)?;
    let recs = read_records(&pl.results.join("table1_records.jsonl")).map_err(|e| e.to_string())?;
    let by = |m: &str| mean(recs.iter().filter(|r| r.method == m).map(|r| r.ssim));
    let (met, fs) = (by("filter_scaling_met"), by("filter_scaling"));
    check(met >= fs, format!("filter_scaling_met {met:.4} vs filter_scaling {fs:.4}"))
}

fn c11_tradeoff(pl: &Pipeline) -> Outcome {
    require_pipeline(pl)?;
    let curves: TradeoffCurves =
        serde_json::from_slice(&std::fs::read(pl.results.join("fig4_curves.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let at = |l: f64| curves.lambdas.iter().position(|x| (x - l).abs() < 1e-12).ok_or(format!("lambda {l} missing from curves"));
    let (i0, i9) = (at(0.0)?, at(0.09)?);
    let sweep = [0.0, 0.03, 0.06, 0.09];
    let hf: Vec<f64> = sweep.iter().map(|&l| at(l).map(|i| curves.hf_energy[i])).collect::<Result<_, _>>()?;
    let rho = spearman(&sweep, &hf).unwrap_or(f64::NAN);
    check(
        curves.psnr[i9] < curves.psnr[i0] && rho > 0.0,
        format!("PSNR {:.3} at 0.09 vs {:.3} at 0; hf_energy {:?}, Spearman {rho:.3}", curves.psnr[i9], curves.psnr[i0], hf.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>()),
    )
}

fn c12_cli(pl: &Pipeline) -> Outcome {
    require_pipeline(pl)?;
    let mut missing = Vec::new();
    for (dir, _, _) in training_grid() {
        for f in TRAIN_ARTIFACTS {
            if !pl.runs.join(dir).join(f).is_file() {
                missing.push(format!("runs/{dir}/{f}"));
            }
        }
    }
    let results = [
        "table1_records.jsonl".to_string(),
        "table1_summary.csv".into(),
        "table1_by_n.csv".into(),
        "table1_significance.csv".into(),
        "table1_significance.json".into(),
        "fig2_resolution.json".into(),
        "fig2_resolution.csv".into(),
        "fig2_resolution.svg".into(),
        "fig2_metabolite.json".into(),
        "fig2_metabolite.csv".into(),
        "fig2_metabolite.svg".into(),
        format!("fig3_{}_Gly_n16.png", pl.fig3_case),
        format!("fig3_{}_Gly_n16.json", pl.fig3_case),
        "fig4_records.jsonl".into(),
        "fig4_curves.json".into(),
        "fig4_curves.csv".into(),
        "fig4_curves.svg".into(),
    ];
    for f in &results {
        let path = pl.results.join(f);
        if !path.is_file() || std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true) {
            missing.push(format!("results/{f}"));
        }
    }
    let recs = read_records(&pl.results.join("table1_records.jsonl")).map_err(|e| e.to_string())?;
    let mut per_method: BTreeMap<String, usize> = BTreeMap::new();
    for r in &recs {
        *per_method.entry(r.method.clone()).or_default() += 1;
    }
    let test_cases = SplitPlan::read(&pl.splits).map_err(|e| e.to_string())?.fold(0).map_err(|e| e.to_string())?.test.len();
    let expected = test_cases * 7 * 9;
    let counts_ok = ["unconditioned", "am_layer", "hypernet", "filter_scaling", "filter_scaling_met"]
        .iter()
        .all(|m| per_method.get(*m) == Some(&expected))
        && per_method.get("single_scale") == Some(&(test_cases * 7 * 3));
    check(
        missing.is_empty() && counts_ok,
        format!("{} training runs, {} result files under {}; missing {:?}; records per method {:?}", training_grid().len(), results.len(), pl.root.display(), missing, per_method),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; list mode must not train.
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let reuse = std::env::var("MCM_ACCEPTANCE_REUSE").map(|v| v == "1").unwrap_or(false);
    let mut lines = Vec::new();
    let mut failed = 0;
    let mut record = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let line = format!("[{tag}] {id:>2}. {name} ({:.1}s): {detail}", start.elapsed().as_secs_f64());
        println!("{line}");
        lines.push(line);
    };
    record(1, "DFT round trip and zero-fill idempotence", &mut c1_dft);
    record(2, "data-consistency projection", &mut c2_consistency);
    record(3, "filter scaling identity and oracle", &mut c3_filter_scaling);
    record(4, "conditional instance norm", &mut c4_cin);
    record(5, "gradient checks", &mut c5_gradients);
    record(6, "metric oracles and exact Wilcoxon", &mut c6_metrics);
    record(7, "parameter-count ordering", &mut c7_param_order);
    eprintln!("running the desk-scale pipeline{}", if reuse { " (reusing finished runs)" } else { "" });
    let start = Instant::now();
    let pl = run_pipeline(reuse);
    eprintln!("pipeline finished in {:.1} min", start.elapsed().as_secs_f64() / 60.0);
    for l in &pl.log {
        eprintln!("  {l}");
    }
    record(8, "multi-scale parity with single-scale networks", &mut || c8_parity(&pl));
    record(9, "condition-match matrices", &mut || c9_condition_match(&pl));
    record(10, "metabolite-awareness gain", &mut || c10_metabolite_gain(&pl));
    record(11, "adversarial trade-off", &mut || c11_tradeoff(&pl));
    record(12, "end-to-end CLI artifacts", &mut || c12_cli(&pl));
    let report = pl.root.join("acceptance_report.txt");
    let _ = std::fs::write(&report, lines.join("\n") + "\n");
    println!("acceptance: {} passed, {failed} failed (report: {})", 12 - failed, report.display());
    if failed > 0 {
        std::process::exit(1);
    }
}
