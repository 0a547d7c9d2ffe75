use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mcm_sr::data::load_fold;
use mcm_sr::eval::pipeline::{self, ModelSource};
use mcm_sr::eval::{render, Axis, CURVE_LAMBDAS, SWEEP_LAMBDAS};
use mcm_sr::model::Variant;
use mcm_sr::service::http::{serve, AppState};
use mcm_sr::service::{infer, load_model, InferRequest};
use mcm_sr::phantom::{self, make_splits, PhantomSpec, SplitPlan};
use mcm_sr::train::{train, Preset, TrainConfig};

#[derive(Parser)]
#[command(name = "mcm", version, about = "Multi-conditional super-resolution of metabolic maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantom data.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Train one network variant on one fold.
    Train(TrainArgs),
    /// Reproduce the comparative experiments from trained checkpoints.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Serve inference over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Verify data consistency of every response before sending it.
        #[arg(long = "self-check")]
        self_check: bool,
    },
    /// Super-resolve one stored case and write the result as a PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        case: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value = "Gly")]
        metabolite: String,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct FoldArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct SourceArgs {
    /// A specific checkpoint file.
    #[arg(long, conflicts_with = "ckpt_dir")]
    ckpt: Option<PathBuf>,
    /// Directory of training runs to pick a suitable checkpoint from.
    #[arg(long = "ckpt-dir")]
    ckpt_dir: Option<PathBuf>,
}

impl SourceArgs {
    fn source(&self) -> Result<ModelSource> {
        match (&self.ckpt, &self.ckpt_dir) {
            (Some(p), _) => Ok(ModelSource::Checkpoint(p.clone())),
            (None, Some(d)) => Ok(ModelSource::Directory(d.clone())),
            (None, None) => anyhow::bail!("give --ckpt or --ckpt-dir"),
        }
    }
}

fn parse_lambdas(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|t| t.trim().parse::<f64>().with_context(|| format!("bad lambda `{t}`"))).collect()
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Variant comparison on the test fold with paired significance tests.
    Table1 {
        #[arg(long = "ckpt-dir")]
        ckpt_dir: PathBuf,
        #[command(flatten)]
        fold: FoldArgs,
    },
    /// Condition-match matrix along one conditioning axis.
    Fig2 {
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        fold: FoldArgs,
    },
    /// Adversarial-weight sweep strip for one case.
    Fig3 {
        #[arg(long)]
        case: String,
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long, default_value = "Gly")]
        metabolite: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
    },
    /// Fidelity and sharpness against the adversarial weight.
    Fig4 {
        #[arg(long)]
        lambdas: Option<String>,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        fold: FoldArgs,
    },
}

fn run_eval(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Table1 { ckpt_dir, fold: f } => {
            let t = pipeline::table1(&ckpt_dir, &f.data, &f.splits, f.fold, &f.out)?;
            println!("{:<20} {:>8} {:>20} {:>20}", "method", "records", "PSNR", "SSIM");
            for s in &t.summaries {
                println!("{:<20} {:>8} {:>20} {:>20}", s.group, s.records, s.psnr.to_string(), s.ssim.to_string());
            }
            for r in &t.significance {
                let p = |w: &Option<mcm_sr::metrics::WilcoxonResult>| w.map(|w| format!("{:.3e}", w.p_value)).unwrap_or("NA".into());
                println!("{} vs {}: PSNR p={} SSIM p={} ({} pairs)", r.method_a, r.method_b, p(&r.psnr), p(&r.ssim), r.pairs);
            }
            print_files(&t.files);
        }
        EvalCmd::Fig2 { axis, source, fold: f } => {
            let axis: Axis = axis.parse()?;
            let o = pipeline::fig2(&source.source()?, &f.data, &f.splits, f.fold, axis, &f.out)?;
            println!(
                "{axis} matrix for {}: diagonal mean {:.4}, off-diagonal mean {:.4}, failing columns {:?}",
                o.matrix.method,
                o.matrix.diagonal_mean(),
                o.matrix.off_diagonal_mean(),
                o.matrix.failing_columns()
            );
            print_files(&o.files);
        }
        EvalCmd::Fig3 { case, lambdas, metabolite, n, data, out, source } => {
            let lambdas = lambdas.as_deref().map(parse_lambdas).transpose()?.unwrap_or_else(|| SWEEP_LAMBDAS.to_vec());
            let o = pipeline::fig3(&source.source()?, &data, &case, metabolite.parse()?, n, &lambdas, &out)?;
            for p in &o.sweep.panels {
                match p.metrics {
                    Some(m) => println!("{:<14} PSNR {:.2}  SSIM {:.4}  HF {:.4}", p.label, m.psnr, m.ssim, m.hf_energy),
                    None => println!("{:<14}", p.label),
                }
            }
            print_files(&o.files);
        }
        EvalCmd::Fig4 { lambdas, source, fold: f } => {
            let lambdas = lambdas.as_deref().map(parse_lambdas).transpose()?.unwrap_or_else(|| CURVE_LAMBDAS.to_vec());
            let o = pipeline::fig4(&source.source()?, &f.data, &f.splits, f.fold, &lambdas, &f.out)?;
            let c = &o.curves;
            for i in 0..c.lambdas.len() {
                println!("lambda {:<5} PSNR {:.3}  SSIM {:.4}  HF {:.4}", c.lambdas[i], c.psnr[i], c.ssim[i], c.hf_energy[i]);
            }
            print_files(&o.files);
        }
    }
    Ok(())
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate a phantom dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "tumor-prob")]
        tumor_prob: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Write a cross-validation split plan for a dataset.
    Splits {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    splits: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    variant: String,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed input resolution (required for single_scale).
    #[arg(long = "single-n")]
    single_n: Option<usize>,
    /// Upper end of the adversarial weight range; 0 disables the critic.
    #[arg(long = "lambda-max")]
    lambda_max: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "max-steps")]
    max_steps: Option<usize>,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let variant: Variant = a.variant.parse()?;
    let preset: Preset = a.preset.parse()?;
    let mut config = TrainConfig::preset(preset, a.seed);
    match (variant, a.single_n) {
        (Variant::SingleScale, Some(n)) => config = config.single_resolution(n),
        (Variant::SingleScale, None) => anyhow::bail!("single_scale needs --single-n"),
        (_, Some(_)) => anyhow::bail!("--single-n only applies to single_scale"),
        _ => {}
    }
    if let Some(l) = a.lambda_max {
        config.lambda_max = l;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(lr) = a.lr {
        config.learning_rate = lr;
    }
    config.max_steps = a.max_steps;
    let plan = SplitPlan::read(&a.splits)?;
    let data = load_fold(&a.data, &plan, a.fold).context("loading fold")?;
    let outcome = train(&config, &preset.net_config(variant), &data, &a.out)?;
    println!(
        "trained {variant}: best epoch {} val SSIM {:.4}; checkpoints in {}",
        outcome.best_epoch,
        outcome.best_val_ssim,
        a.out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Phantom(PhantomCmd::Generate { out, cases, seed, tumor_prob, noise }) => {
            let mut spec = PhantomSpec { seed, ..PhantomSpec::default() };
            if let Some(p) = tumor_prob {
                spec.tumor_probability = p;
            }
            if let Some(s) = noise {
                spec.noise_sigma = s;
            }
            let manifest = phantom::write_dataset(&out, &spec, cases)?;
            println!("wrote {} cases to {}", manifest.cases.len(), out.display());
        }
        Command::Phantom(PhantomCmd::Splits { dir, folds, seed, out }) => {
            let manifest = phantom::read_dataset_manifest(&dir)?;
            let plan = make_splits(&manifest.cases, folds, seed)?;
            plan.write(&out)?;
            println!("wrote {folds}-fold plan to {}", out.display());
        }
        Command::Train(a) => run_train(a)?,
        Command::Eval(cmd) => run_eval(cmd)?,
        Command::Serve { ckpt, data, port, host, self_check } => {
            let handle = load_model(&ckpt)?;
            println!("serving {} ({}) on http://{host}:{port}", handle.variant(), ckpt.display());
            let state = AppState { handle: std::sync::Arc::new(handle), data_dir: data, self_check };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                serve(listener, state).await
            })?;
        }
        Command::Infer { ckpt, data, case, n, metabolite, lambda, out } => {
            let handle = load_model(&ckpt)?;
            let req = InferRequest {
                case_id: Some(case),
                inline: None,
                n,
                metabolite,
                lambda,
                include_baseline: false,
                include_ground_truth: false,
            };
            let resp = infer(&handle, Some(&data), &req, true)?;
            let image = resp.sr_image.values.decode()?;
            std::fs::write(&out, render::encode_png(&image, resp.display_range[0], resp.display_range[1])?)?;
            for w in &resp.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({
                "output": out.display().to_string(),
                "condition": resp.condition_echo,
                "metrics": resp.metrics,
                "consistency_residual": resp.consistency_residual,
            }))?);
        }
    }
    Ok(())
}
