use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mpqdm_pipeline::config::{GroupSize, RunConfig};
use mpqdm_pipeline::runner::{
    self, AllocationMode, ModelKind, ALLOC_FILE, CALIB_FILE, FP_MODEL_FILE, Q_MODEL_FILE,
    REPORT_FILE,
};

/// Mixed-precision quantization pipeline for a small diffusion denoiser.
#[derive(Parser)]
#[command(name = "mpqdm", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the run's artifacts.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        match &self.config {
            Some(path) => Ok(RunConfig::load(path)?),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Fp,
    Quantized,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the full-precision teacher on the toy dataset.
    TrainFp {
        #[command(flatten)]
        common: Common,
    },
    /// Collect per-layer activation statistics from teacher runs.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Compute smooth factors and the per-channel bit allocation.
    Allocate {
        #[command(flatten)]
        common: Common,
        /// Override the target weight bit-width.
        #[arg(long)]
        weight_bits: Option<u8>,
        /// Override the search group size ("auto" or an integer).
        #[arg(long)]
        group_size: Option<String>,
        /// Override the bonus promotion fraction.
        #[arg(long)]
        plus_fraction: Option<f64>,
        /// Use a uniform allocation instead of the outlier-driven search.
        #[arg(long)]
        uniform: bool,
    },
    /// Fine-tune adapters and quantizer scales against the teacher.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Override the distillation weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Override the smoothing window.
        #[arg(long)]
        smooth_steps: Option<usize>,
        /// Override the fine-tuning seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples from the teacher or the quantized student.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "quantized")]
        model: ModelArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        /// Output CSV path.
        #[arg(long, default_value = "samples.csv")]
        out: PathBuf,
    },
    /// Trajectory MSE, SQNR and mode coverage against the teacher.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Override the number of evaluation seeds.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Merge stage outputs into report.toml.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage in order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Use a uniform allocation instead of the outlier-driven search.
        #[arg(long)]
        uniform: bool,
    },
}

fn parse_group_size(text: &str) -> anyhow::Result<GroupSize> {
    if text == "auto" {
        Ok(GroupSize::Auto)
    } else {
        let k: usize = text
            .parse()
            .map_err(|_| anyhow::anyhow!("group size must be \"auto\" or an integer"))?;
        anyhow::ensure!(k >= 1, "group size must be >= 1");
        Ok(GroupSize::Fixed(k))
    }
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::TrainFp { common } => {
            let cfg = common.load()?;
            runner::stage_train_fp(&cfg, &common.run_dir)?;
            println!(
                "teacher written to {}",
                common.run_dir.join(FP_MODEL_FILE).display()
            );
        }
        Cmd::Calibrate { common } => {
            let cfg = common.load()?;
            runner::stage_calibrate(&cfg, &common.run_dir)?;
            println!(
                "calibration written to {}",
                common.run_dir.join(CALIB_FILE).display()
            );
        }
        Cmd::Allocate {
            common,
            weight_bits,
            group_size,
            plus_fraction,
            uniform,
        } => {
            let mut cfg = common.load()?;
            if let Some(w) = weight_bits {
                cfg.quant.weight_bits = w;
                cfg.bits = None;
            }
            if let Some(g) = &group_size {
                cfg.quant.group_size = parse_group_size(g)?;
            }
            if let Some(p) = plus_fraction {
                cfg.quant.plus_fraction = p;
            }
            cfg.validate()?;
            let mode = if uniform {
                AllocationMode::Uniform
            } else {
                AllocationMode::Omq
            };
            runner::stage_allocate(&cfg, &common.run_dir, mode)?;
            println!(
                "allocation written to {}",
                common.run_dir.join(ALLOC_FILE).display()
            );
        }
        Cmd::Finetune {
            common,
            lambda,
            smooth_steps,
            seed,
        } => {
            let mut cfg = common.load()?;
            if let Some(l) = lambda {
                cfg.distill.lambda = l;
            }
            if let Some(n) = smooth_steps {
                cfg.distill.smooth_steps = n;
            }
            if let Some(s) = seed {
                cfg.finetune.seed = s;
            }
            cfg.validate()?;
            runner::stage_finetune(&cfg, &common.run_dir)?;
            println!(
                "student written to {}",
                common.run_dir.join(Q_MODEL_FILE).display()
            );
        }
        Cmd::Sample {
            common,
            model,
            seed,
            batch,
            out,
        } => {
            let cfg = common.load()?;
            let kind = match model {
                ModelArg::Fp => ModelKind::Fp,
                ModelArg::Quantized => ModelKind::Quantized,
            };
            let coverage = runner::stage_sample(&cfg, &common.run_dir, kind, seed, batch, &out)?;
            println!(
                "{} samples written to {} (mode coverage {:.4})",
                batch,
                out.display(),
                coverage
            );
        }
        Cmd::Eval { common, seeds } => {
            let mut cfg = common.load()?;
            if let Some(s) = seeds {
                cfg.eval.seeds = s;
            }
            cfg.validate()?;
            runner::stage_eval(&cfg, &common.run_dir)?;
            println!(
                "evaluation written to {}",
                common.run_dir.join("eval_seeds.csv").display()
            );
        }
        Cmd::Report { common } => {
            let cfg = common.load()?;
            let report = runner::stage_report(&cfg, &common.run_dir)?;
            println!(
                "report written to {} (median trajectory MSE {:.6})",
                common.run_dir.join(REPORT_FILE).display(),
                report.evaluation.median_trajectory_mse
            );
        }
        Cmd::Run { common, uniform } => {
            let cfg = common.load()?;
            let mode = if uniform {
                AllocationMode::Uniform
            } else {
                AllocationMode::Omq
            };
            let report = runner::run_all(&cfg, &common.run_dir, mode)?;
            println!(
                "pipeline finished; report at {} (median trajectory MSE {:.6})",
                common.run_dir.join(REPORT_FILE).display(),
                report.evaluation.median_trajectory_mse
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
