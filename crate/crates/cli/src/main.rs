use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use punet_core::ExperimentConfig;

mod commands;
mod provenance;

#[derive(Parser, Debug)]
#[command(name = "punet", version, about = "Prompt-able UNet: pretraining, prompt adaptation and evaluation")]
pub struct Cli {
    /// Experiment configuration (JSON). Defaults to the toy preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed; `PUNET_SEED` overrides both.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic phantom dataset into `--out`.
    GenerateData {
        /// Phantom catalog (JSON); defaults to the toy one.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Phase 1: self- and/or segmentation-supervised pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// joint, seg, self or random.
        #[arg(long, default_value = "joint")]
        variant: String,
        /// Overrides the step count derived from the config.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Phase 2: adapt a pretrained checkpoint to the held-out classes.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Adaptation scheme; defaults to the configured one.
        #[arg(long)]
        scheme: Option<String>,
        /// Training subjects: a count or `all`.
        #[arg(long, default_value = "all")]
        budget: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on a split and write the per-subject CSV.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt checkpoint to install before evaluating.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long, default_value = "b")]
        task: String,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Adapt and evaluate every scheme × annotation budget.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated schemes.
        #[arg(long, default_value = "fixed,bias,prompt_no_bias,prompt,bias_plus_prompt,adapter,decoder,full")]
        schemes: String,
        /// Comma-separated subject budgets.
        #[arg(long, default_value = "2,4,all")]
        budgets: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Teacher-view similarity heatmap for a student query pixel.
    Simmap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the test split's slices.
        #[arg(long, default_value_t = 0)]
        slice: usize,
        /// Query pixel in the student view; defaults to its centre.
        #[arg(long)]
        row: Option<usize>,
        #[arg(long)]
        col: Option<usize>,
    },
    /// Finite-difference check of every registered differentiable operation.
    Gradcheck {
        /// Restrict to one operation.
        #[arg(long)]
        op: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Adapt { .. } => "adapt",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Simmap { .. } => "simmap",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Config file (or toy preset), then `--seed`, then `PUNET_SEED`.
pub fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let cfg = cfg.with_env_overrides()?;
    cfg.validate()?;
    Ok(cfg)
}

/// 3 for numeric failures, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<punet_core::Error>() {
            return match e {
                punet_core::Error::Numeric(_) | punet_core::Error::NonFinite(_) => 3,
                _ => 2,
            };
        }
        if cause.is::<commands::NumericFailure>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut run = provenance::Run::start(&cli);
    let result = resolve_config(&cli).and_then(|cfg| {
        run.set_config(&cfg);
        commands::dispatch(&cli, &cfg, &mut run)
    });
    let code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(e)
        }
    };
    if let Err(e) = run.finish(&cli.out, code, result.as_ref().err()) {
        eprintln!("error: could not write run.json: {e:#}");
        return ExitCode::from(if code == 0 { 2 } else { code });
    }
    ExitCode::from(code)
}
