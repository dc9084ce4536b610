use std::path::PathBuf;
use std::process::ExitCode;

use affectkit_core::datamodel::{SmoothingKind, Task};
use affectkit_core::pipeline::Pipeline;
use affectkit_core::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "affectkit", version, about = "Masked-autoencoder features and temporal fusion for facial affect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Au,
    Expr,
    Va,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Au => Task::Au,
            TaskArg::Expr => Task::Expr,
            TaskArg::Va => Task::Va,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SmoothArg {
    None,
    Gaussian,
    Median,
    Average,
}

impl From<SmoothArg> for SmoothingKind {
    fn from(s: SmoothArg) -> Self {
        match s {
            SmoothArg::None => SmoothingKind::None,
            SmoothArg::Gaussian => SmoothingKind::Gaussian,
            SmoothArg::Median => SmoothingKind::Median,
            SmoothArg::Average => SmoothingKind::Average,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the root seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct TaskArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "au")]
    task: TaskArg,
}

#[derive(clap::Args)]
struct SmoothArgs {
    #[command(flatten)]
    inner: TaskArgs,
    /// Smoothing filter; defaults to the config's `[smoothing] kind`.
    #[arg(long, value_enum)]
    smooth: Option<SmoothArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised masked-autoencoder pretraining.
    Pretrain(Common),
    /// Frame-level fine-tuning of the pretrained encoder.
    Finetune(TaskArgs),
    /// Feature extraction and temporal fusion training.
    FuseTrain(TaskArgs),
    /// Per-frame predictions CSV for every video.
    Predict(SmoothArgs),
    /// Scores the predictions CSV against the labels.
    Evaluate(SmoothArgs),
    /// K-fold cross-validation of the fusion stage.
    Crossval {
        #[command(flatten)]
        args: SmoothArgs,
        /// Overrides `[data] n_folds`.
        #[arg(long)]
        folds: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) | Error::Json(_) => 3,
        _ => 2,
    }
}

fn pipeline(c: &Common) -> Result<Pipeline, Error> {
    Pipeline::from_file(&c.config, c.seed)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(c) => {
            let out = pipeline(&c)?.run_pretrain()?;
            println!("wrote {} and {}", out.checkpoint.display(), out.loss_csv.display());
        }
        Command::Finetune(a) => {
            let out = pipeline(&a.common)?.run_finetune(a.task.into())?;
            println!("wrote {} and {}", out.checkpoint.display(), out.metrics_log.display());
        }
        Command::FuseTrain(a) => {
            let out = pipeline(&a.common)?.run_fuse_train(a.task.into())?;
            println!("wrote {} and {}", out.checkpoint.display(), out.metrics_log.display());
        }
        Command::Predict(a) => {
            let p = pipeline(&a.inner.common)?;
            let path = p.run_predict(a.inner.task.into(), a.smooth.map(Into::into))?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate(a) => {
            let p = pipeline(&a.inner.common)?;
            let smooth = a.smooth.map(Into::into);
            let task: Task = a.inner.task.into();
            let report = p.run_evaluate(task, smooth)?;
            println!("{task} aggregate: {:.6}", report.aggregate);
            println!("wrote {}", p.report_path(task, smooth).display());
        }
        Command::Crossval { args, folds } => {
            let mut p = pipeline(&args.inner.common)?;
            if let Some(k) = folds {
                p.config.data.n_folds = k;
                p.config.data.val_fold = 0;
                p.config.validate()?;
            }
            let task: Task = args.inner.task.into();
            let s = p.run_crossval(task, args.smooth.map(Into::into))?;
            for (i, a) in s.fold_aggregates.iter().enumerate() {
                println!("fold {i}: {a:.6}");
            }
            println!("mean: {:.6}", s.mean_aggregate);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
