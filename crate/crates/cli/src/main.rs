mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use commands::Workspace;
use error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "talos",
    version,
    about = "Sparse task-vector fine-tuning on synthetic task suites"
)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// TOML run configuration, layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one field, e.g. `--set finetune.learning_rate=0.003`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Output directory; must exist.
    #[arg(long, env = "TALOS_OUT", default_value = "runs", global = true)]
    out: PathBuf,
}

impl Global {
    fn to_args(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(c) = &self.config {
            v.push("--config".into());
            v.push(c.display().to_string());
        }
        for s in &self.sets {
            v.push("--set".into());
            v.push(s.clone());
        }
        v.push("--out".into());
        v.push(self.out.display().to_string());
        v
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the suite and pre-train the shared model.
    Pretrain,
    /// Calibrate masks without fine-tuning.
    Calibrate {
        #[arg(long)]
        task: Option<usize>,
    },
    /// Fine-tune one task, or all tasks when `--task` is omitted.
    Finetune {
        #[arg(long)]
        task: Option<usize>,
        /// Run up to this many tasks as separate processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Task addition with α tuned on validation data.
    Merge,
    /// Task negation of one task against the control task.
    Negate {
        #[arg(long)]
        task: usize,
    },
    /// Disentanglement error grid for a pair of tasks.
    EvalDisentanglement {
        #[arg(long, num_args = 2, value_names = ["A", "B"], default_values_t = [0, 1])]
        tasks: Vec<usize>,
    },
    /// Localization matrix of all task vectors.
    EvalLocalization,
    /// Bound check, drift, linearization gap, mask overlap and pruning grid.
    EvalDiagnostics,
    /// Collect reports into a summary.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ws = Workspace::new(cli.global.out.clone());
    if let Cmd::Report = cli.command {
        return commands::report_cmd(&ws);
    }
    let cfg = config::resolve(cli.global.config.as_deref(), &cli.global.sets)?;
    match cli.command {
        Cmd::Pretrain => commands::pretrain(&ws, &cfg),
        Cmd::Calibrate { task } => commands::calibrate_cmd(&ws, &cfg, task),
        Cmd::Finetune { task, jobs } => {
            commands::finetune_cmd(&ws, &cfg, task, jobs, &cli.global.to_args())
        }
        Cmd::Merge => commands::merge_cmd(&ws, &cfg),
        Cmd::Negate { task } => commands::negate_cmd(&ws, &cfg, task),
        Cmd::EvalDisentanglement { tasks } => {
            commands::disentanglement_cmd(&ws, &cfg, (tasks[0], tasks[1]))
        }
        Cmd::EvalLocalization => commands::localization_cmd(&ws, &cfg),
        Cmd::EvalDiagnostics => commands::diagnostics_cmd(&ws, &cfg),
        Cmd::Report => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
