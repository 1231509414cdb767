//! `charvoc`: data preparation, recogniser training, discriminator warm-up,
//! joint training, synthesis, evaluation and the conditioning ablation.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
//! Failures print one `error kind=... msg="..."` line on stderr.

mod commands;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use charvoc::config::{keys_for, Command as Cmd, RunConfig};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "charvoc", version, about = "Character-conditioned vocoder pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key = value config file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/test corpora, manifests and the vocabulary; with a trained
    /// recogniser in work_dir also build the triplet cache.
    PrepareData(Common),
    /// Train the CTC recogniser on the training manifest.
    TrainAsr(Common),
    /// Save the identity-initialised generator and warm up the discriminators.
    Warmup(Common),
    /// Joint adversarial training from the warm-up outputs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from work_dir/train_state.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Resynthesise a WAV file, or every entry of a JSONL manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Input WAV, or a `.jsonl` manifest.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Output WAV, or an output directory for a manifest input.
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
        /// Generator checkpoint [default: work_dir/generator.ckpt].
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Run the generator without character conditioning.
        #[arg(long)]
        no_conditioning: bool,
    },
    /// Transcribe the test manifest after resynthesis; writes a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoint [default: work_dir/generator.ckpt].
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the unmodified audio instead of a vocoder.
        #[arg(long, conflicts_with_all = ["checkpoint", "no_conditioning"])]
        passthrough: bool,
        #[arg(long)]
        no_conditioning: bool,
        /// Report path [default: work_dir/eval.json].
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Train conditioned and unconditioned generators and compare their WER.
    Ablate(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::PrepareData(c) | Command::TrainAsr(c) | Command::Warmup(c) | Command::Ablate(c) => c,
            Command::Train { common, .. } | Command::Synth { common, .. } | Command::Eval { common, .. } => common,
        }
    }
}

/// Why a command stopped.
pub enum Failure {
    Config { key: Option<String>, msg: String },
    Runtime(anyhow::Error),
    /// The command finished but dropped some utterances.
    Skipped { ids: Vec<String> },
}

impl From<charvoc::Error> for Failure {
    fn from(e: charvoc::Error) -> Self {
        match e {
            charvoc::Error::Config { key, msg } => Failure::Config { key, msg },
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).unwrap_or_else(|_| format!("{s:?}"))
}

fn keys_help(cmd: Cmd) -> String {
    let mut s = String::from("Config keys:\n");
    for k in keys_for(cmd) {
        let default = k.default.map_or("required".to_string(), |d| format!("default {d:?}"));
        let _ = writeln!(s, "  {:<22} {:<14} {} ({default})", k.name, k.kind, k.help);
    }
    s
}

fn cli_command() -> clap::Command {
    let mut cmd = Cli::command();
    for c in Cmd::ALL {
        cmd = cmd.mut_subcommand(c.name(), |sub| sub.after_help(keys_help(c)));
    }
    cmd
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match cli_command()
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let msg = e.kind().to_string();
            eprintln!("error kind=usage msg={}", quoted(&msg));
            return ExitCode::from(1);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config { key, msg }) => {
            eprintln!("error kind=config key={} msg={}", key.as_deref().unwrap_or("-"), quoted(&msg));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error kind=runtime msg={}", quoted(&format!("{e:#}")));
            ExitCode::from(2)
        }
        Err(Failure::Skipped { ids }) => {
            eprintln!("error kind=skipped count={} ids={}", ids.len(), ids.join(","));
            ExitCode::from(2)
        }
    }
}

fn run(command: &Command) -> Result<(), Failure> {
    let common = command.common();
    let cfg = RunConfig::load(&common.config)?.with_overrides(common.overrides.iter().map(String::as_str))?;
    match command {
        Command::PrepareData(_) => commands::prepare_data(&cfg),
        Command::TrainAsr(_) => commands::train_asr(&cfg),
        Command::Warmup(_) => commands::warmup(&cfg),
        Command::Train { resume, .. } => commands::train(&cfg, *resume),
        Command::Synth {
            input,
            output,
            checkpoint,
            no_conditioning,
            ..
        } => commands::synth(&cfg, input, output, checkpoint.as_deref(), *no_conditioning),
        Command::Eval {
            checkpoint,
            passthrough,
            no_conditioning,
            output,
            ..
        } => commands::eval(&cfg, checkpoint.as_deref(), *passthrough, *no_conditioning, output.as_deref()),
        Command::Ablate(_) => commands::ablate(&cfg),
    }
}
