use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmad_cli::commands::{out_dir, TEACHER_CKPT};
use dmad_cli::{
    cmd_eval, cmd_explain, cmd_gen, cmd_train_student, cmd_train_teacher, CliError, CliResult, RunConfig, Split,
};

#[derive(Parser)]
#[command(name = "dmad", version, about = "Distilled single-image morphing-attack detection")]
struct Cli {
    /// Run document (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and explanation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise the three subject-disjoint datasets and their manifest.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the CNN teacher on DS-A.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distil the frozen teacher into the LoRA student on DS-B.
    TrainStudent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to teacher.ckpt in the output directory.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score a split and report D-EER and BPCER at fixed MACER.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "c")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// LIME attribution for one PGM image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        topk: Option<usize>,
    },
    /// Print the effective config document.
    PrintConfig,
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_seed(cli.seed);
    cfg.validate()?;
    let stdout = std::io::stdout();
    let out = &mut stdout.lock();
    match cli.command {
        Command::Gen { out: dir } => cmd_gen(&cfg, &out_dir(&cfg, dir)?, out),
        Command::TrainTeacher { data, out: dir } => cmd_train_teacher(&cfg, &data, &out_dir(&cfg, dir)?, out),
        Command::TrainStudent { data, out: dir, teacher } => {
            let dir = out_dir(&cfg, dir)?;
            let teacher = teacher.unwrap_or_else(|| dir.join(TEACHER_CKPT));
            cmd_train_student(&cfg, &data, &dir, &teacher, out)
        }
        Command::Eval { checkpoint, data, split, out: dir } => {
            cmd_eval(&cfg, &checkpoint, &data, split, &out_dir(&cfg, dir)?, out).map(|_| ())
        }
        Command::Explain { checkpoint, image, out: dir, topk } => {
            cmd_explain(&cfg, &checkpoint, &image, &out_dir(&cfg, dir)?, topk, out)
        }
        Command::PrintConfig => {
            write!(out, "{}", cfg.to_toml())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e))
        }
    }
}
