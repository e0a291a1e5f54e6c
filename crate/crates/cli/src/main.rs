use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lmgnn::commands::{cmd_dump_embeddings, cmd_eval, cmd_synth, cmd_train, exit_code};
use lmgnn::config::RunConfig;
use lmgnn::graph::{Split, SyntheticSpec};
use lmgnn::pipeline::Task;
use lmgnn::Error;

#[derive(Parser)]
#[command(
    name = "lmgnn",
    version,
    about = "Joint text-encoder and graph-encoder training on heterogeneous graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-cluster query/product graph.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        #[arg(long, default_value_t = 500)]
        queries: usize,
        #[arg(long, default_value_t = 500)]
        products: usize,
        #[arg(long, default_value_t = 0.04)]
        p_intra: f64,
        #[arg(long, default_value_t = 0.004)]
        p_inter: f64,
        #[arg(long, default_value_t = 200)]
        vocab_size: usize,
        #[arg(long, default_value_t = 8)]
        tokens_per_node: usize,
        #[arg(long, default_value_t = 0.5)]
        text_signal: f64,
    },
    /// Run the configured stage plan.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint and print the JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Must match the task the checkpoint was trained for.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write final-layer embeddings of every node as TSV.
    DumpEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> lmgnn::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            force,
            clusters,
            queries,
            products,
            p_intra,
            p_inter,
            vocab_size,
            tokens_per_node,
            text_signal,
        } => {
            let spec = SyntheticSpec {
                clusters,
                queries,
                products,
                p_intra,
                p_inter,
                vocab_size,
                tokens_per_node,
                text_signal,
                seed,
            };
            cmd_synth(&spec, &out, force)
        }
        Command::Train {
            config,
            seed,
            out,
            force,
        } => {
            let mut cfg = RunConfig::load(config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let summary = cmd_train(&cfg, force)?;
            if let Some(report) = summary.outcome.test {
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            graph,
            task,
            split,
        } => {
            let task = task.map(|t| t.parse::<Task>()).transpose()?;
            let split = Split::parse(&split).ok_or_else(|| {
                Error::Config(format!(
                    "unknown split {split:?}; expected train, valid or test"
                ))
            })?;
            let report = cmd_eval(&checkpoint, &graph, task, split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::DumpEmbeddings {
            checkpoint,
            graph,
            out,
        } => {
            let rows = cmd_dump_embeddings(&checkpoint, &graph, &out)?;
            eprintln!("wrote {rows} rows to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
