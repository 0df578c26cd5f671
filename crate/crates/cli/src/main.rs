use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

mod commands;

#[derive(Parser)]
#[command(
    name = "romtrack",
    about = "Desk-scale visual tracker with inherent/hybrid template attention and variation tokens"
)]
struct Cli {
    /// Config file (key = value with [section] headers)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Named preset: desk | paper-256
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Master seed override
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Force single-threaded, bit-reproducible execution
    #[arg(long, global = true)]
    deterministic: bool,

    /// Worker threads (0 = library default); ROMTRACK_THREADS caps this
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus (train + eval splits)
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Override [data] train_sequences
        #[arg(long)]
        sequences: Option<usize>,
        /// Override [data] eval_sequences
        #[arg(long)]
        eval_sequences: Option<usize>,
        /// Override [data] frames
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train stage 1 (no variation tokens) or stage 2 (with them)
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Starting checkpoint (required for stage 2)
        #[arg(long)]
        init: Option<PathBuf>,
        /// Override the configured step count
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Produce per-sequence result files from a corpus and a checkpoint
    Track {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable the Hanning window penalty
        #[arg(long)]
        no_window: bool,
        /// Disable variation tokens at inference
        #[arg(long)]
        no_vt: bool,
    },
    /// Score result files against corpus ground truth
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic MACs and parameter accounting
    Bench {
        /// stm | htm | rom (defaults to the configured variant)
        #[arg(long)]
        variant: Option<String>,
        /// Count with variation tokens enabled
        #[arg(long)]
        vt: bool,
        /// Optional JSON output path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train (as needed) and compare tracker variants over seeds
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant labels: stm,htm,rom-novt,rom-vt
        #[arg(long, default_value = "htm,rom-novt,rom-vt")]
        variants: String,
        /// Comma-separated seeds
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Override stage-1 steps for ablation training
        #[arg(long)]
        stage1_steps: Option<usize>,
        /// Override stage-2 steps for ablation training
        #[arg(long)]
        stage2_steps: Option<usize>,
    },
    /// Dump mixed-attention correlation blocks for one frame/layer
    InspectAttn {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence directory name inside the corpus
        #[arg(long)]
        sequence: String,
        /// Frame index to inspect (>= 1)
        #[arg(long)]
        frame: usize,
        /// Encoder layer index
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = commands::resolve_config(
        cli.config.as_deref(),
        cli.preset.as_deref(),
        cli.seed,
        cli.deterministic,
        cli.workers,
    )?;
    commands::init_thread_pool(&cfg)?;

    match cli.command {
        Command::GenData {
            out,
            sequences,
            eval_sequences,
            frames,
        } => commands::gen_data(&cfg, &out, sequences, eval_sequences, frames),
        Command::Train {
            corpus,
            out,
            stage,
            init,
            steps,
        } => commands::train(&cfg, &corpus, &out, stage, init.as_deref(), steps),
        Command::Track {
            corpus,
            checkpoint,
            out,
            no_window,
            no_vt,
        } => commands::track(&cfg, &corpus, &checkpoint, &out, no_window, no_vt),
        Command::Eval {
            corpus,
            results,
            out,
        } => commands::eval(&cfg, &corpus, &results, &out),
        Command::Bench { variant, vt, out } => commands::bench(&cfg, variant.as_deref(), vt, out.as_deref()),
        Command::Ablate {
            corpus,
            out,
            variants,
            seeds,
            stage1_steps,
            stage2_steps,
        } => commands::ablate(&cfg, &corpus, &out, &variants, &seeds, stage1_steps, stage2_steps),
        Command::InspectAttn {
            corpus,
            checkpoint,
            sequence,
            frame,
            layer,
            out,
        } => commands::inspect_attn(&cfg, &corpus, &checkpoint, &sequence, frame, layer, &out),
    }
}
