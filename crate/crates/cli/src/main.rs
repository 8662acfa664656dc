//! `motif`: synthesize data, pre-train, fine-tune, sample and evaluate
//! text-conditioned motion diffusion models.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use motif_core::backbone::Preset;
use motif_core::moc::Ablation;
use motif_core::run::{self, RunConfig};
use motif_core::{Error, Result};

#[derive(Parser)]
#[command(name = "motif", version, about = "Text-conditioned motion diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model size: tiny, base, large, huge or giant.
    #[arg(long)]
    preset: Option<Preset>,
    /// Feature layout name.
    #[arg(long)]
    layout: Option<String>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Run on one thread so results are bit-reproducible.
    #[arg(long)]
    serial: bool,
    /// Training steps, or DDIM steps when sampling.
    #[arg(long)]
    steps: Option<usize>,
    /// Precomputed text embeddings (.omge).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Hash-seeded embeddings; with --embeddings, used for unknown prompts.
    #[arg(long)]
    stub_embedder: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, captioned pairs and held-out pairs.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the unconditional denoiser.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory of .omgm clips.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from an intermediate checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the text ControlNet on captioned pairs over a frozen backbone.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Directory of .omgm clips with prompts.json.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Pre-trained backbone checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// none, no-zero-conv, no-attn-mask, cross-attn-ffn or pool-size=K.
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Generate motions with classifier-free guidance.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        controlnet: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        /// Sample from the backbone alone.
        #[arg(long)]
        unconditional: bool,
        /// Guidance scale.
        #[arg(long = "s")]
        guidance: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        /// Frames per motion.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        /// Also write joint positions as CSV.
        #[arg(long)]
        dump_csv: bool,
    },
    /// Compare generated motions with a reference set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Text-aligned encoder; enables CLIP-score and R-precision.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Train the contrastive motion encoder used by the text metrics.
    TrainEncoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if value.is_some() {
        *slot = value;
    }
}

fn base_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, c.seed);
    set(&mut cfg.preset, c.preset);
    set(&mut cfg.layout, c.layout.clone());
    set_path(&mut cfg.paths.out_dir, c.out.clone());
    set_path(&mut cfg.paths.embeddings, c.embeddings.clone());
    cfg.stub_embedder |= c.stub_embedder;
    Ok(cfg)
}

fn execute(command: Command) -> Result<run::Outcome> {
    match command {
        Command::Synth { common } => run::cmd_synth(&base_config(&common)?),
        Command::Pretrain { common, data, resume } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.pretrain.optim.total_steps, common.steps);
            set_path(&mut cfg.paths.data_dir, data);
            set_path(&mut cfg.paths.resume, resume);
            run::cmd_pretrain(&cfg)
        }
        Command::Finetune { common, pairs, checkpoint, resume, ablation } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.finetune.optim.total_steps, common.steps);
            set_path(&mut cfg.paths.pairs_dir, pairs);
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.resume, resume);
            set(&mut cfg.ablation, ablation);
            run::cmd_finetune(&cfg)
        }
        Command::Sample { common, checkpoint, controlnet, prompt, unconditional, guidance, eta, length, count, dump_csv } => {
            let mut cfg = base_config(&common)?;
            let s = &mut cfg.sample;
            set(&mut s.sampler.n_steps, common.steps);
            set(&mut s.sampler.guidance, guidance);
            set(&mut s.sampler.eta, eta);
            set(&mut s.length, length);
            set(&mut s.count, count);
            if prompt.is_some() {
                s.prompt = prompt;
            }
            s.unconditional |= unconditional;
            s.dump_csv |= dump_csv;
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.controlnet, controlnet);
            run::cmd_sample(&cfg)
        }
        Command::Eval { common, generated, reference, encoder } => {
            let mut cfg = base_config(&common)?;
            set_path(&mut cfg.paths.generated_dir, generated);
            set_path(&mut cfg.paths.reference_dir, reference);
            set_path(&mut cfg.paths.encoder, encoder);
            run::cmd_eval(&cfg)
        }
        Command::TrainEncoder { common, pairs } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.encoder.steps, common.steps);
            set_path(&mut cfg.paths.pairs_dir, pairs);
            run::cmd_train_encoder(&cfg)
        }
    }
}

fn serial(command: &Command) -> bool {
    match command {
        Command::Synth { common }
        | Command::Pretrain { common, .. }
        | Command::Finetune { common, .. }
        | Command::Sample { common, .. }
        | Command::Eval { common, .. }
        | Command::TrainEncoder { common, .. } => common.serial,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if serial(&cli.command) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("error: cannot start a serial thread pool: {e}");
            return ExitCode::from(run::EXIT_FAILURE as u8);
        }
    }
    match execute(cli.command) {
        Ok(outcome) => {
            // a closed pipe on stdout is not a failure of the command
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", outcome.summary);
            for (file, hash) in &outcome.files {
                let _ = writeln!(out, "  {} {hash}", outcome.out_dir.join(file).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code(&e))
        }
    }
}

fn code(e: &Error) -> u8 {
    run::exit_code(e) as u8
}
