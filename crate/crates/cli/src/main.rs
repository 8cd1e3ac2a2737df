//! `mspt`: feature extraction, synthesis, staged training, averaging,
//! decoding, scoring and the pre-training ablation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mspt_core::pipeline::Preset;
use mspt_core::score::MetricMode;

#[derive(Parser, Debug)]
#[command(name = "mspt", version, about = "Masked acoustic and synthesized-speech pre-training for seq2seq ASR")]
struct Cli {
    /// Global seed; overrides the seed in stage configs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-utterance work (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract normalized, stacked log-mel features from an audio manifest.
    Featurize(FeaturizeArgs),
    /// Turn a transcript manifest into synthesized feature/transcript pairs.
    Synth(SynthArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Average the last checkpoints of a run.
    Average(AverageArgs),
    /// Beam-search decode a feature manifest.
    Decode(DecodeArgs),
    /// Error rates of hypotheses against references.
    Score(ScoreArgs),
    /// Scratch-versus-pretrained comparison on the synthetic toy corpus.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct FeaturizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 80)]
    n_mels: usize,
    #[arg(long, default_value_t = 25.0)]
    win_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    hop_ms: f64,
    /// Frames of left context stacked onto each frame.
    #[arg(long, default_value_t = 3)]
    stack_left: usize,
    /// Frame-rate reduction after stacking.
    #[arg(long, default_value_t = 3)]
    stack_factor: usize,
    /// Skip per-speaker mean/variance normalization.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Manifest whose transcript column is synthesized; sources are ignored.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    frames_per_token: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Stage config (key = value lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Required for the supervised stages.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Ablation preset: A0 scratch, A1 M1-init, A2 M0-init, A3 M2-init.
    #[arg(long, conflicts_with = "init")]
    preset: Option<Preset>,
    /// Initialization artifact: none, M0, M1 or M2.
    #[arg(long)]
    init: Option<String>,
    /// Run directories searched for the initialization artifact.
    #[arg(long = "init-from")]
    init_from: Vec<PathBuf>,
    /// Config overrides, `key=value`.
    #[arg(long = "set")]
    overrides: Vec<String>,
    /// Write the first-epoch mask plan of every utterance (acoustic stage).
    #[arg(long)]
    dump_masks: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AverageArgs {
    #[arg(long)]
    run: PathBuf,
    /// Number of trailing checkpoints (default: the run's avg_last_n).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Training run providing the model config (and parameters).
    #[arg(long)]
    run: PathBuf,
    /// Parameter file; defaults to the average of the run's last checkpoints.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 13)]
    beam: usize,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
    /// Argmax decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// `id<TAB>text` lines, or a manifest.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// `id<TAB>text[<TAB>score]` lines.
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long, default_value = "char")]
    mode: MetricMode,
    /// Vocabulary for piece mode.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Preset::A0, Preset::A1])]
    presets: Vec<Preset>,
    /// Small corpus and short schedules, for smoke tests.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
