//! Operator surface: build vocabularies, prepare augmentation pairs, train,
//! embed, and evaluate.
//!
//! Exit codes: 0 success, 1 runtime/I-O failure, 2 usage or validation
//! failure (validation problems are listed all at once).

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::{EvalMode, TrainInvocation};
use config::{CliError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sembed", version, about = "Train and evaluate denoising-based sentence embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from a corpus (one sentence per line).
    BuildVocab(BuildVocabArgs),
    /// Write `original<TAB>augmented` pairs using the discrete noise stage.
    Augment(AugmentArgs),
    /// Train a model, writing a metrics log and checkpoints.
    Train(TrainArgs),
    /// Embed sentences (one per line) with a trained checkpoint.
    Embed(EmbedArgs),
    /// Evaluate a checkpoint: STS scoring, retrieval metrics, or diagnostics.
    Eval(EvalArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Corpus file, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Output vocabulary file.
    #[arg(long)]
    out: PathBuf,
    /// Minimum token count for inclusion.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// Maximum vocabulary size including specials.
    #[arg(long, default_value_t = 30_000)]
    max_size: usize,
}

#[derive(Args)]
struct NoiseFlags {
    /// Discrete augmentation strategy: none, rule-based, or table.
    #[arg(long)]
    strategy: Option<String>,
    /// Paraphrase table file (`original<TAB>paraphrase`).
    #[arg(long)]
    paraphrase_table: Option<PathBuf>,
    /// Synonym file (`token<TAB>synonym`); a bundled list is used otherwise.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    /// Adjacent content-word swap probability for the rule-based augmenter.
    #[arg(long)]
    swap_prob: Option<f64>,
    /// Synonym substitution probability for the rule-based augmenter.
    #[arg(long)]
    synonym_prob: Option<f64>,
}

impl NoiseFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = &self.strategy {
            cfg.set("discrete_strategy", s.replace('-', "_"));
        }
        cfg.set_opt("paraphrase_table", &self.paraphrase_table.as_ref().map(|p| p.display().to_string()));
        cfg.set_opt("synonyms", &self.synonyms.as_ref().map(|p| p.display().to_string()));
        cfg.set_opt("rule_swap_prob", &self.swap_prob);
        cfg.set_opt("rule_synonym_prob", &self.synonym_prob);
    }
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output pairs file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    noise: NoiseFlags,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint output path (default model.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Metrics log output path (default metrics.tsv).
    #[arg(long)]
    metrics_log: Option<PathBuf>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Objective preset: combined (w 1,1), contrastive (1,0), denoising (0,1).
    #[arg(long)]
    objective: Option<String>,
    /// STS dev file for best-checkpoint selection.
    #[arg(long)]
    sts_dev: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Continuous corruption rate on the embedded decoder input.
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    w_contrastive: Option<f64>,
    #[arg(long)]
    w_denoising: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global-norm gradient clip threshold; 0 disables.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    enc_heads: Option<usize>,
    #[arg(long)]
    dec_heads: Option<usize>,
    #[arg(long)]
    ffn_mult: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    internal_dropout: Option<f64>,
    /// Encoder input during training: original or augmented.
    #[arg(long)]
    encoder_input_mode: Option<String>,
    #[command(flatten)]
    noise: NoiseFlags,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Input sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Output embeddings file (`index<TAB>v1 v2 ...`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Evaluation mode: sts, retrieval, or diagnostics.
    #[arg(long)]
    mode: String,
    /// STS records file for sts mode.
    #[arg(long)]
    sts: Option<PathBuf>,
    /// Queries file for retrieval mode, one per line.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Documents file for retrieval mode, one per line.
    #[arg(long)]
    docs: Option<PathBuf>,
    /// Relevance file for retrieval mode (`query_index<TAB>doc_index`).
    #[arg(long)]
    relevance: Option<PathBuf>,
    /// Ranking depth for retrieval metrics.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Sentence-pair file for diagnostics mode (`original<TAB>augmented`).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Report output path.
    #[arg(long)]
    report: PathBuf,
}

fn base_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::new()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildVocab(args) => {
            let mut cfg = RunConfig::new();
            cfg.set("corpus", args.corpus.display());
            cfg.set("vocab", args.out.display());
            cfg.set("min_count", args.min_count);
            cfg.set("max_size", args.max_size);
            commands::cmd_build_vocab(&cfg)
        }
        Command::Augment(args) => {
            let mut cfg = RunConfig::new();
            cfg.set("corpus", args.corpus.display());
            cfg.set_opt("seed", &args.seed);
            args.noise.apply(&mut cfg);
            commands::cmd_augment(&cfg, &args.out)
        }
        Command::Train(args) => {
            let mut cfg = base_config(&args.config)?;
            cfg.set_opt("corpus", &args.corpus.as_ref().map(|p| p.display().to_string()));
            cfg.set_opt("vocab", &args.vocab.as_ref().map(|p| p.display().to_string()));
            cfg.set_opt("sts_dev", &args.sts_dev.as_ref().map(|p| p.display().to_string()));
            let checkpoint = args
                .checkpoint
                .clone()
                .or_else(|| cfg.path("checkpoint"))
                .unwrap_or_else(|| PathBuf::from("model.ckpt"));
            cfg.set("checkpoint", checkpoint.display());
            // The log's own location is not part of the echoed config.
            let metrics_log = args
                .metrics_log
                .clone()
                .or_else(|| cfg.path("metrics_log"))
                .unwrap_or_else(|| PathBuf::from("metrics.tsv"));
            if let Some(objective) = &args.objective {
                let (wc, wd) = match objective.as_str() {
                    "combined" => (1.0, 1.0),
                    "contrastive" => (1.0, 0.0),
                    "denoising" => (0.0, 1.0),
                    other => {
                        return Err(CliError::Usage(vec![format!(
                            "unknown objective {other:?}; expected combined, contrastive, or denoising"
                        )]))
                    }
                };
                cfg.set("w_contrastive", wc);
                cfg.set("w_denoising", wd);
            }
            cfg.set_opt("batch_size", &args.batch_size);
            cfg.set_opt("steps", &args.steps);
            cfg.set_opt("lr", &args.lr);
            cfg.set_opt("tau", &args.tau);
            cfg.set_opt("dropout_rate", &args.dropout_rate);
            cfg.set_opt("w_contrastive", &args.w_contrastive);
            cfg.set_opt("w_denoising", &args.w_denoising);
            cfg.set_opt("seed", &args.seed);
            cfg.set_opt("eval_every", &args.eval_every);
            cfg.set_opt("weight_decay", &args.weight_decay);
            cfg.set_opt("grad_clip", &args.grad_clip);
            cfg.set_opt("warmup_steps", &args.warmup_steps);
            cfg.set_opt("d", &args.d);
            cfg.set_opt("enc_layers", &args.enc_layers);
            cfg.set_opt("dec_layers", &args.dec_layers);
            cfg.set_opt("enc_heads", &args.enc_heads);
            cfg.set_opt("dec_heads", &args.dec_heads);
            cfg.set_opt("ffn_mult", &args.ffn_mult);
            cfg.set_opt("max_len", &args.max_len);
            cfg.set_opt("internal_dropout", &args.internal_dropout);
            cfg.set_opt("encoder_input_mode", &args.encoder_input_mode);
            args.noise.apply(&mut cfg);
            commands::cmd_train(&TrainInvocation {
                config: cfg,
                metrics_log,
                resume: args.resume.clone(),
            })
        }
        Command::Embed(args) => {
            let mut cfg = RunConfig::new();
            cfg.set("checkpoint", args.checkpoint.display());
            cfg.set("vocab", args.vocab.display());
            commands::cmd_embed(&cfg, &args.input, &args.out)
        }
        Command::Eval(args) => {
            let mut cfg = RunConfig::new();
            cfg.set("checkpoint", args.checkpoint.display());
            cfg.set("vocab", args.vocab.display());
            let require = |name: &str, p: &Option<PathBuf>| -> Result<PathBuf, CliError> {
                p.clone().ok_or_else(|| {
                    CliError::Usage(vec![format!("--{name} is required for mode {}", args.mode)])
                })
            };
            let mode = match args.mode.as_str() {
                "sts" => EvalMode::Sts { sts: require("sts", &args.sts)? },
                "retrieval" => EvalMode::Retrieval {
                    queries: require("queries", &args.queries)?,
                    docs: require("docs", &args.docs)?,
                    relevance: require("relevance", &args.relevance)?,
                    k: args.k,
                },
                "diagnostics" => EvalMode::Diagnostics { pairs: require("pairs", &args.pairs)? },
                other => {
                    return Err(CliError::Usage(vec![format!(
                        "unknown eval mode {other:?}; expected sts, retrieval, or diagnostics"
                    )]))
                }
            };
            commands::cmd_eval(&cfg, &mode, &args.report)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(problems)) => {
            for p in &problems {
                eprintln!("error: {p}");
            }
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
