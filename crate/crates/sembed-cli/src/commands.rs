//! Subcommand implementations.

use crate::config::{CliError, CliResult, RunConfig};
use sembed::checkpoint::{load_checkpoint, Checkpoint};
use sembed::eval::{eval_sts, retrieval_metrics, space_diagnostics, tensor_rows};
use sembed::model::{embed_sentences, init_params};
use sembed::noise::{discrete_augment, DiscreteStrategy, ParaphraseTable, SynonymTable};
use sembed::rng::RngStream;
use sembed::text::{build_vocab, load_corpus, load_sts, Vocabulary};
use sembed::train::{train_loop, NoiseAssets, OptimizerState, STREAM_INIT};
use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Stream id for the standalone augmentation command.
const STREAM_AUGMENT_CMD: u64 = 0xa6;

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_build_vocab(cfg: &RunConfig) -> CliResult<()> {
    let mut problems = Vec::new();
    cfg.require_input_paths(&["corpus"], &mut problems);
    let min_count: usize = cfg.get("min_count").map(|v| v.parse()).transpose().ok().flatten().unwrap_or(1);
    let max_size: usize = cfg.get("max_size").map(|v| v.parse()).transpose().ok().flatten().unwrap_or(30_000);
    let out = cfg.path("vocab");
    if out.is_none() {
        problems.push("missing required path: vocab (output)".into());
    }
    if !problems.is_empty() {
        return Err(CliError::Usage(problems));
    }

    let vocab = build_vocab(&cfg.path("corpus").unwrap(), min_count, max_size)?;
    vocab.save(&out.unwrap())?;
    println!("{}", vocab.len());
    Ok(())
}

fn load_noise_assets(cfg: &RunConfig, problems: &mut Vec<String>) -> Option<NoiseAssets> {
    let noise_cfg = cfg.noise_config(problems);
    if noise_cfg.discrete_strategy == DiscreteStrategy::Table && cfg.get("paraphrase_table").is_none()
    {
        problems.push("discrete_strategy = table requires paraphrase_table".into());
    }
    if !problems.is_empty() {
        return None;
    }
    let table = match cfg.path("paraphrase_table") {
        Some(p) => match ParaphraseTable::load(&p) {
            Ok(t) => Some(t),
            Err(e) => {
                problems.push(e.to_string());
                return None;
            }
        },
        None => None,
    };
    let synonyms = match cfg.path("synonyms") {
        Some(p) => match SynonymTable::load(&p) {
            Ok(t) => t,
            Err(e) => {
                problems.push(e.to_string());
                return None;
            }
        },
        None => SynonymTable::bundled(),
    };
    Some(NoiseAssets::new(noise_cfg, table, synonyms))
}

pub fn cmd_augment(cfg: &RunConfig, out_path: &Path) -> CliResult<()> {
    let mut problems = Vec::new();
    cfg.require_input_paths(&["corpus"], &mut problems);
    let seed: u64 = cfg.get("seed").and_then(|v| v.parse().ok()).unwrap_or(42);
    let assets = load_noise_assets(cfg, &mut problems);
    if !problems.is_empty() {
        return Err(CliError::Usage(problems));
    }
    let assets = assets.expect("no problems collected");

    let sentences = load_corpus(&cfg.path("corpus").unwrap())?;
    let base = RngStream::new(seed, STREAM_AUGMENT_CMD);
    let mut out = String::new();
    for (i, sentence) in sentences.iter().enumerate() {
        let mut rng = base.substream(i as u64);
        let augmented = discrete_augment(
            sentence,
            &assets.config,
            assets.table.as_ref(),
            &assets.synonyms,
            &mut rng,
        )?;
        out.push_str(sentence);
        out.push('\t');
        out.push_str(&augmented);
        out.push('\n');
    }
    write_file(out_path, &out)?;
    println!("{} pairs", sentences.len());
    Ok(())
}

pub struct TrainInvocation {
    pub config: RunConfig,
    pub metrics_log: PathBuf,
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(inv: &TrainInvocation) -> CliResult<()> {
    let cfg = &inv.config;
    let mut problems = Vec::new();
    cfg.require_input_paths(&["corpus", "vocab"], &mut problems);
    if let Some(dev) = cfg.path("sts_dev") {
        if !dev.exists() {
            problems.push(format!("sts_dev path does not exist: {}", dev.display()));
        }
    }
    let assets = load_noise_assets(cfg, &mut problems);
    let train_cfg = cfg.train_config(&mut problems);

    // The vocabulary must load before the model config can be sized.
    let vocab = match cfg.path("vocab") {
        Some(p) if p.exists() => match Vocabulary::load(&p) {
            Ok(v) => Some(v),
            Err(e) => {
                problems.push(e.to_string());
                None
            }
        },
        _ => None,
    };
    let model_cfg = vocab.as_ref().map(|v| cfg.model_config(v.len(), &mut problems));
    if !problems.is_empty() {
        return Err(CliError::Usage(problems));
    }
    let (vocab, mut model_cfg) = (vocab.unwrap(), model_cfg.unwrap());
    let assets = assets.expect("no problems collected");

    let corpus = load_corpus(&cfg.path("corpus").unwrap())?;
    let dev_sts = match cfg.path("sts_dev") {
        Some(p) => Some(load_sts(&p)?),
        None => None,
    };

    let (mut params, mut opt, start_step) = match &inv.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            if ckpt.config.vocab_size != vocab.len() {
                return Err(runtime(format!(
                    "checkpoint vocabulary size {} does not match vocabulary file size {}",
                    ckpt.config.vocab_size,
                    vocab.len()
                )));
            }
            model_cfg = ckpt.config.clone();
            let opt = ckpt
                .optimizer
                .unwrap_or_else(|| OptimizerState::new(train_cfg.lr, train_cfg.weight_decay));
            (ckpt.params, opt, ckpt.step)
        }
        None => {
            let mut init_rng = RngStream::new(train_cfg.seed, STREAM_INIT);
            let params = init_params::<f32>(&model_cfg, &mut init_rng)?;
            let opt = OptimizerState::new(train_cfg.lr, train_cfg.weight_decay);
            (params, opt, 0)
        }
    };

    let mut echo_cfg = cfg.clone();
    echo_cfg.remove("metrics_log");
    let mut metrics = fs::File::create(&inv.metrics_log)
        .map_err(|e| runtime(format!("{}: {e}", inv.metrics_log.display())))?;
    metrics
        .write_all(echo_cfg.echo_header().as_bytes())
        .map_err(|e| runtime(format!("{}: {e}", inv.metrics_log.display())))?;

    let summary = train_loop(
        &corpus,
        &mut params,
        &mut opt,
        &model_cfg,
        &assets,
        &train_cfg,
        &vocab,
        dev_sts.as_deref(),
        start_step,
        &mut metrics,
    )?;
    metrics.flush().map_err(|e| runtime(format!("{}: {e}", inv.metrics_log.display())))?;

    if let Some(last) = summary.last {
        println!(
            "trained to step {} (combined {:.6}, token_accuracy {:.4})",
            summary.final_step, last.combined, last.token_accuracy
        );
    } else {
        println!("no steps run (start_step >= steps)");
    }
    if let Some(best) = summary.best_dev_spearman {
        println!("best dev spearman {:.4}", best);
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> CliResult<(Checkpoint, Vocabulary)> {
    let mut problems = Vec::new();
    cfg.require_input_paths(&["checkpoint", "vocab"], &mut problems);
    if !problems.is_empty() {
        return Err(CliError::Usage(problems));
    }
    let ckpt = load_checkpoint(&cfg.path("checkpoint").unwrap())?;
    let vocab = Vocabulary::load(&cfg.path("vocab").unwrap())?;
    if ckpt.config.vocab_size != vocab.len() {
        return Err(runtime(format!(
            "checkpoint was built for a vocabulary of {} tokens but the vocabulary file has {}",
            ckpt.config.vocab_size,
            vocab.len()
        )));
    }
    Ok((ckpt, vocab))
}

pub fn cmd_embed(cfg: &RunConfig, input: &Path, out_path: &Path) -> CliResult<()> {
    let (ckpt, vocab) = load_model(cfg)?;
    let text =
        fs::read_to_string(input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let sentences: Vec<String> = text.lines().map(str::to_string).collect();
    if sentences.is_empty() {
        log::warn!("input file {} is empty; writing empty output", input.display());
        write_file(out_path, "")?;
        return Ok(());
    }
    for (i, s) in sentences.iter().enumerate() {
        if s.trim().is_empty() {
            return Err(runtime(format!("{}: line {} is empty", input.display(), i + 1)));
        }
    }
    let embeddings = embed_sentences(&sentences, &ckpt.params, &ckpt.config, &vocab)?;
    let d = ckpt.config.d;
    let mut out = String::with_capacity(sentences.len() * d * 10);
    for (i, row) in embeddings.values().chunks(d).enumerate() {
        out.push_str(&i.to_string());
        out.push('\t');
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{v:.6}"));
        }
        out.push('\n');
    }
    write_file(out_path, &out)?;
    Ok(())
}

pub enum EvalMode {
    Sts { sts: PathBuf },
    Retrieval { queries: PathBuf, docs: PathBuf, relevance: PathBuf, k: usize },
    Diagnostics { pairs: PathBuf },
}

/// `query_index<TAB>doc_index` pairs.
fn load_relevance(path: &Path, n_queries: usize, n_docs: usize) -> CliResult<Vec<BTreeSet<usize>>> {
    let text =
        fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut sets = vec![BTreeSet::new(); n_queries];
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse = |s: &str| s.trim().parse::<usize>();
        let (q, d) = line
            .split_once('\t')
            .and_then(|(a, b)| Some((parse(a).ok()?, parse(b).ok()?)))
            .ok_or_else(|| {
                runtime(format!(
                    "{}: line {}: expected query_index<TAB>doc_index",
                    path.display(),
                    i + 1
                ))
            })?;
        if q >= n_queries || d >= n_docs {
            return Err(runtime(format!(
                "{}: line {}: index out of range (query {q} of {n_queries}, doc {d} of {n_docs})",
                path.display(),
                i + 1
            )));
        }
        sets[q].insert(d);
    }
    Ok(sets)
}

/// `original<TAB>augmented` sentence pairs.
fn load_sentence_pairs(path: &Path) -> CliResult<(Vec<String>, Vec<String>)> {
    let text =
        fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut left = Vec::new();
    let mut right = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (a, b) = line.split_once('\t').ok_or_else(|| {
            runtime(format!("{}: line {}: expected two tab-separated sentences", path.display(), i + 1))
        })?;
        left.push(a.to_string());
        right.push(b.to_string());
    }
    Ok((left, right))
}

pub fn cmd_eval(cfg: &RunConfig, mode: &EvalMode, report_path: &Path) -> CliResult<()> {
    let (ckpt, vocab) = load_model(cfg)?;
    let report = match mode {
        EvalMode::Sts { sts } => {
            let records = load_sts(sts)?;
            let report = eval_sts(&records, &ckpt.params, &ckpt.config, &vocab)?;
            println!("spearman {:.4} (x100 {:.2}) over {} pairs", report.spearman, report.spearman * 100.0, report.n_pairs);
            format!("mode=sts\n{}", report.to_kv_lines())
        }
        EvalMode::Retrieval { queries, docs, relevance, k } => {
            let query_texts = load_corpus(queries)?;
            let doc_texts = load_corpus(docs)?;
            let rel = load_relevance(relevance, query_texts.len(), doc_texts.len())?;
            let qv = tensor_rows(&embed_sentences(&query_texts, &ckpt.params, &ckpt.config, &vocab)?);
            let dv = tensor_rows(&embed_sentences(&doc_texts, &ckpt.params, &ckpt.config, &vocab)?);
            let m = retrieval_metrics(&qv, &dv, &rel, *k)?;
            println!("MRR@{k} {:.4}  MAP@{k} {:.4}", m.mrr, m.map);
            format!(
                "mode=retrieval\nk={k}\nmrr={:.6}\nmap={:.6}\nn_queries={}\nn_docs={}\ntie_breaking=stable_doc_index\n",
                m.mrr,
                m.map,
                query_texts.len(),
                doc_texts.len()
            )
        }
        EvalMode::Diagnostics { pairs } => {
            let (left, right) = load_sentence_pairs(pairs)?;
            if left.len() < 2 {
                return Err(runtime(format!(
                    "{}: diagnostics need at least 2 pairs, got {}",
                    pairs.display(),
                    left.len()
                )));
            }
            let z = tensor_rows(&embed_sentences(&left, &ckpt.params, &ckpt.config, &vocab)?);
            let zp = tensor_rows(&embed_sentences(&right, &ckpt.params, &ckpt.config, &vocab)?);
            let d = space_diagnostics(&z, &zp)?;
            println!(
                "alignment {:.4}  uniformity {:.4}  mean_pairwise_cosine {:.4}",
                d.alignment, d.uniformity, d.mean_pairwise_cosine
            );
            format!(
                "mode=diagnostics\nn_pairs={}\nalignment={:.6}\nuniformity={:.6}\nmean_pairwise_cosine={:.6}\n",
                left.len(),
                d.alignment,
                d.uniformity,
                d.mean_pairwise_cosine
            )
        }
    };
    write_file(report_path, &report)?;
    Ok(())
}
