//! AdamW optimization, the two-objective training pipeline, and the loop
//! that drives it over a corpus.

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, NodeId};
use crate::model::{
    decode_denoise, encode, templatize, EncoderInputMode, ModelConfig,
};
use crate::noise::{make_training_pair, NoiseConfig, ParaphraseTable, SynonymTable};
use crate::objectives::{
    combined_loss, denoising_loss, info_nce, token_accuracy, LossBreakdown,
};
use crate::rng::RngStream;
use crate::tensor::{ParamStore, Scalar};
use crate::text::{make_batch, EvalRecord, SentenceBatch, Vocabulary};
use indexmap::IndexMap;
use std::io::Write;
use std::path::PathBuf;

// Stream ids fanned out from the single run seed.
pub const STREAM_INIT: u64 = 0x11;
pub const STREAM_TRAIN: u64 = 0x7a11;
pub const STREAM_SHUFFLE: u64 = 0x5f;
pub const STREAM_EVAL: u64 = 0xee;

// Substream tags within one training step.
const TAG_AUGMENT: u64 = 0xa0;
const TAG_ENCODE_Z: u64 = 0xe1;
const TAG_ENCODE_Z_PLUS: u64 = 0xe2;
const TAG_DECODE: u64 = 0xd0;

/// Per-parameter first/second moment buffers plus the AdamW hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &[T], &[T])> {
        self.m
            .iter()
            .zip(self.v.values())
            .map(|((name, m), v)| (name.as_str(), m.as_slice(), v.as_slice()))
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<T>, v: Vec<T>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }

    pub fn has_moments(&self) -> bool {
        !self.m.is_empty()
    }
}

/// One AdamW update: decoupled weight decay, then the bias-corrected Adam
/// step. Validates every gradient before touching any parameter; a
/// non-finite gradient aborts the step naming the offending tensor.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    for (name, tensor) in params.iter() {
        let grad = tensor.grad().ok_or_else(|| {
            Error::ContractViolation(format!("parameter {name} has no gradient populated"))
        })?;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }

    state.t += 1;
    let t = state.t;
    let lr = T::from_f64(state.lr);
    let beta1 = T::from_f64(state.beta1);
    let beta2 = T::from_f64(state.beta2);
    let one_m_beta1 = T::from_f64(1.0 - state.beta1);
    let one_m_beta2 = T::from_f64(1.0 - state.beta2);
    let eps = T::from_f64(state.eps);
    let decay = T::from_f64(state.lr * state.weight_decay);
    let bc1 = T::from_f64(1.0 - state.beta1.powi(t as i32));
    let bc2 = T::from_f64(1.0 - state.beta2.powi(t as i32));

    for (name, tensor) in params.iter_mut() {
        let n = tensor.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        let grad = tensor.grad().expect("validated above").to_vec();
        let values = tensor.values_mut();
        for i in 0..n {
            let g = grad[i];
            values[i] = values[i] - decay * values[i];
            m[i] = beta1 * m[i] + one_m_beta1 * g;
            v[i] = beta2 * v[i] + one_m_beta2 * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !values.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {name} after update")));
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_global_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for (name, tensor) in params.iter() {
        let grad = tensor.grad().ok_or_else(|| {
            Error::ContractViolation(format!("parameter {name} has no gradient populated"))
        })?;
        sq += grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, tensor) in params.iter_mut() {
            let n = tensor.len();
            let scaled: Vec<T> = tensor
                .grad()
                .expect("checked above")
                .iter()
                .map(|&g| g * T::from_f64(scale))
                .collect();
            tensor.zero_grad();
            debug_assert_eq!(scaled.len(), n);
            tensor.accumulate_grad(&scaled)?;
        }
    }
    Ok(norm)
}

/// Discrete-noise assets shared by every step of a run.
#[derive(Debug, Clone)]
pub struct NoiseAssets {
    pub config: NoiseConfig,
    pub table: Option<ParaphraseTable>,
    pub synonyms: SynonymTable,
}

impl NoiseAssets {
    pub fn new(config: NoiseConfig, table: Option<ParaphraseTable>, synonyms: SynonymTable) -> Self {
        NoiseAssets { config, table, synonyms }
    }

    pub fn rule_based_default() -> Self {
        NoiseAssets {
            config: NoiseConfig::default(),
            table: None,
            synonyms: SynonymTable::bundled(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub tau: f64,
    /// Continuous corruption rate on the embedded decoder input.
    pub dropout_rate: f64,
    pub w_contrastive: f64,
    pub w_denoising: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub weight_decay: f64,
    /// Global-norm gradient clipping threshold; None disables.
    pub grad_clip: Option<f64>,
    /// Linear learning-rate warmup steps; 0 disables.
    pub warmup_steps: u64,
    /// Literal corpus-sum form of the reconstruction loss instead of the mean.
    pub sum_reduction: bool,
    /// Include the positive term in the contrastive denominator (in-batch
    /// convention); false gives the negatives-only variant.
    pub include_positive: bool,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            steps: 1000,
            lr: 5e-5,
            tau: 0.03,
            dropout_rate: 0.825,
            w_contrastive: 1.0,
            w_denoising: 1.0,
            seed: 42,
            eval_every: 200,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            warmup_steps: 0,
            sum_reduction: false,
            include_positive: true,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    /// All validation problems at once.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.steps == 0 {
            out.push("steps must be >= 1".into());
        }
        if self.w_contrastive < 0.0 || self.w_denoising < 0.0 {
            out.push("objective weights must be non-negative".into());
        }
        if self.w_contrastive == 0.0 && self.w_denoising == 0.0 {
            out.push("at least one objective weight must be positive".into());
        }
        if self.w_contrastive > 0.0 && self.batch_size < 2 {
            out.push("the contrastive objective needs batch_size >= 2 for in-batch negatives".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if self.tau <= 0.0 {
            out.push(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            out.push(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if self.lr <= 0.0 {
            out.push(format!("lr must be > 0, got {}", self.lr));
        }
        if self.weight_decay < 0.0 {
            out.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                out.push(format!("grad_clip must be > 0, got {c}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }

    pub fn effective_lr(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Everything the forward pass produced, with node handles for inspection.
pub struct ForwardArtifacts {
    pub z: NodeId,
    pub z_plus: Option<NodeId>,
    pub logits: Option<NodeId>,
    pub contrastive: Option<NodeId>,
    pub denoising: Option<NodeId>,
    pub combined: NodeId,
    /// Reconstruction targets at decoder width.
    pub original_batch: SentenceBatch,
}

/// Assemble the full two-objective forward pass on an existing graph:
/// discrete augmentation, the shared encoder pass feeding both objectives,
/// the second encoder pass for the contrastive positives, the denoising
/// decoder pass, and the weighted combination.
#[allow(clippy::too_many_arguments)]
pub fn forward_losses<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    sentences: &[String],
    params_cfg: &ModelConfig,
    noise: &NoiseAssets,
    train_cfg: &TrainConfig,
    vocab: &Vocabulary,
    training: bool,
    step_rng: &RngStream,
) -> Result<ForwardArtifacts> {
    if sentences.is_empty() {
        return Err(Error::EmptyInput("empty training batch".into()));
    }
    let mut original_seqs = Vec::with_capacity(sentences.len());
    let mut augmented_seqs = Vec::with_capacity(sentences.len());
    let aug_base = step_rng.substream(TAG_AUGMENT);
    for (i, sentence) in sentences.iter().enumerate() {
        let mut sent_rng = aug_base.substream(i as u64);
        let pair = make_training_pair(
            sentence,
            vocab,
            &noise.config,
            noise.table.as_ref(),
            &noise.synonyms,
            &mut sent_rng,
        )?;
        original_seqs.push(pair.original_ids);
        augmented_seqs.push(pair.augmented_ids);
    }

    let tb_original = templatize(&original_seqs, vocab, params_cfg)?;
    let tb_augmented = templatize(&augmented_seqs, vocab, params_cfg)?;

    let enc_rng = step_rng.substream(TAG_ENCODE_Z);
    let z = match params_cfg.encoder_input_mode {
        EncoderInputMode::Original => encode(g, bound, params_cfg, &tb_original, training, &enc_rng)?,
        EncoderInputMode::Augmented => {
            encode(g, bound, params_cfg, &tb_augmented, training, &enc_rng)?
        }
    };

    let mut z_plus = None;
    let mut contrastive = None;
    if train_cfg.w_contrastive > 0.0 {
        let zp_rng = step_rng.substream(TAG_ENCODE_Z_PLUS);
        let zp = encode(g, bound, params_cfg, &tb_augmented, training, &zp_rng)?;
        contrastive = Some(info_nce(g, z, zp, train_cfg.tau, train_cfg.include_positive)?);
        z_plus = Some(zp);
    }

    let original_batch = make_batch(&original_seqs, params_cfg.max_len)?;
    let mut logits = None;
    let mut denoising = None;
    if train_cfg.w_denoising > 0.0 {
        let noisy_batch = make_batch(&augmented_seqs, params_cfg.max_len)?;
        let dec_rng = step_rng.substream(TAG_DECODE);
        let lg = decode_denoise(
            g,
            bound,
            params_cfg,
            z,
            &noisy_batch,
            train_cfg.dropout_rate,
            training,
            &dec_rng,
        )?;
        denoising = Some(denoising_loss(g, lg, &original_batch, train_cfg.sum_reduction)?);
        logits = Some(lg);
    }

    let combined =
        combined_loss(g, contrastive, denoising, train_cfg.w_contrastive, train_cfg.w_denoising)?;
    Ok(ForwardArtifacts { z, z_plus, logits, contrastive, denoising, combined, original_batch })
}

fn scalar_of<T: Scalar>(g: &Graph<T>, id: NodeId) -> f64 {
    g.values(id)[0].as_f64()
}

/// One optimization step over a batch of sentence texts.
pub fn train_step<T: Scalar>(
    sentences: &[String],
    params: &mut ParamStore<T>,
    opt: &mut OptimizerState<T>,
    model_cfg: &ModelConfig,
    noise: &NoiseAssets,
    train_cfg: &TrainConfig,
    vocab: &Vocabulary,
    step: u64,
) -> Result<LossBreakdown> {
    let step_rng = RngStream::new(train_cfg.seed, STREAM_TRAIN).substream(step);
    let mut g = Graph::new();
    let bound = g.bind(params)?;
    let art = forward_losses(
        &mut g, &bound, sentences, model_cfg, noise, train_cfg, vocab, true, &step_rng,
    )?;
    g.backward(art.combined)?;
    params.zero_grads();
    g.accumulate_param_grads(params)?;
    if let Some(max_norm) = train_cfg.grad_clip {
        clip_grad_global_norm(params, max_norm)?;
    }
    opt.lr = train_cfg.effective_lr(step);
    adamw_step(params, opt)?;

    Ok(LossBreakdown {
        denoising: art.denoising.map(|id| scalar_of(&g, id)).unwrap_or(0.0),
        contrastive: art.contrastive.map(|id| scalar_of(&g, id)).unwrap_or(0.0),
        combined: scalar_of(&g, art.combined),
        token_accuracy: art
            .logits
            .map(|lg| token_accuracy(&g, lg, &art.original_batch))
            .unwrap_or(0.0),
    })
}

/// Reconstruction quality on held-out sentences in eval mode: discrete
/// augmentation still applies (seeded), continuous corruption and internal
/// dropout do not. Returns (mean loss, token accuracy).
pub fn evaluate_denoising<T: Scalar>(
    sentences: &[String],
    params: &ParamStore<T>,
    model_cfg: &ModelConfig,
    noise: &NoiseAssets,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(f64, f64)> {
    if sentences.is_empty() {
        return Err(Error::EmptyInput("no held-out sentences".into()));
    }
    let eval_cfg = TrainConfig {
        w_contrastive: 0.0,
        w_denoising: 1.0,
        seed,
        ..TrainConfig::default()
    };
    let base = RngStream::new(seed, STREAM_EVAL);
    let mut total_loss = 0.0f64;
    let mut total_positions = 0usize;
    let mut total_hits = 0usize;
    for (chunk_idx, chunk) in sentences.chunks(32).enumerate() {
        let step_rng = base.substream(chunk_idx as u64);
        let mut g = Graph::new();
        let bound = g.bind(params)?;
        let art = forward_losses(
            &mut g, &bound, chunk, model_cfg, noise, &eval_cfg, vocab, false, &step_rng,
        )?;
        let count: usize = art.original_batch.mask.iter().map(|&m| m as usize).sum();
        let loss = art.denoising.map(|id| scalar_of(&g, id)).unwrap_or(0.0);
        let acc = art
            .logits
            .map(|lg| token_accuracy(&g, lg, &art.original_batch))
            .unwrap_or(0.0);
        total_loss += loss * count as f64;
        total_hits += (acc * count as f64).round() as usize;
        total_positions += count;
    }
    Ok((
        total_loss / total_positions as f64,
        total_hits as f64 / total_positions as f64,
    ))
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_step: u64,
    pub last: Option<LossBreakdown>,
    pub best_dev_spearman: Option<f64>,
    pub records: Vec<StepRecord>,
}

fn shuffled_indices(n: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

pub fn format_metrics_line(step: u64, b: &LossBreakdown) -> String {
    format!(
        "{step}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
        b.combined, b.contrastive, b.denoising, b.token_accuracy
    )
}

/// Drive training over a corpus: seeded per-epoch shuffling, one metrics
/// record per step, periodic checkpoints plus a final one, and (when a dev
/// STS set is given) best-by-dev-spearman checkpoint retention at `.best`.
///
/// `start_step` > 0 resumes a loaded checkpoint; the data order and noise
/// streams depend only on (seed, step), so a resumed run continues the
/// original trajectory exactly.
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    corpus: &[String],
    params: &mut ParamStore<f32>,
    opt: &mut OptimizerState<f32>,
    model_cfg: &ModelConfig,
    noise: &NoiseAssets,
    train_cfg: &TrainConfig,
    vocab: &Vocabulary,
    dev_sts: Option<&[EvalRecord]>,
    start_step: u64,
    metrics_out: &mut dyn Write,
) -> Result<TrainSummary> {
    train_cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty".into()));
    }
    let batches_per_epoch = corpus.len() / train_cfg.batch_size;
    if batches_per_epoch == 0 {
        return Err(Error::DegenerateBatch(format!(
            "corpus of {} sentences cannot fill a batch of {}",
            corpus.len(),
            train_cfg.batch_size
        )));
    }

    let mut summary = TrainSummary {
        final_step: start_step,
        last: None,
        best_dev_spearman: None,
        records: Vec::new(),
    };
    let mut epoch_order: Option<(u64, Vec<usize>)> = None;

    for step in start_step..train_cfg.steps {
        let epoch = step / batches_per_epoch as u64;
        let pos = (step % batches_per_epoch as u64) as usize;
        if epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = RngStream::new(train_cfg.seed, STREAM_SHUFFLE).substream(epoch);
            epoch_order = Some((epoch, shuffled_indices(corpus.len(), &mut rng)));
        }
        let order = &epoch_order.as_ref().unwrap().1;
        let batch: Vec<String> = order
            [pos * train_cfg.batch_size..(pos + 1) * train_cfg.batch_size]
            .iter()
            .map(|&i| corpus[i].clone())
            .collect();

        let breakdown =
            train_step(&batch, params, opt, model_cfg, noise, train_cfg, vocab, step)?;
        metrics_out
            .write_all(format_metrics_line(step, &breakdown).as_bytes())
            .map_err(|e| Error::io("metrics log", e))?;
        summary.records.push(StepRecord { step, loss: breakdown });
        summary.last = Some(breakdown);
        summary.final_step = step + 1;

        let at_eval = train_cfg.eval_every > 0 && (step + 1) % train_cfg.eval_every == 0;
        if at_eval {
            if let Some(dev) = dev_sts {
                let report = crate::eval::eval_sts(dev, params, model_cfg, vocab)?;
                log::info!(
                    "step {}: dev spearman {:.4} (x100 {:.2})",
                    step + 1,
                    report.spearman,
                    report.spearman * 100.0
                );
                let improved = summary
                    .best_dev_spearman
                    .map(|best| report.spearman > best)
                    .unwrap_or(true);
                if improved {
                    summary.best_dev_spearman = Some(report.spearman);
                    if let Some(path) = &train_cfg.checkpoint_path {
                        let best_path = path.with_extension("best");
                        save_run_checkpoint(&best_path, model_cfg, params, opt, train_cfg, step + 1)?;
                    }
                }
            }
            if let Some(path) = &train_cfg.checkpoint_path {
                save_run_checkpoint(path, model_cfg, params, opt, train_cfg, step + 1)?;
            }
        }
    }

    if let Some(path) = &train_cfg.checkpoint_path {
        save_run_checkpoint(path, model_cfg, params, opt, train_cfg, train_cfg.steps)?;
    }
    Ok(summary)
}

fn save_run_checkpoint(
    path: &std::path::Path,
    model_cfg: &ModelConfig,
    params: &ParamStore<f32>,
    opt: &OptimizerState<f32>,
    train_cfg: &TrainConfig,
    step: u64,
) -> Result<()> {
    let ckpt = crate::checkpoint::Checkpoint {
        config: model_cfg.clone(),
        params: params.clone(),
        optimizer: Some(opt.clone()),
        seed: train_cfg.seed,
        step,
    };
    crate::checkpoint::save_checkpoint(path, &ckpt)
}
