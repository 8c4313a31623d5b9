//! The network: a template-wrapped transformer encoder pooled at the [MASK]
//! position to a single vector per sentence, and a non-causal transformer
//! decoder whose cross-attention memory is exactly that one vector, emitting
//! per-position vocabulary logits. The decoder exists only for training;
//! inference uses the encoder alone.

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, NodeId};
use crate::noise::continuous_corrupt;
use crate::rng::RngStream;
use crate::tensor::{ParamStore, Scalar, Tensor};
use crate::text::{make_batch, tokenize, SentenceBatch, Vocabulary, MASK_ID};
use std::collections::HashMap;

pub const LN_EPS: f64 = 1e-5;
/// Additive bias that removes a key from attention.
const KEY_MASK_BIAS: f64 = -1e30;
/// Inference batches are embedded in chunks of this many sentences.
const EMBED_CHUNK: usize = 64;

// Dropout site tags, composed with the layer index.
const SITE_EMB: u64 = 1;
const SITE_ATTN: u64 = 2;
const SITE_CROSS: u64 = 3;
const SITE_FFN: u64 = 4;
const SITE_CORRUPT: u64 = 5;

fn site_tag(layer: usize, slot: u64) -> u64 {
    (layer as u64 + 1) * 8 + slot
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderInputMode {
    /// The encoder sees the clean sentence; the decoder reconstructs it from
    /// the noised copy.
    Original,
    /// The encoder sees the discretely augmented sentence.
    Augmented,
}

impl EncoderInputMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(EncoderInputMode::Original),
            "augmented" => Ok(EncoderInputMode::Augmented),
            other => {
                Err(Error::InvalidParameter(format!("unknown encoder input mode {other:?}")))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EncoderInputMode::Original => "original",
            EncoderInputMode::Augmented => "augmented",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_heads: usize,
    pub dec_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    /// Maximum sentence length in tokens (decoder width).
    pub max_len: usize,
    pub internal_dropout: f64,
    pub encoder_input_mode: EncoderInputMode,
}

impl ModelConfig {
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            d: 64,
            enc_layers: 2,
            dec_layers: 2,
            enc_heads: 4,
            dec_heads: 1,
            ffn_mult: 4,
            vocab_size,
            max_len: 32,
            internal_dropout: 0.1,
            encoder_input_mode: EncoderInputMode::Original,
        }
    }

    /// Encoder width: sentence tokens plus template overhead.
    pub fn enc_len(&self) -> usize {
        self.max_len + 4
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d == 0 {
            problems.push("d must be >= 1".to_string());
        }
        if self.enc_heads == 0 || self.d % self.enc_heads != 0 {
            problems.push(format!("d = {} must be divisible by enc_heads = {}", self.d, self.enc_heads));
        }
        if self.dec_heads == 0 || self.d % self.dec_heads != 0 {
            problems.push(format!("d = {} must be divisible by dec_heads = {}", self.d, self.dec_heads));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            problems.push("encoder and decoder need at least one layer each".to_string());
        }
        if self.ffn_mult == 0 {
            problems.push("ffn_mult must be >= 1".to_string());
        }
        if self.vocab_size < 5 {
            problems.push("vocabulary must hold the specials and template tokens".to_string());
        }
        if self.max_len == 0 {
            problems.push("max_len must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.internal_dropout) {
            problems.push(format!("internal_dropout must be in [0, 1), got {}", self.internal_dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("d".into(), self.d.to_string()),
            ("enc_layers".into(), self.enc_layers.to_string()),
            ("dec_layers".into(), self.dec_layers.to_string()),
            ("enc_heads".into(), self.enc_heads.to_string()),
            ("dec_heads".into(), self.dec_heads.to_string()),
            ("ffn_mult".into(), self.ffn_mult.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("internal_dropout".into(), self.internal_dropout.to_string()),
            ("encoder_input_mode".into(), self.encoder_input_mode.name().to_string()),
        ]
    }

    pub fn from_kv(map: &HashMap<String, String>) -> Result<Self> {
        fn req<'a>(map: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
            map.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing config key {key}")))
        }
        fn num<V: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<V> {
            req(map, key)?.parse().map_err(|_| {
                Error::IncompatibleCheckpoint(format!("bad value for config key {key}"))
            })
        }
        let cfg = ModelConfig {
            d: num(map, "d")?,
            enc_layers: num(map, "enc_layers")?,
            dec_layers: num(map, "dec_layers")?,
            enc_heads: num(map, "enc_heads")?,
            dec_heads: num(map, "dec_heads")?,
            ffn_mult: num(map, "ffn_mult")?,
            vocab_size: num(map, "vocab_size")?,
            max_len: num(map, "max_len")?,
            internal_dropout: num(map, "internal_dropout")?,
            encoder_input_mode: EncoderInputMode::parse(req(map, "encoder_input_mode")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Initialize all learnable tensors: normal(0, 0.02) embeddings and
/// projections, ones/zeros layer-norm gains/biases, zero biases.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut RngStream) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let d = cfg.d;
    let f = cfg.d * cfg.ffn_mult;
    let v = cfg.vocab_size;

    let normal = |store: &mut ParamStore<T>, name: &str, dims: Vec<usize>, rng: &mut RngStream| {
        let n: usize = dims.iter().product();
        let values: Vec<T> = (0..n).map(|_| T::from_f64(rng.next_normal() * 0.02)).collect();
        store.insert(name, Tensor::from_values(dims, values).expect("valid dims"));
    };
    let zeros = |store: &mut ParamStore<T>, name: &str, dims: Vec<usize>| {
        store.insert(name, Tensor::zeros(dims).expect("valid dims"));
    };
    let ones = |store: &mut ParamStore<T>, name: &str, n: usize| {
        store.insert(name, Tensor::from_values(vec![n], vec![T::one(); n]).expect("valid dims"));
    };

    normal(&mut store, "tok_emb", vec![v, d], rng);
    normal(&mut store, "enc_pos", vec![cfg.enc_len(), d], rng);
    normal(&mut store, "dec_pos", vec![cfg.max_len, d], rng);

    let attn_block = |store: &mut ParamStore<T>, prefix: &str, rng: &mut RngStream| {
        for w in ["wq", "wk", "wv", "wo"] {
            normal(store, &format!("{prefix}.{w}"), vec![d, d], rng);
        }
        // No key bias: softmax is invariant to the per-row constant shift it
        // would add, leaving it gradient-free.
        for b in ["bq", "bv", "bo"] {
            zeros(store, &format!("{prefix}.{b}"), vec![d]);
        }
    };
    let ln_block = |store: &mut ParamStore<T>, prefix: &str| {
        ones(store, &format!("{prefix}.gain"), d);
        zeros(store, &format!("{prefix}.bias"), vec![d]);
    };

    for i in 0..cfg.enc_layers {
        let p = format!("enc.{i}");
        ln_block(&mut store, &format!("{p}.ln1"));
        attn_block(&mut store, &format!("{p}.attn"), rng);
        ln_block(&mut store, &format!("{p}.ln2"));
        normal(&mut store, &format!("{p}.ffn.w1"), vec![d, f], rng);
        zeros(&mut store, &format!("{p}.ffn.b1"), vec![f]);
        normal(&mut store, &format!("{p}.ffn.w2"), vec![f, d], rng);
        zeros(&mut store, &format!("{p}.ffn.b2"), vec![d]);
    }
    ln_block(&mut store, "enc_final");

    for i in 0..cfg.dec_layers {
        let p = format!("dec.{i}");
        ln_block(&mut store, &format!("{p}.ln1"));
        attn_block(&mut store, &format!("{p}.self"), rng);
        ln_block(&mut store, &format!("{p}.ln2"));
        attn_block(&mut store, &format!("{p}.cross"), rng);
        ln_block(&mut store, &format!("{p}.ln3"));
        normal(&mut store, &format!("{p}.ffn.w1"), vec![d, f], rng);
        zeros(&mut store, &format!("{p}.ffn.b1"), vec![f]);
        normal(&mut store, &format!("{p}.ffn.w2"), vec![f, d], rng);
        zeros(&mut store, &format!("{p}.ffn.b2"), vec![d]);
    }
    ln_block(&mut store, "dec_final");

    normal(&mut store, "out_proj.w", vec![d, v], rng);
    zeros(&mut store, "out_proj.b", vec![v]);
    Ok(store)
}

/// A batch wrapped in the pooling template, with the per-row [MASK] position.
#[derive(Debug, Clone)]
pub struct TemplatedBatch {
    pub batch: SentenceBatch,
    pub mask_positions: Vec<usize>,
}

/// Wrap a sentence as `[x_1 .. x_n, means, MASK, .]`; the pooled position is
/// `n + 1` (0-based). Callers truncate to the model length first.
pub fn wrap_with_template(ids: &[usize], vocab: &Vocabulary) -> Result<(Vec<usize>, usize)> {
    if ids.is_empty() {
        return Err(Error::EmptySentence);
    }
    let mut wrapped = Vec::with_capacity(ids.len() + 3);
    wrapped.extend_from_slice(ids);
    wrapped.push(vocab.means_id());
    wrapped.push(MASK_ID);
    wrapped.push(vocab.period_id());
    let mask_position = ids.len() + 1;
    Ok((wrapped, mask_position))
}

/// Truncate to `max_len`, wrap with the template, and pad to `width`.
pub fn templatize_width(
    seqs: &[Vec<usize>],
    vocab: &Vocabulary,
    max_len: usize,
    width: usize,
) -> Result<TemplatedBatch> {
    let mut wrapped = Vec::with_capacity(seqs.len());
    let mut mask_positions = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.is_empty() {
            return Err(Error::EmptySentence);
        }
        let n = seq.len().min(max_len);
        let (w, pos) = wrap_with_template(&seq[..n], vocab)?;
        if pos + 2 > width {
            return Err(Error::ContractViolation(format!(
                "template of length {} does not fit encoder width {width}",
                w.len()
            )));
        }
        wrapped.push(w);
        mask_positions.push(pos);
    }
    Ok(TemplatedBatch { batch: make_batch(&wrapped, width)?, mask_positions })
}

pub fn templatize(
    seqs: &[Vec<usize>],
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<TemplatedBatch> {
    templatize_width(seqs, vocab, cfg.max_len, cfg.enc_len())
}

/// Node handles for one attention sublayer's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

impl AttentionParams {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(AttentionParams {
            wq: bound.get(&format!("{prefix}.wq"))?,
            bq: bound.get(&format!("{prefix}.bq"))?,
            wk: bound.get(&format!("{prefix}.wk"))?,
            wv: bound.get(&format!("{prefix}.wv"))?,
            bv: bound.get(&format!("{prefix}.bv"))?,
            wo: bound.get(&format!("{prefix}.wo"))?,
            bo: bound.get(&format!("{prefix}.bo"))?,
        })
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, w)?;
    g.add_broadcast(h, b)
}

/// Scaled dot-product attention with projections over batched inputs:
/// queries [B, Lq, d] attend over memory [B, Lk, d]. An optional key mask
/// (per batch row, 1 = attendable) excludes padding keys for every query.
fn attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &AttentionParams,
    queries: NodeId,
    memory: NodeId,
    heads: usize,
    key_mask: Option<&SentenceBatch>,
) -> Result<NodeId> {
    let qd = g.dims(queries).to_vec();
    let md = g.dims(memory).to_vec();
    if qd.len() != 3 || md.len() != 3 || qd[2] != md[2] || qd[0] != md[0] {
        return Err(Error::InvalidShape(format!("attention over {qd:?} and {md:?}")));
    }
    let (b, lq, d) = (qd[0], qd[1], qd[2]);
    let lk = md[1];
    let dh = d / heads;

    let q = linear(g, queries, p.wq, p.bq)?;
    let k = g.matmul(memory, p.wk)?;
    let v = linear(g, memory, p.wv, p.bv)?;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;

    let scores = g.bmm(qh, kh, true)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some(mask_batch) = key_mask {
        debug_assert_eq!(mask_batch.batch, b);
        debug_assert_eq!(mask_batch.width, lk);
        let mut bias = vec![T::zero(); b * heads * lq * lk];
        let blocked = T::from_f64(KEY_MASK_BIAS);
        for bi in 0..b {
            for j in 0..lk {
                if mask_batch.mask[bi * lk + j] == 0 {
                    for h in 0..heads {
                        for qi in 0..lq {
                            bias[((bi * heads + h) * lq + qi) * lk + j] = blocked;
                        }
                    }
                }
            }
        }
        let bias_id = g.constant(vec![b * heads, lq, lk], bias)?;
        scores = g.add(scores, bias_id)?;
    }
    let attn = g.softmax_rows(scores)?;
    let ctx = g.bmm(attn, vh, false)?;
    let merged = g.merge_heads(ctx, heads)?;
    linear(g, merged, p.wo, p.bo)
}

/// Cross-attention as a standalone sublayer: memory `z_x` [m, d], queries
/// `z_y` [n, d], output [n, d] (before any residual). With m = 1 the
/// attention weight over the single key is exactly 1, so the output is
/// position-constant and independent of the queries.
pub fn cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &AttentionParams,
    z_x: NodeId,
    z_y: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let xd = g.dims(z_x).to_vec();
    let yd = g.dims(z_y).to_vec();
    if xd.len() != 2 || yd.len() != 2 || xd[1] != yd[1] {
        return Err(Error::InvalidShape(format!("cross_attention z_x {xd:?} / z_y {yd:?}")));
    }
    let (m, d) = (xd[0], xd[1]);
    let n = yd[0];
    let mem = g.reshape(z_x, vec![1, m, d])?;
    let q = g.reshape(z_y, vec![1, n, d])?;
    let out = attention(g, p, q, mem, heads, None)?;
    g.reshape(out, vec![n, d])
}

fn layer_norm_named<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gain = bound.get(&format!("{prefix}.gain"))?;
    let bias = bound.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

fn ffn<T: Scalar>(g: &mut Graph<T>, bound: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w1 = bound.get(&format!("{prefix}.w1"))?;
    let b1 = bound.get(&format!("{prefix}.b1"))?;
    let w2 = bound.get(&format!("{prefix}.w2"))?;
    let b2 = bound.get(&format!("{prefix}.b2"))?;
    let h = linear(g, x, w1, b1)?;
    let h = g.relu(h)?;
    linear(g, h, w2, b2)
}

fn maybe_dropout<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    rate: f64,
    training: bool,
    rng: &RngStream,
    tag: u64,
) -> Result<NodeId> {
    if training && rate > 0.0 {
        let mut site = rng.substream(tag);
        Ok(g.dropout(x, rate, &mut site)?.0)
    } else {
        Ok(x)
    }
}

/// Pre-norm encoder block: x += Attn(LN(x)); x += FFN(LN(x)).
#[allow(clippy::too_many_arguments)]
fn encoder_block<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    x: NodeId,
    batch: &SentenceBatch,
    training: bool,
    rng: &RngStream,
) -> Result<NodeId> {
    let p = format!("enc.{layer}");
    let attn_params = AttentionParams::from_bound(bound, &format!("{p}.attn"))?;
    let h = layer_norm_named(g, bound, &format!("{p}.ln1"), x)?;
    let a = attention(g, &attn_params, h, h, cfg.enc_heads, Some(batch))?;
    let a = maybe_dropout(g, a, cfg.internal_dropout, training, rng, site_tag(layer, SITE_ATTN))?;
    let x = g.add(x, a)?;

    let h = layer_norm_named(g, bound, &format!("{p}.ln2"), x)?;
    let f = ffn(g, bound, &format!("{p}.ffn"), h)?;
    let f = maybe_dropout(g, f, cfg.internal_dropout, training, rng, site_tag(layer, SITE_FFN))?;
    g.add(x, f)
}

/// Encode a templated batch to one vector per sentence: run the pre-norm
/// stack with padding-masked self-attention and read the hidden state at
/// each row's [MASK] position.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    tb: &TemplatedBatch,
    training: bool,
    rng: &RngStream,
) -> Result<NodeId> {
    let width = tb.batch.width;
    if width > cfg.enc_len() {
        return Err(Error::InvalidShape(format!(
            "encoder batch width {width} exceeds enc_len {}",
            cfg.enc_len()
        )));
    }
    for (&pos, &len) in tb.mask_positions.iter().zip(&tb.batch.lengths) {
        if pos >= width || pos >= len {
            return Err(Error::ContractViolation(format!(
                "mask position {pos} outside row of length {len} (width {width})"
            )));
        }
    }
    let b = tb.batch.batch;
    let tok_emb = bound.get("tok_emb")?;
    let enc_pos = bound.get("enc_pos")?;

    let tok = g.embedding(tok_emb, &tb.batch.ids)?;
    let tok = g.reshape(tok, vec![b, width, cfg.d])?;
    let pos_ids: Vec<usize> = (0..width).collect();
    let pos = g.embedding(enc_pos, &pos_ids)?;
    let mut x = g.add_broadcast(tok, pos)?;
    x = maybe_dropout(g, x, cfg.internal_dropout, training, rng, site_tag(0, SITE_EMB))?;

    for layer in 0..cfg.enc_layers {
        x = encoder_block(g, bound, cfg, layer, x, &tb.batch, training, rng)?;
    }
    let x = layer_norm_named(g, bound, "enc_final", x)?;
    g.gather_rows(x, &tb.mask_positions)
}

/// Decode logits for reconstruction: embed the noisy ids, apply continuous
/// corruption (training only), then run decoder blocks of {non-causal masked
/// self-attention, cross-attention over the length-1 memory, FFN} and project
/// to the vocabulary.
#[allow(clippy::too_many_arguments)]
pub fn decode_denoise<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    rep: NodeId,
    noisy: &SentenceBatch,
    p: f64,
    training: bool,
    rng: &RngStream,
) -> Result<NodeId> {
    let rd = g.dims(rep).to_vec();
    if rd.len() != 2 || rd[1] != cfg.d || rd[0] != noisy.batch {
        return Err(Error::InvalidShape(format!(
            "representation {rd:?} incompatible with config d = {} and batch {}",
            cfg.d, noisy.batch
        )));
    }
    let width = noisy.width;
    if width > cfg.max_len {
        return Err(Error::InvalidShape(format!(
            "decoder batch width {width} exceeds max_len {}",
            cfg.max_len
        )));
    }
    let b = noisy.batch;
    let tok_emb = bound.get("tok_emb")?;
    let dec_pos = bound.get("dec_pos")?;

    let tok = g.embedding(tok_emb, &noisy.ids)?;
    let tok = g.reshape(tok, vec![b, width, cfg.d])?;
    let pos_ids: Vec<usize> = (0..width).collect();
    let pos = g.embedding(dec_pos, &pos_ids)?;
    let x = g.add_broadcast(tok, pos)?;

    let mut corrupt_rng = rng.substream(site_tag(0, SITE_CORRUPT));
    let mut x = continuous_corrupt(g, x, p, training, &mut corrupt_rng)?;

    let mem = g.reshape(rep, vec![b, 1, cfg.d])?;
    for layer in 0..cfg.dec_layers {
        let pfx = format!("dec.{layer}");
        let self_params = AttentionParams::from_bound(bound, &format!("{pfx}.self"))?;
        let cross_params = AttentionParams::from_bound(bound, &format!("{pfx}.cross"))?;

        let h = layer_norm_named(g, bound, &format!("{pfx}.ln1"), x)?;
        let a = attention(g, &self_params, h, h, cfg.dec_heads, Some(noisy))?;
        let a =
            maybe_dropout(g, a, cfg.internal_dropout, training, rng, site_tag(layer, SITE_ATTN))?;
        x = g.add(x, a)?;

        let h = layer_norm_named(g, bound, &format!("{pfx}.ln2"), x)?;
        let c = attention(g, &cross_params, h, mem, cfg.dec_heads, None)?;
        let c =
            maybe_dropout(g, c, cfg.internal_dropout, training, rng, site_tag(layer, SITE_CROSS))?;
        x = g.add(x, c)?;

        let h = layer_norm_named(g, bound, &format!("{pfx}.ln3"), x)?;
        let f = ffn(g, bound, &format!("{pfx}.ffn"), h)?;
        let f =
            maybe_dropout(g, f, cfg.internal_dropout, training, rng, site_tag(layer, SITE_FFN))?;
        x = g.add(x, f)?;
    }
    let x = layer_norm_named(g, bound, "dec_final", x)?;
    let w = bound.get("out_proj.w")?;
    let bias = bound.get("out_proj.b")?;
    linear(g, x, w, bias)
}

/// Embed sentences with the encoder in eval mode; the decoder is never run.
pub fn embed_sentences<T: Scalar>(
    texts: &[String],
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
) -> Result<Tensor<T>> {
    if texts.is_empty() {
        return Err(Error::EmptyInput("no sentences to embed".into()));
    }
    let rng = RngStream::new(0, 0); // unused in eval mode
    let mut rows: Vec<T> = Vec::with_capacity(texts.len() * cfg.d);
    for chunk in texts.chunks(EMBED_CHUNK) {
        let seqs: Vec<Vec<usize>> =
            chunk.iter().map(|t| tokenize(t, vocab)).collect::<Result<_>>()?;
        let tb = templatize(&seqs, vocab, cfg)?;
        let mut g = Graph::new();
        let bound = g.bind(params)?;
        let rep = encode(&mut g, &bound, cfg, &tb, false, &rng)?;
        rows.extend_from_slice(g.values(rep));
    }
    Tensor::from_values(vec![texts.len(), cfg.d], rows)
}
