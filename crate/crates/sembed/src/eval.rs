//! Evaluation: Spearman-on-cosine STS scoring, retrieval metrics, and
//! representation-space diagnostics.

use crate::error::{Error, Result};
use crate::model::{embed_sentences, ModelConfig};
use crate::tensor::{ParamStore, Scalar, Tensor};
use crate::text::{EvalRecord, Vocabulary};
use std::collections::BTreeSet;

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidShape(format!(
            "cosine over lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean 1-based rank.
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::ConstantSeries);
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Spearman rank correlation: Pearson over average ranks. Perfectly
/// concordant or discordant rankings return exactly +-1.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "spearman needs two equal series of length >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let constant = |r: &[f64]| r.iter().all(|&v| v == r[0]);
    if constant(&rx) || constant(&ry) {
        return Err(Error::ConstantSeries);
    }
    if rx.iter().zip(&ry).all(|(a, b)| a == b) {
        return Ok(1.0);
    }
    if rx.iter().zip(&ry).all(|(a, b)| *a == n + 1.0 - b) {
        return Ok(-1.0);
    }
    pearson(&rx, &ry)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceDiagnostics {
    /// Mean squared distance between unit-normalized pair members.
    pub alignment: f64,
    /// log mean over distinct anchors of exp(-2 * squared distance).
    pub uniformity: f64,
    pub mean_pairwise_cosine: f64,
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Alignment/uniformity/mean-cosine over a paired set `(z_i, z_plus_i)`.
/// Uniformity and the mean pairwise cosine are computed over the anchors.
pub fn space_diagnostics(z: &[Vec<f64>], z_plus: &[Vec<f64>]) -> Result<SpaceDiagnostics> {
    if z.len() != z_plus.len() || z.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "diagnostics need >= 2 pairs, got {} and {}",
            z.len(),
            z_plus.len()
        )));
    }
    let zn: Vec<Vec<f64>> = z.iter().map(|v| unit(v)).collect::<Result<_>>()?;
    let pn: Vec<Vec<f64>> = z_plus.iter().map(|v| unit(v)).collect::<Result<_>>()?;

    let alignment = zn
        .iter()
        .zip(&pn)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum::<f64>()
        / zn.len() as f64;

    let mut gaussian_sum = 0.0;
    let mut cos_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..zn.len() {
        for j in 0..zn.len() {
            if i == j {
                continue;
            }
            let sq: f64 = zn[i].iter().zip(&zn[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            gaussian_sum += (-2.0 * sq).exp();
            pairs += 1;
            if j > i {
                cos_sum += cosine(&z[i], &z[j])?;
            }
        }
    }
    Ok(SpaceDiagnostics {
        alignment,
        uniformity: (gaussian_sum / pairs as f64).ln(),
        mean_pairwise_cosine: cos_sum / (pairs / 2) as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub spearman: f64,
    pub n_pairs: usize,
    pub diagnostics: SpaceDiagnostics,
}

impl EvalReport {
    /// key=value lines mirroring the report fields; both raw rho and the
    /// x100 presentation are included.
    pub fn to_kv_lines(&self) -> String {
        format!(
            "spearman={:.6}\nspearman_x100={:.2}\nn_pairs={}\nalignment={:.6}\nuniformity={:.6}\nmean_pairwise_cosine={:.6}\n",
            self.spearman,
            self.spearman * 100.0,
            self.n_pairs,
            self.diagnostics.alignment,
            self.diagnostics.uniformity,
            self.diagnostics.mean_pairwise_cosine,
        )
    }
}

pub fn tensor_rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = *t.dims().last().unwrap();
    t.values().chunks(d).map(|row| row.iter().map(|v| v.as_f64()).collect()).collect()
}

/// Embed both sides of every record, score cosine similarities against the
/// gold scores by Spearman correlation, and attach space diagnostics.
pub fn eval_sts<T: Scalar>(
    records: &[EvalRecord],
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    if records.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "STS evaluation needs >= 2 records, got {}",
            records.len()
        )));
    }
    let side_a: Vec<String> = records.iter().map(|r| r.sentence_a.clone()).collect();
    let side_b: Vec<String> = records.iter().map(|r| r.sentence_b.clone()).collect();
    let za = tensor_rows(&embed_sentences(&side_a, params, cfg, vocab)?);
    let zb = tensor_rows(&embed_sentences(&side_b, params, cfg, vocab)?);

    let mut sims = Vec::with_capacity(records.len());
    for (a, b) in za.iter().zip(&zb) {
        sims.push(cosine(a, b)?);
    }
    let gold: Vec<f64> = records.iter().map(|r| r.gold_score).collect();
    let rho = spearman(&sims, &gold)?;
    let diagnostics = space_diagnostics(&za, &zb)?;
    Ok(EvalReport { spearman: rho, n_pairs: records.len(), diagnostics })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalMetrics {
    pub mrr: f64,
    pub map: f64,
}

/// Rank documents by cosine per query (ties broken by the stable document
/// index); report MRR@k and truncated MAP@k.
pub fn retrieval_metrics(
    queries: &[Vec<f64>],
    docs: &[Vec<f64>],
    relevance: &[BTreeSet<usize>],
    k: usize,
) -> Result<RetrievalMetrics> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("retrieval corpus has no documents".into()));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("retrieval run has no queries".into()));
    }
    if relevance.len() != queries.len() {
        return Err(Error::InvalidParameter(format!(
            "got {} relevance sets for {} queries",
            relevance.len(),
            queries.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let mut mrr_sum = 0.0;
    let mut map_sum = 0.0;
    for (q, rel) in queries.iter().zip(relevance) {
        let mut scored: Vec<(usize, f64)> = Vec::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            scored.push((i, cosine(q, d)?));
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));

        let depth = k.min(scored.len());
        let mut first_rel: Option<usize> = None;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank0, (doc, _)) in scored[..depth].iter().enumerate() {
            if rel.contains(doc) {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                if first_rel.is_none() {
                    first_rel = Some(rank0 + 1);
                }
            }
        }
        mrr_sum += first_rel.map(|r| 1.0 / r as f64).unwrap_or(0.0);
        if !rel.is_empty() {
            map_sum += precision_sum / rel.len().min(k) as f64;
        }
    }
    let n = queries.len() as f64;
    Ok(RetrievalMetrics { mrr: mrr_sum / n, map: map_sum / n })
}
