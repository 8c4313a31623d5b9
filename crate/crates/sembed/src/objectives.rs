//! The three losses: denoising reconstruction, in-batch InfoNCE over cosine
//! similarities, and their weighted sum.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Scalar;
use crate::text::SentenceBatch;

/// Bias that excludes the diagonal from the denominator in the
/// printed-variant contrastive loss.
const DIAG_EXCLUSION_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub denoising: f64,
    pub contrastive: f64,
    pub combined: f64,
    /// Fraction of masked-in positions where the argmax logit hits the target.
    pub token_accuracy: f64,
}

/// Mean (or literal sum) cross-entropy of the logits against the ORIGINAL
/// token ids, restricted to positions where the original mask is 1. The
/// noisy copy may disagree in length; the model must output the original
/// token at each position regardless of what the noisy input holds there.
pub fn denoising_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    original: &SentenceBatch,
    sum_reduction: bool,
) -> Result<NodeId> {
    let ld = g.dims(logits).to_vec();
    if ld.len() != 3 || ld[0] != original.batch || ld[1] != original.width {
        return Err(Error::InvalidShape(format!(
            "denoising logits {ld:?} vs batch {}x{}",
            original.batch, original.width
        )));
    }
    g.cross_entropy_mean(logits, &original.ids, &original.mask_bools(), sum_reduction)
}

/// Fraction of masked-in positions whose argmax logit equals the original id.
pub fn token_accuracy<T: Scalar>(g: &Graph<T>, logits: NodeId, original: &SentenceBatch) -> f64 {
    let v = *g.dims(logits).last().unwrap();
    let values = g.values(logits);
    let mut hits = 0usize;
    let mut total = 0usize;
    for (row, chunk) in values.chunks(v).enumerate() {
        if original.mask[row] == 0 {
            continue;
        }
        let mut best = 0usize;
        for (j, &x) in chunk.iter().enumerate() {
            if x > chunk[best] {
                best = j;
            }
        }
        total += 1;
        if best == original.ids[row] {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// In-batch InfoNCE over cosine similarities at temperature `tau`: each
/// anchor's positive is its own augmented view, and the other positives in
/// the batch act as negatives.
///
/// With `include_positive` (the default in-batch convention) the denominator
/// contains the positive term, so the loss is >= 0 and equals ln B when all
/// pairwise similarities coincide. The printed variant that sums only over
/// negatives is available with `include_positive = false`.
pub fn info_nce<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    z_plus: NodeId,
    tau: f64,
    include_positive: bool,
) -> Result<NodeId> {
    let zd = g.dims(z).to_vec();
    let pd = g.dims(z_plus).to_vec();
    if zd.len() != 2 || pd != zd {
        return Err(Error::InvalidShape(format!("info_nce over {zd:?} and {pd:?}")));
    }
    let b = zd[0];
    if b < 2 {
        return Err(Error::DegenerateBatch(format!(
            "contrastive loss needs at least 2 in-batch samples, got {b}"
        )));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!("temperature must be > 0, got {tau}")));
    }
    let zn = g.row_normalize(z, 1e-12)?;
    let pn = g.row_normalize(z_plus, 1e-12)?;
    let cos = g.matmul_tb(zn, pn)?;
    let scaled = g.scale(cos, 1.0 / tau)?;
    let pos = g.diag(scaled)?;
    let denom_in = if include_positive {
        scaled
    } else {
        let mut bias = vec![T::zero(); b * b];
        for i in 0..b {
            bias[i * b + i] = T::from_f64(DIAG_EXCLUSION_BIAS);
        }
        let bias_id = g.constant(vec![b, b], bias)?;
        g.add(scaled, bias_id)?
    };
    let lse = g.logsumexp_rows(denom_in)?;
    let per_anchor = g.sub(lse, pos)?;
    g.mean_all(per_anchor)
}

/// combined = w_contrastive * contrastive + w_denoising * denoising.
/// A missing component contributes zero (its objective was disabled).
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    contrastive: Option<NodeId>,
    denoising: Option<NodeId>,
    w_contrastive: f64,
    w_denoising: f64,
) -> Result<NodeId> {
    if w_contrastive < 0.0 || w_denoising < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "loss weights must be non-negative, got ({w_contrastive}, {w_denoising})"
        )));
    }
    let c = match contrastive {
        Some(id) => Some(g.scale(id, w_contrastive)?),
        None => None,
    };
    let d = match denoising {
        Some(id) => Some(g.scale(id, w_denoising)?),
        None => None,
    };
    match (c, d) {
        (Some(c), Some(d)) => g.add(c, d),
        (Some(c), None) => Ok(c),
        (None, Some(d)) => Ok(d),
        (None, None) => {
            Err(Error::InvalidParameter("combined loss needs at least one component".into()))
        }
    }
}
