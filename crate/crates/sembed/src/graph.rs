//! Define-by-run computation graph with reverse-mode gradient accumulation.
//!
//! Ops execute eagerly as they are recorded; `backward` replays the tape in
//! reverse, accumulating vector-Jacobian products. Every forward op verifies
//! its output is finite — NaN/Inf anywhere is an error state, not a value.
//!
//! Tensors participating in a graph are single-writer: nodes are immutable
//! once recorded, and the backward pass is the only writer of gradients.

use crate::error::{Error, Result};
use crate::kernels::{dot, matmul_ab, matmul_abt, matmul_atb};
use crate::rng::RngStream;
use crate::tensor::{ParamStore, Scalar, Tensor};
use indexmap::IndexMap;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// How a node's values were produced; consumed by the backward pass.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a: [.., k] @ b: [k, n] -> [.., n]
    Matmul { a: NodeId, b: NodeId },
    /// a: [m, k] @ b: [n, k]^T -> [m, n]
    MatmulTransposeB { a: NodeId, b: NodeId },
    /// a: [N, m, k] @ b: [N, k, n] (or [N, n, k] transposed) -> [N, m, n]
    BatchMatmul { a: NodeId, b: NodeId, transpose_b: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// b's dims are a suffix of a's dims; b is broadcast over the leading dims.
    AddBroadcast { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    /// out[i, :] = table[ids[i], :]
    Embedding { table: NodeId, ids: Vec<usize> },
    /// a: [B, L, D] -> [B, D], picking row positions[b] from each batch entry.
    GatherRows { a: NodeId, positions: Vec<usize> },
    /// Masked token-level cross entropy over rows of [R, V] logits.
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool>, sum_reduction: bool },
    ConcatLast { parts: Vec<NodeId> },
    SliceLast { a: NodeId, start: usize, len: usize },
    /// [B, L, H*dh] -> [B*H, L, dh]
    SplitHeads { a: NodeId, heads: usize },
    /// [B*H, L, dh] -> [B, L, H*dh]
    MergeHeads { a: NodeId, heads: usize },
    /// Rows scaled to unit L2 norm (clamped at eps).
    RowNormalize { a: NodeId, eps: f64 },
    /// [R, C] -> [R]
    LogSumExpRows { a: NodeId },
    /// [n, n] -> [n]
    DiagOf { a: NodeId },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    Reshape { a: NodeId },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    dims: Vec<usize>,
    values: Vec<T>,
    op: Op,
    needs_grad: bool,
    param_name: Option<String>,
}

/// Name -> node handles for parameters bound into a graph.
#[derive(Debug, Default)]
pub struct Bound {
    map: IndexMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.map.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn values(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].values
    }

    /// Gradient of the last `backward` target with respect to this node.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::from_values(self.nodes[id.0].dims.clone(), self.nodes[id.0].values.clone())
            .expect("node dims are valid by construction")
    }

    fn push(
        &mut self,
        dims: Vec<usize>,
        values: Vec<T>,
        op: Op,
        needs_grad: bool,
        op_name: &str,
    ) -> Result<NodeId> {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { dims, values, op, needs_grad, param_name: None });
        Ok(id)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- leaves ------------------------------------------------------

    /// Leaf that never receives a gradient (masks, biases built host-side).
    pub fn constant(&mut self, dims: Vec<usize>, values: Vec<T>) -> Result<NodeId> {
        let t = Tensor::from_values(dims, values)?;
        let (dims, values) = (t.dims().to_vec(), t.values().to_vec());
        self.push(dims, values, Op::Leaf, false, "constant")
    }

    /// Leaf copied from a tensor; tracks gradients iff the tensor requires them.
    pub fn input(&mut self, t: &Tensor<T>) -> Result<NodeId> {
        self.push(t.dims().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad(), "input")
    }

    /// Bind every parameter of a store as a gradient-tracking leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Result<Bound> {
        let mut map = IndexMap::new();
        for (name, tensor) in store.iter() {
            let id = self.push(
                tensor.dims().to_vec(),
                tensor.values().to_vec(),
                Op::Leaf,
                true,
                "param",
            )?;
            self.nodes[id.0].param_name = Some(name.to_string());
            map.insert(name.to_string(), id);
        }
        Ok(Bound { map })
    }

    /// Add each bound parameter's gradient into the store's grad slots.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param_name {
                if let Some(g) = self.grads.get(idx).and_then(|g| g.as_ref()) {
                    store.get_mut(name)?.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    // ---- linear algebra ----------------------------------------------

    /// `a` may have any rank >= 2 (leading dims are treated as rows); `b` is [k, n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad.len() < 2 || bd.len() != 2 || ad[ad.len() - 1] != bd[0] {
            return Err(Error::InvalidShape(format!("matmul {ad:?} @ {bd:?}")));
        }
        let k = bd[0];
        let n = bd[1];
        let m = self.values(a).len() / k;
        let mut out = vec![T::zero(); m * n];
        matmul_ab(self.values(a), self.values(b), &mut out, m, k, n);
        let mut dims = ad;
        *dims.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        self.push(dims, out, Op::Matmul { a, b }, needs, "matmul")
    }

    /// a: [m, k] @ b: [n, k]^T -> [m, n]
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[1] {
            return Err(Error::InvalidShape(format!("matmul_tb {ad:?} @ {bd:?}^T")));
        }
        let (m, k, n) = (ad[0], ad[1], bd[0]);
        let mut out = vec![T::zero(); m * n];
        matmul_abt(self.values(a), self.values(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::MatmulTransposeB { a, b }, needs, "matmul_tb")
    }

    /// Batched matmul over matching leading dim.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] {
            return Err(Error::InvalidShape(format!("bmm {ad:?} @ {bd:?}")));
        }
        let (nb, m, k) = (ad[0], ad[1], ad[2]);
        let n = if transpose_b {
            if bd[2] != k {
                return Err(Error::InvalidShape(format!("bmm {ad:?} @ {bd:?}^T")));
            }
            bd[1]
        } else {
            if bd[1] != k {
                return Err(Error::InvalidShape(format!("bmm {ad:?} @ {bd:?}")));
            }
            bd[2]
        };
        let mut out = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            let av = &self.values(a)[i * m * k..(i + 1) * m * k];
            let bv = &self.values(b)[i * n * k..(i + 1) * n * k];
            let ov = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                matmul_abt(av, bv, ov, m, k, n);
            } else {
                matmul_ab(av, bv, ov, m, k, n);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![nb, m, n], out, Op::BatchMatmul { a, b, transpose_b }, needs, "bmm")
    }

    // ---- elementwise ---------------------------------------------------

    fn zip_op(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op,
        name: &str,
    ) -> Result<NodeId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::InvalidShape(format!(
                "{name}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let out: Vec<T> =
            self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].dims.clone(), out, op, needs, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    /// b's dims must be a suffix of a's dims; b repeats over the leading dims.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ad, bd) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if bd.len() > ad.len() || ad[ad.len() - bd.len()..] != bd[..] {
            return Err(Error::InvalidShape(format!("add_broadcast {ad:?} + {bd:?}")));
        }
        let bl = self.values(b).len();
        let out: Vec<T> = self
            .values(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.values(b)[i % bl])
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(ad, out, Op::AddBroadcast { a, b }, needs, "add_broadcast")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cv = T::from_f64(c);
        let out: Vec<T> = self.values(a).iter().map(|&x| x * cv).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].dims.clone(), out, Op::Scale { a, c }, needs, "scale")
    }

    // ---- normalization and activations ---------------------------------

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<T> = self.values(a).iter().map(|&x| x.max(T::zero())).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].dims.clone(), out, Op::Relu { a }, needs, "relu")
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let dims = self.dims(a).to_vec();
        let k = *dims.last().unwrap();
        let vals = self.values(a);
        let mut out = vec![T::zero(); vals.len()];
        for (row_in, row_out) in vals.chunks(k).zip(out.chunks_mut(k)) {
            let max = row_in.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                sum = sum + *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        let needs = self.needs(a);
        self.push(dims, out, Op::SoftmaxRows { a }, needs, "softmax_rows")
    }

    /// Per-row standardization over the last dimension followed by the affine
    /// transform `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::InvalidParameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let dims = self.dims(x).to_vec();
        let d = *dims.last().unwrap();
        if self.dims(gain) != [d] || self.dims(bias) != [d] {
            return Err(Error::InvalidShape(format!(
                "layer_norm: gain {:?} / bias {:?} vs feature dim {d}",
                self.dims(gain),
                self.dims(bias)
            )));
        }
        let epsv = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut out = vec![T::zero(); self.values(x).len()];
        {
            let xv = self.values(x);
            let gv = self.nodes[gain.0].values.clone();
            let bv = self.nodes[bias.0].values.clone();
            for (row_in, row_out) in xv.chunks(d).zip(out.chunks_mut(d)) {
                let mean = row_in.iter().cloned().sum::<T>() * inv_d;
                let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let inv_std = T::one() / (var + epsv).sqrt();
                for ((o, &v), (&g, &b)) in
                    row_out.iter_mut().zip(row_in).zip(gv.iter().zip(bv.iter()))
                {
                    *o = g * (v - mean) * inv_std + b;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(dims, out, Op::LayerNorm { x, gain, bias, eps }, needs, "layer_norm")
    }

    /// Inverted dropout: elements are zeroed independently with probability
    /// `p` and survivors are scaled by 1/(1-p). Returns `(output, mask)`
    /// where the mask holds 0/1 keep decisions. Gradients flow only through
    /// survivors. Keep decisions are drawn in f64 so the mask is identical
    /// across precisions for the same stream.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut RngStream) -> Result<(NodeId, NodeId)> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("dropout rate must be in [0, 1), got {p}")));
        }
        let len = self.values(x).len();
        let mask: Vec<T> =
            (0..len).map(|_| if rng.next_bool(p) { T::zero() } else { T::one() }).collect();
        let mask_id = self.constant(self.nodes[x.0].dims.clone(), mask)?;
        let dropped = self.mul(x, mask_id)?;
        let out = self.scale(dropped, 1.0 / (1.0 - p))?;
        Ok((out, mask_id))
    }

    // ---- lookups and reductions ----------------------------------------

    /// out[i, :] = table[ids[i], :]
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let td = self.dims(table).to_vec();
        if td.len() != 2 {
            return Err(Error::InvalidShape(format!("embedding table must be [V, d], got {td:?}")));
        }
        let (v, d) = (td[0], td[1]);
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidToken { id: bad, vocab_size: v });
        }
        let tv = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding { table, ids: ids.to_vec() },
            needs,
            "embedding",
        )
    }

    /// Pick one row per batch entry: a[B, L, D], positions[b] < L -> [B, D].
    pub fn gather_rows(&mut self, a: NodeId, positions: &[usize]) -> Result<NodeId> {
        let ad = self.dims(a).to_vec();
        if ad.len() != 3 || positions.len() != ad[0] {
            return Err(Error::InvalidShape(format!(
                "gather_rows on {ad:?} with {} positions",
                positions.len()
            )));
        }
        let (l, d) = (ad[1], ad[2]);
        if let Some(&bad) = positions.iter().find(|&&p| p >= l) {
            return Err(Error::ContractViolation(format!(
                "gather position {bad} out of range for length {l}"
            )));
        }
        let av = self.values(a);
        let mut out = Vec::with_capacity(ad[0] * d);
        for (b, &pos) in positions.iter().enumerate() {
            let base = (b * l + pos) * d;
            out.extend_from_slice(&av[base..base + d]);
        }
        let needs = self.needs(a);
        self.push(
            vec![ad[0], d],
            out,
            Op::GatherRows { a, positions: positions.to_vec() },
            needs,
            "gather_rows",
        )
    }

    /// Mean over masked-in rows of `-log softmax(logits)[target]`.
    ///
    /// `logits` is [.., V] flattened to rows; `targets` and `mask` have one
    /// entry per row. Row losses accumulate in f64 regardless of `T`.
    pub fn cross_entropy_mean(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
        sum_reduction: bool,
    ) -> Result<NodeId> {
        let ld = self.dims(logits).to_vec();
        let v = *ld.last().unwrap();
        let rows = self.values(logits).len() / v;
        if ld.len() < 2 || targets.len() != rows || mask.len() != rows {
            return Err(Error::InvalidShape(format!(
                "cross_entropy: logits {ld:?} with {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch("cross_entropy mask selects no positions".into()));
        }
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m && t >= v {
                let _ = r;
                return Err(Error::InvalidToken { id: t, vocab_size: v });
            }
        }
        let lv = self.values(logits);
        let mut total = 0.0f64;
        for (r, row) in lv.chunks(v).enumerate() {
            if !mask[r] {
                continue;
            }
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max).as_f64();
            let sum_exp: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
            total += max + sum_exp.ln() - row[targets[r]].as_f64();
        }
        let loss = if sum_reduction { total } else { total / count as f64 };
        let needs = self.needs(logits);
        self.push(
            vec![1],
            vec![T::from_f64(loss)],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                sum_reduction,
            },
            needs,
            "cross_entropy",
        )
    }

    // ---- structure ------------------------------------------------------

    /// Concatenate along the last dimension; all other dims must match.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat of no tensors".into()));
        }
        let head = self.dims(parts[0]).to_vec();
        let lead = &head[..head.len() - 1];
        let mut total_last = 0usize;
        for &p in parts {
            let pd = self.dims(p);
            if pd.len() != head.len() || &pd[..pd.len() - 1] != lead {
                return Err(Error::InvalidShape(format!("concat_last {head:?} vs {pd:?}")));
            }
            total_last += *pd.last().unwrap();
        }
        let groups: usize = lead.iter().product();
        let mut out = Vec::with_capacity(groups * total_last);
        for g in 0..groups {
            for &p in parts {
                let plast = *self.dims(p).last().unwrap();
                let pv = self.values(p);
                out.extend_from_slice(&pv[g * plast..(g + 1) * plast]);
            }
        }
        let mut dims = head;
        *dims.last_mut().unwrap() = total_last;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(dims, out, Op::ConcatLast { parts: parts.to_vec() }, needs, "concat_last")
    }

    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ad = self.dims(a).to_vec();
        let last = *ad.last().unwrap();
        if len == 0 || start + len > last {
            return Err(Error::InvalidShape(format!(
                "slice_last [{start}, {start}+{len}) of last dim {last}"
            )));
        }
        let groups = self.values(a).len() / last;
        let av = self.values(a);
        let mut out = Vec::with_capacity(groups * len);
        for g in 0..groups {
            out.extend_from_slice(&av[g * last + start..g * last + start + len]);
        }
        let mut dims = ad;
        *dims.last_mut().unwrap() = len;
        let needs = self.needs(a);
        self.push(dims, out, Op::SliceLast { a, start, len }, needs, "slice_last")
    }

    /// [B, L, H*dh] -> [B*H, L, dh]
    pub fn split_heads(&mut self, a: NodeId, heads: usize) -> Result<NodeId> {
        let ad = self.dims(a).to_vec();
        if ad.len() != 3 || heads == 0 || ad[2] % heads != 0 {
            return Err(Error::InvalidShape(format!("split_heads {ad:?} into {heads}")));
        }
        let (b, l, d) = (ad[0], ad[1], ad[2]);
        let dh = d / heads;
        let av = self.values(a);
        let mut out = vec![T::zero(); av.len()];
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let src = (bi * l + li) * d + h * dh;
                    let dst = ((bi * heads + h) * l + li) * dh;
                    out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                }
            }
        }
        let needs = self.needs(a);
        self.push(vec![b * heads, l, dh], out, Op::SplitHeads { a, heads }, needs, "split_heads")
    }

    /// [B*H, L, dh] -> [B, L, H*dh]
    pub fn merge_heads(&mut self, a: NodeId, heads: usize) -> Result<NodeId> {
        let ad = self.dims(a).to_vec();
        if ad.len() != 3 || heads == 0 || ad[0] % heads != 0 {
            return Err(Error::InvalidShape(format!("merge_heads {ad:?} from {heads}")));
        }
        let (bh, l, dh) = (ad[0], ad[1], ad[2]);
        let b = bh / heads;
        let d = dh * heads;
        let av = self.values(a);
        let mut out = vec![T::zero(); av.len()];
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let src = ((bi * heads + h) * l + li) * dh;
                    let dst = (bi * l + li) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&av[src..src + dh]);
                }
            }
        }
        let needs = self.needs(a);
        self.push(vec![b, l, d], out, Op::MergeHeads { a, heads }, needs, "merge_heads")
    }

    /// Scale each row of [R, C] to unit L2 norm (norms clamped at eps).
    pub fn row_normalize(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let ad = self.dims(a).to_vec();
        if ad.len() != 2 {
            return Err(Error::InvalidShape(format!("row_normalize expects [R, C], got {ad:?}")));
        }
        let c = ad[1];
        let epsv = T::from_f64(eps);
        let av = self.values(a);
        let mut out = vec![T::zero(); av.len()];
        for (row_in, row_out) in av.chunks(c).zip(out.chunks_mut(c)) {
            let norm = dot(row_in, row_in).sqrt().max(epsv);
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = x / norm;
            }
        }
        let needs = self.needs(a);
        self.push(ad, out, Op::RowNormalize { a, eps }, needs, "row_normalize")
    }

    /// log(sum(exp(row))) per row of [R, C] -> [R], max-subtracted.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let ad = self.dims(a).to_vec();
        if ad.len() != 2 {
            return Err(Error::InvalidShape(format!("logsumexp_rows expects [R, C], got {ad:?}")));
        }
        let (r, c) = (ad[0], ad[1]);
        let av = self.values(a);
        let mut out = Vec::with_capacity(r);
        for row in av.chunks(c) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            out.push(max + sum.ln());
        }
        let needs = self.needs(a);
        self.push(vec![r], out, Op::LogSumExpRows { a }, needs, "logsumexp_rows")
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let ad = self.dims(a).to_vec();
        if ad.len() != 2 || ad[0] != ad[1] {
            return Err(Error::InvalidShape(format!("diag expects square matrix, got {ad:?}")));
        }
        let n = ad[0];
        let av = self.values(a);
        let out: Vec<T> = (0..n).map(|i| av[i * n + i]).collect();
        let needs = self.needs(a);
        self.push(vec![n], out, Op::DiagOf { a }, needs, "diag")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.values(a).len();
        let total = self.values(a).iter().map(|v| v.as_f64()).sum::<f64>();
        let needs = self.needs(a);
        self.push(vec![1], vec![T::from_f64(total / n as f64)], Op::MeanAll { a }, needs, "mean_all")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.values(a).iter().map(|v| v.as_f64()).sum::<f64>();
        let needs = self.needs(a);
        self.push(vec![1], vec![T::from_f64(total)], Op::SumAll { a }, needs, "sum_all")
    }

    /// Same buffer, new dims (the element count must match).
    pub fn reshape(&mut self, a: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) || n != self.values(a).len() {
            return Err(Error::InvalidShape(format!(
                "reshape {:?} -> {dims:?}",
                self.dims(a)
            )));
        }
        let values = self.values(a).to_vec();
        let needs = self.needs(a);
        self.push(dims, values, Op::Reshape { a }, needs, "reshape")
    }

    // ---- backward -------------------------------------------------------

    fn add_grad(&mut self, id: NodeId, delta: &[T]) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => {
                for (a, &b) in g.iter_mut().zip(delta) {
                    *a = *a + b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar node. Gradients accumulate additively;
    /// query them via [`Graph::grad`] or push them into a store via
    /// [`Graph::accumulate_param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values(loss).len() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward target must be scalar, got {:?}",
                self.dims(loss)
            )));
        }
        self.grads = Vec::new();
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.grads[idx].is_none() {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let g_out = self.grads[idx].clone().unwrap();
            self.backward_op(idx, &op, &g_out);
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let k = self.dims(b)[0];
                let n = self.dims(b)[1];
                let m = self.values(a).len() / k;
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_abt(g, self.values(b), &mut da, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_atb(self.values(a), g, &mut db, m, k, n);
                    self.add_grad(b, &db);
                }
            }
            Op::MatmulTransposeB { a, b } => {
                let (m, k) = (self.dims(a)[0], self.dims(a)[1]);
                let n = self.dims(b)[0];
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_ab(g, self.values(b), &mut da, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); n * k];
                    matmul_atb(g, self.values(a), &mut db, m, n, k);
                    self.add_grad(b, &db);
                }
            }
            Op::BatchMatmul { a, b, transpose_b } => {
                let ad = self.dims(a).to_vec();
                let bd = self.dims(b).to_vec();
                let (nb, m, k) = (ad[0], ad[1], ad[2]);
                let n = if transpose_b { bd[1] } else { bd[2] };
                let mut da = vec![T::zero(); nb * m * k];
                let mut db = vec![T::zero(); bd.iter().product()];
                for i in 0..nb {
                    let gv = &g[i * m * n..(i + 1) * m * n];
                    let av = &self.values(a)[i * m * k..(i + 1) * m * k];
                    let bv = &self.values(b)[i * k * n..(i + 1) * k * n];
                    let dav = &mut da[i * m * k..(i + 1) * m * k];
                    let dbv = &mut db[i * k * n..(i + 1) * k * n];
                    if transpose_b {
                        // out = A @ B^T with B stored [n, k]
                        matmul_ab(gv, bv, dav, m, n, k);
                        matmul_atb(gv, av, dbv, m, n, k);
                    } else {
                        matmul_abt(gv, bv, dav, m, n, k);
                        matmul_atb(av, gv, dbv, m, k, n);
                    }
                }
                if self.needs(a) {
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    self.add_grad(b, &db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    self.add_grad(a, g);
                }
                if self.needs(b) {
                    self.add_grad(b, g);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    self.add_grad(a, g);
                }
                if self.needs(b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    self.add_grad(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let da: Vec<T> =
                        g.iter().zip(self.values(b)).map(|(&gv, &bv)| gv * bv).collect();
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<T> =
                        g.iter().zip(self.values(a)).map(|(&gv, &av)| gv * av).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::AddBroadcast { a, b } => {
                if self.needs(a) {
                    self.add_grad(a, g);
                }
                if self.needs(b) {
                    let bl = self.values(b).len();
                    let mut db = vec![T::zero(); bl];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % bl] = db[i % bl] + gv;
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(a) {
                    let cv = T::from_f64(c);
                    let da: Vec<T> = g.iter().map(|&x| x * cv).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Relu { a } => {
                if self.needs(a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(self.values(a))
                        .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.add_grad(a, &da);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.needs(a) {
                    let k = *self.dims(a).last().unwrap();
                    let y = &self.nodes[idx].values;
                    let mut da = vec![T::zero(); y.len()];
                    for ((yrow, grow), drow) in
                        y.chunks(k).zip(g.chunks(k)).zip(da.chunks_mut(k))
                    {
                        let inner = dot(grow, yrow);
                        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d = yv * (gv - inner);
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *self.dims(x).last().unwrap();
                let rows = self.values(x).len() / d;
                let epsv = T::from_f64(eps);
                let inv_d = T::from_f64(1.0 / d as f64);
                let xv = self.values(x).to_vec();
                let gv = self.values(gain).to_vec();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().cloned().sum::<T>() * inv_d;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                    let inv_std = T::one() / (var + epsv).sqrt();
                    // dxhat, plus its mean and xhat-weighted mean
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    let mut xhat = vec![T::zero(); d];
                    let mut dxh = vec![T::zero(); d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxh[j] = grow[j] * gv[j];
                        sum_dxh = sum_dxh + dxh[j];
                        sum_dxh_xh = sum_dxh_xh + dxh[j] * xhat[j];
                        dgain[j] = dgain[j] + grow[j] * xhat[j];
                        dbias[j] = dbias[j] + grow[j];
                    }
                    let mean_dxh = sum_dxh * inv_d;
                    let mean_dxh_xh = sum_dxh_xh * inv_d;
                    for j in 0..d {
                        dx[r * d + j] = inv_std * (dxh[j] - mean_dxh - xhat[j] * mean_dxh_xh);
                    }
                }
                if self.needs(x) {
                    self.add_grad(x, &dx);
                }
                if self.needs(gain) {
                    self.add_grad(gain, &dgain);
                }
                if self.needs(bias) {
                    self.add_grad(bias, &dbias);
                }
            }
            Op::Embedding { table, ref ids } => {
                if self.needs(table) {
                    let d = self.dims(table)[1];
                    let mut dt = vec![T::zero(); self.values(table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        let dst = &mut dt[id * d..(id + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                    self.add_grad(table, &dt);
                }
            }
            Op::GatherRows { a, ref positions } => {
                if self.needs(a) {
                    let ad = self.dims(a).to_vec();
                    let (l, d) = (ad[1], ad[2]);
                    let mut da = vec![T::zero(); self.values(a).len()];
                    for (b, &pos) in positions.iter().enumerate() {
                        let dst = &mut da[(b * l + pos) * d..(b * l + pos + 1) * d];
                        dst.copy_from_slice(&g[b * d..(b + 1) * d]);
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::CrossEntropy { logits, ref targets, ref mask, sum_reduction } => {
                if self.needs(logits) {
                    let v = *self.dims(logits).last().unwrap();
                    let count = mask.iter().filter(|&&m| m).count();
                    let scale = if sum_reduction {
                        g[0]
                    } else {
                        g[0] * T::from_f64(1.0 / count as f64)
                    };
                    let lv = self.values(logits).to_vec();
                    let mut dl = vec![T::zero(); lv.len()];
                    for (r, row) in lv.chunks(v).enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        let drow = &mut dl[r * v..(r + 1) * v];
                        for (o, &x) in drow.iter_mut().zip(row) {
                            *o = (x - max).exp();
                            sum = sum + *o;
                        }
                        for o in drow.iter_mut() {
                            *o = *o / sum;
                        }
                        drow[targets[r]] = drow[targets[r]] - T::one();
                        for o in drow.iter_mut() {
                            *o = *o * scale;
                        }
                    }
                    self.add_grad(logits, &dl);
                }
            }
            Op::ConcatLast { ref parts } => {
                let out_last = *self.nodes[idx].dims.last().unwrap();
                let groups = self.nodes[idx].values.len() / out_last;
                let mut offset = 0usize;
                for &p in parts {
                    let plast = *self.dims(p).last().unwrap();
                    if self.needs(p) {
                        let mut dp = vec![T::zero(); self.values(p).len()];
                        for gidx in 0..groups {
                            let src = &g[gidx * out_last + offset..gidx * out_last + offset + plast];
                            dp[gidx * plast..(gidx + 1) * plast].copy_from_slice(src);
                        }
                        self.add_grad(p, &dp);
                    }
                    offset += plast;
                }
            }
            Op::SliceLast { a, start, len } => {
                if self.needs(a) {
                    let last = *self.dims(a).last().unwrap();
                    let groups = self.values(a).len() / last;
                    let mut da = vec![T::zero(); self.values(a).len()];
                    for gidx in 0..groups {
                        let dst = &mut da[gidx * last + start..gidx * last + start + len];
                        dst.copy_from_slice(&g[gidx * len..(gidx + 1) * len]);
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::SplitHeads { a, heads } => {
                if self.needs(a) {
                    let ad = self.dims(a).to_vec();
                    let (b, l, d) = (ad[0], ad[1], ad[2]);
                    let dh = d / heads;
                    let mut da = vec![T::zero(); self.values(a).len()];
                    for bi in 0..b {
                        for h in 0..heads {
                            for li in 0..l {
                                let dst = (bi * l + li) * d + h * dh;
                                let src = ((bi * heads + h) * l + li) * dh;
                                da[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::MergeHeads { a, heads } => {
                if self.needs(a) {
                    let ad = self.dims(a).to_vec();
                    let (bh, l, dh) = (ad[0], ad[1], ad[2]);
                    let b = bh / heads;
                    let d = dh * heads;
                    let mut da = vec![T::zero(); self.values(a).len()];
                    for bi in 0..b {
                        for h in 0..heads {
                            for li in 0..l {
                                let src = (bi * l + li) * d + h * dh;
                                let dst = ((bi * heads + h) * l + li) * dh;
                                da[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::RowNormalize { a, eps } => {
                if self.needs(a) {
                    let c = self.dims(a)[1];
                    let epsv = T::from_f64(eps);
                    let av = self.values(a);
                    let y = &self.nodes[idx].values;
                    let mut da = vec![T::zero(); av.len()];
                    for ((row_in, yrow), (grow, drow)) in av
                        .chunks(c)
                        .zip(y.chunks(c))
                        .zip(g.chunks(c).zip(da.chunks_mut(c)))
                    {
                        let norm = dot(row_in, row_in).sqrt();
                        if norm > epsv {
                            let inner = dot(grow, yrow);
                            for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                                *d = (gv - yv * inner) / norm;
                            }
                        } else {
                            // Clamped branch: y = x / eps is linear.
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = gv / epsv;
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::LogSumExpRows { a } => {
                if self.needs(a) {
                    let c = self.dims(a)[1];
                    let av = self.values(a);
                    let mut da = vec![T::zero(); av.len()];
                    for ((row, drow), &gv) in av.chunks(c).zip(da.chunks_mut(c)).zip(g) {
                        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for (d, &x) in drow.iter_mut().zip(row) {
                            *d = (x - max).exp();
                            sum = sum + *d;
                        }
                        for d in drow.iter_mut() {
                            *d = *d / sum * gv;
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::DiagOf { a } => {
                if self.needs(a) {
                    let n = self.dims(a)[0];
                    let mut da = vec![T::zero(); n * n];
                    for (i, &gv) in g.iter().enumerate() {
                        da[i * n + i] = gv;
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::MeanAll { a } => {
                if self.needs(a) {
                    let n = self.values(a).len();
                    let gv = g[0] * T::from_f64(1.0 / n as f64);
                    let da = vec![gv; n];
                    self.add_grad(a, &da);
                }
            }
            Op::SumAll { a } => {
                if self.needs(a) {
                    let da = vec![g[0]; self.values(a).len()];
                    self.add_grad(a, &da);
                }
            }
            Op::Reshape { a } => {
                if self.needs(a) {
                    self.add_grad(a, g);
                }
            }
        }
    }
}
