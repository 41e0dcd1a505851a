use std::rc::Rc;

use super::kernels::{mm_nn_acc, mm_nt_acc, mm_tn_acc, softmax_slice};
use super::{numel, Result, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// How the right operand of an elementwise op maps onto the left operand.
///
/// `b` must broadcast into `a`'s shape (every padded dim of `b` equals the
/// corresponding dim of `a` or 1). Broadcast dims that form one contiguous
/// run reduce to the `outer/reps/inner` pattern, which covers every use in
/// this crate with a fast loop; anything else falls back to coordinate math.
#[derive(Debug, Clone, Copy, PartialEq)]
enum BroadcastPlan {
    Same,
    Run {
        outer: usize,
        reps: usize,
        inner: usize,
    },
}

fn broadcast_plan(a: &[usize], b: &[usize]) -> Option<BroadcastPlan> {
    if b.len() > a.len() {
        return None;
    }
    let pad = a.len() - b.len();
    let mut bcast = Vec::new();
    for (d, &ad) in a.iter().enumerate() {
        let bd = if d < pad { 1 } else { b[d - pad] };
        if bd == ad {
            continue;
        } else if bd == 1 {
            bcast.push(d);
        } else {
            return None;
        }
    }
    if bcast.is_empty() {
        return Some(BroadcastPlan::Same);
    }
    let lo = bcast[0];
    let hi = *bcast.last().unwrap();
    if hi - lo + 1 != bcast.len() {
        // Non-contiguous broadcast runs are not needed anywhere; reject so
        // the caller reshapes instead of silently hitting a slow path.
        return None;
    }
    let outer = a[..lo].iter().product();
    let reps = a[lo..=hi].iter().product();
    let inner = a[hi + 1..].iter().product();
    Some(BroadcastPlan::Run { outer, reps, inner })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Bin {
        kind: BinKind,
        a: TensorId,
        b: TensorId,
        plan: BroadcastPlan,
    },
    MinElem {
        a: TensorId,
        b: TensorId,
    },
    MaxElem {
        a: TensorId,
        b: TensorId,
    },
    Neg {
        x: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    AddScalar {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Gelu {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    InverseSigmoid {
        x: TensorId,
        eps: f64,
    },
    Sqrt {
        x: TensorId,
    },
    Abs {
        x: TensorId,
    },
    Softplus {
        x: TensorId,
    },
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Affine {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: TensorId,
        b: TensorId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    SoftmaxLastDim {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    SumAll {
        x: TensorId,
    },
    MeanAll {
        x: TensorId,
    },
    SumAxis {
        x: TensorId,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    MeanAxis {
        x: TensorId,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Reshape {
        x: TensorId,
    },
    Permute {
        x: TensorId,
        axes: Rc<Vec<usize>>,
    },
    Concat {
        parts: Rc<Vec<TensorId>>,
        axis: usize,
    },
    GatherRows {
        x: TensorId,
        indices: Rc<Vec<usize>>,
    },
    NarrowLastDim {
        x: TensorId,
        start: usize,
        len: usize,
    },
    BilinearSample {
        map: TensorId,
        points: TensorId,
    },
    Dropout {
        x: TensorId,
        mask: Rc<Vec<f64>>,
    },
    CrossEntropyMean {
        logits: TensorId,
        targets: Rc<Vec<usize>>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    needs_grad: bool,
    label: &'static str,
}

/// Ordered record of primitive applications plus the values they produced.
///
/// Gradients accumulate across repeated `backward` calls; use
/// [`Tape::zero_grads`] to reset them explicitly.
pub struct Tape {
    nodes: Vec<Node>,
    /// multiply-accumulate tally over matmul-family ops
    macs: u64,
    /// (query, key) interaction tally, reported by attention kernels
    pairs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            macs: 0,
            pairs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, label: &'static str) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            op,
            shape,
            data,
            grad: None,
            requires_grad: false,
            needs_grad,
            label,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let dep = |id: &TensorId| self.nodes[id.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Bin { a, b, .. }
            | Op::MinElem { a, b }
            | Op::MaxElem { a, b }
            | Op::MatMul { a, b, .. }
            | Op::BatchMatMul { a, b, .. } => dep(a) || dep(b),
            Op::Neg { x }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::Sigmoid { x }
            | Op::InverseSigmoid { x, .. }
            | Op::Sqrt { x }
            | Op::Abs { x }
            | Op::Softplus { x }
            | Op::SoftmaxLastDim { x }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::GatherRows { x, .. }
            | Op::NarrowLastDim { x, .. }
            | Op::Dropout { x, .. } => dep(x),
            Op::LayerNorm { x, gamma, beta, .. } => dep(x) || dep(gamma) || dep(beta),
            Op::Affine { x, w, b, .. } => dep(x) || dep(w) || dep(b),
            Op::Concat { parts, .. } => parts.iter().any(dep),
            Op::BilinearSample { map, points } => dep(map) || dep(points),
            Op::CrossEntropyMean { logits, .. } => dep(logits),
        }
    }

    // ── Construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(TensorError::Dimension(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let id = self.push(Op::Leaf, shape.to_vec(), data, "leaf");
        let node = &mut self.nodes[id.0];
        node.requires_grad = requires_grad;
        node.needs_grad = requires_grad;
        Ok(id)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(vec![v], &[1], false).unwrap()
    }

    pub fn zeros(&mut self, shape: &[usize], requires_grad: bool) -> TensorId {
        let n = numel(shape);
        self.leaf(vec![0.0; n], shape, requires_grad).unwrap()
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn op_label(&self, id: TensorId) -> &'static str {
        self.nodes[id.0].label
    }

    /// First node whose output holds a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<(TensorId, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.data.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (TensorId(i), n.label))
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn pairs(&self) -> u64 {
        self.pairs
    }

    /// Attention kernels report their (query, key) interaction counts here.
    pub fn add_pairs(&mut self, n: u64) {
        self.pairs += n;
    }

    pub fn reset_counters(&mut self) {
        self.macs = 0;
        self.pairs = 0;
    }

    // ── Elementwise ops ─────────────────────────────────────────────

    fn bin(&mut self, kind: BinKind, a: TensorId, b: TensorId, label: &'static str) -> Result<TensorId> {
        let (a_shape, b_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = broadcast_plan(&a_shape, &b_shape).ok_or_else(|| TensorError::ShapeMismatch {
            op: label,
            lhs: a_shape.clone(),
            rhs: b_shape.clone(),
        })?;
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(av.len());
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        match plan {
            BroadcastPlan::Same => out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y))),
            BroadcastPlan::Run { outer, reps, inner } => {
                for o in 0..outer {
                    let b_blk = &bv[o * inner..(o + 1) * inner];
                    for r in 0..reps {
                        let base = (o * reps + r) * inner;
                        let a_blk = &av[base..base + inner];
                        out.extend(a_blk.iter().zip(b_blk).map(|(&x, &y)| f(x, y)));
                    }
                }
            }
        }
        Ok(self.push(Op::Bin { kind, a, b, plan }, a_shape, out, label))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bin(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bin(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bin(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.bin(BinKind::Div, a, b, "div")
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn min_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("min_elem", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::MinElem { a, b }, shape, out, "min_elem"))
    }

    pub fn max_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("max_elem", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::MaxElem { a, b }, shape, out, "max_elem"))
    }

    fn unary(&mut self, x: TensorId, op: Op, f: impl Fn(f64) -> f64, label: &'static str) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, shape, out, label)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Neg { x }, |v| -v, "neg")
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, Op::Scale { x, c }, |v| v * c, "scale")
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, Op::AddScalar { x }, |v| v + c, "add_scalar")
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Relu { x }, |v| v.max(0.0), "relu")
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Gelu { x }, gelu_fwd, "gelu")
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Sigmoid { x }, |v| 1.0 / (1.0 + (-v).exp()), "sigmoid")
    }

    /// Logit function with input clamped to `[eps, 1 - eps]`.
    pub fn inverse_sigmoid(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        if eps <= 0.0 || eps >= 0.5 {
            return Err(TensorError::Parameter(format!(
                "inverse_sigmoid eps must be in (0, 0.5), got {eps}"
            )));
        }
        Ok(self.unary(
            x,
            Op::InverseSigmoid { x, eps },
            move |v| {
                let c = v.clamp(eps, 1.0 - eps);
                (c / (1.0 - c)).ln()
            },
            "inverse_sigmoid",
        ))
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Sqrt { x }, f64::sqrt, "sqrt")
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Abs { x }, f64::abs, "abs")
    }

    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        self.unary(x, Op::Softplus { x }, softplus_fwd, "softplus")
    }

    /// Inverted dropout; `p = 0` is the identity and records nothing extra.
    pub fn dropout(&mut self, x: TensorId, p: f64, rng: &mut impl rand::Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Parameter(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::Dropout {
                x,
                mask: Rc::new(mask),
            },
            shape,
            out,
            "dropout",
        ))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn_acc(&mut out, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], out, "matmul"))
    }

    /// Fused `x . w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let bias = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        mm_nn_acc(&mut out, &self.nodes[x.0].data, &self.nodes[w.0].data, m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(Op::Affine { x, w, b, m, k, n }, vec![m, n], out, "affine"))
    }

    /// Batched matmul over the leading dim: `[B,m,k] . [B,k,n]`, or
    /// `[B,m,k] . [B,n,k]^T` when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TensorError::ShapeMismatch {
            op: "batch_matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            for i in 0..batch {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    let bb = &bv[i * n * k..(i + 1) * n * k];
                    mm_nt_acc(ob, ab, bb, m, k, n);
                } else {
                    let bb = &bv[i * k * n..(i + 1) * k * n];
                    mm_nn_acc(ob, ab, bb, m, k, n);
                }
            }
        }
        self.macs += (batch * m * k * n) as u64;
        Ok(self.push(
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            vec![batch, m, n],
            out,
            "batch_matmul",
        ))
    }

    // ── Normalization / reductions ──────────────────────────────────

    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| {
            TensorError::Dimension("softmax_lastdim on a rank-0 tensor".to_string())
        })?;
        if d == 0 {
            return Err(TensorError::Dimension(
                "softmax_lastdim requires a non-empty last dim".to_string(),
            ));
        }
        let mut out = self.nodes[x.0].data.clone();
        for row in out.chunks_mut(d) {
            softmax_slice(row);
        }
        Ok(self.push(Op::SoftmaxLastDim { x }, shape, out, "softmax_lastdim"))
    }

    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(TensorError::Parameter(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| TensorError::Dimension("layer_norm on a rank-0 tensor".to_string()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = &self.nodes[x.0].data;
        let gv = &self.nodes[gamma.0].data;
        let bv = &self.nodes[beta.0].data;
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out.push((row[j] - mean) * inv * gv[j] + bv[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, shape, out, "layer_norm"))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(Op::SumAll { x }, vec![1], vec![s], "sum_all")
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len() as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(Op::MeanAll { x }, vec![1], vec![s / n], "mean_all")
    }

    fn reduce_axis(&mut self, x: TensorId, axis: usize, mean: bool) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Dimension(format!(
                "reduce axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let ax = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let xv = &self.nodes[x.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..ax {
                let base = (o * ax + a) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&xv[base..base + inner]) {
                    *d += v;
                }
            }
        }
        if mean {
            let inv = 1.0 / ax as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let op = if mean {
            Op::MeanAxis { x, outer, axis: ax, inner }
        } else {
            Op::SumAxis { x, outer, axis: ax, inner }
        };
        Ok(self.push(op, out_shape, out, if mean { "mean_axis" } else { "sum_axis" }))
    }

    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.reduce_axis(x, axis, true)
    }

    // ── Shape / data movement ───────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(TensorError::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(Op::Reshape { x }, shape.to_vec(), data, "reshape"))
    }

    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Dimension(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(&self.nodes[x.0].data, &shape, axes);
        Ok(self.push(
            Op::Permute {
                x,
                axes: Rc::new(axes.to_vec()),
            },
            out_shape,
            data,
            "permute",
        ))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Dimension("concat of zero tensors".to_string()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Dimension(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (&a, &b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; numel(&out_shape)];
        let row_out = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let ax = self.shape(p)[axis];
            let blk = ax * inner;
            let src = &self.nodes[p.0].data;
            for o in 0..outer {
                out[o * row_out + offset..o * row_out + offset + blk]
                    .copy_from_slice(&src[o * blk..(o + 1) * blk]);
            }
            offset += blk;
        }
        Ok(self.push(
            Op::Concat {
                parts: Rc::new(parts.to_vec()),
                axis,
            },
            out_shape,
            out,
            "concat",
        ))
    }

    /// Select rows (axis-0 slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: TensorId, indices: Rc<Vec<usize>>) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Dimension("gather_rows on rank-0 tensor".to_string()));
        }
        let rows = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Dimension(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let stride: usize = shape[1..].iter().product();
        let xv = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(indices.len() * stride);
        for &i in indices.iter() {
            out.extend_from_slice(&xv[i * stride..(i + 1) * stride]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        Ok(self.push(Op::GatherRows { x, indices }, out_shape, out, "gather_rows"))
    }

    /// Slice `len` channels starting at `start` along the last dim.
    pub fn narrow_lastdim(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| TensorError::Dimension("narrow on rank-0 tensor".to_string()))?;
        if start + len > d {
            return Err(TensorError::Dimension(format!(
                "narrow_lastdim [{start}, {start}+{len}) out of range for last dim {d}"
            )));
        }
        let rows = self.nodes[x.0].data.len() / d;
        let xv = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        Ok(self.push(Op::NarrowLastDim { x, start, len }, out_shape, out, "narrow_lastdim"))
    }

    /// Bilinear interpolation of `map[h, w, c]` at fractional `points[n, 2]`
    /// given as (row, col) in cell units; integer coordinates hit cells
    /// exactly and out-of-bounds contributions read as zero. Differentiable
    /// with respect to both the map values and the point coordinates.
    pub fn bilinear_sample(&mut self, map: TensorId, points: TensorId) -> Result<TensorId> {
        let ms = self.shape(map).to_vec();
        let ps = self.shape(points).to_vec();
        if ms.len() != 3 || ms[0] == 0 || ms[1] == 0 || ms[2] == 0 {
            return Err(TensorError::Dimension(format!(
                "bilinear_sample requires a non-empty [h, w, c] map, got {ms:?}"
            )));
        }
        if ps.len() != 2 || ps[1] != 2 {
            return Err(TensorError::Dimension(format!(
                "bilinear_sample points must be [n, 2], got {ps:?}"
            )));
        }
        let (h, w, c) = (ms[0], ms[1], ms[2]);
        let n = ps[0];
        let mv = &self.nodes[map.0].data;
        let pv = &self.nodes[points.0].data;
        let mut out = vec![0.0; n * c];
        for q in 0..n {
            let row = pv[q * 2];
            let col = pv[q * 2 + 1];
            let r0 = row.floor();
            let c0 = col.floor();
            let fr = row - r0;
            let fc = col - c0;
            let r0 = r0 as i64;
            let c0 = c0 as i64;
            let dst = &mut out[q * c..(q + 1) * c];
            for (dr, dc, wgt) in [
                (0, 0, (1.0 - fr) * (1.0 - fc)),
                (0, 1, (1.0 - fr) * fc),
                (1, 0, fr * (1.0 - fc)),
                (1, 1, fr * fc),
            ] {
                let (rr, cc) = (r0 + dr, c0 + dc);
                if wgt == 0.0 || rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                let src = &mv[((rr as usize) * w + cc as usize) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
        self.macs += (4 * n * c) as u64;
        Ok(self.push(Op::BilinearSample { map, points }, vec![n, c], out, "bilinear_sample"))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: Rc<Vec<usize>>) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "cross_entropy_mean expects [n, classes], got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        if targets.len() != n {
            return Err(TensorError::Contract(format!(
                "cross_entropy_mean got {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Contract(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        let xv = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for (row, &t) in xv.chunks(c).zip(targets.iter()) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        let out = vec![total / n as f64];
        Ok(self.push(
            Op::CrossEntropyMean { logits, targets },
            vec![1],
            out,
            "cross_entropy_mean",
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulates gradients of `loss` into every reachable node; leaves
    /// marked `requires_grad` always end up with a populated (possibly
    /// all-zero) gradient buffer. Repeated calls accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("backward on a foreign tensor id".to_string()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        // Only leaf gradients persist across calls; intermediates restart so
        // a repeated backward accumulates exactly one extra pass.
        for node in &mut self.nodes {
            if !node.requires_grad {
                node.grad = None;
            }
        }
        self.grad_buf(loss.0)[0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }
        // Unreached requires_grad leaves still get a zero gradient buffer.
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn grad_buf(&mut self, id: usize) -> &mut Vec<f64> {
        // Sized from the shape: input data buffers may be temporarily taken
        // during backprop (aliased inputs like mul(x, x) still work).
        let n = numel(&self.nodes[id].shape);
        self.nodes[id].grad.get_or_insert_with(|| vec![0.0; n])
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&mut self, out: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Bin { kind, a, b, plan } => self.backprop_bin(out, *kind, *a, *b, *plan, g),
            Op::MinElem { a, b } | Op::MaxElem { a, b } => {
                let is_min = matches!(op, Op::MinElem { .. });
                let av = std::mem::take(&mut self.nodes[a.0].data);
                let bv = if a.0 == b.0 {
                    Vec::new()
                } else {
                    std::mem::take(&mut self.nodes[b.0].data)
                };
                let b_src: &[f64] = if a.0 == b.0 { &av } else { &bv };
                if self.wants(*a) {
                    let ga = self.grad_buf(a.0);
                    for (j, (gv, &gg)) in ga.iter_mut().zip(g).enumerate() {
                        let t = if is_min { av[j] <= b_src[j] } else { av[j] >= b_src[j] };
                        if t {
                            *gv += gg;
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = self.grad_buf(b.0);
                    for (j, (gv, &gg)) in gb.iter_mut().zip(g).enumerate() {
                        let t = if is_min { av[j] <= b_src[j] } else { av[j] >= b_src[j] };
                        if !t {
                            *gv += gg;
                        }
                    }
                }
                if a.0 != b.0 {
                    self.nodes[b.0].data = bv;
                }
                self.nodes[a.0].data = av;
            }
            Op::Neg { x } => {
                if self.wants(*x) {
                    let gx = self.grad_buf(x.0);
                    for (gv, &gg) in gx.iter_mut().zip(g) {
                        *gv -= gg;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    let c = *c;
                    let gx = self.grad_buf(x.0);
                    for (gv, &gg) in gx.iter_mut().zip(g) {
                        *gv += c * gg;
                    }
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if self.wants(*x) {
                    let gx = self.grad_buf(x.0);
                    for (gv, &gg) in gx.iter_mut().zip(g) {
                        *gv += gg;
                    }
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xd = std::mem::take(&mut self.nodes[x.0].data);
                    let gx = self.grad_buf(x.0);
                    for ((gv, &xv), &gg) in gx.iter_mut().zip(&xd).zip(g) {
                        if xv > 0.0 {
                            *gv += gg;
                        }
                    }
                    self.nodes[x.0].data = xd;
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xd = std::mem::take(&mut self.nodes[x.0].data);
                    let gx = self.grad_buf(x.0);
                    for ((gv, &xv), &gg) in gx.iter_mut().zip(&xd).zip(g) {
                        *gv += gelu_bwd(xv) * gg;
                    }
                    self.nodes[x.0].data = xd;
                }
            }
            Op::Sigmoid { x } => {
                if self.wants(*x) {
                    let sd = std::mem::take(&mut self.nodes[out].data);
                    let gx = self.grad_buf(x.0);
                    for ((gv, &s), &gg) in gx.iter_mut().zip(&sd).zip(g) {
                        *gv += s * (1.0 - s) * gg;
                    }
                    self.nodes[out].data = sd;
                }
            }
            Op::InverseSigmoid { x, eps } => {
                if self.wants(*x) {
                    let eps = *eps;
                    let xd = std::mem::take(&mut self.nodes[x.0].data);
                    let gx = self.grad_buf(x.0);
                    for ((gv, &v), &gg) in gx.iter_mut().zip(&xd).zip(g) {
                        if v > eps && v < 1.0 - eps {
                            *gv += gg / (v * (1.0 - v));
                        }
                    }
                    self.nodes[x.0].data = xd;
                }
            }
            Op::Sqrt { x } => {
                if self.wants(*x) {
                    let yd = std::mem::take(&mut self.nodes[out].data);
                    let gx = self.grad_buf(x.0);
                    for ((gv, &y), &gg) in gx.iter_mut().zip(&yd).zip(g) {
                        *gv += 0.5 / y.max(1e-12) * gg;
                    }
                    self.nodes[out].data = yd;
                }
            }
            Op::Abs { x } => {
                if self.wants(*x) {
                    let xd = std::mem::take(&mut self.nodes[x.0].data);
                    let gx = self.grad_buf(x.0);
                    for ((gv, &v), &gg) in gx.iter_mut().zip(&xd).zip(g) {
                        if v > 0.0 {
                            *gv += gg;
                        } else if v < 0.0 {
                            *gv -= gg;
                        }
                    }
                    self.nodes[x.0].data = xd;
                }
            }
            Op::Softplus { x } => {
                if self.wants(*x) {
                    let xd = std::mem::take(&mut self.nodes[x.0].data);
                    let gx = self.grad_buf(x.0);
                    for ((gv, &v), &gg) in gx.iter_mut().zip(&xd).zip(g) {
                        *gv += gg / (1.0 + (-v).exp());
                    }
                    self.nodes[x.0].data = xd;
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    let mask = Rc::clone(mask);
                    let gx = self.grad_buf(x.0);
                    for ((gv, &m), &gg) in gx.iter_mut().zip(mask.iter()).zip(g) {
                        *gv += m * gg;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].data);
                    let ga = self.grad_buf(a.0);
                    mm_nt_acc(ga, g, &bv, m, n, k);
                    self.nodes[b.0].data = bv;
                }
                if self.wants(*b) {
                    let av = std::mem::take(&mut self.nodes[a.0].data);
                    let gb = self.grad_buf(b.0);
                    mm_tn_acc(gb, &av, g, m, k, n);
                    self.nodes[a.0].data = av;
                }
            }
            Op::Affine { x, w, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*x) {
                    let wv = std::mem::take(&mut self.nodes[w.0].data);
                    let gx = self.grad_buf(x.0);
                    mm_nt_acc(gx, g, &wv, m, n, k);
                    self.nodes[w.0].data = wv;
                }
                if self.wants(*w) {
                    let xv = std::mem::take(&mut self.nodes[x.0].data);
                    let gw = self.grad_buf(w.0);
                    mm_tn_acc(gw, &xv, g, m, k, n);
                    self.nodes[x.0].data = xv;
                }
                if self.wants(*b) {
                    let gb = self.grad_buf(b.0);
                    for row in g.chunks(n) {
                        for (dst, &src) in gb.iter_mut().zip(row) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n, tb) = (*batch, *m, *k, *n, *trans_b);
                if self.wants(*a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].data);
                    let ga = self.grad_buf(a.0);
                    for i in 0..batch {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let gab = &mut ga[i * m * k..(i + 1) * m * k];
                        if tb {
                            // out = a . b^T  =>  da = g . b
                            mm_nn_acc(gab, gb, &bv[i * n * k..(i + 1) * n * k], m, n, k);
                        } else {
                            mm_nt_acc(gab, gb, &bv[i * k * n..(i + 1) * k * n], m, n, k);
                        }
                    }
                    self.nodes[b.0].data = bv;
                }
                if self.wants(*b) {
                    let av = std::mem::take(&mut self.nodes[a.0].data);
                    let gbv = self.grad_buf(b.0);
                    for i in 0..batch {
                        let gb = &g[i * m * n..(i + 1) * m * n];
                        let ab = &av[i * m * k..(i + 1) * m * k];
                        if tb {
                            // out = a . b^T  =>  db = g^T . a
                            let dst = &mut gbv[i * n * k..(i + 1) * n * k];
                            mm_tn_acc(dst, gb, ab, m, n, k);
                        } else {
                            let dst = &mut gbv[i * k * n..(i + 1) * k * n];
                            mm_tn_acc(dst, ab, gb, m, k, n);
                        }
                    }
                    self.nodes[a.0].data = av;
                }
            }
            Op::SoftmaxLastDim { x } => {
                if self.wants(*x) {
                    let d = *self.nodes[out].shape.last().unwrap();
                    let sv = std::mem::take(&mut self.nodes[out].data);
                    {
                        let gx = self.grad_buf(x.0);
                        for (row, (s_row, g_row)) in sv.chunks(d).zip(g.chunks(d)).enumerate() {
                            let dot: f64 = s_row.iter().zip(g_row).map(|(&s, &gg)| s * gg).sum();
                            let dst = &mut gx[row * d..(row + 1) * d];
                            for ((gv, &s), &gg) in dst.iter_mut().zip(s_row).zip(g_row) {
                                *gv += s * (gg - dot);
                            }
                        }
                    }
                    self.nodes[out].data = sv;
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.backprop_layer_norm(*x, *gamma, *beta, *eps, g);
            }
            Op::SumAll { x } => {
                if self.wants(*x) {
                    let gg = g[0];
                    let gx = self.grad_buf(x.0);
                    for gv in gx.iter_mut() {
                        *gv += gg;
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.wants(*x) {
                    let n = self.nodes[x.0].data.len() as f64;
                    let gg = g[0] / n;
                    let gx = self.grad_buf(x.0);
                    for gv in gx.iter_mut() {
                        *gv += gg;
                    }
                }
            }
            Op::SumAxis { x, outer, axis, inner } | Op::MeanAxis { x, outer, axis, inner } => {
                if self.wants(*x) {
                    let scale = if matches!(op, Op::MeanAxis { .. }) {
                        1.0 / *axis as f64
                    } else {
                        1.0
                    };
                    let (outer, axis, inner) = (*outer, *axis, *inner);
                    let gx = self.grad_buf(x.0);
                    for o in 0..outer {
                        let gsrc = &g[o * inner..(o + 1) * inner];
                        for a in 0..axis {
                            let base = (o * axis + a) * inner;
                            for (gv, &gg) in gx[base..base + inner].iter_mut().zip(gsrc) {
                                *gv += gg * scale;
                            }
                        }
                    }
                }
            }
            Op::Permute { x, axes } => {
                if self.wants(*x) {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let out_shape = self.nodes[out].shape.clone();
                    let back = permute_data(g, &out_shape, &inv);
                    let gx = self.grad_buf(x.0);
                    for (gv, &gg) in gx.iter_mut().zip(&back) {
                        *gv += gg;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[out].shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row_out = out_shape[axis] * inner;
                let mut offset = 0;
                for &p in parts.iter() {
                    let blk = self.nodes[p.0].shape[axis] * inner;
                    if self.wants(p) {
                        let start = offset;
                        let gp = self.grad_buf(p.0);
                        for o in 0..outer {
                            let src = &g[o * row_out + start..o * row_out + start + blk];
                            for (gv, &gg) in gp[o * blk..(o + 1) * blk].iter_mut().zip(src) {
                                *gv += gg;
                            }
                        }
                    }
                    offset += blk;
                }
            }
            Op::GatherRows { x, indices } => {
                if self.wants(*x) {
                    let stride: usize = self.nodes[x.0].shape[1..].iter().product();
                    let indices = Rc::clone(indices);
                    let gx = self.grad_buf(x.0);
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g[r * stride..(r + 1) * stride];
                        for (gv, &gg) in gx[i * stride..(i + 1) * stride].iter_mut().zip(src) {
                            *gv += gg;
                        }
                    }
                }
            }
            Op::NarrowLastDim { x, start, len } => {
                if self.wants(*x) {
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let (start, len) = (*start, *len);
                    let rows = self.nodes[x.0].data.len() / d;
                    let gx = self.grad_buf(x.0);
                    for r in 0..rows {
                        let src = &g[r * len..(r + 1) * len];
                        for (gv, &gg) in gx[r * d + start..r * d + start + len].iter_mut().zip(src) {
                            *gv += gg;
                        }
                    }
                }
            }
            Op::BilinearSample { map, points } => {
                self.backprop_bilinear(*map, *points, g);
            }
            Op::CrossEntropyMean { logits, targets } => {
                if self.wants(*logits) {
                    let (n, c) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                    let xv = std::mem::take(&mut self.nodes[logits.0].data);
                    let targets = Rc::clone(targets);
                    {
                        let gx = self.grad_buf(logits.0);
                        let scale = g[0] / n as f64;
                        for (r, (row, &t)) in xv.chunks(c).zip(targets.iter()).enumerate() {
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                            let sum: f64 = exps.iter().sum();
                            let dst = &mut gx[r * c..(r + 1) * c];
                            for (j, (gv, e)) in dst.iter_mut().zip(&exps).enumerate() {
                                let soft = e / sum;
                                *gv += scale * (soft - if j == t { 1.0 } else { 0.0 });
                            }
                        }
                    }
                    self.nodes[logits.0].data = xv;
                }
            }
        }
    }

    fn backprop_bin(&mut self, out: usize, kind: BinKind, a: TensorId, b: TensorId, plan: BroadcastPlan, g: &[f64]) {
        // Effective per-element chain factors:
        //   add: da = g,        db = g (reduced)
        //   sub: da = g,        db = -g (reduced)
        //   mul: da = g*b,      db = g*a (reduced)
        //   div: da = g/b,      db = -g*out/b (reduced)
        let (outer, reps, inner) = match plan {
            BroadcastPlan::Same => (1, 1, self.nodes[out].data.len()),
            BroadcastPlan::Run { outer, reps, inner } => (outer, reps, inner),
        };
        if self.wants(a) {
            match kind {
                BinKind::Add | BinKind::Sub => {
                    let ga = self.grad_buf(a.0);
                    for (gv, &gg) in ga.iter_mut().zip(g) {
                        *gv += gg;
                    }
                }
                BinKind::Mul | BinKind::Div => {
                    let bv = std::mem::take(&mut self.nodes[b.0].data);
                    {
                        let ga = self.grad_buf(a.0);
                        for o in 0..outer {
                            let b_blk = &bv[o * inner..(o + 1) * inner];
                            for r in 0..reps {
                                let base = (o * reps + r) * inner;
                                for j in 0..inner {
                                    let gg = g[base + j];
                                    ga[base + j] += match kind {
                                        BinKind::Mul => gg * b_blk[j],
                                        _ => gg / b_blk[j],
                                    };
                                }
                            }
                        }
                    }
                    self.nodes[b.0].data = bv;
                }
            }
        }
        if self.wants(b) {
            let same_ab = a.0 == b.0;
            let av = std::mem::take(&mut self.nodes[a.0].data);
            let ov = std::mem::take(&mut self.nodes[out].data);
            let bv = if same_ab {
                Vec::new()
            } else {
                std::mem::take(&mut self.nodes[b.0].data)
            };
            let b_src: &[f64] = if same_ab { &av } else { &bv };
            {
                let gb = self.grad_buf(b.0);
                for o in 0..outer {
                    let gb_blk = &mut gb[o * inner..(o + 1) * inner];
                    let b_blk = &b_src[o * inner..(o + 1) * inner];
                    for r in 0..reps {
                        let base = (o * reps + r) * inner;
                        for j in 0..inner {
                            let gg = g[base + j];
                            gb_blk[j] += match kind {
                                BinKind::Add => gg,
                                BinKind::Sub => -gg,
                                BinKind::Mul => gg * av[base + j],
                                BinKind::Div => -gg * ov[base + j] / b_blk[j],
                            };
                        }
                    }
                }
            }
            if !same_ab {
                self.nodes[b.0].data = bv;
            }
            self.nodes[a.0].data = av;
            self.nodes[out].data = ov;
        }
    }

    fn backprop_layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64, g: &[f64]) {
        let d = *self.nodes[x.0].shape.last().unwrap();
        let xv = std::mem::take(&mut self.nodes[x.0].data);
        let gv = std::mem::take(&mut self.nodes[gamma.0].data);
        let rows = xv.len() / d;
        let want_x = self.wants(x);
        let want_g = self.wants(gamma);
        let want_b = self.wants(beta);
        let mut dx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dgamma = if want_g { vec![0.0; d] } else { Vec::new() };
        let mut dbeta = if want_b { vec![0.0; d] } else { Vec::new() };
        let df = d as f64;
        for r in 0..rows {
            let xr = &xv[r * d..(r + 1) * d];
            let gr = &g[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / df;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
            let inv = 1.0 / (var + eps).sqrt();
            if want_g || want_b {
                for j in 0..d {
                    let xhat = (xr[j] - mean) * inv;
                    if want_g {
                        dgamma[j] += gr[j] * xhat;
                    }
                    if want_b {
                        dbeta[j] += gr[j];
                    }
                }
            }
            if want_x {
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..d {
                    let xhat = (xr[j] - mean) * inv;
                    let dxhat = gr[j] * gv[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for j in 0..d {
                    let xhat = (xr[j] - mean) * inv;
                    let dxhat = gr[j] * gv[j];
                    dx[r * d + j] += inv / df * (df * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
        self.nodes[x.0].data = xv;
        self.nodes[gamma.0].data = gv;
        if want_x {
            let gx = self.grad_buf(x.0);
            for (a, b) in gx.iter_mut().zip(&dx) {
                *a += b;
            }
        }
        if want_g {
            let gg = self.grad_buf(gamma.0);
            for (a, b) in gg.iter_mut().zip(&dgamma) {
                *a += b;
            }
        }
        if want_b {
            let gb = self.grad_buf(beta.0);
            for (a, b) in gb.iter_mut().zip(&dbeta) {
                *a += b;
            }
        }
    }

    fn backprop_bilinear(&mut self, map: TensorId, points: TensorId, g: &[f64]) {
        let ms = self.nodes[map.0].shape.clone();
        let (h, w, c) = (ms[0], ms[1], ms[2]);
        let n = self.nodes[points.0].shape[0];
        let mv = std::mem::take(&mut self.nodes[map.0].data);
        let pv = std::mem::take(&mut self.nodes[points.0].data);
        let want_map = self.wants(map);
        let want_pts = self.wants(points);
        let mut dmap = if want_map { vec![0.0; mv.len()] } else { Vec::new() };
        let mut dpts = if want_pts { vec![0.0; n * 2] } else { Vec::new() };
        for q in 0..n {
            let row = pv[q * 2];
            let col = pv[q * 2 + 1];
            let r0f = row.floor();
            let c0f = col.floor();
            let fr = row - r0f;
            let fc = col - c0f;
            let r0 = r0f as i64;
            let c0 = c0f as i64;
            let gq = &g[q * c..(q + 1) * c];
            let cell = |rr: i64, cc: i64| -> Option<usize> {
                (rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64)
                    .then(|| ((rr as usize) * w + cc as usize) * c)
            };
            let corners = [
                (r0, c0, (1.0 - fr) * (1.0 - fc), -(1.0 - fc), -(1.0 - fr)),
                (r0, c0 + 1, (1.0 - fr) * fc, -fc, 1.0 - fr),
                (r0 + 1, c0, fr * (1.0 - fc), 1.0 - fc, -fr),
                (r0 + 1, c0 + 1, fr * fc, fc, fr),
            ];
            for (rr, cc, wgt, dw_drow, dw_dcol) in corners {
                let Some(base) = cell(rr, cc) else { continue };
                let src = &mv[base..base + c];
                if want_map && wgt != 0.0 {
                    for (dv, &gg) in dmap[base..base + c].iter_mut().zip(gq) {
                        *dv += wgt * gg;
                    }
                }
                if want_pts {
                    let mut dot = 0.0;
                    for (&s, &gg) in src.iter().zip(gq) {
                        dot += s * gg;
                    }
                    dpts[q * 2] += dw_drow * dot;
                    dpts[q * 2 + 1] += dw_dcol * dot;
                }
            }
        }
        self.nodes[map.0].data = mv;
        self.nodes[points.0].data = pv;
        if want_map {
            let gm = self.grad_buf(map.0);
            for (a, b) in gm.iter_mut().zip(&dmap) {
                *a += b;
            }
        }
        if want_pts {
            let gp = self.grad_buf(points.0);
            for (a, b) in gp.iter_mut().zip(&dpts) {
                *a += b;
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus_fwd(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut idx = 0;
        for d in 0..rank {
            idx += coords[d] * in_strides[axes[d]];
        }
        *slot = data[idx];
    }
    out
}
