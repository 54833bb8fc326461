//! A small f64 reverse-mode tape, just wide enough for this model.
//!
//! Training gradients come from here; the f32 engine never differentiates
//! anything. Ops are recorded eagerly with their values; `backward` walks
//! the arena in reverse creation order (which is already topological).
//! Everything is f64 so central-difference checks can resolve gradients to
//! many digits instead of drowning in f32 rounding.
//!
//! The op set mirrors the engine's forward exactly — same rmsnorm epsilon,
//! same rotary pair layout and angle formula, same per-kind row routing —
//! so a masked full-sequence pass over this tape reproduces the chunked
//! engine to f32 accuracy.

use crate::kernel::Matrix;

pub(crate) const ROPE_BASE: f64 = 10_000.0;
pub(crate) const RMSNORM_EPS: f64 = 1e-6;

/// Plain row-major f64 matrix; the tape's value type.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Md {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Md {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_f32(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    pub fn from_f32_row(row: &[f32]) -> Self {
        Self { rows: 1, cols: row.len(), data: row.iter().map(|&v| f64::from(v)).collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }

    fn matmul(&self, other: &Md) -> Md {
        assert_eq!(self.cols, other.rows);
        let mut out = Md::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = out.row_mut(i);
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    fn transpose(&self) -> Md {
        let mut out = Md::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Md) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) type NodeId = usize;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    RmsNorm { x: NodeId, gain: NodeId, rms: Vec<f64> },
    Rope { x: NodeId, positions: Vec<usize> },
    MaskedSoftmax { x: NodeId, allow: Vec<bool> },
    GatherRows { x: NodeId, idx: Vec<usize> },
    SelectRows { a: NodeId, b: NodeId, take_b: Vec<bool> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    CrossEntropy { logits: NodeId, targets: Vec<(usize, usize)> },
}

struct Node {
    value: Md,
    op: Op,
}

/// The arena. Creation order is evaluation order is topological order.
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Md {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Md, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Md) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.as_mut_slice() {
            *v *= c;
        }
        self.push(value, Op::Scale(x, c))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.as_mut_slice() {
            *v = *v / (1.0 + (-*v).exp());
        }
        self.push(value, Op::Silu(x))
    }

    /// Row-wise RMS normalization with a learned per-column gain, matching
    /// the engine's epsilon placement: y = x * gain / sqrt(mean(x²) + eps).
    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId) -> NodeId {
        let xv = self.value(x);
        let gv = self.value(gain);
        debug_assert_eq!(gv.rows(), 1);
        debug_assert_eq!(gv.cols(), xv.cols());
        let mut value = Md::zeros(xv.rows(), xv.cols());
        let mut rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let rm = (ms + RMSNORM_EPS).sqrt();
            rms.push(rm);
            for (c, (o, &v)) in value.row_mut(r).iter_mut().zip(row).enumerate() {
                *o = v / rm * gv.get(0, c);
            }
        }
        self.push(value, Op::RmsNorm { x, gain, rms })
    }

    /// Rotary embedding, same pair layout as the engine: column j pairs
    /// with j + cols/2, angle = pos * base^(-2j/cols).
    pub fn rope(&mut self, x: NodeId, positions: &[usize]) -> NodeId {
        let xv = self.value(x);
        debug_assert_eq!(positions.len(), xv.rows());
        debug_assert_eq!(xv.cols() % 2, 0);
        let half = xv.cols() / 2;
        let mut value = Md::zeros(xv.rows(), xv.cols());
        for (r, &position) in positions.iter().enumerate() {
            let pos = position as f64;
            let row = xv.row(r);
            let orow = value.row_mut(r);
            for j in 0..half {
                let theta = pos * ROPE_BASE.powf(-2.0 * j as f64 / (2 * half) as f64);
                let (sin, cos) = theta.sin_cos();
                let (x1, x2) = (row[j], row[j + half]);
                orow[j] = x1 * cos + x2 * sin;
                orow[j + half] = -x1 * sin + x2 * cos;
            }
        }
        self.push(value, Op::Rope { x, positions: positions.to_vec() })
    }

    /// Row softmax under a boolean visibility mask (true = may attend).
    /// Disallowed entries come out exactly zero. Every row must allow at
    /// least one entry.
    pub fn masked_softmax(&mut self, x: NodeId, allow: Vec<bool>) -> NodeId {
        let xv = self.value(x);
        debug_assert_eq!(allow.len(), xv.rows() * xv.cols());
        let mut value = Md::zeros(xv.rows(), xv.cols());
        let cols = xv.cols();
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let arow = &allow[r * cols..(r + 1) * cols];
            debug_assert!(arow.iter().any(|&a| a), "fully masked attention row");
            let max = row
                .iter()
                .zip(arow)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let orow = value.row_mut(r);
            for c in 0..cols {
                if arow[c] {
                    let e = (row[c] - max).exp();
                    orow[c] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.push(value, Op::MaskedSoftmax { x, allow })
    }

    /// out[r] = x[idx[r]]. Indices may repeat; gradients accumulate.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        let mut value = Md::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Per-row choice between two same-shape inputs: row r comes from `b`
    /// where take_b[r], else from `a`. This is the kind-routing primitive.
    pub fn select_rows(&mut self, a: NodeId, b: NodeId, take_b: Vec<bool>) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        debug_assert_eq!((av.rows(), av.cols()), (bv.rows(), bv.cols()));
        debug_assert_eq!(take_b.len(), av.rows());
        let mut value = Md::zeros(av.rows(), av.cols());
        for (r, &tb) in take_b.iter().enumerate() {
            let src = if tb { bv.row(r) } else { av.row(r) };
            value.row_mut(r).copy_from_slice(src);
        }
        self.push(value, Op::SelectRows { a, b, take_b })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let mut value = Md::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Md::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let pv = self.value(p);
                value.row_mut(r)[at..at + pv.cols()].copy_from_slice(pv.row(r));
                at += pv.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean negative log-likelihood over (row, class) targets, fused with
    /// the softmax for stability. Returns a 1×1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> NodeId {
        debug_assert!(!targets.is_empty());
        let lv = self.value(logits);
        let mut total = 0.0;
        for &(r, class) in targets {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[class];
        }
        let value = Md::from_vec(1, 1, vec![total / targets.len() as f64]);
        self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec() })
    }

    /// Gradients of scalar node `loss` with respect to every node, by one
    /// reverse sweep. Returns one matrix per node, shaped like its value.
    pub fn backward(&self, loss: NodeId) -> Vec<Md> {
        assert_eq!((self.value(loss).rows(), self.value(loss).cols()), (1, 1));
        let mut grads: Vec<Md> = self
            .nodes
            .iter()
            .map(|n| Md::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[loss].set(0, 0, 1.0);
        for id in (0..=loss).rev() {
            // Split off this node's grad so inputs can be borrowed mutably.
            let g = std::mem::replace(&mut grads[id], Md::zeros(0, 0));
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose());
                    let db = self.value(*a).transpose().matmul(&g);
                    grads[*a].add_assign(&da);
                    grads[*b].add_assign(&db);
                }
                Op::Transpose(x) => grads[*x].add_assign(&g.transpose()),
                Op::Add(a, b) => {
                    grads[*a].add_assign(&g);
                    grads[*b].add_assign(&g);
                }
                Op::Scale(x, c) => {
                    let mut dx = g.clone();
                    for v in dx.as_mut_slice() {
                        *v *= c;
                    }
                    grads[*x].add_assign(&dx);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    for (d, &v) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        let s = 1.0 / (1.0 + (-v).exp());
                        *d *= s * (1.0 + v * (1.0 - s));
                    }
                    grads[*x].add_assign(&dx);
                }
                Op::RmsNorm { x, gain, rms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let h = xv.cols() as f64;
                    let mut dx = Md::zeros(xv.rows(), xv.cols());
                    let mut dg = Md::zeros(1, xv.cols());
                    for (r, &rm) in rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        // dot = Σ_k dy_k · g_k · x_k
                        let dot: f64 = (0..xr.len()).map(|k| gr[k] * gv.get(0, k) * xr[k]).sum();
                        for c in 0..xr.len() {
                            dx.row_mut(r)[c] =
                                gr[c] * gv.get(0, c) / rm - xr[c] * dot / (h * rm * rm * rm);
                            dg.row_mut(0)[c] += gr[c] * xr[c] / rm;
                        }
                    }
                    grads[*x].add_assign(&dx);
                    grads[*gain].add_assign(&dg);
                }
                Op::Rope { x, positions } => {
                    // Rotations are orthogonal: the adjoint is the inverse
                    // rotation applied to the upstream gradient.
                    let half = g.cols() / 2;
                    let mut dx = Md::zeros(g.rows(), g.cols());
                    for (r, &position) in positions.iter().enumerate() {
                        let pos = position as f64;
                        let grow = g.row(r);
                        let orow = dx.row_mut(r);
                        for j in 0..half {
                            let theta = pos * ROPE_BASE.powf(-2.0 * j as f64 / (2 * half) as f64);
                            let (sin, cos) = theta.sin_cos();
                            let (g1, g2) = (grow[j], grow[j + half]);
                            orow[j] = g1 * cos - g2 * sin;
                            orow[j + half] = g1 * sin + g2 * cos;
                        }
                    }
                    grads[*x].add_assign(&dx);
                }
                Op::MaskedSoftmax { x, allow } => {
                    let probs = self.value(id);
                    let cols = probs.cols();
                    let mut dx = Md::zeros(probs.rows(), cols);
                    for r in 0..probs.rows() {
                        let p = probs.row(r);
                        let gr = g.row(r);
                        let arow = &allow[r * cols..(r + 1) * cols];
                        let dot: f64 = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        // Masked entries hold probability exactly zero, so
                        // their slots stay exactly zero here too.
                        for (c, &a) in arow.iter().enumerate() {
                            if a {
                                dx.row_mut(r)[c] = p[c] * (gr[c] - dot);
                            }
                        }
                    }
                    grads[*x].add_assign(&dx);
                }
                Op::GatherRows { x, idx } => {
                    let mut dx = Md::zeros(grads[*x].rows(), grads[*x].cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &s) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    grads[*x].add_assign(&dx);
                }
                Op::SelectRows { a, b, take_b } => {
                    let mut da = Md::zeros(g.rows(), g.cols());
                    let mut db = Md::zeros(g.rows(), g.cols());
                    for (r, &tb) in take_b.iter().enumerate() {
                        let dst = if tb { db.row_mut(r) } else { da.row_mut(r) };
                        dst.copy_from_slice(g.row(r));
                    }
                    grads[*a].add_assign(&da);
                    grads[*b].add_assign(&db);
                }
                Op::SliceCols { x, start, len } => {
                    let mut dx = Md::zeros(grads[*x].rows(), grads[*x].cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                    }
                    grads[*x].add_assign(&dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = grads[p].cols();
                        let mut dp = Md::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                        }
                        grads[p].add_assign(&dp);
                        at += cols;
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let upstream = g.get(0, 0) / targets.len() as f64;
                    let lv = self.value(*logits);
                    let mut dl = Md::zeros(lv.rows(), lv.cols());
                    for &(r, class) in targets {
                        let row = lv.row(r);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for (c, &v) in row.iter().enumerate() {
                            let p = (v - max).exp() / sum;
                            let onehot = if c == class { 1.0 } else { 0.0 };
                            dl.row_mut(r)[c] += (p - onehot) * upstream;
                        }
                    }
                    grads[*logits].add_assign(&dl);
                }
            }
            grads[id] = g;
        }
        grads
    }
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Rng;

    /// Central-difference oracle: perturbs each entry of each leaf and
    /// compares to the tape's analytic gradient. The build closure creates
    /// its leaves from the values it is handed (via [`rebuild_leaves`]), so
    /// leaf node ids are always 0..k.
    fn check_against_fd(build: impl Fn(&mut Tape, &[Md]) -> NodeId, leaves: &[Md], tol: f64) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, leaves);
        let grads = tape.backward(loss);
        let eps = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.as_slice().len() {
                let eval = |delta: f64| {
                    let mut perturbed = leaves.to_vec();
                    perturbed[li].as_mut_slice()[e] += delta;
                    let mut t = Tape::new();
                    let loss = build(&mut t, &perturbed);
                    t.value(loss).scalar()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let analytic = grads[li].as_slice()[e];
                let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    err < tol,
                    "leaf {li} entry {e}: analytic {analytic} vs fd {fd} (err {err})"
                );
            }
        }
    }

    fn rebuild_leaves(tape: &mut Tape, vals: &[Md]) -> Vec<NodeId> {
        vals.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    fn rand_md(rng: &mut Rng, rows: usize, cols: usize) -> Md {
        Md::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let leaves = vec![rand_md(&mut rng, 3, 4), rand_md(&mut rng, 4, 5)];
        check_against_fd(
            |t, vals| {
                let ids = rebuild_leaves(t, vals);
                let c = t.matmul(ids[0], ids[1]);
                t.cross_entropy(c, &[(0, 1), (2, 4)])
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn add_scale_transpose_match_finite_differences() {
        let mut rng = Rng::new(2);
        let leaves = vec![rand_md(&mut rng, 3, 3), rand_md(&mut rng, 3, 3)];
        check_against_fd(
            |t, vals| {
                let ids = rebuild_leaves(t, vals);
                let s = t.scale(ids[0], 1.7);
                let tr = t.transpose(ids[1]);
                let sum = t.add(s, tr);
                t.cross_entropy(sum, &[(0, 0), (1, 2)])
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn silu_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let leaves = vec![rand_md(&mut rng, 2, 6)];
        check_against_fd(
            |t, vals| {
                let ids = rebuild_leaves(t, vals);
                let y = t.silu(ids[0]);
                t.cross_entropy(y, &[(0, 3), (1, 0)])
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn rmsnorm_matches_finite_differences_for_input_and_gain() {
        let mut rng = Rng::new(4);
        let leaves = vec![rand_md(&mut rng, 3, 8), rand_md(&mut rng, 1, 8)];
        check_against_fd(
            |t, vals| {
                let ids = rebuild_leaves(t, vals);
                let y = t.rmsnorm(ids[0], ids[1]);
                t.cross_entropy(y, &[(0, 1), (1, 5), (2, 7)])
            },
            &leaves,
            1e-5,
        );
    }

    #[test]
    fn rope_matches_finite_differences_and_engine_values() {
        let mut rng = Rng::new(5);
        let leaves = vec![rand_md(&mut rng, 3, 8)];
        check_against_fd(
            |t, vals| {
                let ids = rebuild_leaves(t, vals);
                let y = t.rope(ids[0], &[0, 7, 100]);
                t.cross_entropy(y, &[(0, 2), (2, 6)])
            },
            &leaves,
            1e-6,
        );

        // Same rotation the f32 kernel applies, to f32 accuracy.
        let m32 = {
            let mut m = Matrix::zeros(2, 8);
            let mut rng = Rng::new(6);
            for v in m.as_mut_slice() {
                *v = rng.normal() as f32;
            }
            m
        };
        let pos = [3usize, 11];
        let kernel_out = crate::kernel::rope_apply(&m32, &pos).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Md::from_f32(&m32));
        let y = tape.rope(x, &pos);
        for r in 0..2 {
            for c in 0..8 {
                let diff = (tape.value(y).get(r, c) - f64::from(kernel_out.get(r, c))).abs();
                assert!(diff < 1e-6, "tape rope diverges from kernel at ({r},{c})");
            }
        }
    }

    #[test]
    fn masked_softmax_matches_finite_differences_and_zeroes_masked() {
        let mut rng = Rng::new(7);
        let leaves = vec![rand_md(&mut rng, 2, 5)];
        let allow = vec![true, false, true, true, false, true, true, true, false, true];
        let allow2 = allow.clone();
        check_against_fd(
            move |t, vals| {
                let ids = rebuild_leaves(t, vals);
                let p = t.masked_softmax(ids[0], allow2.clone());
                t.cross_entropy(p, &[(0, 0), (1, 3)])
            },
            &leaves,
            1e-5,
        );

        let mut tape = Tape::new();
        let x = tape.leaf(leaves[0].clone());
        let p = tape.masked_softmax(x, allow);
        assert_eq!(tape.value(p).get(0, 1), 0.0);
        assert_eq!(tape.value(p).get(0, 4), 0.0);
        let row0: f64 = tape.value(p).row(0).iter().sum();
        assert!((row0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_and_select_match_finite_differences() {
        let mut rng = Rng::new(8);
        let leaves = vec![rand_md(&mut rng, 4, 3), rand_md(&mut rng, 4, 3)];
        check_against_fd(
            |t, vals| {
                let ids = rebuild_leaves(t, vals);
                // Both copies of the repeated gather index stay live through
                // the first loss, exercising gradient accumulation; the
                // second loss reaches both select branches.
                let g = t.gather_rows(ids[0], &[0, 2, 2, 3]);
                let sel = t.select_rows(g, ids[1], vec![false, true, false, true]);
                let a = t.cross_entropy(g, &[(1, 2), (2, 0)]);
                let b = t.cross_entropy(sel, &[(0, 1), (1, 2), (3, 0)]);
                t.add(a, b)
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn column_ops_match_finite_differences() {
        let mut rng = Rng::new(9);
        let leaves = vec![rand_md(&mut rng, 3, 6)];
        check_against_fd(
            |t, vals| {
                let ids = rebuild_leaves(t, vals);
                let a = t.slice_cols(ids[0], 0, 3);
                let b = t.slice_cols(ids[0], 3, 3);
                let swapped = t.concat_cols(&[b, a]);
                t.cross_entropy(swapped, &[(0, 4), (2, 1)])
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_value_matches_direct_computation() {
        let logits = Md::from_vec(2, 3, vec![1.0, 2.0, 3.0, 0.5, 0.5, 0.5]);
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let loss = tape.cross_entropy(l, &[(0, 2), (1, 0)]);
        let lse0 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        let lse1 = (3.0 * 0.5f64.exp()).ln();
        let expected = ((lse0 - 3.0) + (lse1 - 0.5)) / 2.0;
        assert!((tape.value(loss).scalar() - expected).abs() < 1e-12);
    }

    #[test]
    fn backward_only_reaches_ancestors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Md::from_vec(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(Md::from_vec(1, 2, vec![3.0, 4.0]));
        let _orphan = tape.scale(b, 2.0);
        let loss = tape.cross_entropy(a, &[(0, 0)]);
        let grads = tape.backward(loss);
        assert!(grads[b].as_slice().iter().all(|&g| g == 0.0));
        assert!(grads[a].as_slice().iter().any(|&g| g != 0.0));
    }
}
