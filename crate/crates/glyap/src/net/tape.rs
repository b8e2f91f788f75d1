//! A small reverse-mode automatic-differentiation tape.
//!
//! The tape is an append-only list of vector-valued nodes. Values are
//! computed eagerly as nodes are created, so callers may branch on
//! intermediate values while building a graph; the recorded graph then
//! reflects exactly the branch that was taken. [`Tape::backward`]
//! propagates adjoints from a scalar node back to every node and into
//! per-source parameter gradient buffers.
//!
//! Parameters enter through *sources*: flat `f64` slices registered with
//! [`Tape::add_source`]. Gradient accumulation targets the matching entry
//! of [`Tape::source_grads`], which keeps optimizer state decoupled from
//! the graph.
//!
//! Subgradient conventions at kinks: `hinge` and `abs` take subgradient 0
//! at the kink, `min2` routes ties to its first argument, and the hard
//! `clamp` has gradient 0 strictly outside the box and 1 on the boundary.

use crate::matlib::Matrix;
use crate::net::NetError;

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Clone)]
enum Op {
    /// Constant leaf (inputs, baked constants).
    Leaf,
    /// Raw view of a parameter slice `sources[src][off .. off + len]`.
    ParamVec { src: usize, off: usize, len: usize },
    /// `W x + b` with `W` (row-major `rows x cols`) and `b` read from a
    /// parameter source at `w_off` / `b_off`.
    Affine { x: NodeId, src: usize, w_off: usize, b_off: usize, rows: usize, cols: usize },
    /// `W x` with `W` (row-major `rows x cols`) read from a parameter
    /// source at `w_off`; no bias.
    LinearParam { x: NodeId, src: usize, w_off: usize, rows: usize, cols: usize },
    /// `W x + b` with constant coefficients.
    ConstAffine { x: NodeId, w: Matrix },
    /// Elementwise `max(v, slope * v)`.
    LeakyRelu { x: NodeId, slope: f64 },
    /// `scale * softmax(v)`.
    SoftmaxScaled { x: NodeId, scale: f64 },
    /// Smooth per-coordinate saturation onto `[lo_i, hi_i]` (see
    /// [`Tape::sat_box`]).
    SatBox { x: NodeId, lo: Vec<f64>, hi: Vec<f64> },
    /// Hard per-coordinate clamp onto `[lo_i, hi_i]`.
    Clamp { x: NodeId, lo: Vec<f64>, hi: Vec<f64> },
    /// Elementwise sine.
    Sin { x: NodeId },
    /// Elementwise cosine.
    Cos { x: NodeId },
    /// Elementwise reciprocal.
    Recip { x: NodeId },
    /// Wrap coordinate `idx` into `[-pi, pi)`; other coordinates pass
    /// through. The wrap is a shift by a locally constant multiple of
    /// `2 pi`, so its derivative is 1.
    WrapAngle { x: NodeId },
    /// Elementwise sum of two equal-width nodes.
    Add { a: NodeId, b: NodeId },
    /// Elementwise difference of two equal-width nodes.
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product of two equal-width nodes.
    Mul { a: NodeId, b: NodeId },
    /// Multiply by a constant scalar.
    Scale { x: NodeId, c: f64 },
    /// Add a constant vector.
    AddConst { x: NodeId },
    /// Concatenate nodes into one vector.
    Concat { parts: Vec<NodeId> },
    /// Contiguous sub-vector `v[start .. start + len]`.
    Slice { x: NodeId, start: usize },
    /// Scalar inner product of two equal-width nodes.
    Dot { a: NodeId, b: NodeId },
    /// Scalar squared Euclidean norm.
    SumSq { x: NodeId },
    /// Scalar sum of all coordinates.
    Sum { x: NodeId },
    /// Elementwise absolute value.
    Abs { x: NodeId },
    /// Elementwise `max(v, 0)`.
    Hinge { x: NodeId },
    /// Scalar minimum of two scalar nodes; ties route to `a`.
    Min2 { a: NodeId, b: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    val: Vec<f64>,
    grad: Vec<f64>,
}

/// Reverse-mode tape over vector-valued nodes; see the module docs.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node>,
    sources: Vec<&'a [f64]>,
    /// Per-source gradient buffers, shaped like the registered sources and
    /// filled by [`Tape::backward`].
    pub source_grads: Vec<Vec<f64>>,
}

impl<'a> Tape<'a> {
    /// Creates an empty tape.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), sources: Vec::new(), source_grads: Vec::new() }
    }

    /// Registers a flat parameter slice and returns its source index.
    pub fn add_source(&mut self, params: &'a [f64]) -> usize {
        self.sources.push(params);
        self.source_grads.push(vec![0.0; params.len()]);
        self.sources.len() - 1
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].val
    }

    /// Adjoint of a node after [`Tape::backward`]; zeros beforehand.
    pub fn grad_of(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Whether the tape holds no nodes.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, val: Vec<f64>) -> NodeId {
        let grad = vec![0.0; val.len()];
        self.nodes.push(Node { op, val, grad });
        self.nodes.len() - 1
    }

    fn width(&self, id: NodeId) -> usize {
        self.nodes[id].val.len()
    }

    /// Constant leaf holding a copy of `v`.
    pub fn leaf(&mut self, v: &[f64]) -> NodeId {
        self.push(Op::Leaf, v.to_vec())
    }

    /// Node viewing `len` parameters of source `src` starting at `off`.
    pub fn param_vec(&mut self, src: usize, off: usize, len: usize) -> NodeId {
        assert!(off + len <= self.sources[src].len(), "parameter slice out of range");
        let val = self.sources[src][off..off + len].to_vec();
        self.push(Op::ParamVec { src, off, len }, val)
    }

    /// Affine map `W x + b` with parameters taken from source `src`:
    /// `W` is row-major at `w_off` with shape `rows x cols`, `b` is at
    /// `b_off` with length `rows`.
    pub fn affine(
        &mut self,
        x: NodeId,
        src: usize,
        w_off: usize,
        b_off: usize,
        rows: usize,
        cols: usize,
    ) -> NodeId {
        assert_eq!(self.width(x), cols, "affine input width mismatch");
        let p = self.sources[src];
        assert!(w_off + rows * cols <= p.len() && b_off + rows <= p.len());
        let xv = &self.nodes[x].val;
        let mut val = vec![0.0; rows];
        for i in 0..rows {
            let row = &p[w_off + i * cols..w_off + (i + 1) * cols];
            let mut acc = p[b_off + i];
            for (wij, xj) in row.iter().zip(xv.iter()) {
                acc += wij * xj;
            }
            val[i] = acc;
        }
        self.push(Op::Affine { x, src, w_off, b_off, rows, cols }, val)
    }

    /// Linear map `W x` with `W` taken from source `src`: row-major at
    /// `w_off` with shape `rows x cols`, no bias.
    pub fn linear_param(
        &mut self,
        x: NodeId,
        src: usize,
        w_off: usize,
        rows: usize,
        cols: usize,
    ) -> NodeId {
        assert_eq!(self.width(x), cols, "linear input width mismatch");
        let p = self.sources[src];
        assert!(w_off + rows * cols <= p.len());
        let xv = &self.nodes[x].val;
        let mut val = vec![0.0; rows];
        for i in 0..rows {
            let row = &p[w_off + i * cols..w_off + (i + 1) * cols];
            val[i] = row.iter().zip(xv.iter()).map(|(w, v)| w * v).sum();
        }
        self.push(Op::LinearParam { x, src, w_off, rows, cols }, val)
    }

    /// Affine map with constant coefficients.
    pub fn const_affine(&mut self, x: NodeId, w: &Matrix, b: &[f64]) -> NodeId {
        assert_eq!(self.width(x), w.cols(), "const affine input width mismatch");
        assert_eq!(w.rows(), b.len(), "const affine bias length mismatch");
        let mut val = w.matvec(&self.nodes[x].val);
        for (vi, bi) in val.iter_mut().zip(b.iter()) {
            *vi += bi;
        }
        self.push(Op::ConstAffine { x, w: w.clone() }, val)
    }

    /// Elementwise leaky rectifier `max(v, slope * v)`.
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let val = self.nodes[x].val.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        self.push(Op::LeakyRelu { x, slope }, val)
    }

    /// Softmax scaled by a constant, so the output sums to `scale` exactly
    /// up to rounding.
    pub fn softmax_scaled(&mut self, x: NodeId, scale: f64) -> NodeId {
        let val = softmax_scaled_value(&self.nodes[x].val, scale);
        self.push(Op::SoftmaxScaled { x, scale }, val)
    }

    /// Smooth saturation mapping coordinate `i` into `(lo_i, hi_i)`:
    /// `hi * tanh(v / hi)` for `v >= 0` and `lo * tanh(v / lo)` for
    /// `v < 0`. The two halves meet at 0 with slope 1, and a zero bound
    /// collapses that half to 0.
    pub fn sat_box(&mut self, x: NodeId, lo: &[f64], hi: &[f64]) -> NodeId {
        let w = self.width(x);
        assert_eq!(lo.len(), w);
        assert_eq!(hi.len(), w);
        for i in 0..w {
            assert!(
                lo[i] <= 0.0 && hi[i] >= 0.0,
                "saturation box must contain 0 per coordinate"
            );
        }
        let val = self
            .nodes[x]
            .val
            .iter()
            .enumerate()
            .map(|(i, &v)| sat_value(v, lo[i], hi[i]))
            .collect();
        self.push(Op::SatBox { x, lo: lo.to_vec(), hi: hi.to_vec() }, val)
    }

    /// Hard clamp of each coordinate into `[lo_i, hi_i]`.
    pub fn clamp(&mut self, x: NodeId, lo: &[f64], hi: &[f64]) -> NodeId {
        let w = self.width(x);
        assert_eq!(lo.len(), w);
        assert_eq!(hi.len(), w);
        let val = self
            .nodes[x]
            .val
            .iter()
            .enumerate()
            .map(|(i, &v)| v.clamp(lo[i], hi[i]))
            .collect();
        self.push(Op::Clamp { x, lo: lo.to_vec(), hi: hi.to_vec() }, val)
    }

    /// Elementwise sine.
    pub fn sin(&mut self, x: NodeId) -> NodeId {
        let val = self.nodes[x].val.iter().map(|v| v.sin()).collect();
        self.push(Op::Sin { x }, val)
    }

    /// Elementwise cosine.
    pub fn cos(&mut self, x: NodeId) -> NodeId {
        let val = self.nodes[x].val.iter().map(|v| v.cos()).collect();
        self.push(Op::Cos { x }, val)
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let val = self.nodes[x].val.iter().map(|v| 1.0 / v).collect();
        self.push(Op::Recip { x }, val)
    }

    /// Wraps coordinate `idx` into `[-pi, pi)`, passing the rest through.
    pub fn wrap_angle(&mut self, x: NodeId, idx: usize) -> NodeId {
        assert!(idx < self.width(x));
        let mut val = self.nodes[x].val.clone();
        val[idx] = wrap_to_pi(val[idx]);
        self.push(Op::WrapAngle { x }, val)
    }

    /// Elementwise sum.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.width(a), self.width(b), "add width mismatch");
        let val =
            self.nodes[a].val.iter().zip(self.nodes[b].val.iter()).map(|(x, y)| x + y).collect();
        self.push(Op::Add { a, b }, val)
    }

    /// Elementwise difference.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.width(a), self.width(b), "sub width mismatch");
        let val =
            self.nodes[a].val.iter().zip(self.nodes[b].val.iter()).map(|(x, y)| x - y).collect();
        self.push(Op::Sub { a, b }, val)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.width(a), self.width(b), "mul width mismatch");
        let val =
            self.nodes[a].val.iter().zip(self.nodes[b].val.iter()).map(|(x, y)| x * y).collect();
        self.push(Op::Mul { a, b }, val)
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let val = self.nodes[x].val.iter().map(|v| c * v).collect();
        self.push(Op::Scale { x, c }, val)
    }

    /// Addition of a constant vector.
    pub fn add_const(&mut self, x: NodeId, c: &[f64]) -> NodeId {
        assert_eq!(self.width(x), c.len(), "add_const width mismatch");
        let val = self.nodes[x].val.iter().zip(c.iter()).map(|(v, ci)| v + ci).collect();
        self.push(Op::AddConst { x }, val)
    }

    /// Concatenation of several nodes into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut val = Vec::new();
        for &p in parts {
            val.extend_from_slice(&self.nodes[p].val);
        }
        self.push(Op::Concat { parts: parts.to_vec() }, val)
    }

    /// Contiguous sub-vector `v[start .. start + len]`.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        assert!(start + len <= self.width(x), "slice out of range");
        let val = self.nodes[x].val[start..start + len].to_vec();
        self.push(Op::Slice { x, start }, val)
    }

    /// Scalar inner product.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.width(a), self.width(b), "dot width mismatch");
        let val: f64 =
            self.nodes[a].val.iter().zip(self.nodes[b].val.iter()).map(|(x, y)| x * y).sum();
        self.push(Op::Dot { a, b }, vec![val])
    }

    /// Scalar squared Euclidean norm.
    pub fn sum_sq(&mut self, x: NodeId) -> NodeId {
        let val: f64 = self.nodes[x].val.iter().map(|v| v * v).sum();
        self.push(Op::SumSq { x }, vec![val])
    }

    /// Scalar sum of coordinates.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let val: f64 = self.nodes[x].val.iter().sum();
        self.push(Op::Sum { x }, vec![val])
    }

    /// Elementwise absolute value (subgradient 0 at 0).
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let val = self.nodes[x].val.iter().map(|v| v.abs()).collect();
        self.push(Op::Abs { x }, val)
    }

    /// Elementwise `max(v, 0)` (subgradient 0 at 0).
    pub fn hinge(&mut self, x: NodeId) -> NodeId {
        // NaN passes through (`f64::max` would swallow it), so corrupted
        // values surface as a non-finite loss instead of a silent zero.
        let val = self
            .nodes[x]
            .val
            .iter()
            .map(|&v| if v.is_nan() { v } else { v.max(0.0) })
            .collect();
        self.push(Op::Hinge { x }, val)
    }

    /// Scalar minimum; ties route the gradient to `a`.
    pub fn min2(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.width(a), 1, "min2 expects scalars");
        assert_eq!(self.width(b), 1, "min2 expects scalars");
        let (va, vb) = (self.nodes[a].val[0], self.nodes[b].val[0]);
        let val = if va <= vb { va } else { vb };
        self.push(Op::Min2 { a, b }, vec![val])
    }

    /// Propagates adjoints from the scalar node `loss` back through the
    /// tape, accumulating parameter gradients into
    /// [`Tape::source_grads`] (which are reset first) and per-node
    /// adjoints readable via [`Tape::grad_of`].
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.width(loss), 1, "backward expects a scalar loss node");
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        for g in &mut self.source_grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        self.nodes[loss].grad[0] = 1.0;

        for id in (0..=loss).rev() {
            // Split off the current node so its parents can be mutated.
            let (head, tail) = self.nodes.split_at_mut(id);
            let node = &tail[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = &node.grad;
            match &node.op {
                Op::Leaf => {}
                Op::ParamVec { src, off, len } => {
                    let dst = &mut self.source_grads[*src][*off..*off + *len];
                    for (d, gi) in dst.iter_mut().zip(g.iter()) {
                        *d += gi;
                    }
                }
                Op::Affine { x, src, w_off, b_off, rows, cols } => {
                    let p = self.sources[*src];
                    let xv = head[*x].val.clone();
                    {
                        let sg = &mut self.source_grads[*src];
                        for i in 0..*rows {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            sg[*b_off + i] += gi;
                            let wrow = &mut sg[*w_off + i * cols..*w_off + (i + 1) * cols];
                            for (wg, xj) in wrow.iter_mut().zip(xv.iter()) {
                                *wg += gi * xj;
                            }
                        }
                    }
                    let xg = &mut head[*x].grad;
                    for i in 0..*rows {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let wrow = &p[*w_off + i * cols..*w_off + (i + 1) * cols];
                        for (xgj, wij) in xg.iter_mut().zip(wrow.iter()) {
                            *xgj += gi * wij;
                        }
                    }
                }
                Op::LinearParam { x, src, w_off, rows, cols } => {
                    let p = self.sources[*src];
                    let xv = head[*x].val.clone();
                    {
                        let sg = &mut self.source_grads[*src];
                        for i in 0..*rows {
                            let gi = g[i];
                            if gi == 0.0 {
                                continue;
                            }
                            let wrow = &mut sg[*w_off + i * cols..*w_off + (i + 1) * cols];
                            for (wg, xj) in wrow.iter_mut().zip(xv.iter()) {
                                *wg += gi * xj;
                            }
                        }
                    }
                    let xg = &mut head[*x].grad;
                    for i in 0..*rows {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let wrow = &p[*w_off + i * cols..*w_off + (i + 1) * cols];
                        for (xgj, wij) in xg.iter_mut().zip(wrow.iter()) {
                            *xgj += gi * wij;
                        }
                    }
                }
                Op::ConstAffine { x, w } => {
                    let xg = &mut head[*x].grad;
                    for i in 0..w.rows() {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for (j, xgj) in xg.iter_mut().enumerate() {
                            *xgj += gi * w[(i, j)];
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        let d = if parent.val[i] > 0.0 { 1.0 } else { *slope };
                        parent.grad[i] += g[i] * d;
                    }
                }
                Op::SoftmaxScaled { x, scale } => {
                    // y = scale * p with p = softmax(z):
                    // dz_j = p_j * (g_j * scale - <g, y>).
                    let gy: f64 = g.iter().zip(node.val.iter()).map(|(gi, yi)| gi * yi).sum();
                    let parent = &mut head[*x];
                    for j in 0..g.len() {
                        let pj = node.val[j] / scale;
                        parent.grad[j] += pj * (g[j] * scale - gy);
                    }
                }
                Op::SatBox { x, lo, hi } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        let v = parent.val[i];
                        let bound = if v >= 0.0 { hi[i] } else { lo[i] };
                        let d = if bound == 0.0 {
                            0.0
                        } else {
                            let t = node.val[i] / bound;
                            1.0 - t * t
                        };
                        parent.grad[i] += g[i] * d;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        let v = parent.val[i];
                        if v >= lo[i] && v <= hi[i] {
                            parent.grad[i] += g[i];
                        }
                    }
                }
                Op::Sin { x } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        parent.grad[i] += g[i] * parent.val[i].cos();
                    }
                }
                Op::Cos { x } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        parent.grad[i] -= g[i] * parent.val[i].sin();
                    }
                }
                Op::Recip { x } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        let y = node.val[i];
                        parent.grad[i] -= g[i] * y * y;
                    }
                }
                Op::WrapAngle { x } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        parent.grad[i] += g[i];
                    }
                }
                Op::Add { a, b } => {
                    for i in 0..g.len() {
                        head[*a].grad[i] += g[i];
                    }
                    for i in 0..g.len() {
                        head[*b].grad[i] += g[i];
                    }
                }
                Op::Sub { a, b } => {
                    for i in 0..g.len() {
                        head[*a].grad[i] += g[i];
                    }
                    for i in 0..g.len() {
                        head[*b].grad[i] -= g[i];
                    }
                }
                Op::Mul { a, b } => {
                    let av = head[*a].val.clone();
                    let bv = head[*b].val.clone();
                    for i in 0..g.len() {
                        head[*a].grad[i] += g[i] * bv[i];
                    }
                    for i in 0..g.len() {
                        head[*b].grad[i] += g[i] * av[i];
                    }
                }
                Op::Scale { x, c } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        parent.grad[i] += g[i] * c;
                    }
                }
                Op::AddConst { x } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        parent.grad[i] += g[i];
                    }
                }
                Op::Concat { parts } => {
                    let mut at = 0;
                    for &p in parts {
                        let w = head[p].val.len();
                        for i in 0..w {
                            head[p].grad[i] += g[at + i];
                        }
                        at += w;
                    }
                }
                Op::Slice { x, start } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        parent.grad[start + i] += g[i];
                    }
                }
                Op::Dot { a, b } => {
                    let av = head[*a].val.clone();
                    let bv = head[*b].val.clone();
                    let gs = g[0];
                    for i in 0..av.len() {
                        head[*a].grad[i] += gs * bv[i];
                    }
                    for i in 0..bv.len() {
                        head[*b].grad[i] += gs * av[i];
                    }
                }
                Op::SumSq { x } => {
                    let gs = g[0];
                    let parent = &mut head[*x];
                    for i in 0..parent.val.len() {
                        parent.grad[i] += 2.0 * gs * parent.val[i];
                    }
                }
                Op::Sum { x } => {
                    let gs = g[0];
                    let parent = &mut head[*x];
                    for gi in parent.grad.iter_mut() {
                        *gi += gs;
                    }
                }
                Op::Abs { x } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        let v = parent.val[i];
                        let d = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        parent.grad[i] += g[i] * d;
                    }
                }
                Op::Hinge { x } => {
                    let parent = &mut head[*x];
                    for i in 0..g.len() {
                        if parent.val[i] > 0.0 {
                            parent.grad[i] += g[i];
                        }
                    }
                }
                Op::Min2 { a, b } => {
                    let (va, vb) = (head[*a].val[0], head[*b].val[0]);
                    if va <= vb {
                        head[*a].grad[0] += g[0];
                    } else {
                        head[*b].grad[0] += g[0];
                    }
                }
            }
        }
    }
}

/// Scaled softmax computed with the usual max-shift for stability.
pub fn softmax_scaled_value(z: &[f64], scale: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| scale * e / total).collect()
}

/// Smooth saturation value used by [`Tape::sat_box`].
pub fn sat_value(v: f64, lo: f64, hi: f64) -> f64 {
    if v >= 0.0 {
        if hi == 0.0 {
            0.0
        } else if hi.is_infinite() {
            // No saturation on this side.
            v
        } else {
            hi * (v / hi).tanh()
        }
    } else if lo == 0.0 {
        0.0
    } else if lo.is_infinite() {
        v
    } else {
        lo * (v / lo).tanh()
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_to_pi(v: f64) -> f64 {
    let w = v - TWO_PI * ((v + std::f64::consts::PI) / TWO_PI).floor();
    // Guard against rounding placing the result exactly at +pi.
    if w >= std::f64::consts::PI {
        w - TWO_PI
    } else {
        w
    }
}

/// A scalar loss described as a composition over a network's output.
///
/// The tree is interpreted by [`crate::net::grad_params`], which builds
/// the corresponding tape nodes on top of the network forward pass.
/// `Output` refers to the network's (head-transformed) output vector;
/// every other variant combines sub-expressions with the primitive set
/// the tape supports. Ill-typed compositions (non-scalar roots, width
/// mismatches, `Min` over vectors) are reported as
/// [`NetError::UnsupportedPrimitive`].
#[derive(Debug, Clone)]
pub enum LossExpr {
    /// The network output vector.
    Output,
    /// A constant vector.
    Const(Vec<f64>),
    /// Squared Euclidean norm (scalar).
    SumSq(Box<LossExpr>),
    /// Sum of coordinates (scalar).
    Sum(Box<LossExpr>),
    /// Elementwise absolute value.
    Abs(Box<LossExpr>),
    /// Elementwise `max(., 0)`.
    Hinge(Box<LossExpr>),
    /// Elementwise sum.
    Add(Box<LossExpr>, Box<LossExpr>),
    /// Elementwise difference.
    Sub(Box<LossExpr>, Box<LossExpr>),
    /// Elementwise product.
    Mul(Box<LossExpr>, Box<LossExpr>),
    /// Multiplication by a constant.
    Scale(Box<LossExpr>, f64),
    /// Inner product with a constant vector (scalar).
    Dot(Box<LossExpr>, Vec<f64>),
    /// Minimum of two scalar sub-expressions.
    Min(Box<LossExpr>, Box<LossExpr>),
}

impl LossExpr {
    /// Builds the tape nodes for this expression on top of `output` and
    /// returns the resulting node.
    pub(crate) fn build(&self, tape: &mut Tape<'_>, output: NodeId) -> Result<NodeId, NetError> {
        let unsupported = |what: String| NetError::UnsupportedPrimitive(what);
        match self {
            LossExpr::Output => Ok(output),
            LossExpr::Const(c) => Ok(tape.leaf(c)),
            LossExpr::SumSq(e) => {
                let n = e.build(tape, output)?;
                Ok(tape.sum_sq(n))
            }
            LossExpr::Sum(e) => {
                let n = e.build(tape, output)?;
                Ok(tape.sum(n))
            }
            LossExpr::Abs(e) => {
                let n = e.build(tape, output)?;
                Ok(tape.abs(n))
            }
            LossExpr::Hinge(e) => {
                let n = e.build(tape, output)?;
                Ok(tape.hinge(n))
            }
            LossExpr::Add(a, b) => {
                let (na, nb) = (a.build(tape, output)?, b.build(tape, output)?);
                if tape.value(na).len() != tape.value(nb).len() {
                    return Err(unsupported(format!(
                        "Add over widths {} and {}",
                        tape.value(na).len(),
                        tape.value(nb).len()
                    )));
                }
                Ok(tape.add(na, nb))
            }
            LossExpr::Sub(a, b) => {
                let (na, nb) = (a.build(tape, output)?, b.build(tape, output)?);
                if tape.value(na).len() != tape.value(nb).len() {
                    return Err(unsupported(format!(
                        "Sub over widths {} and {}",
                        tape.value(na).len(),
                        tape.value(nb).len()
                    )));
                }
                Ok(tape.sub(na, nb))
            }
            LossExpr::Mul(a, b) => {
                let (na, nb) = (a.build(tape, output)?, b.build(tape, output)?);
                if tape.value(na).len() != tape.value(nb).len() {
                    return Err(unsupported(format!(
                        "Mul over widths {} and {}",
                        tape.value(na).len(),
                        tape.value(nb).len()
                    )));
                }
                Ok(tape.mul(na, nb))
            }
            LossExpr::Scale(e, c) => {
                let n = e.build(tape, output)?;
                Ok(tape.scale(n, *c))
            }
            LossExpr::Dot(e, c) => {
                let n = e.build(tape, output)?;
                if tape.value(n).len() != c.len() {
                    return Err(unsupported(format!(
                        "Dot over widths {} and {}",
                        tape.value(n).len(),
                        c.len()
                    )));
                }
                let cn = tape.leaf(c);
                Ok(tape.dot(n, cn))
            }
            LossExpr::Min(a, b) => {
                let (na, nb) = (a.build(tape, output)?, b.build(tape, output)?);
                if tape.value(na).len() != 1 || tape.value(nb).len() != 1 {
                    return Err(unsupported("Min over non-scalar operands".to_string()));
                }
                Ok(tape.min2(na, nb))
            }
        }
    }
}
