//! Reverse-mode automatic differentiation on an eager arena tape.
//!
//! Forward passes append nodes (operation + computed value) to a flat arena;
//! `backward` walks the arena once in reverse, accumulating gradients. The op
//! set is exactly what the matching networks need: elementwise maps, Sinkhorn
//! normalisations, 1x1 channel convolutions, the sparse affinity matvec, the
//! feature-driven affinity kernels, a row-masked solver step with
//! straight-through gradients for its sampling scores, and the clamped
//! cross-entropy decision loss.
//!
//! Normalisation and matvec forwards call the same kernels as the plain
//! solvers, so a traced network step reproduces the untraced solver
//! bit-for-bit.

use ndarray::{Array1, Array2, Array3};
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::affinity::{pattern_matvec, pattern_matvec_rows, PairwisePattern};
use crate::error::{Error, Result};
use crate::solvers::{col_normalize, row_normalize, safe_exp, EXP_ARG_MAX};

/// Index of a node on the tape.
pub type NodeId = usize;

/// Clamp bounds for probabilities entering the cross-entropy loss.
pub const CE_CLAMP_LO: f64 = 1e-12;
pub const CE_CLAMP_HI: f64 = 1.0 - 1e-12;

/// Runtime value held by a tape node.
#[derive(Debug, Clone)]
pub enum Value {
    Scalar(f64),
    Vector(Array1<f64>),
    Matrix(Array2<f64>),
    Tensor(Array3<f64>),
}

impl Value {
    pub fn as_scalar(&self) -> Result<f64> {
        match self {
            Value::Scalar(x) => Ok(*x),
            _ => Err(Error::Tape("expected a scalar value".into())),
        }
    }

    pub fn as_vector(&self) -> Result<&Array1<f64>> {
        match self {
            Value::Vector(v) => Ok(v),
            _ => Err(Error::Tape("expected a vector value".into())),
        }
    }

    pub fn as_matrix(&self) -> Result<&Array2<f64>> {
        match self {
            Value::Matrix(m) => Ok(m),
            _ => Err(Error::Tape("expected a matrix value".into())),
        }
    }

    pub fn as_tensor(&self) -> Result<&Array3<f64>> {
        match self {
            Value::Tensor(t) => Ok(t),
            _ => Err(Error::Tape("expected a tensor value".into())),
        }
    }

    fn same_shape(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Scalar(_), Value::Scalar(_)) => true,
            (Value::Vector(a), Value::Vector(b)) => a.raw_dim() == b.raw_dim(),
            (Value::Matrix(a), Value::Matrix(b)) => a.raw_dim() == b.raw_dim(),
            (Value::Tensor(a), Value::Tensor(b)) => a.raw_dim() == b.raw_dim(),
            _ => false,
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Value {
        match self {
            Value::Scalar(x) => Value::Scalar(f(*x)),
            Value::Vector(v) => Value::Vector(v.mapv(&f)),
            Value::Matrix(m) => Value::Matrix(m.mapv(&f)),
            Value::Tensor(t) => Value::Tensor(t.mapv(&f)),
        }
    }

    fn zip(&self, other: &Value, f: impl Fn(f64, f64) -> f64) -> Result<Value> {
        if !self.same_shape(other) {
            return Err(Error::Tape("shape mismatch in elementwise op".into()));
        }
        Ok(match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => Value::Scalar(f(*a, *b)),
            (Value::Vector(a), Value::Vector(b)) => {
                Value::Vector(Array1::from_iter(a.iter().zip(b).map(|(&x, &y)| f(x, y))))
            }
            (Value::Matrix(a), Value::Matrix(b)) => {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, &y| *x = f(*x, y));
                Value::Matrix(out)
            }
            (Value::Tensor(a), Value::Tensor(b)) => {
                let mut out = a.clone();
                out.zip_mut_with(b, |x, &y| *x = f(*x, y));
                Value::Tensor(out)
            }
            _ => unreachable!("same_shape checked"),
        })
    }

    fn add_assign(&mut self, other: &Value) {
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => *a += b,
            (Value::Vector(a), Value::Vector(b)) => *a += b,
            (Value::Matrix(a), Value::Matrix(b)) => *a += b,
            (Value::Tensor(a), Value::Tensor(b)) => *a += b,
            _ => panic!("gradient shape mismatch"),
        }
    }
}

/// Accumulator for straight-through gradients of a sampling stage: holds
/// `dL/dB` summed over channels at the flat association positions.
#[derive(Debug)]
pub struct SteBuf {
    pub dldb: Vec<f64>,
}

impl SteBuf {
    pub fn new(plane: usize) -> Rc<RefCell<Self>> {
        Rc::new(RefCell::new(Self { dldb: vec![0.0; plane] }))
    }
}

/// Inputs of a row-masked solver step; see [`Tape::sampled_step`].
pub struct SampledStepArgs {
    /// Current assignment plane (strictly positive).
    pub z: NodeId,
    /// Previous blend output; rows outside the mask pass it through.
    pub prev: NodeId,
    /// Unary affinity matrix node.
    pub unary: NodeId,
    /// Pairwise affinity values node.
    pub pairwise: NodeId,
    /// Propagation weight scalar node.
    pub wp: NodeId,
    /// Retention weight scalar node.
    pub wz: NodeId,
    /// Sparsity pattern of the pairwise block.
    pub pattern: Arc<PairwisePattern>,
    /// Masked flat rows, strictly increasing.
    pub rows: Arc<Vec<u32>>,
    /// Straight-through accumulator of the block that drew the mask.
    pub ste: Option<Rc<RefCell<SteBuf>>>,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddConst(NodeId),
    ScaleByScalar { x: NodeId, s: NodeId },
    ScaleConst(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Mul(NodeId, NodeId),
    RowNorm { x: NodeId, sums: Vec<f64> },
    ColNorm { x: NodeId, sums: Vec<f64> },
    L2Normalize { x: NodeId, norm: f64 },
    Conv1x1 { w: NodeId, b: NodeId, x: NodeId },
    StackChannels(Vec<NodeId>),
    SliceChannel { x: NodeId, c: usize },
    ConcatChannels(Vec<NodeId>),
    MeanChannels(NodeId),
    Matvec { unary: NodeId, pairwise: NodeId, z: NodeId, pattern: Arc<PairwisePattern> },
    PairwiseKernel { sigma: NodeId, delta_sq: Arc<Vec<f64>> },
    GaussUnary { sigma: NodeId, dist_sq: Array2<f64>, real1: usize, real2: usize },
    PairwiseFromFeatures { x: NodeId, w: NodeId, pattern: Arc<PairwisePattern> },
    UnaryFromFeatures { x: NodeId, u: NodeId, real1: usize, real2: usize },
    SampledStep {
        args: SampledStepArgs,
        bitmap: Vec<u64>,
        y_mask: Vec<f64>,
        m_mask: Vec<f64>,
    },
    SampleAnchor { x: NodeId, ste: Rc<RefCell<SteBuf>>, enabled: bool },
    CrossEntropy { q: NodeId, gt: Vec<usize>, rows: usize },
}

struct Node {
    op: Op,
    value: Value,
}

/// Eager arena tape; build with the op methods, then call [`Tape::backward`]
/// once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Value>>>,
}

fn bitmap_get(bits: &[u64], r: usize) -> bool {
    bits[r / 64] >> (r % 64) & 1 == 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.nodes[id].value.as_scalar()
    }

    fn push(&mut self, op: Op, value: Value) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Value) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_scalar(&mut self, x: f64) -> NodeId {
        self.leaf(Value::Scalar(x))
    }

    pub fn leaf_vector(&mut self, v: Array1<f64>) -> NodeId {
        self.leaf(Value::Vector(v))
    }

    pub fn leaf_matrix(&mut self, m: Array2<f64>) -> NodeId {
        self.leaf(Value::Matrix(m))
    }

    pub fn leaf_tensor(&mut self, t: Array3<f64>) -> NodeId {
        self.leaf(Value::Tensor(t))
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Elementwise shift by a constant.
    pub fn add_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[x].value.map(|a| a + c);
        Ok(self.push(Op::AddConst(x), v))
    }

    /// Elementwise product with a scalar node.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.nodes[s].value.as_scalar()?;
        let v = self.nodes[x].value.map(|a| sv * a);
        Ok(self.push(Op::ScaleByScalar { x, s }, v))
    }

    /// Elementwise product with a constant.
    pub fn scale_const(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[x].value.map(|a| c * a);
        Ok(self.push(Op::ScaleConst(x, c), v))
    }

    /// Elementwise exponential, argument-clamped like
    /// [`crate::solvers::safe_exp`] so saturated activations stay finite.
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.map(safe_exp);
        Ok(self.push(Op::Exp(x), v))
    }

    /// Elementwise natural logarithm.
    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.map(f64::ln);
        Ok(self.push(Op::Ln(x), v))
    }

    /// Elementwise rectifier.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.map(|a| a.max(0.0));
        Ok(self.push(Op::Relu(x), v))
    }

    /// Scalar softplus `ln(1 + e^x)`, numerically stable.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.nodes[x].value.as_scalar()?;
        Ok(self.push(Op::Softplus(x), Value::Scalar(softplus(xv))))
    }

    /// Product of two scalar nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.nodes[a].value.as_scalar()?;
        let bv = self.nodes[b].value.as_scalar()?;
        Ok(self.push(Op::Mul(a, b), Value::Scalar(av * bv)))
    }

    /// Row normalisation of a matrix node (one half of a Sinkhorn round).
    pub fn row_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let m = self.nodes[x].value.as_matrix()?;
        let (n1, n2) = m.dim();
        let mut y = m.clone();
        let sums = row_normalize(y.as_slice_mut().expect("contiguous"), n1, n2);
        Ok(self.push(Op::RowNorm { x, sums }, Value::Matrix(y)))
    }

    /// Column normalisation of a matrix node.
    pub fn col_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let m = self.nodes[x].value.as_matrix()?;
        let (n1, n2) = m.dim();
        let mut y = m.clone();
        let sums = col_normalize(y.as_slice_mut().expect("contiguous"), n1, n2);
        Ok(self.push(Op::ColNorm { x, sums }, Value::Matrix(y)))
    }

    /// Full truncated Sinkhorn: `rounds` alternations of row and column
    /// normalisation.
    pub fn sinkhorn(&mut self, x: NodeId, rounds: usize) -> Result<NodeId> {
        let mut cur = x;
        for _ in 0..rounds {
            cur = self.row_norm(cur)?;
            cur = self.col_norm(cur)?;
        }
        Ok(cur)
    }

    /// Matrix scaled to unit Euclidean norm (power-iteration step).
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let m = self.nodes[x].value.as_matrix()?;
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::Tape("cannot normalise a zero matrix".into()));
        }
        let y = m.mapv(|v| v / norm);
        Ok(self.push(Op::L2Normalize { x, norm }, Value::Matrix(y)))
    }

    /// Channel-mixing convolution: `y[o] = sum_c w[o,c] x[c] + b[o]` applied
    /// at every position of the `(C, n1, n2)` tensor `x`.
    pub fn conv1x1(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let wv = self.nodes[w].value.as_matrix()?;
        let bv = self.nodes[b].value.as_vector()?;
        let xv = self.nodes[x].value.as_tensor()?;
        let (c_out, c_in) = wv.dim();
        let (c, n1, n2) = xv.dim();
        if c != c_in || bv.len() != c_out {
            return Err(Error::Tape(format!(
                "conv shapes disagree: weights {c_out}x{c_in}, bias {}, input {c} channels",
                bv.len()
            )));
        }
        let plane = n1 * n2;
        let xf = xv.as_slice().expect("contiguous");
        let mut y = Array3::zeros((c_out, n1, n2));
        {
            let yf = y.as_slice_mut().expect("contiguous");
            for o in 0..c_out {
                for r in 0..plane {
                    let mut acc = bv[o];
                    for ci in 0..c_in {
                        acc += wv[(o, ci)] * xf[ci * plane + r];
                    }
                    yf[o * plane + r] = acc;
                }
            }
        }
        Ok(self.push(Op::Conv1x1 { w, b, x }, Value::Tensor(y)))
    }

    /// Stack matrix nodes into a `(C, n1, n2)` tensor.
    pub fn stack_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Tape("cannot stack zero channels".into()));
        }
        let (n1, n2) = self.nodes[xs[0]].value.as_matrix()?.dim();
        let mut t = Array3::zeros((xs.len(), n1, n2));
        for (c, &id) in xs.iter().enumerate() {
            let m = self.nodes[id].value.as_matrix()?;
            if m.dim() != (n1, n2) {
                return Err(Error::Tape("stacked channels must share a shape".into()));
            }
            t.index_axis_mut(ndarray::Axis(0), c).assign(m);
        }
        Ok(self.push(Op::StackChannels(xs.to_vec()), Value::Tensor(t)))
    }

    /// Extract channel `c` of a tensor node as a matrix.
    pub fn slice_channel(&mut self, x: NodeId, c: usize) -> Result<NodeId> {
        let t = self.nodes[x].value.as_tensor()?;
        if c >= t.dim().0 {
            return Err(Error::Tape(format!("channel {c} out of range {}", t.dim().0)));
        }
        let m = t.index_axis(ndarray::Axis(0), c).to_owned();
        Ok(self.push(Op::SliceChannel { x, c }, Value::Matrix(m)))
    }

    /// Concatenate tensor nodes along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Tape("cannot concatenate zero tensors".into()));
        }
        let (_, n1, n2) = self.nodes[xs[0]].value.as_tensor()?.dim();
        let mut total = 0;
        for &id in xs {
            let t = self.nodes[id].value.as_tensor()?;
            if t.dim().1 != n1 || t.dim().2 != n2 {
                return Err(Error::Tape("concatenated tensors must share plane shape".into()));
            }
            total += t.dim().0;
        }
        let mut out = Array3::zeros((total, n1, n2));
        let mut at = 0;
        for &id in xs {
            let t = self.nodes[id].value.as_tensor()?;
            let c = t.dim().0;
            out.slice_mut(ndarray::s![at..at + c, .., ..]).assign(t);
            at += c;
        }
        Ok(self.push(Op::ConcatChannels(xs.to_vec()), Value::Tensor(out)))
    }

    /// Mean over the channel axis of a tensor node.
    pub fn mean_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.nodes[x].value.as_tensor()?;
        let (c, n1, n2) = t.dim();
        let plane = n1 * n2;
        let tf = t.as_slice().expect("contiguous");
        let mut m = Array2::zeros((n1, n2));
        {
            let mf = m.as_slice_mut().expect("contiguous");
            for ch in 0..c {
                for r in 0..plane {
                    mf[r] += tf[ch * plane + r];
                }
            }
            let inv = 1.0 / c as f64;
            for v in mf.iter_mut() {
                *v *= inv;
            }
        }
        Ok(self.push(Op::MeanChannels(x), Value::Matrix(m)))
    }

    /// Sparse affinity product `diag(unary) z + pairwise z` on the flat
    /// association space; `unary` and `z` are matrix nodes, `pairwise` a
    /// vector node of per-entry values.
    pub fn matvec(
        &mut self,
        unary: NodeId,
        pairwise: NodeId,
        z: NodeId,
        pattern: Arc<PairwisePattern>,
    ) -> Result<NodeId> {
        let uv = self.nodes[unary].value.as_matrix()?;
        let pv = self.nodes[pairwise].value.as_vector()?;
        let zv = self.nodes[z].value.as_matrix()?;
        if uv.dim() != (pattern.n1, pattern.n2) || zv.dim() != (pattern.n1, pattern.n2) {
            return Err(Error::Tape("matvec operands do not match the pattern".into()));
        }
        if pv.len() != pattern.len() {
            return Err(Error::Tape("pairwise values do not match the pattern".into()));
        }
        let mut out = Array2::zeros(uv.raw_dim());
        pattern_matvec(
            &pattern,
            uv.as_slice().expect("contiguous"),
            pv.as_slice().expect("contiguous"),
            zv.as_slice().expect("contiguous"),
            out.as_slice_mut().expect("contiguous"),
        );
        Ok(self.push(Op::Matvec { unary, pairwise, z, pattern }, Value::Matrix(out)))
    }

    /// Geometric pairwise kernel `exp(-delta_sq / sigma^2)` as a vector node;
    /// differentiable in the bandwidth node `sigma`.
    pub fn pairwise_kernel(&mut self, sigma: NodeId, delta_sq: Arc<Vec<f64>>) -> Result<NodeId> {
        let s = self.nodes[sigma].value.as_scalar()?;
        if s <= 0.0 {
            return Err(Error::Tape(format!("kernel bandwidth must be positive, got {s}")));
        }
        let vals = Array1::from_iter(delta_sq.iter().map(|&d2| (-d2 / (s * s)).exp()));
        Ok(self.push(Op::PairwiseKernel { sigma, delta_sq }, Value::Vector(vals)))
    }

    /// Gaussian unary kernel `exp(-dist_sq / sigma^2)` masked to the real
    /// (non-padding) block; differentiable in `sigma`.
    pub fn gauss_unary(
        &mut self,
        sigma: NodeId,
        dist_sq: Array2<f64>,
        real1: usize,
        real2: usize,
    ) -> Result<NodeId> {
        let s = self.nodes[sigma].value.as_scalar()?;
        if s <= 0.0 {
            return Err(Error::Tape(format!("kernel bandwidth must be positive, got {s}")));
        }
        let (n1, n2) = dist_sq.dim();
        let mut u = Array2::zeros((n1, n2));
        for i in 0..real1.min(n1) {
            for j in 0..real2.min(n2) {
                u[(i, j)] = (-dist_sq[(i, j)] / (s * s)).exp();
            }
        }
        Ok(self.push(Op::GaussUnary { sigma, dist_sq, real1, real2 }, Value::Matrix(u)))
    }

    /// Feature-driven pairwise values `exp(-sum_c w_c (x_c[a]-x_c[b])^2)` on
    /// the pattern entries; differentiable in the feature tensor and weights.
    pub fn pairwise_from_features(
        &mut self,
        x: NodeId,
        w: NodeId,
        pattern: Arc<PairwisePattern>,
    ) -> Result<NodeId> {
        let xv = self.nodes[x].value.as_tensor()?;
        let wv = self.nodes[w].value.as_vector()?;
        let (c, n1, n2) = xv.dim();
        if (n1, n2) != (pattern.n1, pattern.n2) || wv.len() != c {
            return Err(Error::Tape("feature kernel shapes do not match the pattern".into()));
        }
        let plane = n1 * n2;
        let xf = xv.as_slice().expect("contiguous");
        let mut vals = Array1::zeros(pattern.len());
        for e in 0..pattern.len() {
            let (a, b) = (pattern.row_a[e] as usize, pattern.row_b[e] as usize);
            let mut acc = 0.0;
            for ch in 0..c {
                let d = xf[ch * plane + a] - xf[ch * plane + b];
                acc += wv[ch] * d * d;
            }
            vals[e] = safe_exp(-acc);
        }
        Ok(self.push(Op::PairwiseFromFeatures { x, w, pattern }, Value::Vector(vals)))
    }

    /// Feature-driven unary values `exp(sum_c u_c x_c[i,j])`, zero outside the
    /// real block; differentiable in the feature tensor and weights.
    pub fn unary_from_features(
        &mut self,
        x: NodeId,
        u: NodeId,
        real1: usize,
        real2: usize,
    ) -> Result<NodeId> {
        let xv = self.nodes[x].value.as_tensor()?;
        let uv = self.nodes[u].value.as_vector()?;
        let (c, n1, n2) = xv.dim();
        if uv.len() != c {
            return Err(Error::Tape("unary weights do not match channel count".into()));
        }
        let plane = n1 * n2;
        let xf = xv.as_slice().expect("contiguous");
        let mut out = Array2::zeros((n1, n2));
        {
            let of = out.as_slice_mut().expect("contiguous");
            for i in 0..real1.min(n1) {
                for j in 0..real2.min(n2) {
                    let r = i * n2 + j;
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += uv[ch] * xf[ch * plane + r];
                    }
                    of[r] = safe_exp(acc);
                }
            }
        }
        Ok(self.push(Op::UnaryFromFeatures { x, u, real1, real2 }, Value::Matrix(out)))
    }

    /// Row-masked proximal step with pass-through blending: masked rows get
    /// `exp(wp * (Mz)_r + wz * ln z_r)`, the rest copy `prev`. Masked-row
    /// products accumulate in global entry order, so a saturated mask equals
    /// the dense step bit-for-bit. If `ste` is set, the backward pass
    /// deposits `dL/dB` contributions there for the sampling stage.
    pub fn sampled_step(&mut self, args: SampledStepArgs) -> Result<NodeId> {
        let zv = self.nodes[args.z].value.as_matrix()?;
        let pv = self.nodes[args.prev].value.as_matrix()?;
        let uv = self.nodes[args.unary].value.as_matrix()?;
        let vv = self.nodes[args.pairwise].value.as_vector()?;
        let wp = self.nodes[args.wp].value.as_scalar()?;
        let wz = self.nodes[args.wz].value.as_scalar()?;
        let plane = args.pattern.n1 * args.pattern.n2;
        if zv.len() != plane || pv.len() != plane || uv.len() != plane {
            return Err(Error::Tape("masked step operands do not match the pattern".into()));
        }
        if vv.len() != args.pattern.len() {
            return Err(Error::Tape("pairwise values do not match the pattern".into()));
        }
        if args.rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Tape("mask rows must be strictly increasing".into()));
        }
        if args.rows.last().is_some_and(|&r| r as usize >= plane) {
            return Err(Error::Tape("mask row out of range".into()));
        }
        let zf = zv.as_slice().expect("contiguous");
        let mut bitmap = vec![0u64; plane.div_ceil(64)];
        for &r in args.rows.iter() {
            bitmap[r as usize / 64] |= 1 << (r as usize % 64);
        }
        let mut m_mask = Vec::new();
        pattern_matvec_rows(
            &args.pattern,
            uv.as_slice().expect("contiguous"),
            vv.as_slice().expect("contiguous"),
            zf,
            &args.rows,
            &mut m_mask,
        );
        let mut y_mask = Vec::with_capacity(args.rows.len());
        for (k, &r) in args.rows.iter().enumerate() {
            let zr = zf[r as usize];
            y_mask.push(safe_exp(wp * m_mask[k] + wz * zr.ln()));
        }
        let mut out = pv.clone();
        {
            let of = out.as_slice_mut().expect("contiguous");
            for (k, &r) in args.rows.iter().enumerate() {
                of[r as usize] = y_mask[k];
            }
        }
        Ok(self.push(Op::SampledStep { args, bitmap, y_mask, m_mask }, Value::Matrix(out)))
    }

    /// Identity marker on a sampling-score node. Its backward turns the
    /// `dL/dB` contributions collected in `ste` into straight-through
    /// gradients of the scores (disabled markers only pass identity
    /// gradients through).
    pub fn sample_anchor(
        &mut self,
        x: NodeId,
        ste: Rc<RefCell<SteBuf>>,
        enabled: bool,
    ) -> Result<NodeId> {
        let v = self.nodes[x].value.as_matrix()?.clone();
        Ok(self.push(Op::SampleAnchor { x, ste, enabled }, Value::Matrix(v)))
    }

    /// Clamped binary cross-entropy between an assignment-probability matrix
    /// and a ground-truth permutation, summed over the first `rows` rows.
    pub fn cross_entropy(&mut self, q: NodeId, gt: &[usize], rows: usize) -> Result<NodeId> {
        let qv = self.nodes[q].value.as_matrix()?;
        let (n1, n2) = qv.dim();
        if rows > n1 || rows > gt.len() {
            return Err(Error::Tape(format!(
                "loss rows {rows} exceed matrix rows {n1} or labels {}",
                gt.len()
            )));
        }
        if gt.iter().take(rows).any(|&j| j >= n2) {
            return Err(Error::Tape("ground-truth column out of range".into()));
        }
        let mut loss = 0.0;
        for i in 0..rows {
            for j in 0..n2 {
                let qc = qv[(i, j)].clamp(CE_CLAMP_LO, CE_CLAMP_HI);
                if j == gt[i] {
                    loss -= qc.ln();
                } else {
                    loss -= (1.0 - qc).ln();
                }
            }
        }
        Ok(self.push(Op::CrossEntropy { q, gt: gt.to_vec(), rows }, Value::Scalar(loss)))
    }

    /// Reverse pass seeded with 1 at a scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.nodes[loss].value.as_scalar()?;
        self.backward_seeded(loss, Value::Scalar(1.0))
    }

    /// Reverse pass from an arbitrary node with an explicit seed gradient.
    pub fn backward_seeded(&mut self, at: NodeId, seed: Value) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if !self.nodes[at].value.same_shape(&seed) {
            return Err(Error::Tape("seed gradient shape mismatch".into()));
        }
        let mut grads: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[at] = Some(seed);
        for id in (0..self.nodes.len()).rev() {
            let must_visit =
                grads[id].is_some() || matches!(self.nodes[id].op, Op::SampleAnchor { .. });
            if !must_visit {
                continue;
            }
            let g = grads[id].take();
            self.backprop_node(id, g.as_ref(), &mut grads);
            grads[id] = g;
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient at a node; `None` when nothing flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&Value> {
        self.grads.as_ref()?.get(id)?.as_ref()
    }

    fn accumulate(grads: &mut [Option<Value>], id: NodeId, delta: Value) {
        match &mut grads[id] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: NodeId, g: Option<&Value>, grads: &mut [Option<Value>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let g = g.expect("visited with grad");
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::AddConst(x) => {
                Self::accumulate(grads, *x, g.expect("visited with grad").clone());
            }
            Op::ScaleByScalar { x, s } => {
                let g = g.expect("visited with grad");
                let sv = self.nodes[*s].value.as_scalar().expect("checked");
                Self::accumulate(grads, *x, g.map(|gv| sv * gv));
                let dot = value_dot(g, &self.nodes[*x].value);
                Self::accumulate(grads, *s, Value::Scalar(dot));
            }
            Op::ScaleConst(x, c) => {
                let g = g.expect("visited with grad");
                let c = *c;
                Self::accumulate(grads, *x, g.map(|gv| c * gv));
            }
            Op::Exp(x) => {
                let g = g.expect("visited with grad");
                let dx = g.zip(&node.value, |gv, y| gv * y).expect("same shape");
                // flat past the argument clamp
                let dx = dx
                    .zip(&self.nodes[*x].value, |d, xv| if xv < EXP_ARG_MAX { d } else { 0.0 })
                    .expect("same shape");
                Self::accumulate(grads, *x, dx);
            }
            Op::Ln(x) => {
                let g = g.expect("visited with grad");
                let dx = g.zip(&self.nodes[*x].value, |gv, xv| gv / xv).expect("same shape");
                Self::accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let g = g.expect("visited with grad");
                let dx = g
                    .zip(&self.nodes[*x].value, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    .expect("same shape");
                Self::accumulate(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let g = g.expect("visited with grad").as_scalar().expect("scalar");
                let xv = self.nodes[*x].value.as_scalar().expect("scalar");
                Self::accumulate(grads, *x, Value::Scalar(g * sigmoid(xv)));
            }
            Op::Mul(a, b) => {
                let g = g.expect("visited with grad").as_scalar().expect("scalar");
                let av = self.nodes[*a].value.as_scalar().expect("scalar");
                let bv = self.nodes[*b].value.as_scalar().expect("scalar");
                Self::accumulate(grads, *a, Value::Scalar(g * bv));
                Self::accumulate(grads, *b, Value::Scalar(g * av));
            }
            Op::RowNorm { x, sums } => {
                let g = g.expect("visited with grad").as_matrix().expect("matrix");
                let y = node.value.as_matrix().expect("matrix");
                let (n1, n2) = y.dim();
                let mut dx = Array2::zeros((n1, n2));
                for i in 0..n1 {
                    let mut dot = 0.0;
                    for j in 0..n2 {
                        dot += g[(i, j)] * y[(i, j)];
                    }
                    for j in 0..n2 {
                        dx[(i, j)] = (g[(i, j)] - dot) / sums[i];
                    }
                }
                Self::accumulate(grads, *x, Value::Matrix(dx));
            }
            Op::ColNorm { x, sums } => {
                let g = g.expect("visited with grad").as_matrix().expect("matrix");
                let y = node.value.as_matrix().expect("matrix");
                let (n1, n2) = y.dim();
                let mut dx = Array2::zeros((n1, n2));
                for j in 0..n2 {
                    let mut dot = 0.0;
                    for i in 0..n1 {
                        dot += g[(i, j)] * y[(i, j)];
                    }
                    for i in 0..n1 {
                        dx[(i, j)] = (g[(i, j)] - dot) / sums[j];
                    }
                }
                Self::accumulate(grads, *x, Value::Matrix(dx));
            }
            Op::L2Normalize { x, norm } => {
                let g = g.expect("visited with grad").as_matrix().expect("matrix");
                let y = node.value.as_matrix().expect("matrix");
                let dot = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>();
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &yv| *d = (*d - yv * dot) / norm);
                Self::accumulate(grads, *x, Value::Matrix(dx));
            }
            Op::Conv1x1 { w, b, x } => {
                let g = g.expect("visited with grad").as_tensor().expect("tensor");
                let wv = self.nodes[*w].value.as_matrix().expect("matrix");
                let xv = self.nodes[*x].value.as_tensor().expect("tensor");
                let (c_out, c_in) = wv.dim();
                let (_, n1, n2) = xv.dim();
                let plane = n1 * n2;
                let gf = g.as_slice().expect("contiguous");
                let xf = xv.as_slice().expect("contiguous");
                let mut dw = Array2::zeros((c_out, c_in));
                let mut db = Array1::zeros(c_out);
                let mut dx = Array3::zeros(xv.raw_dim());
                let dxf = dx.as_slice_mut().expect("contiguous");
                for o in 0..c_out {
                    let go = &gf[o * plane..(o + 1) * plane];
                    db[o] = go.iter().sum();
                    for ci in 0..c_in {
                        let xc = &xf[ci * plane..(ci + 1) * plane];
                        let mut acc = 0.0;
                        for r in 0..plane {
                            acc += go[r] * xc[r];
                        }
                        dw[(o, ci)] = acc;
                        let woc = wv[(o, ci)];
                        let dxc = &mut dxf[ci * plane..(ci + 1) * plane];
                        for r in 0..plane {
                            dxc[r] += woc * go[r];
                        }
                    }
                }
                Self::accumulate(grads, *w, Value::Matrix(dw));
                Self::accumulate(grads, *b, Value::Vector(db));
                Self::accumulate(grads, *x, Value::Tensor(dx));
            }
            Op::StackChannels(xs) => {
                let g = g.expect("visited with grad").as_tensor().expect("tensor");
                for (c, &xid) in xs.iter().enumerate() {
                    let gc = g.index_axis(ndarray::Axis(0), c).to_owned();
                    Self::accumulate(grads, xid, Value::Matrix(gc));
                }
            }
            Op::SliceChannel { x, c } => {
                let g = g.expect("visited with grad").as_matrix().expect("matrix");
                let xv = self.nodes[*x].value.as_tensor().expect("tensor");
                let mut dx = Array3::zeros(xv.raw_dim());
                dx.index_axis_mut(ndarray::Axis(0), *c).assign(g);
                Self::accumulate(grads, *x, Value::Tensor(dx));
            }
            Op::ConcatChannels(xs) => {
                let g = g.expect("visited with grad").as_tensor().expect("tensor");
                let mut at = 0;
                for &xid in xs {
                    let c = self.nodes[xid].value.as_tensor().expect("tensor").dim().0;
                    let gx = g.slice(ndarray::s![at..at + c, .., ..]).to_owned();
                    Self::accumulate(grads, xid, Value::Tensor(gx));
                    at += c;
                }
            }
            Op::MeanChannels(x) => {
                let g = g.expect("visited with grad").as_matrix().expect("matrix");
                let xv = self.nodes[*x].value.as_tensor().expect("tensor");
                let c = xv.dim().0;
                let inv = 1.0 / c as f64;
                let mut dx = Array3::zeros(xv.raw_dim());
                for ch in 0..c {
                    dx.index_axis_mut(ndarray::Axis(0), ch)
                        .zip_mut_with(g, |d, &gv| *d = gv * inv);
                }
                Self::accumulate(grads, *x, Value::Tensor(dx));
            }
            Op::Matvec { unary, pairwise, z, pattern } => {
                let g = g.expect("visited with grad").as_matrix().expect("matrix");
                let uv = self.nodes[*unary].value.as_matrix().expect("matrix");
                let vv = self.nodes[*pairwise].value.as_vector().expect("vector");
                let zv = self.nodes[*z].value.as_matrix().expect("matrix");
                let gf = g.as_slice().expect("contiguous");
                let zf = zv.as_slice().expect("contiguous");
                // d/dz = M^T g = M g by symmetry
                let mut dz = Array2::zeros(zv.raw_dim());
                pattern_matvec(
                    pattern,
                    uv.as_slice().expect("contiguous"),
                    vv.as_slice().expect("contiguous"),
                    gf,
                    dz.as_slice_mut().expect("contiguous"),
                );
                let mut du = g.clone();
                du.zip_mut_with(zv, |d, &zr| *d *= zr);
                let mut dv = Array1::zeros(pattern.len());
                for e in 0..pattern.len() {
                    let (a, b) = (pattern.row_a[e] as usize, pattern.row_b[e] as usize);
                    dv[e] = gf[a] * zf[b] + gf[b] * zf[a];
                }
                Self::accumulate(grads, *z, Value::Matrix(dz));
                Self::accumulate(grads, *unary, Value::Matrix(du));
                Self::accumulate(grads, *pairwise, Value::Vector(dv));
            }
            Op::PairwiseKernel { sigma, delta_sq } => {
                let g = g.expect("visited with grad").as_vector().expect("vector");
                let y = node.value.as_vector().expect("vector");
                let s = self.nodes[*sigma].value.as_scalar().expect("scalar");
                let mut ds = 0.0;
                for e in 0..delta_sq.len() {
                    ds += g[e] * y[e] * 2.0 * delta_sq[e] / (s * s * s);
                }
                Self::accumulate(grads, *sigma, Value::Scalar(ds));
            }
            Op::GaussUnary { sigma, dist_sq, real1, real2 } => {
                let g = g.expect("visited with grad").as_matrix().expect("matrix");
                let y = node.value.as_matrix().expect("matrix");
                let s = self.nodes[*sigma].value.as_scalar().expect("scalar");
                let (n1, n2) = y.dim();
                let mut ds = 0.0;
                for i in 0..(*real1).min(n1) {
                    for j in 0..(*real2).min(n2) {
                        ds += g[(i, j)] * y[(i, j)] * 2.0 * dist_sq[(i, j)] / (s * s * s);
                    }
                }
                Self::accumulate(grads, *sigma, Value::Scalar(ds));
            }
            Op::PairwiseFromFeatures { x, w, pattern } => {
                let g = g.expect("visited with grad").as_vector().expect("vector");
                let y = node.value.as_vector().expect("vector");
                let xv = self.nodes[*x].value.as_tensor().expect("tensor");
                let wv = self.nodes[*w].value.as_vector().expect("vector");
                let (c, n1, n2) = xv.dim();
                let plane = n1 * n2;
                let xf = xv.as_slice().expect("contiguous");
                let mut dw = Array1::zeros(c);
                let mut dx = Array3::zeros(xv.raw_dim());
                let dxf = dx.as_slice_mut().expect("contiguous");
                for e in 0..pattern.len() {
                    let gv = g[e] * y[e];
                    if gv == 0.0 {
                        continue;
                    }
                    let (a, b) = (pattern.row_a[e] as usize, pattern.row_b[e] as usize);
                    let mut acc = 0.0;
                    for ch in 0..c {
                        let d = xf[ch * plane + a] - xf[ch * plane + b];
                        acc += wv[ch] * d * d;
                    }
                    // flat past the argument clamp
                    if -acc >= EXP_ARG_MAX {
                        continue;
                    }
                    for ch in 0..c {
                        let d = xf[ch * plane + a] - xf[ch * plane + b];
                        dw[ch] -= gv * d * d;
                        let t = 2.0 * wv[ch] * d * gv;
                        dxf[ch * plane + a] -= t;
                        dxf[ch * plane + b] += t;
                    }
                }
                Self::accumulate(grads, *w, Value::Vector(dw));
                Self::accumulate(grads, *x, Value::Tensor(dx));
            }
            Op::UnaryFromFeatures { x, u, real1, real2 } => {
                let g = g.expect("visited with grad").as_matrix().expect("matrix");
                let y = node.value.as_matrix().expect("matrix");
                let xv = self.nodes[*x].value.as_tensor().expect("tensor");
                let uv = self.nodes[*u].value.as_vector().expect("vector");
                let (c, n1, n2) = xv.dim();
                let plane = n1 * n2;
                let xf = xv.as_slice().expect("contiguous");
                let mut du = Array1::zeros(c);
                let mut dx = Array3::zeros(xv.raw_dim());
                let dxf = dx.as_slice_mut().expect("contiguous");
                for i in 0..(*real1).min(n1) {
                    for j in 0..(*real2).min(n2) {
                        let r = i * n2 + j;
                        let gy = g[(i, j)] * y[(i, j)];
                        if gy == 0.0 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += uv[ch] * xf[ch * plane + r];
                        }
                        // flat past the argument clamp
                        if acc >= EXP_ARG_MAX {
                            continue;
                        }
                        for ch in 0..c {
                            du[ch] += gy * xf[ch * plane + r];
                            dxf[ch * plane + r] += gy * uv[ch];
                        }
                    }
                }
                Self::accumulate(grads, *u, Value::Vector(du));
                Self::accumulate(grads, *x, Value::Tensor(dx));
            }
            Op::SampledStep { args, bitmap, y_mask, m_mask } => {
                let g = g.expect("visited with grad").as_matrix().expect("matrix");
                let gf = g.as_slice().expect("contiguous");
                let zv = self.nodes[args.z].value.as_matrix().expect("matrix");
                let pv = self.nodes[args.prev].value.as_matrix().expect("matrix");
                let uv = self.nodes[args.unary].value.as_matrix().expect("matrix");
                let vv = self.nodes[args.pairwise].value.as_vector().expect("vector");
                let wp = self.nodes[args.wp].value.as_scalar().expect("scalar");
                let wz = self.nodes[args.wz].value.as_scalar().expect("scalar");
                let zf = zv.as_slice().expect("contiguous");
                let uf = uv.as_slice().expect("contiguous");
                let pf = pv.as_slice().expect("contiguous");
                let vf = vv.as_slice().expect("contiguous");
                let plane = zf.len();
                // gated dL/dy at masked rows (flat past the argument clamp),
                // and the gradient reaching the masked matvec output
                let mut gy = vec![0.0; plane];
                let mut gm = vec![0.0; plane];
                for (k, &r) in args.rows.iter().enumerate() {
                    let r = r as usize;
                    if wp * m_mask[k] + wz * zf[r].ln() < EXP_ARG_MAX {
                        gy[r] = gf[r] * y_mask[k];
                        gm[r] = wp * gy[r];
                    }
                }
                let mut dz = Array2::zeros(zv.raw_dim());
                let mut du = Array2::zeros(uv.raw_dim());
                let (mut dwp, mut dwz) = (0.0, 0.0);
                {
                    let dzf = dz.as_slice_mut().expect("contiguous");
                    let duf = du.as_slice_mut().expect("contiguous");
                    for (k, &r) in args.rows.iter().enumerate() {
                        let r = r as usize;
                        dwp += gy[r] * m_mask[k];
                        dwz += gy[r] * zf[r].ln();
                        dzf[r] = (wz * gy[r]) / zf[r];
                        duf[r] = gm[r] * zf[r];
                    }
                }
                // the quadratic part reuses the dense matvec kernel, so a
                // saturated mask reproduces the dense gradient bit-for-bit
                let mut dz_mv = vec![0.0; plane];
                pattern_matvec(&args.pattern, uf, vf, &gm, &mut dz_mv);
                {
                    let dzf = dz.as_slice_mut().expect("contiguous");
                    for r in 0..plane {
                        dzf[r] += dz_mv[r];
                    }
                }
                let mut dv = Array1::zeros(vv.len());
                for e in 0..args.pattern.len() {
                    let a = args.pattern.row_a[e] as usize;
                    let b = args.pattern.row_b[e] as usize;
                    dv[e] = gm[a] * zf[b] + gm[b] * zf[a];
                }
                let mut dprev = Array2::zeros(zv.raw_dim());
                {
                    let dpf = dprev.as_slice_mut().expect("contiguous");
                    for r in 0..plane {
                        if !bitmap_get(bitmap, r) {
                            dpf[r] = gf[r];
                        }
                    }
                }
                if let Some(buf) = args.ste.as_ref() {
                    let mut buf = buf.borrow_mut();
                    for (k, &r) in args.rows.iter().enumerate() {
                        // straight-through: d blend / d mask = y - prev
                        buf.dldb[r as usize] += gf[r as usize] * (y_mask[k] - pf[r as usize]);
                    }
                }
                Self::accumulate(grads, args.z, Value::Matrix(dz));
                Self::accumulate(grads, args.prev, Value::Matrix(dprev));
                Self::accumulate(grads, args.unary, Value::Matrix(du));
                Self::accumulate(grads, args.pairwise, Value::Vector(dv));
                Self::accumulate(grads, args.wp, Value::Scalar(dwp));
                Self::accumulate(grads, args.wz, Value::Scalar(dwz));
            }
            Op::SampleAnchor { x, ste, enabled } => {
                // identity pass-through for any direct consumers
                if let Some(g) = g {
                    Self::accumulate(grads, *x, g.clone());
                }
                if !enabled {
                    return;
                }
                let s = node.value.as_matrix().expect("matrix");
                let sf = s.as_slice().expect("contiguous");
                let total: f64 = sf.iter().sum();
                if total <= 0.0 {
                    return;
                }
                let buf = ste.borrow();
                let sum_dldb: f64 = buf.dldb.iter().sum();
                let mut dx = Array2::zeros(s.raw_dim());
                {
                    let dxf = dx.as_slice_mut().expect("contiguous");
                    for r in 0..sf.len() {
                        dxf[r] = (buf.dldb[r] - sf[r] / total * sum_dldb) / total;
                    }
                }
                Self::accumulate(grads, *x, Value::Matrix(dx));
            }
            Op::CrossEntropy { q, gt, rows } => {
                let g = g.expect("visited with grad").as_scalar().expect("scalar");
                let qv = self.nodes[*q].value.as_matrix().expect("matrix");
                let (_, n2) = qv.dim();
                let mut dq = Array2::zeros(qv.raw_dim());
                for i in 0..*rows {
                    for j in 0..n2 {
                        let raw = qv[(i, j)];
                        // clamped entries sit on a flat of the loss
                        if !(CE_CLAMP_LO..=CE_CLAMP_HI).contains(&raw) {
                            continue;
                        }
                        dq[(i, j)] = if j == gt[i] { -g / raw } else { g / (1.0 - raw) };
                    }
                }
                Self::accumulate(grads, *q, Value::Matrix(dq));
            }
        }
    }
}

fn value_dot(a: &Value, b: &Value) -> f64 {
    match (a, b) {
        (Value::Scalar(x), Value::Scalar(y)) => x * y,
        (Value::Vector(x), Value::Vector(y)) => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        (Value::Matrix(x), Value::Matrix(y)) => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        (Value::Tensor(x), Value::Tensor(y)) => x.iter().zip(y).map(|(a, b)| a * b).sum(),
        _ => panic!("dot shape mismatch"),
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, the softplus derivative.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse softplus: the raw value whose softplus equals `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1), stable for small and large y
    if y > 30.0 {
        y
    } else {
        (y.exp_m1()).ln()
    }
}
