//! Reverse-mode automatic differentiation over coarse-grained primitives.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations whose
//! inputs require gradients are recorded with enough state to run their
//! backward rule; operations over constants are stored as constant leaves.
//! [`Tape::backward`] walks the records once in reverse order and accumulates
//! gradients into the differentiable leaves.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::dense::Tensor;
use crate::error::{Error, OpKind, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Spatial padding for [`Tape::conv2d_full_depth`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output keeps the input's spatial extent. For an
    /// even filter extent the extra row/column of padding goes after.
    Same,
    /// No padding; the output shrinks by `filter - 1` along each axis.
    Valid,
}

/// Parameters of a single-direction LSTM layer run by [`Tape::lstm_sequence`].
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// `[input, 4h]`, gate blocks ordered input, forget, output, candidate.
    pub input: Var,
    /// `[r, 4h]` where `r` is `h`, or the projection size when projecting.
    pub recurrent: Var,
    /// `[4h]`
    pub bias: Var,
    /// Optional recurrent projection `[h, r]`.
    pub projection: Option<Var>,
}

struct LstmCache {
    x: usize,
    wx: usize,
    wh: usize,
    b: usize,
    proj: Option<usize>,
    reverse: bool,
    hidden: usize,
    /// Post-activation gates per time step, `[T, 4h]`.
    gates: Vec<f64>,
    cell: Vec<f64>,
    tanh_cell: Vec<f64>,
    /// Pre-projection outputs `o * tanh(c)`, kept only when projecting.
    unprojected: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, rows: usize, inner: usize, cols: usize },
    Add { a: usize, b: usize, broadcast: bool },
    Mul { a: usize, b: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax { input: usize },
    Dropout { input: usize, scale: Vec<f64> },
    Conv2d { input: usize, filters: usize, bias: usize, pad_top: usize, pad_left: usize },
    GlobalMaxPool2d { input: usize, argmax: Vec<usize> },
    MaskedMaxPool { input: usize, argmax: Vec<usize> },
    ScalarScale { input: usize, scalar: usize },
    Sum(usize),
    PairwiseProduct { q: usize, d: usize },
    Reshape(usize),
    Bce { input: usize, target: f64 },
    Lstm(Box<LstmCache>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::MulElementwise,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Conv2d { .. } => OpKind::Conv2dFullDepth,
            Op::GlobalMaxPool2d { .. } => OpKind::GlobalMaxPool2d,
            Op::MaskedMaxPool { .. } => OpKind::MaskedMaxPoolOverSequence,
            Op::ScalarScale { .. } => OpKind::ScalarScale,
            Op::Sum(_) => OpKind::Sum,
            Op::PairwiseProduct { .. } => OpKind::PairwiseProduct,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Bce { .. } => OpKind::BinaryCrossEntropy,
            Op::Lstm(_) => OpKind::LstmSequence,
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Record of executed primitives for one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn fnv(hash: &mut u64, word: u64) {
    for byte in word.to_le_bytes() {
        *hash ^= u64::from(byte);
        *hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(v.index)
    }

    fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    fn shape_of(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[usize]) -> Result<Var> {
        let kind = op.kind();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: kind });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        let index = self.nodes.len();
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, values),
            requires_grad,
            op,
        });
        Ok(Var { tape: self.id, index })
    }

    /// Records a leaf. Differentiability follows `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: OpKind::Leaf });
        }
        let requires_grad = tensor.requires_grad();
        let mut tensor = tensor;
        if requires_grad && tensor.grad().is_none() {
            tensor.set_requires_grad(true);
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            value: tensor,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var { tape: self.id, index })
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Records a differentiable leaf.
    pub fn variable(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad())
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Result<Option<&[f64]>> {
        Ok(self.nodes[self.idx(v)?].value.grad())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    // ----------------------------------------------------------------- ops

    /// `[n,k] x [k,m] -> [n,m]`, or `[k] x [k,m] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.shape_of(ia).to_vec(), self.shape_of(ib).to_vec());
        let (rows, inner, vector) = match sa.as_slice() {
            [k] => (1, *k, true),
            [n, k] => (*n, *k, false),
            _ => return Err(Error::shape(OpKind::MatMul, &[&sa, &sb], "lhs must be rank 1 or 2")),
        };
        let cols = match sb.as_slice() {
            [k, m] if *k == inner => *m,
            _ => return Err(Error::shape(OpKind::MatMul, &[&sa, &sb], "inner extents differ")),
        };
        let av = self.node(ia).value.values();
        let bv = self.node(ib).value.values();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let orow = &mut out[i * cols..(i + 1) * cols];
            for p in 0..inner {
                let x = av[i * inner + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * cols..(p + 1) * cols];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let shape = if vector { vec![cols] } else { vec![rows, cols] };
        self.push(shape, out, Op::MatMul { a: ia, b: ib, rows, inner, cols }, &[ia, ib])
    }

    /// Elementwise sum of equal shapes, or a row-broadcast when `b` is rank 1
    /// and matches the last extent of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.shape_of(ia).to_vec(), self.shape_of(ib).to_vec());
        let broadcast = if sa == sb {
            false
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            true
        } else {
            return Err(Error::shape(OpKind::Add, &[&sa, &sb], "shapes must match or rhs must be a row bias"));
        };
        let av = self.node(ia).value.values();
        let bv = self.node(ib).value.values();
        let out: Vec<f64> = if broadcast {
            let c = sb[0];
            av.iter().enumerate().map(|(i, x)| x + bv[i % c]).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        self.push(sa, out, Op::Add { a: ia, b: ib, broadcast }, &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.shape_of(ia).to_vec(), self.shape_of(ib).to_vec());
        if sa != sb {
            return Err(Error::shape(OpKind::MulElementwise, &[&sa, &sb], "shapes must match"));
        }
        let out = self.node(ia).value.values().iter().zip(self.node(ib).value.values()).map(|(x, y)| x * y).collect();
        self.push(sa, out, Op::Mul { a: ia, b: ib }, &[ia, ib])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape(OpKind::Concat, &[], "no inputs"));
        }
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.shape_of(idxs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(OpKind::Concat, &[&first], format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &i in &idxs {
            let s = self.shape_of(i);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                let shapes: Vec<&[usize]> = idxs.iter().map(|&j| self.shape_of(j)).collect();
                return Err(Error::shape(OpKind::Concat, &shapes, format!("extents differ off axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idxs {
                let chunk = self.shape_of(i)[axis] * inner;
                out.extend_from_slice(&self.node(i).value.values()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(shape, out, Op::Concat { inputs: idxs.clone(), axis }, &idxs)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, v: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let i = self.idx(v)?;
        let s = self.shape_of(i).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(OpKind::Slice, &[&s], format!("slice {start}..{} on axis {axis}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let vals = self.node(i).value.values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            out.extend_from_slice(&vals[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(shape, out, Op::Slice { input: i, axis, start }, &[i])
    }

    fn unary(&mut self, v: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let i = self.idx(v)?;
        let shape = self.shape_of(i).to_vec();
        let out = self.node(i).value.values().iter().map(|&x| f(x)).collect();
        self.push(shape, out, op(i), &[i])
    }

    pub fn sigmoid(&mut self, v: Var) -> Result<Var> {
        self.unary(v, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, v: Var) -> Result<Var> {
        self.unary(v, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, v: Var) -> Result<Var> {
        self.unary(v, |x| x.max(0.0), Op::Relu)
    }

    /// Softmax over the last axis (rank 1 or 2). Entries whose mask is false
    /// receive weight zero; every row needs at least one unmasked entry.
    pub fn softmax(&mut self, v: Var, mask: Option<&[bool]>) -> Result<Var> {
        let i = self.idx(v)?;
        let shape = self.shape_of(i).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        if shape.len() > 2 {
            return Err(Error::shape(OpKind::Softmax, &[&shape], "rank must be 1 or 2"));
        }
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::shape(OpKind::Softmax, &[&shape, &[m.len()]], "mask length differs from last extent"));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Empty("softmax over an all-masked row".into()));
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let vals = self.node(i).value.values();
        let mut out = vec![0.0; vals.len()];
        for (row, orow) in vals.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = (0..cols).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in (0..cols).filter(|&j| keep(j)) {
                orow[j] = (row[j] - max).exp();
                total += orow[j];
            }
            orow.iter_mut().for_each(|x| *x /= total);
        }
        self.push(shape, out, Op::Softmax { input: i }, &[i])
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. Returns `v`
    /// unchanged when `train` is false or `p` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, v: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        let i = self.idx(v)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(v);
        }
        let shape = self.shape_of(i).to_vec();
        let keep_scale = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.node(i).value.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let out = self.node(i).value.values().iter().zip(&scale).map(|(x, s)| x * s).collect();
        self.push(shape, out, Op::Dropout { input: i, scale }, &[i])
    }

    /// 2-D convolution whose filters span the full channel depth.
    ///
    /// `input` is `[H, W, C]`, `filters` is `[F, fh, fw, C]` and `bias` is
    /// `[F]`; the result is `[H', W', F]`.
    pub fn conv2d_full_depth(&mut self, input: Var, filters: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (ii, fi, bi) = (self.idx(input)?, self.idx(filters)?, self.idx(bias)?);
        let (si, sf, sb) = (self.shape_of(ii).to_vec(), self.shape_of(fi).to_vec(), self.shape_of(bi).to_vec());
        let err = |reason: &str| Error::shape(OpKind::Conv2dFullDepth, &[&si, &sf, &sb], reason);
        let [h, w, c] = si[..] else { return Err(err("input must be [H, W, C]")) };
        let [nf, fh, fw, fc] = sf[..] else { return Err(err("filters must be [F, fh, fw, C]")) };
        if fc != c {
            return Err(err("filters must span the full channel depth"));
        }
        if sb != [nf] {
            return Err(err("bias must be [F]"));
        }
        let (ho, wo, pad_top, pad_left) = match padding {
            Padding::Same => (h, w, (fh - 1) / 2, (fw - 1) / 2),
            Padding::Valid => {
                if fh > h || fw > w {
                    return Err(err("filter larger than input under valid padding"));
                }
                (h - fh + 1, w - fw + 1, 0, 0)
            }
        };
        let x = self.node(ii).value.values();
        let k = self.node(fi).value.values();
        let b = self.node(bi).value.values();
        let mut out = vec![0.0; ho * wo * nf];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * nf..(oy * wo + ox + 1) * nf];
                o.copy_from_slice(b);
                for dy in 0..fh {
                    let Some(iy) = (oy + dy).checked_sub(pad_top).filter(|&y| y < h) else { continue };
                    for dx in 0..fw {
                        let Some(ix) = (ox + dx).checked_sub(pad_left).filter(|&x| x < w) else { continue };
                        let px = &x[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                        for (f, of) in o.iter_mut().enumerate() {
                            let kf = &k[((f * fh + dy) * fw + dx) * c..((f * fh + dy) * fw + dx + 1) * c];
                            *of += kf.iter().zip(px).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
        self.push(
            vec![ho, wo, nf],
            out,
            Op::Conv2d { input: ii, filters: fi, bias: bi, pad_top, pad_left },
            &[ii, fi, bi],
        )
    }

    /// Maximum over both spatial axes of `[H, W, C]`, giving `[C]`.
    pub fn global_maxpool_2d(&mut self, v: Var) -> Result<Var> {
        let i = self.idx(v)?;
        let s = self.shape_of(i).to_vec();
        let [h, w, c] = s[..] else {
            return Err(Error::shape(OpKind::GlobalMaxPool2d, &[&s], "input must be [H, W, C]"));
        };
        let vals = self.node(i).value.values();
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0; c];
        for p in 0..h * w {
            for ch in 0..c {
                let x = vals[p * c + ch];
                if x > out[ch] {
                    out[ch] = x;
                    argmax[ch] = p * c + ch;
                }
            }
        }
        self.push(vec![c], out, Op::GlobalMaxPool2d { input: i, argmax }, &[i])
    }

    /// Maximum over the rows of `[T, D]` whose mask entry is true, giving `[D]`.
    pub fn masked_maxpool_over_sequence(&mut self, v: Var, mask: &[bool]) -> Result<Var> {
        let i = self.idx(v)?;
        let s = self.shape_of(i).to_vec();
        let [t, d] = s[..] else {
            return Err(Error::shape(OpKind::MaskedMaxPoolOverSequence, &[&s], "input must be [T, D]"));
        };
        if mask.len() != t {
            return Err(Error::shape(OpKind::MaskedMaxPoolOverSequence, &[&s, &[mask.len()]], "mask length differs from T"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Empty("max-pool over an all-masked sequence".into()));
        }
        let vals = self.node(i).value.values();
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![0; d];
        for row in (0..t).filter(|&r| mask[r]) {
            for col in 0..d {
                let x = vals[row * d + col];
                if x > out[col] {
                    out[col] = x;
                    argmax[col] = row * d + col;
                }
            }
        }
        self.push(vec![d], out, Op::MaskedMaxPool { input: i, argmax }, &[i])
    }

    /// Multiplies every entry of `v` by the single value held in `scalar`.
    pub fn scalar_scale(&mut self, v: Var, scalar: Var) -> Result<Var> {
        let (i, si) = (self.idx(v)?, self.idx(scalar)?);
        let ss = self.shape_of(si).to_vec();
        if ss.iter().product::<usize>() != 1 {
            return Err(Error::shape(OpKind::ScalarScale, &[self.shape_of(i), &ss], "scale must hold one value"));
        }
        let s = self.node(si).value.values()[0];
        let shape = self.shape_of(i).to_vec();
        let out = self.node(i).value.values().iter().map(|x| x * s).collect();
        self.push(shape, out, Op::ScalarScale { input: i, scalar: si }, &[i, si])
    }

    pub fn sum(&mut self, v: Var) -> Result<Var> {
        let i = self.idx(v)?;
        let total = self.node(i).value.values().iter().sum();
        self.push(vec![1], vec![total], Op::Sum(i), &[i])
    }

    /// `[m, k]` and `[n, k]` to `[m, n, k]` with `out[i, j, c] = q[i, c] * d[j, c]`.
    pub fn pairwise_product(&mut self, q: Var, d: Var) -> Result<Var> {
        let (iq, id) = (self.idx(q)?, self.idx(d)?);
        let (sq, sd) = (self.shape_of(iq).to_vec(), self.shape_of(id).to_vec());
        let (&[m, k], &[n, k2]) = (&sq[..], &sd[..]) else {
            return Err(Error::shape(OpKind::PairwiseProduct, &[&sq, &sd], "inputs must be rank 2"));
        };
        if k != k2 {
            return Err(Error::shape(OpKind::PairwiseProduct, &[&sq, &sd], "channel extents differ"));
        }
        let qv = self.node(iq).value.values();
        let dv = self.node(id).value.values();
        let mut out = Vec::with_capacity(m * n * k);
        for i in 0..m {
            let qr = &qv[i * k..(i + 1) * k];
            for j in 0..n {
                out.extend(qr.iter().zip(&dv[j * k..(j + 1) * k]).map(|(a, b)| a * b));
            }
        }
        self.push(vec![m, n, k], out, Op::PairwiseProduct { q: iq, d: id }, &[iq, id])
    }

    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(v)?;
        let s = self.shape_of(i).to_vec();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != s.iter().product::<usize>() {
            return Err(Error::shape(OpKind::Reshape, &[&s, shape], "element counts differ"));
        }
        let out = self.node(i).value.values().to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(i), &[i])
    }

    /// Binary cross-entropy of a probability against a target in `[0, 1]`.
    /// The probability is clamped to `[eps, 1 - eps]` with `eps = 1e-12`.
    pub fn binary_cross_entropy(&mut self, p: Var, target: f64) -> Result<Var> {
        let i = self.idx(p)?;
        let s = self.shape_of(i).to_vec();
        if s.iter().product::<usize>() != 1 {
            return Err(Error::shape(OpKind::BinaryCrossEntropy, &[&s], "prediction must be a scalar"));
        }
        let prob = self.node(i).value.values()[0];
        if !(prob > 0.0 && prob < 1.0) {
            return Err(Error::InvalidArgument(format!("probability {prob} outside (0, 1)")));
        }
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::InvalidArgument(format!("target {target} outside [0, 1]")));
        }
        let q = prob.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(target * q.ln() + (1.0 - target) * (1.0 - q).ln());
        self.push(vec![1], vec![loss], Op::Bce { input: i, target }, &[i])
    }

    /// Runs one LSTM direction over the rows of `x` (`[T, input]`), returning
    /// the per-step outputs `[T, r]`. With `reverse` the sequence is consumed
    /// from the last row to the first; output row `t` always belongs to input
    /// row `t`.
    pub fn lstm_sequence(&mut self, x: Var, weights: LstmWeights, reverse: bool) -> Result<Var> {
        let ix = self.idx(x)?;
        let iwx = self.idx(weights.input)?;
        let iwh = self.idx(weights.recurrent)?;
        let ib = self.idx(weights.bias)?;
        let ip = weights.projection.map(|p| self.idx(p)).transpose()?;
        let sx = self.shape_of(ix).to_vec();
        let swx = self.shape_of(iwx).to_vec();
        let swh = self.shape_of(iwh).to_vec();
        let sb = self.shape_of(ib).to_vec();
        let err = |reason: &str| Error::shape(OpKind::LstmSequence, &[&sx, &swx, &swh, &sb], reason);
        let [steps, input] = sx[..] else { return Err(err("input must be [T, input]")) };
        let [wi, four_h] = swx[..] else { return Err(err("input weights must be [input, 4h]")) };
        if wi != input || four_h % 4 != 0 {
            return Err(err("input weights must be [input, 4h]"));
        }
        let hidden = four_h / 4;
        let r = match ip {
            Some(p) => match self.shape_of(p) {
                &[ph, pr] if ph == hidden => pr,
                _ => return Err(err("projection must be [h, r]")),
            },
            None => hidden,
        };
        if swh != [r, four_h] || sb != [four_h] {
            return Err(err("recurrent weights must be [r, 4h] and bias [4h]"));
        }

        let xv = self.node(ix).value.values();
        let wx = self.node(iwx).value.values();
        let wh = self.node(iwh).value.values();
        let bv = self.node(ib).value.values();
        let pv = ip.map(|p| self.node(p).value.values());

        let mut gates = vec![0.0; steps * four_h];
        let mut cell = vec![0.0; steps * hidden];
        let mut tanh_cell = vec![0.0; steps * hidden];
        let mut unprojected = if pv.is_some() { vec![0.0; steps * hidden] } else { Vec::new() };
        let mut out = vec![0.0; steps * r];
        let mut h_prev = vec![0.0; r];
        let mut c_prev = vec![0.0; hidden];
        let mut z = vec![0.0; four_h];
        let mut m = vec![0.0; hidden];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            z.copy_from_slice(bv);
            for (p, &xp) in xv[t * input..(t + 1) * input].iter().enumerate() {
                if xp != 0.0 {
                    for (zq, w) in z.iter_mut().zip(&wx[p * four_h..(p + 1) * four_h]) {
                        *zq += xp * w;
                    }
                }
            }
            for (p, &hp) in h_prev.iter().enumerate() {
                if hp != 0.0 {
                    for (zq, w) in z.iter_mut().zip(&wh[p * four_h..(p + 1) * four_h]) {
                        *zq += hp * w;
                    }
                }
            }
            let g = &mut gates[t * four_h..(t + 1) * four_h];
            for j in 0..hidden {
                let ig = sigmoid(z[j]);
                let fg = sigmoid(z[hidden + j]);
                let og = sigmoid(z[2 * hidden + j]);
                let cg = z[3 * hidden + j].tanh();
                g[j] = ig;
                g[hidden + j] = fg;
                g[2 * hidden + j] = og;
                g[3 * hidden + j] = cg;
                let c = fg * c_prev[j] + ig * cg;
                let tc = c.tanh();
                cell[t * hidden + j] = c;
                tanh_cell[t * hidden + j] = tc;
                m[j] = og * tc;
                c_prev[j] = c;
            }
            let orow = &mut out[t * r..(t + 1) * r];
            match pv {
                Some(proj) => {
                    unprojected[t * hidden..(t + 1) * hidden].copy_from_slice(&m);
                    orow.iter_mut().for_each(|o| *o = 0.0);
                    for (p, &mp) in m.iter().enumerate() {
                        for (o, w) in orow.iter_mut().zip(&proj[p * r..(p + 1) * r]) {
                            *o += mp * w;
                        }
                    }
                }
                None => orow.copy_from_slice(&m),
            }
            h_prev.copy_from_slice(orow);
        }
        let cache = LstmCache {
            x: ix,
            wx: iwx,
            wh: iwh,
            b: ib,
            proj: ip,
            reverse,
            hidden,
            gates,
            cell,
            tanh_cell,
            unprojected,
        };
        let mut inputs = vec![ix, iwx, iwh, ib];
        inputs.extend(ip);
        self.push(vec![steps, r], out, Op::Lstm(Box::new(cache)), &inputs)
    }

    /// Hash of every recorded piecewise-linear branch decision (ReLU signs and
    /// max-pool winners). Two forward passes with equal signatures lie on the
    /// same smooth piece of the computed function.
    pub fn activation_signature(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(i) => {
                    for &x in self.nodes[*i].value.values() {
                        fnv(&mut hash, u64::from(x > 0.0));
                    }
                }
                Op::GlobalMaxPool2d { argmax, .. } | Op::MaskedMaxPool { argmax, .. } => {
                    for &a in argmax {
                        fnv(&mut hash, a as u64);
                    }
                }
                _ => {}
            }
        }
        hash
    }

    // ------------------------------------------------------------ backward

    /// Accumulates `d loss / d leaf` into every differentiable leaf reachable
    /// from `loss`. Calling it twice without [`Tape::zero_grad`] doubles the
    /// stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        let shape = self.shape_of(li).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(buf) = self.nodes[i].value.grad_mut() {
                    buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x);
                }
                continue;
            }
            backward_node(&self.nodes, i, &g, &mut grads);
        }
        Ok(())
    }
}

const BCE_EPS: f64 = 1e-12;

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], i: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]))
}

fn backward_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let val = |j: usize| nodes[j].value.values();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, rows, inner, cols } => {
            let (av, bv) = (val(a), val(b));
            if let Some(da) = slot(nodes, grads, a) {
                for r in 0..rows {
                    let grow = &g[r * cols..(r + 1) * cols];
                    for p in 0..inner {
                        da[r * inner + p] += grow.iter().zip(&bv[p * cols..(p + 1) * cols]).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, b) {
                for r in 0..rows {
                    let grow = &g[r * cols..(r + 1) * cols];
                    for p in 0..inner {
                        let x = av[r * inner + p];
                        if x != 0.0 {
                            for (d, gv) in db[p * cols..(p + 1) * cols].iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                }
            }
        }
        &Op::Add { a, b, broadcast } => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            if let Some(db) = slot(nodes, grads, b) {
                if broadcast {
                    let c = db.len();
                    for (k, x) in g.iter().enumerate() {
                        db[k % c] += x;
                    }
                } else {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
        }
        &Op::Mul { a, b } => {
            let bv = val(b);
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, x), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += x * y;
                }
            }
            let av = val(a);
            if let Some(db) = slot(nodes, grads, b) {
                for ((d, x), y) in db.iter_mut().zip(g).zip(av) {
                    *d += x * y;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let chunk = nodes[inp].value.shape()[*axis] * inner;
                if let Some(d) = slot(nodes, grads, inp) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        d[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                offset += chunk;
            }
        }
        &Op::Slice { input, axis, start } => {
            let s = nodes[input].value.shape().to_vec();
            let len = node.value.shape()[axis];
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            if let Some(d) = slot(nodes, grads, input) {
                for o in 0..outer {
                    let base = o * s[axis] * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    d[base..base + len * inner].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        &Op::Sigmoid(input) => {
            let y = node.value.values();
            if let Some(d) = slot(nodes, grads, input) {
                for ((dv, x), yv) in d.iter_mut().zip(g).zip(y) {
                    *dv += x * yv * (1.0 - yv);
                }
            }
        }
        &Op::Tanh(input) => {
            let y = node.value.values();
            if let Some(d) = slot(nodes, grads, input) {
                for ((dv, x), yv) in d.iter_mut().zip(g).zip(y) {
                    *dv += x * (1.0 - yv * yv);
                }
            }
        }
        &Op::Relu(input) => {
            let xin = val(input);
            if let Some(d) = slot(nodes, grads, input) {
                for ((dv, x), xi) in d.iter_mut().zip(g).zip(xin) {
                    if *xi > 0.0 {
                        *dv += x;
                    }
                }
            }
        }
        &Op::Softmax { input } => {
            let y = node.value.values();
            let cols = *node.value.shape().last().unwrap();
            if let Some(d) = slot(nodes, grads, input) {
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Dropout { input, scale } => {
            if let Some(d) = slot(nodes, grads, *input) {
                for ((dv, x), s) in d.iter_mut().zip(g).zip(scale) {
                    *dv += x * s;
                }
            }
        }
        &Op::Conv2d { input, filters, bias, pad_top, pad_left } => {
            let (h, w, c) = {
                let s = nodes[input].value.shape();
                (s[0], s[1], s[2])
            };
            let (nf, fh, fw) = {
                let s = nodes[filters].value.shape();
                (s[0], s[1], s[2])
            };
            let (ho, wo) = (node.value.shape()[0], node.value.shape()[1]);
            let x = val(input);
            let k = val(filters);
            if let Some(db) = slot(nodes, grads, bias) {
                for p in 0..ho * wo {
                    for f in 0..nf {
                        db[f] += g[p * nf + f];
                    }
                }
            }
            let window = |oy: usize, ox: usize, dy: usize, dx: usize| -> Option<usize> {
                let iy = (oy + dy).checked_sub(pad_top).filter(|&y| y < h)?;
                let ix = (ox + dx).checked_sub(pad_left).filter(|&v| v < w)?;
                Some(iy * w + ix)
            };
            if let Some(dk) = slot(nodes, grads, filters) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = &g[(oy * wo + ox) * nf..(oy * wo + ox + 1) * nf];
                        for dy in 0..fh {
                            for dx in 0..fw {
                                let Some(p) = window(oy, ox, dy, dx) else { continue };
                                let px = &x[p * c..(p + 1) * c];
                                for (f, &gf) in go.iter().enumerate() {
                                    if gf == 0.0 {
                                        continue;
                                    }
                                    let base = ((f * fh + dy) * fw + dx) * c;
                                    for (kv, xv) in dk[base..base + c].iter_mut().zip(px) {
                                        *kv += gf * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dx_buf) = slot(nodes, grads, input) {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = &g[(oy * wo + ox) * nf..(oy * wo + ox + 1) * nf];
                        for dy in 0..fh {
                            for dx in 0..fw {
                                let Some(p) = window(oy, ox, dy, dx) else { continue };
                                let dpx = &mut dx_buf[p * c..(p + 1) * c];
                                for (f, &gf) in go.iter().enumerate() {
                                    if gf == 0.0 {
                                        continue;
                                    }
                                    let base = ((f * fh + dy) * fw + dx) * c;
                                    for (d, kv) in dpx.iter_mut().zip(&k[base..base + c]) {
                                        *d += gf * kv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::GlobalMaxPool2d { input, argmax } | Op::MaskedMaxPool { input, argmax } => {
            if let Some(d) = slot(nodes, grads, *input) {
                for (&a, x) in argmax.iter().zip(g) {
                    d[a] += x;
                }
            }
        }
        &Op::ScalarScale { input, scalar } => {
            let s = val(scalar)[0];
            let xv = val(input);
            if let Some(ds) = slot(nodes, grads, scalar) {
                ds[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            }
            if let Some(d) = slot(nodes, grads, input) {
                d.iter_mut().zip(g).for_each(|(dv, x)| *dv += x * s);
            }
        }
        &Op::Sum(input) => {
            if let Some(d) = slot(nodes, grads, input) {
                d.iter_mut().for_each(|dv| *dv += g[0]);
            }
        }
        &Op::PairwiseProduct { q, d } => {
            let (m, k) = (nodes[q].value.shape()[0], nodes[q].value.shape()[1]);
            let n = nodes[d].value.shape()[0];
            let (qv, dv) = (val(q), val(d));
            if let Some(dq) = slot(nodes, grads, q) {
                for i in 0..m {
                    for j in 0..n {
                        let base = (i * n + j) * k;
                        for c in 0..k {
                            dq[i * k + c] += g[base + c] * dv[j * k + c];
                        }
                    }
                }
            }
            if let Some(dd) = slot(nodes, grads, d) {
                for i in 0..m {
                    for j in 0..n {
                        let base = (i * n + j) * k;
                        for c in 0..k {
                            dd[j * k + c] += g[base + c] * qv[i * k + c];
                        }
                    }
                }
            }
        }
        &Op::Reshape(input) => {
            if let Some(d) = slot(nodes, grads, input) {
                d.iter_mut().zip(g).for_each(|(dv, x)| *dv += x);
            }
        }
        &Op::Bce { input, target } => {
            let p = val(input)[0].clamp(BCE_EPS, 1.0 - BCE_EPS);
            if let Some(d) = slot(nodes, grads, input) {
                d[0] += g[0] * (-target / p + (1.0 - target) / (1.0 - p));
            }
        }
        Op::Lstm(cache) => lstm_backward(nodes, node, cache, g, grads),
    }
}

fn lstm_backward(nodes: &[Node], node: &Node, cache: &LstmCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let h = cache.hidden;
    let four_h = 4 * h;
    let steps = node.value.shape()[0];
    let r = node.value.shape()[1];
    let input = nodes[cache.x].value.shape()[1];
    let out = node.value.values();
    let xv = nodes[cache.x].value.values();
    let wx = nodes[cache.wx].value.values();
    let wh = nodes[cache.wh].value.values();
    let pv = cache.proj.map(|p| nodes[p].value.values());

    let mut dwx = vec![0.0; input * four_h];
    let mut dwh = vec![0.0; r * four_h];
    let mut db = vec![0.0; four_h];
    let mut dproj = vec![0.0; if pv.is_some() { h * r } else { 0 }];
    let mut dx = vec![0.0; steps * input];

    let time = |s: usize| if cache.reverse { steps - 1 - s } else { s };
    let mut dh_rec = vec![0.0; r];
    let mut dc_next = vec![0.0; h];
    let mut dh = vec![0.0; r];
    let mut dm = vec![0.0; h];
    let mut dz = vec![0.0; four_h];
    for s in (0..steps).rev() {
        let t = time(s);
        for j in 0..r {
            dh[j] = g[t * r + j] + dh_rec[j];
        }
        match pv {
            Some(proj) => {
                let m = &cache.unprojected[t * h..(t + 1) * h];
                for p in 0..h {
                    let row = &proj[p * r..(p + 1) * r];
                    dm[p] = row.iter().zip(&dh).map(|(a, b)| a * b).sum();
                    for (dp, dhv) in dproj[p * r..(p + 1) * r].iter_mut().zip(&dh) {
                        *dp += m[p] * dhv;
                    }
                }
            }
            None => dm.copy_from_slice(&dh),
        }
        let gates = &cache.gates[t * four_h..(t + 1) * four_h];
        for j in 0..h {
            let (ig, fg, og, cg) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
            let tc = cache.tanh_cell[t * h + j];
            let d_o = dm[j] * tc;
            let dc = dm[j] * og * (1.0 - tc * tc) + dc_next[j];
            let c_prev = if s > 0 { cache.cell[time(s - 1) * h + j] } else { 0.0 };
            dz[j] = dc * cg * ig * (1.0 - ig);
            dz[h + j] = dc * c_prev * fg * (1.0 - fg);
            dz[2 * h + j] = d_o * og * (1.0 - og);
            dz[3 * h + j] = dc * ig * (1.0 - cg * cg);
            dc_next[j] = dc * fg;
        }
        db.iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
        for p in 0..input {
            let xp = xv[t * input + p];
            let wrow = &wx[p * four_h..(p + 1) * four_h];
            dx[t * input + p] += wrow.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>();
            if xp != 0.0 {
                for (d, z) in dwx[p * four_h..(p + 1) * four_h].iter_mut().zip(&dz) {
                    *d += xp * z;
                }
            }
        }
        for p in 0..r {
            let hp = if s > 0 { out[time(s - 1) * r + p] } else { 0.0 };
            let wrow = &wh[p * four_h..(p + 1) * four_h];
            dh_rec[p] = wrow.iter().zip(&dz).map(|(a, b)| a * b).sum();
            if hp != 0.0 {
                for (d, z) in dwh[p * four_h..(p + 1) * four_h].iter_mut().zip(&dz) {
                    *d += hp * z;
                }
            }
        }
    }
    let mut add = |idx: usize, src: &[f64]| {
        if let Some(d) = slot(nodes, grads, idx) {
            d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    };
    add(cache.x, &dx);
    add(cache.wx, &dwx);
    add(cache.wh, &dwh);
    add(cache.b, &db);
    if let Some(p) = cache.proj {
        add(p, &dproj);
    }
}
