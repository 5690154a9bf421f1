//! Dense 64-bit tensors with a single-use reverse-mode tape and an Adam
//! optimizer.
//!
//! Everything learnable in the crate is expressed as a sequence of tape
//! operations over row-major matrices. A 1-D tensor of length `n` is treated
//! as a single `1 × n` row by the matrix operations; scalars have shape `[1]`.
//!
//! Parameters live in a [`ParamStore`]. A forward pass copies the parameters it
//! needs onto a [`Tape`] as leaves; [`Tape::backward`] then accumulates
//! d(loss)/d(parameter) into the store, where [`Adam::step`] consumes them.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: every entry of a row is masked")]
    AllMasked { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view of the tensor; 1-D tensors are one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap_or(&1);
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a tensor held in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named learnable tensors plus their accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(None);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Overwrite every value with the corresponding value of `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.len(), other.len(), "parameter stores differ in layout");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.data.copy_from_slice(&src.data);
        }
    }

    /// Flat copy of all parameter values, in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Order-sensitive FNV-1a hash over the bit patterns of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.values {
            for v in &t.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        let shape = self.values[id.0].shape.clone();
        match &mut self.grads[id.0] {
            Some(t) => t.data.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(Tensor {
                    shape,
                    data: g.to_vec(),
                })
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    MaskedSoftmax { input: Var, mask: Vec<bool> },
    MaskedLogSoftmax { input: Var, mask: Vec<bool> },
    MaskedMeanSegments {
        input: Var,
        segments: Vec<(usize, usize)>,
        mask: Vec<bool>,
    },
    SplitHeads { input: Var, blocks: usize, heads: usize },
    MergeHeads { input: Var, blocks: usize, heads: usize },
    BlockScores { q: Var, k: Var, block: usize, scale: f64 },
    BlockApply { alpha: Var, v: Var, block: usize },
    SelectCols { input: Var, idx: Vec<usize> },
    SumGroups { input: Var, group: usize },
    Sum(Var),
    Mse { pred: Var, target: Vec<f64> },
    PpoClip {
        logp: Var,
        old_logp: Vec<f64>,
        adv: Vec<f64>,
        clip: f64,
    },
}

/// Single-use record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    consumed: bool,
}

fn matmul_into(a: &[f64], ad: (usize, usize), ta: bool, b: &[f64], bd: (usize, usize), tb: bool, out: &mut [f64], beta: f64) {
    let av = ArrayView2::from_shape(ad, a).expect("lhs layout");
    let bv = ArrayView2::from_shape(bd, b).expect("rhs layout");
    let av = if ta { av.reversed_axes() } else { av };
    let bv = if tb { bv.reversed_axes() } else { bv };
    let (m, n) = (av.nrows(), bv.ncols());
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("out layout");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Drop every recorded value; parameters in the store are untouched.
    pub fn clear(&mut self) {
        self.values.clear();
        self.ops.clear();
        self.consumed = false;
    }

    fn push(&mut self, op: &'static str, value: Tensor, record: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.values.push(value);
        self.ops.push(record);
        Ok(Var(self.values.len() - 1))
    }

    /// Record a constant input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Record a parameter leaf; its gradient flows back into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push("param", store.value(id).clone(), Op::Param(id))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.values[v.0].dims2()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.values[a.0].shape.clone(),
            right: self.values[b.0].shape.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.values[a.0].data, (m, k), false, &self.values[b.0].data, (k, n), false, &mut out, 0.0);
        self.push("matmul", Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b))
    }

    /// Elementwise sum of two tensors with identical shapes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape != self.values[b.0].shape {
            return Err(self.mismatch("add", a, b));
        }
        let data = self.values[a.0].data.iter().zip(&self.values[b.0].data).map(|(x, y)| x + y).collect();
        let shape = self.values[a.0].shape.clone();
        self.push("add", Tensor { shape, data }, Op::Add(a, b))
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.values[row.0].len() != c {
            return Err(self.mismatch("add_row", a, row));
        }
        let rv = &self.values[row.0].data;
        let mut data = self.values[a.0].data.clone();
        for i in 0..r {
            data[i * c..(i + 1) * c].iter_mut().zip(rv).for_each(|(x, y)| *x += y);
        }
        let shape = self.values[a.0].shape.clone();
        self.push("add_row", Tensor { shape, data }, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape != self.values[b.0].shape {
            return Err(self.mismatch("sub", a, b));
        }
        let data = self.values[a.0].data.iter().zip(&self.values[b.0].data).map(|(x, y)| x - y).collect();
        let shape = self.values[a.0].shape.clone();
        self.push("sub", Tensor { shape, data }, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape != self.values[b.0].shape {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self.values[a.0].data.iter().zip(&self.values[b.0].data).map(|(x, y)| x * y).collect();
        let shape = self.values[a.0].shape.clone();
        self.push("mul", Tensor { shape, data }, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        let data = t.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = t.shape.clone();
        self.push("relu", Tensor { shape, data }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = &self.values[a.0];
        let data = t.data.iter().map(|x| x.exp()).collect();
        let shape = t.shape.clone();
        self.push("exp", Tensor { shape, data }, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = &self.values[a.0];
        let data = t.data.iter().map(|x| x * c).collect();
        let shape = t.shape.clone();
        self.push("scale", Tensor { shape, data }, Op::Scale(a, c))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        };
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(self.mismatch("concat", first, p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.values[p.0].row(r));
            }
        }
        self.push(
            "concat",
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::Concat(parts.to_vec()),
        )
    }

    fn check_mask(&self, op: &'static str, a: Var, mask: &[bool]) -> Result<(usize, usize)> {
        let (r, c) = self.dims(a);
        if mask.len() != r * c {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.values[a.0].shape.clone(),
                right: vec![mask.len()],
            });
        }
        for i in 0..r {
            if !mask[i * c..(i + 1) * c].iter().any(|&m| m) {
                return Err(TensorError::AllMasked { op });
            }
        }
        Ok((r, c))
    }

    /// Row-wise softmax restricted to entries whose mask is true; masked
    /// entries are exactly zero. `mask` has one flag per element.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = self.check_mask("masked_softmax", a, &mask)?;
        let src = &self.values[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&src[i * c..(i + 1) * c], &mask[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let shape = self.values[a.0].shape.clone();
        self.push("masked_softmax", Tensor { shape, data }, Op::MaskedSoftmax { input: a, mask })
    }

    /// Row-wise log-softmax over unmasked entries; masked entries read 0 and
    /// carry no gradient.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = self.check_mask("masked_log_softmax", a, &mask)?;
        let src = &self.values[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let max = row.iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                if m[j] {
                    data[i * c + j] = row[j] - lse;
                }
            }
        }
        let shape = self.values[a.0].shape.clone();
        self.push("masked_log_softmax", Tensor { shape, data }, Op::MaskedLogSoftmax { input: a, mask })
    }

    /// Mean of the unmasked rows of `a` (an `n × d` matrix), divided by
    /// `max(count, 1)`; returns a length-`d` vector.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, _) = self.dims(a);
        let out = self.masked_mean_segments(a, vec![(0, r)], mask.to_vec())?;
        let d = self.values[out.0].len();
        self.values[out.0].shape = vec![d];
        Ok(out)
    }

    /// Masked mean over contiguous row segments `(start, len)`; one output
    /// row per segment. `mask` has one flag per input row.
    pub fn masked_mean_segments(&mut self, a: Var, segments: Vec<(usize, usize)>, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if mask.len() != r || segments.iter().any(|&(s, l)| s + l > r) {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean",
                left: self.values[a.0].shape.clone(),
                right: vec![mask.len()],
            });
        }
        let src = &self.values[a.0].data;
        let mut data = vec![0.0; segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            let out = &mut data[s * c..(s + 1) * c];
            let mut count = 0usize;
            for row in start..start + len {
                if mask[row] {
                    count += 1;
                    out.iter_mut().zip(&src[row * c..(row + 1) * c]).for_each(|(o, x)| *o += x);
                }
            }
            let denom = count.max(1) as f64;
            out.iter_mut().for_each(|o| *o /= denom);
        }
        let n = segments.len();
        self.push(
            "masked_mean",
            Tensor {
                shape: vec![n, c],
                data,
            },
            Op::MaskedMeanSegments { input: a, segments, mask },
        )
    }

    /// `[blocks*rows, heads*dh]` → `[blocks*heads*rows, dh]`, grouping the
    /// rows of each block by head.
    pub fn split_heads(&mut self, a: Var, blocks: usize, heads: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if blocks == 0 || heads == 0 || r % blocks != 0 || c % heads != 0 {
            return Err(TensorError::Invalid(format!("split_heads: {r}x{c} into {blocks} blocks, {heads} heads")));
        }
        let (rows, dh) = (r / blocks, c / heads);
        let src = &self.values[a.0].data;
        let mut data = vec![0.0; r * c];
        for b in 0..blocks {
            for h in 0..heads {
                for v in 0..rows {
                    let dst = ((b * heads + h) * rows + v) * dh;
                    let s = (b * rows + v) * c + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(
            "split_heads",
            Tensor {
                shape: vec![r * heads, dh],
                data,
            },
            Op::SplitHeads { input: a, blocks, heads },
        )
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, blocks: usize, heads: usize) -> Result<Var> {
        let (r, dh) = self.dims(a);
        if blocks == 0 || heads == 0 || r % (blocks * heads) != 0 {
            return Err(TensorError::Invalid(format!("merge_heads: {r} rows into {blocks} blocks, {heads} heads")));
        }
        let rows = r / (blocks * heads);
        let c = heads * dh;
        let src = &self.values[a.0].data;
        let mut data = vec![0.0; r * dh];
        for b in 0..blocks {
            for h in 0..heads {
                for v in 0..rows {
                    let s = ((b * heads + h) * rows + v) * dh;
                    let dst = (b * rows + v) * c + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(
            "merge_heads",
            Tensor {
                shape: vec![blocks * rows, c],
                data,
            },
            Op::MergeHeads { input: a, blocks, heads },
        )
    }

    /// Per-block scaled dot products: for each group of `block` rows,
    /// `scale * Q_g K_gᵀ`. Output is `[groups*block, block]`.
    pub fn block_scores(&mut self, q: Var, k: Var, block: usize, scale: f64) -> Result<Var> {
        let (r, d) = self.dims(q);
        if self.dims(k) != (r, d) || block == 0 || r % block != 0 {
            return Err(self.mismatch("block_scores", q, k));
        }
        let groups = r / block;
        let mut data = vec![0.0; r * block];
        let (qd, kd) = (&self.values[q.0].data, &self.values[k.0].data);
        for g in 0..groups {
            let base = g * block;
            matmul_into(
                &qd[base * d..(base + block) * d],
                (block, d),
                false,
                &kd[base * d..(base + block) * d],
                (block, d),
                true,
                &mut data[base * block..(base + block) * block],
                0.0,
            );
        }
        data.iter_mut().for_each(|x| *x *= scale);
        self.push(
            "block_scores",
            Tensor {
                shape: vec![r, block],
                data,
            },
            Op::BlockScores { q, k, block, scale },
        )
    }

    /// Per-block weighted sums: for each group, `A_g V_g` where `A_g` is the
    /// `block × block` slice of `alpha`.
    pub fn block_apply(&mut self, alpha: Var, v: Var, block: usize) -> Result<Var> {
        let (r, d) = self.dims(v);
        if self.dims(alpha) != (r, block) || block == 0 || r % block != 0 {
            return Err(self.mismatch("block_apply", alpha, v));
        }
        let groups = r / block;
        let mut data = vec![0.0; r * d];
        let (ad, vd) = (&self.values[alpha.0].data, &self.values[v.0].data);
        for g in 0..groups {
            let base = g * block;
            matmul_into(
                &ad[base * block..(base + block) * block],
                (block, block),
                false,
                &vd[base * d..(base + block) * d],
                (block, d),
                false,
                &mut data[base * d..(base + block) * d],
                0.0,
            );
        }
        self.push(
            "block_apply",
            Tensor {
                shape: vec![r, d],
                data,
            },
            Op::BlockApply { alpha, v, block },
        )
    }

    /// Picks column `idx[r]` from every row `r`; result has shape `[rows]`.
    pub fn select_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(TensorError::ShapeMismatch {
                op: "select_cols",
                left: self.values[a.0].shape.clone(),
                right: vec![idx.len()],
            });
        }
        let src = &self.values[a.0].data;
        let data = idx.iter().enumerate().map(|(row, &col)| src[row * c + col]).collect();
        self.push("select_cols", Tensor { shape: vec![r], data }, Op::SelectCols { input: a, idx })
    }

    /// Sums consecutive groups of `group` entries of a flat tensor.
    pub fn sum_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let n = self.values[a.0].len();
        if group == 0 || !n.is_multiple_of(group) {
            return Err(TensorError::Invalid(format!("sum_groups: {n} entries in groups of {group}")));
        }
        let data: Vec<f64> = self.values[a.0].data.chunks(group).map(|c| c.iter().sum()).collect();
        let shape = vec![data.len()];
        self.push("sum_groups", Tensor { shape, data }, Op::SumGroups { input: a, group })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].data.iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let p = &self.values[pred.0].data;
        if p.len() != target.len() || p.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                left: self.values[pred.0].shape.clone(),
                right: vec![target.len()],
            });
        }
        if target.iter().any(|t| !t.is_finite()) {
            return Err(TensorError::NonFinite { op: "mse" });
        }
        let loss = p.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push("mse", Tensor::scalar(loss), Op::Mse { pred, target })
    }

    /// Negated clipped-ratio surrogate, averaged over the batch:
    /// `-mean(min(r·A, clip(r, 1-c, 1+c)·A))` with `r = exp(logp - old_logp)`.
    pub fn ppo_clip_loss(&mut self, logp: Var, old_logp: Vec<f64>, adv: Vec<f64>, clip: f64) -> Result<Var> {
        let lp = &self.values[logp.0].data;
        if lp.len() != old_logp.len() || lp.len() != adv.len() || lp.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "ppo_clip_loss",
                left: self.values[logp.0].shape.clone(),
                right: vec![old_logp.len(), adv.len()],
            });
        }
        let n = lp.len() as f64;
        let mut total = 0.0;
        for i in 0..lp.len() {
            let r = (lp[i] - old_logp[i]).exp();
            let rc = r.clamp(1.0 - clip, 1.0 + clip);
            total += (r * adv[i]).min(rc * adv[i]);
        }
        self.push(
            "ppo_clip_loss",
            Tensor::scalar(-total / n),
            Op::PpoClip {
                logp,
                old_logp,
                adv,
                clip,
            },
        )
    }

    /// Reverse pass from a scalar `loss`; parameter gradients are added into
    /// `store`. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.ops.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.values[loss.0].len() != 1 {
            return Err(TensorError::NotScalar(self.values[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads, store);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let vals = &self.values;
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (m, k) = vals[a.0].dims2();
                let (_, n) = vals[b.0].dims2();
                let mut ga = vec![0.0; m * k];
                matmul_into(g, (m, n), false, &vals[b.0].data, (k, n), true, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                matmul_into(&vals[a.0].data, (m, k), true, g, (m, n), false, &mut gb, 0.0);
                add_into(&mut grads[a.0], &ga);
                add_into(&mut grads[b.0], &gb);
            }
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g);
                add_into(&mut grads[b.0], g);
            }
            Op::AddRow(a, row) => {
                let c = vals[row.0].len();
                let mut gr = vec![0.0; c];
                for chunk in g.chunks(c) {
                    gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                }
                add_into(&mut grads[a.0], g);
                add_into(&mut grads[row.0], &gr);
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                add_into(&mut grads[b.0], &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(&vals[b.0].data).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(&vals[a.0].data).map(|(x, y)| x * y).collect();
                add_into(&mut grads[a.0], &ga);
                add_into(&mut grads[b.0], &gb);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&vals[a.0].data)
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(&vals[idx].data).map(|(x, y)| x * y).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Concat(parts) => {
                let (rows, total) = vals[idx].dims2();
                let mut offset = 0;
                for p in parts {
                    let c = vals[p.0].dims2().1;
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    add_into(&mut grads[p.0], &gp);
                    offset += c;
                }
            }
            Op::MaskedSoftmax { input, mask } => {
                let y = &vals[idx].data;
                let (r, c) = vals[idx].dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let s = i * c;
                    let dot: f64 = (0..c).filter(|&j| mask[s + j]).map(|j| g[s + j] * y[s + j]).sum();
                    for j in 0..c {
                        if mask[s + j] {
                            ga[s + j] = y[s + j] * (g[s + j] - dot);
                        }
                    }
                }
                add_into(&mut grads[input.0], &ga);
            }
            Op::MaskedLogSoftmax { input, mask } => {
                let y = &vals[idx].data;
                let (r, c) = vals[idx].dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let s = i * c;
                    let gsum: f64 = (0..c).filter(|&j| mask[s + j]).map(|j| g[s + j]).sum();
                    for j in 0..c {
                        if mask[s + j] {
                            ga[s + j] = g[s + j] - y[s + j].exp() * gsum;
                        }
                    }
                }
                add_into(&mut grads[input.0], &ga);
            }
            Op::MaskedMeanSegments { input, segments, mask } => {
                let (r, c) = vals[input.0].dims2();
                let mut ga = vec![0.0; r * c];
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let count = (start..start + len).filter(|&row| mask[row]).count().max(1) as f64;
                    for row in start..start + len {
                        if mask[row] {
                            for j in 0..c {
                                ga[row * c + j] += g[s * c + j] / count;
                            }
                        }
                    }
                }
                add_into(&mut grads[input.0], &ga);
            }
            Op::SplitHeads { input, blocks, heads } => {
                let (r, c) = vals[input.0].dims2();
                let (rows, dh) = (r / blocks, c / heads);
                let mut ga = vec![0.0; r * c];
                for b in 0..*blocks {
                    for h in 0..*heads {
                        for v in 0..rows {
                            let src = ((b * heads + h) * rows + v) * dh;
                            let dst = (b * rows + v) * c + h * dh;
                            ga[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                add_into(&mut grads[input.0], &ga);
            }
            Op::MergeHeads { input, blocks, heads } => {
                let (r, dh) = vals[input.0].dims2();
                let rows = r / (blocks * heads);
                let c = heads * dh;
                let mut ga = vec![0.0; r * dh];
                for b in 0..*blocks {
                    for h in 0..*heads {
                        for v in 0..rows {
                            let dst = ((b * heads + h) * rows + v) * dh;
                            let src = (b * rows + v) * c + h * dh;
                            ga[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                        }
                    }
                }
                add_into(&mut grads[input.0], &ga);
            }
            Op::BlockScores { q, k, block, scale } => {
                let (r, d) = vals[q.0].dims2();
                let block = *block;
                let gs: Vec<f64> = g.iter().map(|x| x * scale).collect();
                let mut gq = vec![0.0; r * d];
                let mut gk = vec![0.0; r * d];
                for grp in 0..r / block {
                    let base = grp * block;
                    let gslice = &gs[base * block..(base + block) * block];
                    matmul_into(
                        gslice,
                        (block, block),
                        false,
                        &vals[k.0].data[base * d..(base + block) * d],
                        (block, d),
                        false,
                        &mut gq[base * d..(base + block) * d],
                        0.0,
                    );
                    matmul_into(
                        gslice,
                        (block, block),
                        true,
                        &vals[q.0].data[base * d..(base + block) * d],
                        (block, d),
                        false,
                        &mut gk[base * d..(base + block) * d],
                        0.0,
                    );
                }
                add_into(&mut grads[q.0], &gq);
                add_into(&mut grads[k.0], &gk);
            }
            Op::BlockApply { alpha, v, block } => {
                let (r, d) = vals[v.0].dims2();
                let block = *block;
                let mut galpha = vec![0.0; r * block];
                let mut gv = vec![0.0; r * d];
                for grp in 0..r / block {
                    let base = grp * block;
                    let gslice = &g[base * d..(base + block) * d];
                    matmul_into(
                        gslice,
                        (block, d),
                        false,
                        &vals[v.0].data[base * d..(base + block) * d],
                        (block, d),
                        true,
                        &mut galpha[base * block..(base + block) * block],
                        0.0,
                    );
                    matmul_into(
                        &vals[alpha.0].data[base * block..(base + block) * block],
                        (block, block),
                        true,
                        gslice,
                        (block, d),
                        false,
                        &mut gv[base * d..(base + block) * d],
                        0.0,
                    );
                }
                add_into(&mut grads[alpha.0], &galpha);
                add_into(&mut grads[v.0], &gv);
            }
            Op::SelectCols { input, idx: cols } => {
                let (r, c) = vals[input.0].dims2();
                let mut ga = vec![0.0; r * c];
                for (row, &col) in cols.iter().enumerate() {
                    ga[row * c + col] = g[row];
                }
                add_into(&mut grads[input.0], &ga);
            }
            Op::SumGroups { input, group } => {
                let ga: Vec<f64> = g.iter().flat_map(|&x| std::iter::repeat_n(x, *group)).collect();
                add_into(&mut grads[input.0], &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; vals[a.0].len()];
                add_into(&mut grads[a.0], &ga);
            }
            Op::Mse { pred, target } => {
                let p = &vals[pred.0].data;
                let n = p.len() as f64;
                let ga: Vec<f64> = p.iter().zip(target).map(|(a, b)| g[0] * 2.0 * (a - b) / n).collect();
                add_into(&mut grads[pred.0], &ga);
            }
            Op::PpoClip {
                logp,
                old_logp,
                adv,
                clip,
            } => {
                let lp = &vals[logp.0].data;
                let n = lp.len() as f64;
                let ga: Vec<f64> = (0..lp.len())
                    .map(|i| {
                        let r = (lp[i] - old_logp[i]).exp();
                        let unclipped = r * adv[i];
                        let clipped = r.clamp(1.0 - clip, 1.0 + clip) * adv[i];
                        // the clipped branch is constant in logp
                        if unclipped <= clipped {
                            -g[0] * unclipped / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(&mut grads[logp.0], &ga);
            }
        }
    }
}

/// Max-subtracted softmax over the unmasked entries of `row`.
pub(crate) fn softmax_row(row: &[f64], mask: &[bool], out: &mut [f64]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for j in 0..row.len() {
        out[j] = if mask[j] { (row[j] - max).exp() } else { 0.0 };
        total += out[j];
    }
    out.iter_mut().for_each(|x| *x /= total);
}

/// Masked softmax of a single score vector, off-tape.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(TensorError::ShapeMismatch {
            op: "masked_softmax",
            left: vec![scores.len()],
            right: vec![mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(TensorError::AllMasked { op: "masked_softmax" });
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite { op: "masked_softmax" });
    }
    let mut out = vec![0.0; scores.len()];
    softmax_row(scores, mask, &mut out);
    Ok(out)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First/second moment buffers for parameter `id`, if allocated.
    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(id.0)?.as_slice(), self.v.get(id.0)?.as_slice()))
    }

    /// Apply one update to every parameter and clear the gradients. Every
    /// parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(id) = store.ids().find(|&id| store.grad(id).is_none()) {
            return Err(TensorError::MissingGrad(store.name(id).to_string()));
        }
        if self.m.len() != store.len() {
            self.m = store.values.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = store.values.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.len() {
            let grad = store.grads[i].take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in store.values[i].data.iter_mut().enumerate() {
                let gj = grad.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Fills missing gradients with zeros, for parameters that did not take part
/// in the last forward pass.
pub fn fill_missing_grads(store: &mut ParamStore) {
    for i in 0..store.len() {
        if store.grads[i].is_none() {
            store.grads[i] = Some(Tensor::zeros(&store.values[i].shape));
        }
    }
}
