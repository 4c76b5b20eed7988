//! Dense row-major tensors, batched GEMM, layout reshapes and elementwise maps,
//! with per-operation FLOP and byte accounting.
//!
//! FLOP convention: one scalar multiply counts 1, one scalar add counts 1, so a
//! multiply-accumulate counts 2. Reshapes cost no FLOPs but are charged for the
//! bytes they read and write.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Maximum number of axes a [`DenseTensor`] may carry.
pub const MAX_RANK: usize = 4;

/// Contiguous row-major array, last axis fastest. No broadcasting anywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    /// Builds a tensor from owned data, rejecting length mismatches and non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_rank("from_vec", shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape("from_vec", format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Fills a tensor by evaluating `f` at each flat index in row-major order.
    ///
    /// Panics if the generator yields a non-finite value.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_rank("from_fn", shape).expect("rank within MAX_RANK");
        let len: usize = shape.iter().product();
        let data: Vec<T> = (0..len)
            .map(|i| {
                let v = f(i);
                assert!(v.is_finite(), "generator produced non-finite value at {i}");
                v
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        check_rank("zeros", shape).expect("rank within MAX_RANK");
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the backing storage in bytes.
    pub fn byte_size(&self) -> u64 {
        (self.data.len() * T::BYTES) as u64
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            acc * n + i
        })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    /// Same data, new shape of equal element count. Pure metadata change.
    pub fn reshaped(self, shape: &[usize]) -> Result<Self> {
        check_rank("reshaped", shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshaped",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data })
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max)
        })
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<[usize; 3]> {
        match *self.shape.as_slice() {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(Error::shape(op, format!("expected rank-3 tensor, got {:?}", self.shape))),
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::shape(op, format!("expected rank-4 tensor, got {:?}", self.shape))),
        }
    }
}

fn check_rank(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(op, format!("rank {} outside 1..={MAX_RANK}", shape.len())));
    }
    Ok(())
}

/// Totals for one stage or one whole pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub flops: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    /// Largest single tensor allocation, in bytes.
    pub peak_alloc_bytes: u64,
}

impl OpCounts {
    /// Sums traffic and FLOPs; the peak is the max of both peaks.
    pub fn combine(self, other: OpCounts) -> OpCounts {
        OpCounts {
            flops: self.flops + other.flops,
            bytes_read: self.bytes_read + other.bytes_read,
            bytes_written: self.bytes_written + other.bytes_written,
            peak_alloc_bytes: self.peak_alloc_bytes.max(other.peak_alloc_bytes),
        }
    }
}

/// Named stage entry in an [`OpCounter`] log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub counts: OpCounts,
}

/// Instrumentation sink threaded through every operation.
///
/// Leaf operations add to the running totals. Pipelines run each stage
/// against a fresh counter and fold it in with [`OpCounter::absorb`] so the
/// per-stage breakdown survives.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    totals: OpCounts,
    stages: Vec<StageCount>,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn totals(&self) -> OpCounts {
        self.totals
    }

    pub fn flops(&self) -> u64 {
        self.totals.flops
    }

    pub fn bytes_read(&self) -> u64 {
        self.totals.bytes_read
    }

    pub fn bytes_written(&self) -> u64 {
        self.totals.bytes_written
    }

    pub fn peak_alloc_bytes(&self) -> u64 {
        self.totals.peak_alloc_bytes
    }

    pub fn stages(&self) -> &[StageCount] {
        &self.stages
    }

    /// Records one leaf operation whose output allocation is `alloc_bytes`.
    pub fn record(&mut self, flops: u64, bytes_read: u64, bytes_written: u64, alloc_bytes: u64) {
        self.totals = self.totals.combine(OpCounts {
            flops,
            bytes_read,
            bytes_written,
            peak_alloc_bytes: alloc_bytes,
        });
    }

    /// Folds another counter in, logging it as a single named stage.
    pub fn absorb(&mut self, stage: impl Into<String>, other: OpCounter) {
        self.totals = self.totals.combine(other.totals);
        self.stages.push(StageCount { stage: stage.into(), counts: other.totals });
    }

    /// Folds another counter in, keeping its own stage log.
    pub fn merge(&mut self, other: OpCounter) {
        self.totals = self.totals.combine(other.totals);
        self.stages.extend(other.stages);
    }
}

/// Batched GEMM: `out[b,p,s] = Σ_r a[b,p,r] · b[b,r,s]`.
///
/// Charges exactly `2·B·P·R·S` FLOPs.
pub fn gemm<T: Scalar>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    let [ba, p, r] = a.dims3("gemm")?;
    let [bb, rb, s] = b.dims3("gemm")?;
    if ba != bb {
        return Err(Error::shape("gemm", format!("batch axis: a has {ba}, b has {bb}")));
    }
    if r != rb {
        return Err(Error::shape("gemm", format!("inner axis: a axis 2 is {r}, b axis 1 is {rb}")));
    }
    // b[b] is R×S row-major: row stride S, column stride 1.
    Ok(batched(a, b, [ba, p, r, s], (s as isize, 1), counter))
}

/// Batched GEMM against a transposed right operand:
/// `out[b,p,s] = Σ_r a[b,p,r] · b[b,s,r]`, i.e. `a · bᵀ` without materializing `bᵀ`.
///
/// Charges exactly `2·B·P·R·S` FLOPs.
pub fn gemm_bt<T: Scalar>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    let [ba, p, r] = a.dims3("gemm_bt")?;
    let [bb, s, rb] = b.dims3("gemm_bt")?;
    if ba != bb {
        return Err(Error::shape("gemm_bt", format!("batch axis: a has {ba}, b has {bb}")));
    }
    if r != rb {
        return Err(Error::shape(
            "gemm_bt",
            format!("inner axis: a axis 2 is {r}, b axis 2 is {rb}"),
        ));
    }
    // b[b] is S×R row-major, read as R×S: row stride 1, column stride R.
    Ok(batched(a, b, [ba, p, r, s], (1, r as isize), counter))
}

fn batched<T: Scalar>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
    [batch, p, r, s]: [usize; 4],
    (rsb, csb): (isize, isize),
    counter: &mut OpCounter,
) -> DenseTensor<T> {
    let mut out = vec![T::zero(); batch * p * s];
    for bi in 0..batch {
        let a_mat = &a.data()[bi * p * r..(bi + 1) * p * r];
        let b_mat = &b.data()[bi * r * s..(bi + 1) * r * s];
        let c_mat = &mut out[bi * p * s..(bi + 1) * p * s];
        if r == 0 {
            continue;
        }
        // SAFETY: slices cover exactly the strided extents passed and `c_mat`
        // is a fresh buffer distinct from both inputs.
        unsafe {
            T::gemm_kernel(
                p,
                r,
                s,
                a_mat.as_ptr(),
                r as isize,
                1,
                b_mat.as_ptr(),
                rsb,
                csb,
                c_mat.as_mut_ptr(),
                s as isize,
                1,
            );
        }
    }
    let out = DenseTensor::from_raw(vec![batch, p, s], out);
    counter.record(
        2 * (batch * p * r * s) as u64,
        a.byte_size() + b.byte_size(),
        out.byte_size(),
        out.byte_size(),
    );
    out
}

fn copy_charged<T: Scalar>(out: DenseTensor<T>, counter: &mut OpCounter) -> DenseTensor<T> {
    counter.record(0, out.byte_size(), out.byte_size(), out.byte_size());
    out
}

/// `B×N×C` token sequence to a `B×C×hp×wp` feature grid:
/// `out[b,c,y,x] = t[b, y·wp + x, c]`.
pub fn tokens_to_grid<T: Scalar>(
    t: &DenseTensor<T>,
    hp: usize,
    wp: usize,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    let [batch, n, c] = t.dims3("tokens_to_grid")?;
    if n != hp * wp {
        return Err(Error::shape(
            "tokens_to_grid",
            format!("token count {n} != grid {hp}×{wp}"),
        ));
    }
    let src = t.data();
    let mut out = vec![T::zero(); batch * c * n];
    for bi in 0..batch {
        for i in 0..n {
            let row = &src[(bi * n + i) * c..(bi * n + i + 1) * c];
            for (ch, &v) in row.iter().enumerate() {
                out[(bi * c + ch) * n + i] = v;
            }
        }
    }
    Ok(copy_charged(DenseTensor::from_raw(vec![batch, c, hp, wp], out), counter))
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens<T: Scalar>(
    f: &DenseTensor<T>,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    let [batch, c, hp, wp] = f.dims4("grid_to_tokens")?;
    let n = hp * wp;
    let src = f.data();
    let mut out = vec![T::zero(); batch * n * c];
    for bi in 0..batch {
        for ch in 0..c {
            for i in 0..n {
                out[(bi * n + i) * c + ch] = src[(bi * c + ch) * n + i];
            }
        }
    }
    Ok(copy_charged(DenseTensor::from_raw(vec![batch, n, c], out), counter))
}

/// `B×Qn×N` token scores to `B×Qn×hp×wp`: `out[b,q,y,x] = l[b,q, y·wp + x]`.
pub fn scores_to_grid<T: Scalar>(
    l: &DenseTensor<T>,
    hp: usize,
    wp: usize,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    let [batch, qn, n] = l.dims3("scores_to_grid")?;
    if n != hp * wp {
        return Err(Error::shape(
            "scores_to_grid",
            format!("token count {n} != grid {hp}×{wp}"),
        ));
    }
    let out = DenseTensor::from_raw(vec![batch, qn, hp, wp], l.data().to_vec());
    Ok(copy_charged(out, counter))
}

/// Inverse of [`scores_to_grid`].
pub fn grid_to_scores<T: Scalar>(
    m: &DenseTensor<T>,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    let [batch, qn, h, w] = m.dims4("grid_to_scores")?;
    let out = DenseTensor::from_raw(vec![batch, qn, h * w], m.data().to_vec());
    Ok(copy_charged(out, counter))
}

/// Elementwise map kinds.
#[derive(Clone, Copy, Debug)]
pub enum Elementwise<'a, T> {
    /// `1 / (1 + e^{-x})`; 4 FLOPs per element (negate, exp, add, divide).
    Sigmoid,
    /// Numerically stable softmax over the last axis; 5 FLOPs per element
    /// (max compare, subtract, exp, sum add, divide).
    SoftmaxLastAxis,
    /// `α·x`; 1 FLOP per element.
    Scale(T),
    /// `x + y` for an identically shaped `y`; 1 FLOP per element.
    Add(&'a DenseTensor<T>),
}

impl<T> Elementwise<'_, T> {
    /// FLOPs charged per output element.
    pub const fn flops_per_element(&self) -> u64 {
        match self {
            Elementwise::Sigmoid => 4,
            Elementwise::SoftmaxLastAxis => 5,
            Elementwise::Scale(_) | Elementwise::Add(_) => 1,
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn elementwise<T: Scalar>(
    op: Elementwise<'_, T>,
    x: &DenseTensor<T>,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    let mut read = x.byte_size();
    let data: Vec<T> = match op {
        Elementwise::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
        Elementwise::Scale(alpha) => x.data().iter().map(|&v| alpha * v).collect(),
        Elementwise::Add(y) => {
            if y.shape() != x.shape() {
                return Err(Error::shape(
                    "elementwise add",
                    format!("{:?} vs {:?}", x.shape(), y.shape()),
                ));
            }
            read += y.byte_size();
            x.data().iter().zip(y.data()).map(|(&a, &b)| a + b).collect()
        }
        Elementwise::SoftmaxLastAxis => {
            let last = *x.shape().last().expect("rank >= 1");
            if last == 0 {
                return Err(Error::shape("softmax", "last axis has extent 0"));
            }
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks_exact(last) {
                out.extend(softmax_row(row));
            }
            out
        }
    };
    let out = DenseTensor::from_raw(x.shape().to_vec(), data);
    counter.record(op.flops_per_element() * out.len() as u64, read, out.byte_size(), out.byte_size());
    Ok(out)
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}
