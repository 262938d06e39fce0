//! Small dense tensor algebra in two interchangeable evaluation modes.
//!
//! The [`Executor`] trait abstracts the primitive operations a forward pass
//! needs; [`PlainExec`] runs them on plaintext fixed-point tensors and
//! [`MpcExec`] on secret-shared ones via the engine. Higher-level operations
//! (matmul, softmax, rmsnorm, activations) are written once against the
//! trait, so both modes execute the same kernel sequence and reconstruct
//! bit-equal outputs.
//!
//! "Raw" multiplications return 2s-scale accumulators; callers truncate once
//! per logical output, which is where the Trunc accounting comes from.

use crate::approx::{self, ActivationKind, SoftmaxKind};
use crate::cost::{NonArithKind, Site};
use crate::engine::{Engine, SharedVec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::ring::{kernels, FixedPointFormat, RingElement};

/// Plaintext fixed-point tensor, dense row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<RingElement>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<RingElement>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "tensor dims {dims:?} need {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![RingElement::ZERO; n],
        }
    }

    pub fn encode(fmt: &FixedPointFormat, dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        let data = values
            .iter()
            .map(|v| fmt.encode(*v))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(dims, data)
    }

    pub fn decode(&self, fmt: &FixedPointFormat) -> FloatTensor {
        FloatTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|e| fmt.decode(*e)).collect(),
        }
    }

    pub fn elem_count(&self) -> usize {
        self.data.len()
    }

    /// Tile a 1-D tensor into `rows` identical rows.
    pub fn tile_rows(&self, rows: usize) -> Tensor {
        let len = self.data.len();
        let mut data = Vec::with_capacity(rows * len);
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Tensor {
            dims: vec![rows, len],
            data,
        }
    }
}

/// Decoded tensor for analysis paths (similarity, distillation metrics).
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Structural (local, cost-free) reshaping shared by both value kinds.
pub trait ValueOps: Clone {
    fn dims(&self) -> &[usize];

    fn elem_count(&self) -> usize {
        self.dims().iter().product()
    }

    /// Gather: out[i] = in[map(i)] with new dims.
    fn remap(&self, new_dims: Vec<usize>, map: &dyn Fn(usize) -> usize) -> Self;

    /// Overwrite positions with a public constant (reconstruction-visible).
    fn set_public_positions(&mut self, positions: &[usize], value: RingElement);

    fn transpose2d(&self) -> Self {
        let (r, c) = (self.dims()[0], self.dims()[1]);
        self.remap(vec![c, r], &|i| {
            let (nr, nc) = (i / r, i % r);
            nc * c + nr
        })
    }

    /// Columns `lo..hi` of a 2-D value.
    fn slice_cols(&self, lo: usize, hi: usize) -> Self {
        let (r, c) = (self.dims()[0], self.dims()[1]);
        debug_assert!(lo < hi && hi <= c && r > 0);
        let w = hi - lo;
        self.remap(vec![r, w], &|i| (i / w) * c + lo + (i % w))
    }

    /// Single row of a 2-D value, as [1, cols].
    fn row(&self, r: usize) -> Self {
        let c = self.dims()[1];
        self.remap(vec![1, c], &|i| r * c + i)
    }

    /// Broadcast a [rows] vector to [rows, len].
    fn broadcast_cols(&self, len: usize) -> Self {
        let rows = self.dims()[0];
        self.remap(vec![rows, len], &|i| i / len)
    }

    /// Broadcast a [len] vector across rows to [rows, len].
    fn broadcast_rows(&self, rows: usize) -> Self {
        let len = self.elem_count();
        self.remap(vec![rows, len], &|i| i % len)
    }
}

impl ValueOps for Tensor {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn remap(&self, new_dims: Vec<usize>, map: &dyn Fn(usize) -> usize) -> Self {
        let n: usize = new_dims.iter().product();
        let data = (0..n).map(|i| self.data[map(i)]).collect();
        Tensor {
            dims: new_dims,
            data,
        }
    }

    fn set_public_positions(&mut self, positions: &[usize], value: RingElement) {
        for &p in positions {
            self.data[p] = value;
        }
    }
}

/// Secret-shared tensor: dims plus per-party share parts.
#[derive(Clone, Debug)]
pub struct SharedTensor {
    pub dims: Vec<usize>,
    pub shares: SharedVec,
}

impl ValueOps for SharedTensor {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn remap(&self, new_dims: Vec<usize>, map: &dyn Fn(usize) -> usize) -> Self {
        let n: usize = new_dims.iter().product();
        let shares = self
            .shares
            .map_parts(|part| (0..n).map(|i| part[map(i)]).collect());
        SharedTensor {
            dims: new_dims,
            shares,
        }
    }

    fn set_public_positions(&mut self, positions: &[usize], value: RingElement) {
        for (idx, part) in self.shares.parts.iter_mut().enumerate() {
            for &p in positions {
                part[p] = if idx == 0 { value } else { RingElement::ZERO };
            }
        }
    }
}

/// One linear-layer operand: a public plaintext matrix or a private value.
#[derive(Clone, Debug)]
pub enum Operand<V> {
    Public(Tensor),
    Private(V),
}

/// Linear layer with an optional split low-rank adapter (A: n x r, B: r x k).
/// The adapter is always private; the base may be public (frozen) or private
/// (fully fine-tuned).
#[derive(Clone, Debug)]
pub struct ProjOperand<V> {
    pub base: Operand<V>,
    pub adapter: Option<(V, V)>,
}

/// Plaintext kernel applied inside an ideal-oracle call.
pub type OracleKernel<'a> = &'a dyn Fn(&FixedPointFormat, &[Vec<RingElement>]) -> Vec<RingElement>;

/// Primitive operations a forward pass needs, implemented by both modes.
pub trait Executor {
    type Value: ValueOps;

    fn fmt(&self) -> FixedPointFormat;
    fn set_site(&mut self, site: Site);

    /// Wrap public plaintext data (deterministic, traffic-free).
    fn wrap_public(&mut self, t: &Tensor) -> Self::Value;
    /// Bring a party's private input into the computation.
    fn input_from(&mut self, party: usize, t: &Tensor) -> Self::Value;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add_scalar_public(&mut self, a: &Self::Value, c: RingElement) -> Self::Value;

    fn matmul_public_raw(&mut self, x: &Self::Value, w: &Tensor) -> Result<Self::Value>;
    fn matmul_private_raw(&mut self, x: &Self::Value, y: &Self::Value) -> Result<Self::Value>;
    fn mul_elem_private_raw(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul_elem_public_raw(&mut self, a: &Self::Value, t: &Tensor) -> Result<Self::Value>;
    fn scale_public_raw(&mut self, a: &Self::Value, c: RingElement) -> Self::Value;

    fn truncate(&mut self, a: &Self::Value) -> Self::Value;
    fn oracle(
        &mut self,
        kind: NonArithKind,
        charged: u64,
        inputs: &[&Self::Value],
        out_dims: Vec<usize>,
        f: OracleKernel,
    ) -> Self::Value;
    fn reveal_argmax(&mut self, logits: &Self::Value) -> usize;

    /// Concatenate along rows (KV-cache append).
    fn concat_rows(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Concatenate 2-D values along columns (head outputs).
    fn concat_cols(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;

    // Trace hooks; only the plaintext executor records anything.
    fn record_attention(&mut self, _layer: usize, _head: usize, _probs: &Self::Value) {}
    fn record_attn_output(&mut self, _layer: usize, _out: &Self::Value) {}
    fn record_hidden(&mut self, _layer: usize, _h: &Self::Value) {}
}

/// Local operation tallies for the plaintext executor (client-side work).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PlainOps {
    pub mults: u64,
    pub nonarith_elems: u64,
}

/// Captured activations from a plaintext forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// attn_probs[layer][head][query_row] = full probability row (decoded).
    pub attn_probs: Vec<Vec<Vec<Vec<f64>>>>,
    /// Post-projection MHA output per layer.
    pub attn_out: Vec<FloatTensor>,
    /// Hidden state after each transformer layer.
    pub hidden: Vec<FloatTensor>,
}

impl ForwardTrace {
    pub fn with_layers(layers: usize, heads: usize) -> Self {
        ForwardTrace {
            attn_probs: vec![vec![Vec::new(); heads]; layers],
            attn_out: Vec::new(),
            hidden: Vec::new(),
        }
    }
}

/// Plaintext fixed-point executor.
pub struct PlainExec {
    fmt: FixedPointFormat,
    pub ops: PlainOps,
    pub trace: Option<ForwardTrace>,
}

impl PlainExec {
    pub fn new(fmt: FixedPointFormat) -> Self {
        PlainExec {
            fmt,
            ops: PlainOps::default(),
            trace: None,
        }
    }

    pub fn with_trace(fmt: FixedPointFormat, layers: usize, heads: usize) -> Self {
        PlainExec {
            fmt,
            ops: PlainOps::default(),
            trace: Some(ForwardTrace::with_layers(layers, heads)),
        }
    }

    fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
        if a.dims != b.dims {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                a.dims, b.dims
            )));
        }
        Ok(())
    }

    fn matmul_dims(x: &Tensor, wd: &[usize]) -> Result<(usize, usize, usize)> {
        let (rows, n) = (x.dims[0], x.dims[1]);
        if wd.len() != 2 || wd[0] != n {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} . {:?}",
                x.dims, wd
            )));
        }
        Ok((rows, n, wd[1]))
    }
}

impl Executor for PlainExec {
    type Value = Tensor;

    fn fmt(&self) -> FixedPointFormat {
        self.fmt
    }

    fn set_site(&mut self, _site: Site) {}

    fn wrap_public(&mut self, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn input_from(&mut self, _party: usize, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::check_same(a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| *x + *y).collect();
        Ok(Tensor {
            dims: a.dims.clone(),
            data,
        })
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::check_same(a, b)?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| *x - *y).collect();
        Ok(Tensor {
            dims: a.dims.clone(),
            data,
        })
    }

    fn add_scalar_public(&mut self, a: &Tensor, c: RingElement) -> Tensor {
        Tensor {
            dims: a.dims.clone(),
            data: a.data.iter().map(|x| *x + c).collect(),
        }
    }

    fn matmul_public_raw(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (rows, n, k) = Self::matmul_dims(x, &w.dims)?;
        self.ops.mults += (rows * n * k) as u64;
        Ok(Tensor {
            dims: vec![rows, k],
            data: linalg::matmul(&x.data, &w.data, rows, n, k),
        })
    }

    fn matmul_private_raw(&mut self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.matmul_public_raw(x, y)
    }

    fn mul_elem_private_raw(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::check_same(a, b)?;
        self.ops.mults += a.elem_count() as u64;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| *x * *y).collect();
        Ok(Tensor {
            dims: a.dims.clone(),
            data,
        })
    }

    fn mul_elem_public_raw(&mut self, a: &Tensor, t: &Tensor) -> Result<Tensor> {
        self.mul_elem_private_raw(a, t)
    }

    fn scale_public_raw(&mut self, a: &Tensor, c: RingElement) -> Tensor {
        self.ops.mults += a.elem_count() as u64;
        Tensor {
            dims: a.dims.clone(),
            data: a.data.iter().map(|x| *x * c).collect(),
        }
    }

    fn truncate(&mut self, a: &Tensor) -> Tensor {
        self.ops.nonarith_elems += a.elem_count() as u64;
        Tensor {
            dims: a.dims.clone(),
            data: a.data.iter().map(|x| self.fmt.truncate(*x)).collect(),
        }
    }

    fn oracle(
        &mut self,
        _kind: NonArithKind,
        charged: u64,
        inputs: &[&Tensor],
        out_dims: Vec<usize>,
        f: OracleKernel,
    ) -> Tensor {
        self.ops.nonarith_elems += charged;
        let plain: Vec<Vec<RingElement>> = inputs.iter().map(|t| t.data.clone()).collect();
        let data = f(&self.fmt, &plain);
        debug_assert_eq!(data.len(), out_dims.iter().product::<usize>());
        Tensor {
            dims: out_dims,
            data,
        }
    }

    fn reveal_argmax(&mut self, logits: &Tensor) -> usize {
        self.ops.nonarith_elems += logits.elem_count().saturating_sub(1) as u64;
        kernels::argmax(&logits.data)
    }

    fn concat_rows(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims[1..] != b.dims[1..] {
            return Err(Error::ShapeMismatch("concat_rows".into()));
        }
        let mut dims = a.dims.clone();
        dims[0] += b.dims[0];
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        Ok(Tensor { dims, data })
    }

    fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts[0].dims[0];
        if parts.iter().any(|p| p.dims[0] != rows) {
            return Err(Error::ShapeMismatch("concat_cols".into()));
        }
        let total: usize = parts.iter().map(|p| p.dims[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let w = p.dims[1];
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        Ok(Tensor {
            dims: vec![rows, total],
            data,
        })
    }

    fn record_attention(&mut self, layer: usize, head: usize, probs: &Tensor) {
        let fmt = self.fmt;
        if let Some(trace) = &mut self.trace {
            let len = probs.dims[1];
            for row in probs.data.chunks(len) {
                trace.attn_probs[layer][head].push(row.iter().map(|e| fmt.decode(*e)).collect());
            }
        }
    }

    fn record_attn_output(&mut self, layer: usize, out: &Tensor) {
        let fmt = self.fmt;
        if let Some(trace) = &mut self.trace {
            if trace.attn_out.len() == layer {
                trace.attn_out.push(out.decode(&fmt));
            }
        }
    }

    fn record_hidden(&mut self, layer: usize, h: &Tensor) {
        let fmt = self.fmt;
        if let Some(trace) = &mut self.trace {
            if trace.hidden.len() == layer {
                trace.hidden.push(h.decode(&fmt));
            }
        }
    }
}

/// Secret-shared executor backed by an [`Engine`].
pub struct MpcExec<'a> {
    pub engine: &'a mut Engine,
}

impl<'a> MpcExec<'a> {
    pub fn new(engine: &'a mut Engine) -> Self {
        MpcExec { engine }
    }

    fn wrap(dims: Vec<usize>, shares: SharedVec) -> SharedTensor {
        SharedTensor { dims, shares }
    }

    fn matmul_dims(x: &SharedTensor, wd: &[usize]) -> Result<(usize, usize, usize)> {
        let (rows, n) = (x.dims[0], x.dims[1]);
        if wd.len() != 2 || wd[0] != n {
            return Err(Error::ShapeMismatch(format!(
                "matmul {:?} . {:?}",
                x.dims, wd
            )));
        }
        Ok((rows, n, wd[1]))
    }
}

impl<'a> Executor for MpcExec<'a> {
    type Value = SharedTensor;

    fn fmt(&self) -> FixedPointFormat {
        self.engine.fmt()
    }

    fn set_site(&mut self, site: Site) {
        self.engine.set_site(site);
    }

    fn wrap_public(&mut self, t: &Tensor) -> SharedTensor {
        let shares = self.engine.public_share(&t.data);
        Self::wrap(t.dims.clone(), shares)
    }

    fn input_from(&mut self, party: usize, t: &Tensor) -> SharedTensor {
        let shares = self.engine.share_from(party, &t.data);
        Self::wrap(t.dims.clone(), shares)
    }

    fn add(&mut self, a: &SharedTensor, b: &SharedTensor) -> Result<SharedTensor> {
        if a.dims != b.dims {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                a.dims, b.dims
            )));
        }
        Ok(Self::wrap(a.dims.clone(), self.engine.add(&a.shares, &b.shares)?))
    }

    fn sub(&mut self, a: &SharedTensor, b: &SharedTensor) -> Result<SharedTensor> {
        if a.dims != b.dims {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                a.dims, b.dims
            )));
        }
        Ok(Self::wrap(a.dims.clone(), self.engine.sub(&a.shares, &b.shares)?))
    }

    fn add_scalar_public(&mut self, a: &SharedTensor, c: RingElement) -> SharedTensor {
        Self::wrap(a.dims.clone(), self.engine.add_scalar_public(&a.shares, c))
    }

    fn matmul_public_raw(&mut self, x: &SharedTensor, w: &Tensor) -> Result<SharedTensor> {
        let (rows, n, k) = Self::matmul_dims(x, &w.dims)?;
        let shares = self
            .engine
            .matmul_public_raw(&x.shares, rows, n, &w.data, k)?;
        Ok(Self::wrap(vec![rows, k], shares))
    }

    fn matmul_private_raw(&mut self, x: &SharedTensor, y: &SharedTensor) -> Result<SharedTensor> {
        let (rows, n, k) = Self::matmul_dims(x, &y.dims)?;
        let shares = self
            .engine
            .matmul_private_raw(&x.shares, rows, n, &y.shares, k)?;
        Ok(Self::wrap(vec![rows, k], shares))
    }

    fn mul_elem_private_raw(&mut self, a: &SharedTensor, b: &SharedTensor) -> Result<SharedTensor> {
        if a.dims != b.dims {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                a.dims, b.dims
            )));
        }
        Ok(Self::wrap(
            a.dims.clone(),
            self.engine.mul_elementwise(&a.shares, &b.shares)?,
        ))
    }

    fn mul_elem_public_raw(&mut self, a: &SharedTensor, t: &Tensor) -> Result<SharedTensor> {
        if a.dims != t.dims {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                a.dims, t.dims
            )));
        }
        Ok(Self::wrap(
            a.dims.clone(),
            self.engine.mul_elem_public_raw(&a.shares, &t.data)?,
        ))
    }

    fn scale_public_raw(&mut self, a: &SharedTensor, c: RingElement) -> SharedTensor {
        Self::wrap(a.dims.clone(), self.engine.scale_public_raw(&a.shares, c))
    }

    fn truncate(&mut self, a: &SharedTensor) -> SharedTensor {
        Self::wrap(a.dims.clone(), self.engine.truncate(&a.shares))
    }

    fn oracle(
        &mut self,
        kind: NonArithKind,
        charged: u64,
        inputs: &[&SharedTensor],
        out_dims: Vec<usize>,
        f: OracleKernel,
    ) -> SharedTensor {
        let fmt = self.engine.fmt();
        let share_inputs: Vec<&SharedVec> = inputs.iter().map(|t| &t.shares).collect();
        let shares = self
            .engine
            .oracle(kind, charged, &share_inputs, |ins| f(&fmt, ins));
        Self::wrap(out_dims, shares)
    }

    fn reveal_argmax(&mut self, logits: &SharedTensor) -> usize {
        self.engine
            .reveal_argmax(&logits.shares, crate::engine::CLIENT)
    }

    fn concat_rows(&mut self, a: &SharedTensor, b: &SharedTensor) -> Result<SharedTensor> {
        if a.dims[1..] != b.dims[1..] {
            return Err(Error::ShapeMismatch("concat_rows".into()));
        }
        let mut dims = a.dims.clone();
        dims[0] += b.dims[0];
        let shares = SharedVec {
            backend: a.shares.backend,
            parts: a
                .shares
                .parts
                .iter()
                .zip(&b.shares.parts)
                .map(|(pa, pb)| {
                    let mut v = pa.clone();
                    v.extend_from_slice(pb);
                    v
                })
                .collect(),
        };
        Ok(SharedTensor { dims, shares })
    }

    fn concat_cols(&mut self, parts: &[&SharedTensor]) -> Result<SharedTensor> {
        let rows = parts[0].dims[0];
        if parts.iter().any(|p| p.dims[0] != rows) {
            return Err(Error::ShapeMismatch("concat_cols".into()));
        }
        let total: usize = parts.iter().map(|p| p.dims[1]).sum();
        let n_parts = parts[0].shares.parts.len();
        let mut out_parts = vec![Vec::with_capacity(rows * total); n_parts];
        for r in 0..rows {
            for p in parts {
                let w = p.dims[1];
                for (out, share) in out_parts.iter_mut().zip(&p.shares.parts) {
                    out.extend_from_slice(&share[r * w..(r + 1) * w]);
                }
            }
        }
        Ok(SharedTensor {
            dims: vec![rows, total],
            shares: SharedVec {
                backend: parts[0].shares.backend,
                parts: out_parts,
            },
        })
    }
}

/// Matmul against a public-or-private operand, 2s-scale output.
pub fn matmul_raw<E: Executor>(
    exec: &mut E,
    x: &E::Value,
    w: &Operand<E::Value>,
) -> Result<E::Value> {
    match w {
        Operand::Public(t) => exec.matmul_public_raw(x, t),
        Operand::Private(v) => exec.matmul_private_raw(x, v),
    }
}

/// Matmul with the standard one-truncation-per-output-element accounting.
pub fn matmul<E: Executor>(exec: &mut E, x: &E::Value, w: &Operand<E::Value>) -> Result<E::Value> {
    let raw = matmul_raw(exec, x, w)?;
    Ok(exec.truncate(&raw))
}

/// Linear layer with optional split low-rank adapter: evaluates
/// `X.W + (trunc(X.A)).B` in the accumulator and truncates once, i.e. two
/// truncation points against one for a merged weight.
pub fn proj_forward<E: Executor>(
    exec: &mut E,
    x: &E::Value,
    p: &ProjOperand<E::Value>,
) -> Result<E::Value> {
    let mut acc = matmul_raw(exec, x, &p.base)?;
    if let Some((a, b)) = &p.adapter {
        let xa_raw = exec.matmul_private_raw(x, a)?;
        let xa = exec.truncate(&xa_raw);
        let ab = exec.matmul_private_raw(&xa, b)?;
        acc = exec.add(&acc, &ab)?;
    }
    Ok(exec.truncate(&acc))
}

/// Sum each row of a [rows, len] value into a [rows] vector (local adds).
pub fn sum_rows<E: Executor>(exec: &mut E, x: &E::Value) -> Result<E::Value> {
    let (rows, len) = (x.dims()[0], x.dims()[1]);
    let mut acc = x.remap(vec![rows], &|r| r * len);
    for j in 1..len {
        let col = x.remap(vec![rows], &|r| r * len + j);
        acc = exec.add(&acc, &col)?;
    }
    Ok(acc)
}

/// Row-wise softmax of a [rows, len] value, decomposed per the configured
/// kind. Accounting convention: exact softmax charges len-1 Compare per row
/// for the max reduction, one SoftmaxExp and one SoftmaxDiv per element;
/// TwoRelu replaces the exp with comparison-based ReLUs (charged as Compare);
/// TwoQuad replaces it with plain private squarings plus truncation.
pub fn softmax_rows<E: Executor>(
    exec: &mut E,
    x: &E::Value,
    kind: &SoftmaxKind,
) -> Result<E::Value> {
    let (rows, len) = (x.dims()[0], x.dims()[1]);
    if len == 0 || rows == 0 {
        return Err(Error::ShapeMismatch("softmax on empty value".into()));
    }
    let dims = vec![rows, len];
    match kind {
        SoftmaxKind::Exact => {
            let maxes = exec.oracle(
                NonArithKind::Compare,
                (rows * (len - 1)) as u64,
                &[x],
                vec![rows],
                &|_, ins| approx::rowmax_rows(&ins[0], len),
            );
            let maxes_b = maxes.broadcast_cols(len);
            let shifted = exec.sub(x, &maxes_b)?;
            let exps = exec.oracle(
                NonArithKind::SoftmaxExp,
                (rows * len) as u64,
                &[&shifted],
                dims.clone(),
                &|fmt, ins| approx::exp_map(fmt, &ins[0]),
            );
            let sums = sum_rows(exec, &exps)?;
            Ok(exec.oracle(
                NonArithKind::SoftmaxDiv,
                (rows * len) as u64,
                &[&exps, &sums],
                dims,
                &|fmt, ins| approx::softmax_div_rows(fmt, &ins[0], &ins[1], len),
            ))
        }
        SoftmaxKind::TwoRelu { eps } => {
            let fmt = exec.fmt();
            let eps_enc = RingElement::from_signed(((eps * fmt.scale()).round() as i64).max(1));
            let relus = exec.oracle(
                NonArithKind::Compare,
                (rows * len) as u64,
                &[x],
                dims.clone(),
                &|_, ins| approx::relu_map(&ins[0]),
            );
            let sums = sum_rows(exec, &relus)?;
            let sums_eps = exec.add_scalar_public(&sums, eps_enc);
            Ok(exec.oracle(
                NonArithKind::SoftmaxDiv,
                (rows * len) as u64,
                &[&relus, &sums_eps],
                dims,
                &|fmt, ins| approx::two_relu_div_rows(fmt, &ins[0], &ins[1], len, eps_enc),
            ))
        }
        SoftmaxKind::TwoQuad { c } => {
            let fmt = exec.fmt();
            let c_enc = fmt.encode(*c)?;
            let y = exec.add_scalar_public(x, c_enc);
            let sq_raw = exec.mul_elem_private_raw(&y, &y)?;
            let sq = exec.truncate(&sq_raw);
            let sums = sum_rows(exec, &sq)?;
            Ok(exec.oracle(
                NonArithKind::SoftmaxDiv,
                (rows * len) as u64,
                &[&sq, &sums],
                dims,
                &|fmt, ins| approx::two_quad_div_rows(fmt, &ins[0], &ins[1], len),
            ))
        }
    }
}

/// RMS normalization over the last axis with a gain vector. The mean of
/// squares gets a one-ulp epsilon so all-zero rows stay finite.
pub fn rmsnorm<E: Executor>(
    exec: &mut E,
    x: &E::Value,
    gain: &Operand<E::Value>,
) -> Result<E::Value> {
    let (rows, len) = (x.dims()[0], x.dims()[1]);
    let fmt = exec.fmt();
    let sq_raw = exec.mul_elem_private_raw(x, x)?;
    let sq = exec.truncate(&sq_raw);
    let sums = sum_rows(exec, &sq)?;
    let inv_len = fmt.encode(1.0 / len as f64)?;
    let mean_raw = exec.scale_public_raw(&sums, inv_len);
    let mean = exec.truncate(&mean_raw);
    let mean_eps = exec.add_scalar_public(&mean, RingElement(1));
    let r = exec.oracle(
        NonArithKind::Rsqrt,
        rows as u64,
        &[&mean_eps],
        vec![rows],
        &|fmt, ins| approx::rsqrt_map(fmt, &ins[0]),
    );
    let r_b = r.broadcast_cols(len);
    let xr_raw = exec.mul_elem_private_raw(x, &r_b)?;
    let xr = exec.truncate(&xr_raw);
    let scaled = match gain {
        Operand::Public(g) => {
            let g_b = g.tile_rows(rows);
            exec.mul_elem_public_raw(&xr, &g_b)?
        }
        Operand::Private(g) => {
            let g_b = g.broadcast_rows(rows);
            exec.mul_elem_private_raw(&xr, &g_b)?
        }
    };
    Ok(exec.truncate(&scaled))
}

/// Elementwise activation. ReLU-family kinds are oracle calls; Quad is
/// evaluated with private multiplications and truncation only.
pub fn activation<E: Executor>(
    exec: &mut E,
    x: &E::Value,
    kind: &ActivationKind,
) -> Result<E::Value> {
    let count = x.elem_count() as u64;
    let dims = x.dims().to_vec();
    match kind {
        ActivationKind::Silu => Ok(exec.oracle(NonArithKind::Silu, count, &[x], dims, &|fmt, ins| {
            approx::silu_map(fmt, &ins[0])
        })),
        ActivationKind::Gelu => Ok(exec.oracle(NonArithKind::Gelu, count, &[x], dims, &|fmt, ins| {
            approx::gelu_map(fmt, &ins[0])
        })),
        ActivationKind::Relu => Ok(exec.oracle(NonArithKind::Relu, count, &[x], dims, &|_, ins| {
            approx::relu_map(&ins[0])
        })),
        ActivationKind::Quad { c2, c1, c0 } => {
            let fmt = exec.fmt();
            let c2e = fmt.encode(*c2)?;
            let c1e = fmt.encode(*c1)?;
            let c0e = fmt.encode(*c0)?;
            let sq_raw = exec.mul_elem_private_raw(x, x)?;
            let sq = exec.truncate(&sq_raw);
            let t2_raw = exec.scale_public_raw(&sq, c2e);
            let t2 = exec.truncate(&t2_raw);
            let t1_raw = exec.scale_public_raw(x, c1e);
            let t1 = exec.truncate(&t1_raw);
            let sum = exec.add(&t2, &t1)?;
            Ok(exec.add_scalar_public(&sum, c0e))
        }
    }
}
