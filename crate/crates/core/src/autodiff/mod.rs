//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order. Each recorded
//! node keeps its forward value plus whatever the backward rule needs.
//! [`Tape::backward`] walks the nodes once in reverse, accumulating
//! gradients at fan-in points in recording order, and then marks the tape
//! consumed; a second call is an error rather than a silent double count.
//!
//! Parameters live outside the tape in a [`ParamStore`]. Recording a
//! parameter copies its current value onto the tape, so a forward pass never
//! holds a borrow of the store.
//!
//! Every operator is generic over [`Real`], which lets the same model code
//! run in `f32` for training and `f64` for finite-difference checks.
//!
//! Shape conventions:
//!
//! | op | operands | result |
//! |----|----------|--------|
//! | `add`, `sub`, `mul` | equal shapes | same shape |
//! | `matmul` | `[m, k] x [k, n]` | `[m, n]` |
//! | `linear` | `x [n, in]`, `w [out, in]`, `b [out]` | `[n, out]` |
//! | `conv2d` | `x [n, c, h, w]`, `w [o, c, kh, kw]`, `b [o]` | `[n, o, h', w']` |
//! | `conv2d_transpose` | `x [n, c, h, w]`, `w [c, o, kh, kw]`, `b [o]` | `[n, o, h', w']` |
//! | `batch_norm` | `x [n, c, ...]`, `gamma [c]`, `beta [c]` | same as `x` |
//! | `sum`, `mean` | any | scalar `[]` |

pub mod adam;
pub mod conv;
pub mod gradcheck;
mod tensor;

use std::cell::{Ref, RefCell};

pub(crate) use tensor::gemm;
pub use tensor::{Real, Tensor};

use conv::{conv_out_len, conv_transpose_out_len, ConvGeom};

use crate::error::{Error, Result};

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered, named parameter and buffer storage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Batch-norm behaviour for one call.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with frozen running statistics; a fixed affine map.
    Eval { running_mean: &'a [T], running_var: &'a [T] },
}

/// Per-channel statistics of one training-mode batch-norm call, for the
/// caller to fold into running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + momentum * *b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var) {
            *r = keep * *r + momentum * *b;
        }
    }
}

enum Op<T> {
    Constant,
    Variable,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        in_f: usize,
        out_f: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        out_c: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        /// Geometry of the equivalent forward convolution from the output
        /// back to the input.
        geom: ConvGeom,
        batch: usize,
        in_c: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp {
        a: usize,
        lo: T,
        hi: T,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: usize,
        channels: usize,
        spatial: usize,
        training: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// A recording of tensor operations. Single-threaded; use one tape per
/// thread.
pub struct Tape<T> {
    inner: RefCell<Inner<T>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.inner.borrow(), |i| &i.nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a leaf (variable or parameter).
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.nodes.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], id: usize, len: usize) -> &'g mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn check_owner(&self, v: Var<'_, T>) {
        assert!(std::ptr::eq(self, v.tape), "variable belongs to a different tape");
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|i| inner.nodes[*i].needs_grad)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Constant, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Variable, true)
    }

    /// Records the current value of a parameter.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let entry = store.entry(id);
        if entry.trainable {
            self.push(entry.value.clone(), Op::Param(id), true)
        } else {
            self.push(entry.value.clone(), Op::Constant, false)
        }
    }

    fn binary(&self, op: &'static str, a: Var<'_, T>, b: Var<'_, T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check_owner(a);
        self.check_owner(b);
        let inner = self.inner.borrow();
        let (x, y) = (&inner.nodes[a.id].value, &inner.nodes[b.id].value);
        if x.shape() != y.shape() {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape(), data)
    }

    fn unary(&self, a: Var<'_, T>, f: impl Fn(T) -> T) -> Tensor<T> {
        self.check_owner(a);
        self.inner.borrow().nodes[a.id].value.map(f)
    }

    pub fn add<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.binary("add", a, b, |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a.id, b.id), self.needs(&[a.id, b.id])))
    }

    pub fn sub<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.binary("sub", a, b, |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a.id, b.id), self.needs(&[a.id, b.id])))
    }

    /// Elementwise product.
    pub fn mul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.binary("mul", a, b, |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a.id, b.id), self.needs(&[a.id, b.id])))
    }

    pub fn add_scalar<'t>(&'t self, a: Var<'t, T>, s: T) -> Var<'t, T> {
        let v = self.unary(a, |x| x + s);
        self.push(v, Op::AddScalar(a.id), self.needs(&[a.id]))
    }

    pub fn mul_scalar<'t>(&'t self, a: Var<'t, T>, s: T) -> Var<'t, T> {
        let v = self.unary(a, |x| x * s);
        self.push(v, Op::MulScalar(a.id, s), self.needs(&[a.id]))
    }

    pub fn relu<'t>(&'t self, a: Var<'t, T>) -> Var<'t, T> {
        let v = self.unary(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a.id), self.needs(&[a.id]))
    }

    pub fn sigmoid<'t>(&'t self, a: Var<'t, T>) -> Var<'t, T> {
        let v = self.unary(a, sigmoid);
        self.push(v, Op::Sigmoid(a.id), self.needs(&[a.id]))
    }

    pub fn exp<'t>(&'t self, a: Var<'t, T>) -> Var<'t, T> {
        let v = self.unary(a, T::exp);
        self.push(v, Op::Exp(a.id), self.needs(&[a.id]))
    }

    /// Natural logarithm; non-positive inputs produce NaN or -inf.
    pub fn log<'t>(&'t self, a: Var<'t, T>) -> Var<'t, T> {
        let v = self.unary(a, T::ln);
        self.push(v, Op::Log(a.id), self.needs(&[a.id]))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp<'t>(&'t self, a: Var<'t, T>, lo: T, hi: T) -> Var<'t, T> {
        let v = self.unary(a, |x| x.max(lo).min(hi));
        self.push(v, Op::Clamp { a: a.id, lo, hi }, self.needs(&[a.id]))
    }

    pub fn reshape<'t>(&'t self, a: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
        self.check_owner(a);
        let v = self.inner.borrow().nodes[a.id].value.clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a.id), self.needs(&[a.id])))
    }

    /// Sum of all elements.
    pub fn sum<'t>(&'t self, a: Var<'t, T>) -> Var<'t, T> {
        self.check_owner(a);
        let s = self.inner.borrow().nodes[a.id].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.id), self.needs(&[a.id]))
    }

    /// Mean of all elements.
    pub fn mean<'t>(&'t self, a: Var<'t, T>) -> Var<'t, T> {
        self.check_owner(a);
        let m = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[a.id].value;
            t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64)
        };
        self.push(Tensor::scalar(m), Op::Mean(a.id), self.needs(&[a.id]))
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_owner(a);
        self.check_owner(b);
        let (v, m, k, n) = {
            let inner = self.inner.borrow();
            let (x, y) = (&inner.nodes[a.id].value, &inner.nodes[b.id].value);
            if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
                return Err(Error::shape("matmul", x.shape(), y.shape()));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut out = vec![T::zero(); m * n];
            gemm(m, k, n, x.data(), false, y.data(), false, &mut out, false);
            (Tensor::new(&[m, n], out)?, m, k, n)
        };
        Ok(self.push(
            v,
            Op::MatMul {
                a: a.id,
                b: b.id,
                m,
                k,
                n,
            },
            self.needs(&[a.id, b.id]),
        ))
    }

    /// Fully connected layer `x w^T + b`.
    pub fn linear<'t>(&'t self, x: Var<'t, T>, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.check_owner(x);
        self.check_owner(w);
        let (v, rows, in_f, out_f) = {
            let inner = self.inner.borrow();
            let (xv, wv) = (&inner.nodes[x.id].value, &inner.nodes[w.id].value);
            if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
                return Err(Error::shape("linear", xv.shape(), wv.shape()));
            }
            let (rows, in_f, out_f) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
            let mut out = vec![T::zero(); rows * out_f];
            gemm(rows, in_f, out_f, xv.data(), false, wv.data(), true, &mut out, false);
            if let Some(b) = b {
                self.check_owner(b);
                let bv = &inner.nodes[b.id].value;
                if bv.shape() != [out_f] {
                    return Err(Error::shape("linear bias", bv.shape(), &[out_f]));
                }
                for row in out.chunks_mut(out_f) {
                    for (o, bias) in row.iter_mut().zip(bv.data()) {
                        *o += *bias;
                    }
                }
            }
            (Tensor::new(&[rows, out_f], out)?, rows, in_f, out_f)
        };
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        Ok(self.push(
            v,
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                rows,
                in_f,
                out_f,
            },
            self.needs(&ids),
        ))
    }

    /// Strided, zero-padded 2-D cross-correlation.
    pub fn conv2d<'t>(
        &'t self,
        x: Var<'t, T>,
        w: Var<'t, T>,
        b: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        self.check_owner(x);
        self.check_owner(w);
        let (v, geom, batch, out_c) = {
            let inner = self.inner.borrow();
            let (xv, wv) = (&inner.nodes[x.id].value, &inner.nodes[w.id].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
                return Err(Error::shape("conv2d", xs, ws));
            }
            let (batch, in_c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (out_c, kh, kw) = (ws[0], ws[2], ws[3]);
            let (out_h, out_w) = match (conv_out_len(h, kh, stride, pad), conv_out_len(wd, kw, stride, pad)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::shape("conv2d", xs, ws)),
            };
            let geom = ConvGeom {
                channels: in_c,
                h,
                w: wd,
                kh,
                kw,
                stride,
                pad,
                out_h,
                out_w,
            };
            let bias = match b {
                Some(b) => {
                    self.check_owner(b);
                    let bv = &inner.nodes[b.id].value;
                    if bv.shape() != [out_c] {
                        return Err(Error::shape("conv2d bias", bv.shape(), &[out_c]));
                    }
                    Some(bv.data())
                }
                None => None,
            };
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let in_plane = in_c * h * wd;
            let out_plane = out_c * cols;
            let mut col_buf = vec![T::zero(); rows * cols];
            let mut out = vec![T::zero(); batch * out_plane];
            for n in 0..batch {
                geom.im2col(&xv.data()[n * in_plane..(n + 1) * in_plane], &mut col_buf);
                let y = &mut out[n * out_plane..(n + 1) * out_plane];
                gemm(out_c, rows, cols, wv.data(), false, &col_buf, false, y, false);
                if let Some(bias) = bias {
                    for (plane, bb) in y.chunks_mut(cols).zip(bias) {
                        plane.iter_mut().for_each(|v| *v += *bb);
                    }
                }
            }
            (Tensor::new(&[batch, out_c, out_h, out_w], out)?, geom, batch, out_c)
        };
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        Ok(self.push(
            v,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
                batch,
                out_c,
            },
            self.needs(&ids),
        ))
    }

    /// Transposed convolution (the adjoint of [`conv2d`](Self::conv2d) with
    /// the same stride and padding). Weight layout is `[in, out, kh, kw]`.
    pub fn conv2d_transpose<'t>(
        &'t self,
        x: Var<'t, T>,
        w: Var<'t, T>,
        b: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        self.check_owner(x);
        self.check_owner(w);
        let (v, geom, batch, in_c) = {
            let inner = self.inner.borrow();
            let (xv, wv) = (&inner.nodes[x.id].value, &inner.nodes[w.id].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
                return Err(Error::shape("conv2d_transpose", xs, ws));
            }
            let (batch, in_c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (out_c, kh, kw) = (ws[1], ws[2], ws[3]);
            let (out_h, out_w) = match (
                conv_transpose_out_len(h, kh, stride, pad),
                conv_transpose_out_len(wd, kw, stride, pad),
            ) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::shape("conv2d_transpose", xs, ws)),
            };
            // the forward convolution this op is the adjoint of
            let geom = ConvGeom {
                channels: out_c,
                h: out_h,
                w: out_w,
                kh,
                kw,
                stride,
                pad,
                out_h: h,
                out_w: wd,
            };
            if conv_out_len(out_h, kh, stride, pad) != Some(h) || conv_out_len(out_w, kw, stride, pad) != Some(wd) {
                return Err(Error::shape("conv2d_transpose", xs, ws));
            }
            let bias = match b {
                Some(b) => {
                    self.check_owner(b);
                    let bv = &inner.nodes[b.id].value;
                    if bv.shape() != [out_c] {
                        return Err(Error::shape("conv2d_transpose bias", bv.shape(), &[out_c]));
                    }
                    Some(bv.data())
                }
                None => None,
            };
            let (rows, cols) = (geom.col_rows(), geom.col_cols());
            let in_plane = in_c * cols;
            let out_plane = out_c * out_h * out_w;
            let mut col_buf = vec![T::zero(); rows * cols];
            let mut out = vec![T::zero(); batch * out_plane];
            for n in 0..batch {
                gemm(rows, in_c, cols, wv.data(), true, &xv.data()[n * in_plane..(n + 1) * in_plane], false, &mut col_buf, false);
                let y = &mut out[n * out_plane..(n + 1) * out_plane];
                geom.col2im_add(&col_buf, y);
                if let Some(bias) = bias {
                    for (plane, bb) in y.chunks_mut(out_h * out_w).zip(bias) {
                        plane.iter_mut().for_each(|v| *v += *bb);
                    }
                }
            }
            (Tensor::new(&[batch, out_c, out_h, out_w], out)?, geom, batch, in_c)
        };
        let mut ids = vec![x.id, w.id];
        ids.extend(b.map(|b| b.id));
        Ok(self.push(
            v,
            Op::ConvTranspose2d {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
                batch,
                in_c,
            },
            self.needs(&ids),
        ))
    }

    /// Per-channel normalization over batch and spatial positions, then
    /// `gamma * xhat + beta`. In training mode the batch statistics are
    /// returned for the running averages.
    pub fn batch_norm<'t>(
        &'t self,
        x: Var<'t, T>,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        self.check_owner(x);
        self.check_owner(gamma);
        self.check_owner(beta);
        let (v, op, stats) = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.id].value;
            let (gv, bv) = (&inner.nodes[gamma.id].value, &inner.nodes[beta.id].value);
            let xs = xv.shape();
            if xs.len() < 2 {
                return Err(Error::shape("batch_norm", xs, gv.shape()));
            }
            let (batch, channels) = (xs[0], xs[1]);
            let spatial: usize = xs[2..].iter().product();
            if gv.shape() != [channels] || bv.shape() != [channels] {
                return Err(Error::shape("batch_norm", xs, gv.shape()));
            }
            let count = batch * spatial;
            let idx = |n: usize, c: usize| (n * channels + c) * spatial;
            let data = xv.data();
            let (mean, var_biased, stats) = match mode {
                BatchNormMode::Train => {
                    if count < 2 {
                        return Err(Error::Invalid("batch_norm in training mode needs at least two values per channel".into()));
                    }
                    let mut mean = vec![T::zero(); channels];
                    let mut var = vec![T::zero(); channels];
                    for c in 0..channels {
                        let mut s = T::zero();
                        for n in 0..batch {
                            s += data[idx(n, c)..idx(n, c) + spatial].iter().copied().sum::<T>();
                        }
                        let m = s / T::lit(count as f64);
                        let mut q = T::zero();
                        for n in 0..batch {
                            for v in &data[idx(n, c)..idx(n, c) + spatial] {
                                q += (*v - m) * (*v - m);
                            }
                        }
                        mean[c] = m;
                        var[c] = q / T::lit(count as f64);
                    }
                    let unbiased = var
                        .iter()
                        .map(|v| *v * T::lit(count as f64) / T::lit((count - 1) as f64))
                        .collect();
                    let stats = BatchStats {
                        mean: mean.clone(),
                        var: unbiased,
                    };
                    (mean, var, Some(stats))
                }
                BatchNormMode::Eval {
                    running_mean,
                    running_var,
                } => {
                    if running_mean.len() != channels || running_var.len() != channels {
                        return Err(Error::shape("batch_norm running stats", &[running_mean.len()], &[channels]));
                    }
                    (running_mean.to_vec(), running_var.to_vec(), None)
                }
            };
            let inv_std: Vec<T> = var_biased.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); data.len()];
            let mut out = vec![T::zero(); data.len()];
            for n in 0..batch {
                for c in 0..channels {
                    let r = idx(n, c)..idx(n, c) + spatial;
                    for i in r {
                        let h = (data[i] - mean[c]) * inv_std[c];
                        xhat[i] = h;
                        out[i] = gv.data()[c] * h + bv.data()[c];
                    }
                }
            }
            let op = Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch,
                channels,
                spatial,
                training: stats.is_some(),
            };
            (Tensor::new(xs, out)?, op, stats)
        };
        let needs = self.needs(&[x.id, gamma.id, beta.id]);
        Ok((self.push(v, op, needs), stats))
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_owner(loss);
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[loss.id].value.shape()
            )));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        let mut max_param = 0;

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if let Op::Param(p) = node.op {
                max_param = max_param.max(p.0 + 1);
            }
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Constant | Op::Variable | Op::Param(_) => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let needs = |i: usize| nodes[i].needs_grad;
            let val = |i: usize| nodes[i].value.data();
            match &node.op {
                Op::Constant | Op::Variable | Op::Param(_) => unreachable!(),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                    if needs(*a) {
                        acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(d, s)| *d += *s);
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, g.len()).iter_mut().zip(&g).for_each(|(d, s)| *d += sign * *s);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let other = val(*b);
                        acc(&mut grads, *a, g.len())
                            .iter_mut()
                            .zip(g.iter().zip(other))
                            .for_each(|(d, (s, o))| *d += *s * *o);
                    }
                    if needs(*b) {
                        let other = val(*a);
                        acc(&mut grads, *b, g.len())
                            .iter_mut()
                            .zip(g.iter().zip(other))
                            .for_each(|(d, (s, o))| *d += *s * *o);
                    }
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(d, s)| *d += *s);
                }
                Op::MulScalar(a, k) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(d, s)| *d += *s * *k);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(x))
                        .for_each(|(d, (s, x))| {
                            if *x > T::zero() {
                                *d += *s
                            }
                        });
                }
                Op::Clamp { a, lo, hi } => {
                    let x = val(*a);
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(x))
                        .for_each(|(d, (s, x))| {
                            if *x >= *lo && *x <= *hi {
                                *d += *s
                            }
                        });
                }
                Op::Sigmoid(a) | Op::Exp(a) => {
                    let y = node.value.data();
                    let is_sigmoid = matches!(node.op, Op::Sigmoid(_));
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (s, y))| {
                            *d += if is_sigmoid { *s * *y * (T::one() - *y) } else { *s * *y }
                        });
                }
                Op::Log(a) => {
                    let x = val(*a);
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(x))
                        .for_each(|(d, (s, x))| *d += *s / *x);
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let len = nodes[*a].value.len();
                    let s = if matches!(node.op, Op::Mean(_)) { g[0] / T::lit(len as f64) } else { g[0] };
                    acc(&mut grads, *a, len).iter_mut().for_each(|d| *d += s);
                }
                Op::MatMul { a, b, m, k, n } => {
                    if needs(*a) {
                        let gb = acc(&mut grads, *a, m * k);
                        gemm(*m, *n, *k, &g, false, val(*b), true, gb, true);
                    }
                    if needs(*b) {
                        let gb = acc(&mut grads, *b, k * n);
                        gemm(*k, *m, *n, val(*a), true, &g, false, gb, true);
                    }
                }
                Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    in_f,
                    out_f,
                } => {
                    if needs(*x) {
                        let gx = acc(&mut grads, *x, rows * in_f);
                        gemm(*rows, *out_f, *in_f, &g, false, val(*w), false, gx, true);
                    }
                    if needs(*w) {
                        let gw = acc(&mut grads, *w, out_f * in_f);
                        gemm(*out_f, *rows, *in_f, &g, true, val(*x), false, gw, true);
                    }
                    if let Some(b) = b.filter(|b| needs(*b)) {
                        let gbias = acc(&mut grads, b, *out_f);
                        for row in g.chunks(*out_f) {
                            gbias.iter_mut().zip(row).for_each(|(d, s)| *d += *s);
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    batch,
                    out_c,
                } => {
                    let (rows, cols) = (geom.col_rows(), geom.col_cols());
                    let in_plane = geom.channels * geom.h * geom.w;
                    let out_plane = out_c * cols;
                    let mut col_buf = vec![T::zero(); rows * cols];
                    if needs(*w) {
                        let mut gw = vec![T::zero(); out_c * rows];
                        for n in 0..*batch {
                            geom.im2col(&val(*x)[n * in_plane..(n + 1) * in_plane], &mut col_buf);
                            gemm(*out_c, cols, rows, &g[n * out_plane..(n + 1) * out_plane], false, &col_buf, true, &mut gw, true);
                        }
                        acc(&mut grads, *w, gw.len()).iter_mut().zip(&gw).for_each(|(d, s)| *d += *s);
                    }
                    if needs(*x) {
                        let mut gx = vec![T::zero(); batch * in_plane];
                        for n in 0..*batch {
                            gemm(rows, *out_c, cols, val(*w), true, &g[n * out_plane..(n + 1) * out_plane], false, &mut col_buf, false);
                            geom.col2im_add(&col_buf, &mut gx[n * in_plane..(n + 1) * in_plane]);
                        }
                        acc(&mut grads, *x, gx.len()).iter_mut().zip(&gx).for_each(|(d, s)| *d += *s);
                    }
                    if let Some(b) = b.filter(|b| needs(*b)) {
                        let gbias = acc(&mut grads, b, *out_c);
                        for n in 0..*batch {
                            for (c, plane) in g[n * out_plane..(n + 1) * out_plane].chunks(cols).enumerate() {
                                gbias[c] += plane.iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                Op::ConvTranspose2d {
                    x,
                    w,
                    b,
                    geom,
                    batch,
                    in_c,
                } => {
                    let (rows, cols) = (geom.col_rows(), geom.col_cols());
                    let in_plane = in_c * cols;
                    let out_plane = geom.channels * geom.h * geom.w;
                    let mut col_buf = vec![T::zero(); rows * cols];
                    let mut gx = needs(*x).then(|| vec![T::zero(); batch * in_plane]);
                    let mut gw = needs(*w).then(|| vec![T::zero(); in_c * rows]);
                    for n in 0..*batch {
                        geom.im2col(&g[n * out_plane..(n + 1) * out_plane], &mut col_buf);
                        if let Some(gx) = gx.as_mut() {
                            gemm(*in_c, rows, cols, val(*w), false, &col_buf, false, &mut gx[n * in_plane..(n + 1) * in_plane], false);
                        }
                        if let Some(gw) = gw.as_mut() {
                            gemm(*in_c, cols, rows, &val(*x)[n * in_plane..(n + 1) * in_plane], false, &col_buf, true, gw, true);
                        }
                    }
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx.len()).iter_mut().zip(&gx).for_each(|(d, s)| *d += *s);
                    }
                    if let Some(gw) = gw {
                        acc(&mut grads, *w, gw.len()).iter_mut().zip(&gw).for_each(|(d, s)| *d += *s);
                    }
                    if let Some(b) = b.filter(|b| needs(*b)) {
                        let plane = geom.h * geom.w;
                        let gbias = acc(&mut grads, b, geom.channels);
                        for n in 0..*batch {
                            for (c, p) in g[n * out_plane..(n + 1) * out_plane].chunks(plane).enumerate() {
                                gbias[c] += p.iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                    channels,
                    spatial,
                    training,
                } => {
                    let (batch, channels, spatial) = (*batch, *channels, *spatial);
                    let idx = |n: usize, c: usize| (n * channels + c) * spatial;
                    let mut sum_g = vec![T::zero(); channels];
                    let mut sum_gx = vec![T::zero(); channels];
                    for n in 0..batch {
                        for c in 0..channels {
                            for i in idx(n, c)..idx(n, c) + spatial {
                                sum_g[c] += g[i];
                                sum_gx[c] += g[i] * xhat[i];
                            }
                        }
                    }
                    if needs(*x) {
                        let gam = val(*gamma);
                        let count = T::lit((batch * spatial) as f64);
                        let gx = acc(&mut grads, *x, g.len());
                        for n in 0..batch {
                            for c in 0..channels {
                                let scale = gam[c] * inv_std[c];
                                for i in idx(n, c)..idx(n, c) + spatial {
                                    gx[i] += if *training {
                                        scale * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                                    } else {
                                        scale * g[i]
                                    };
                                }
                            }
                        }
                    }
                    if needs(*gamma) {
                        acc(&mut grads, *gamma, channels).iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += *s);
                    }
                    if needs(*beta) {
                        acc(&mut grads, *beta, channels).iter_mut().zip(&sum_g).for_each(|(d, s)| *d += *s);
                    }
                }
            }
        }

        let mut out = Gradients {
            nodes: Vec::with_capacity(nodes.len()),
            params: vec![None; max_param],
        };
        for (node, g) in nodes.iter().zip(grads) {
            let g = g.map(|g| Tensor::new(node.value.shape(), g).expect("gradient matches its node"));
            if let (Op::Param(p), Some(g)) = (&node.op, &g) {
                match &mut out.params[p.0] {
                    Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(d, s)| *d += *s),
                    slot => *slot = Some(g.clone()),
                }
            }
            out.nodes.push(g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_has_gradient_two_x() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let loss = tape.mul(x, x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn bilinear_sum_gradient_is_other_operand() {
        let tape = Tape::new();
        let a = tape.variable(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.variable(t(&[2, 2], &[-1.0, 0.5, 7.0, 2.0]));
        let loss = tape.sum(tape.mul(a, b).unwrap());
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[-1.0, 0.5, 7.0, 2.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_passes_positive_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4], &[-2.0, -0.5, 0.0, 3.0]));
        assert_eq!(tape.relu(x).value().data(), &[0.0, 0.0, 0.0, 3.0]);
        let neg = tape.mul_scalar(x, -1.0);
        assert_eq!(tape.relu(neg).value().data(), &[2.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|v| v as f64 * 0.1 - 2.0).collect();
        let x = tape.constant(t(&[2, 3, 4, 5], &data));
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = tape.constant(t(&[3, 3, 1, 1], &w));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(y.value().data(), &data[..]);

        let single = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        assert_eq!(tape.conv2d(single, one, None, 1, 0).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.matmul(a, b).is_ok());
        let img = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(img, k, None, 1, 1), Err(Error::Shape { op: "conv2d", .. })));
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::scalar(1.0f64));
        let y = tape.exp(x);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::<f64>::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fan_in_accumulates() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0f64));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        // z = 2x^2
        let g = tape.backward(z).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 8.0);
    }

    #[test]
    fn params_collect_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1.0, -1.0]), true);
        let buf = store.add("buf", t(&[2], &[5.0, 5.0]), false);
        let tape = Tape::new();
        let wv = tape.param(&store, w);
        let bv = tape.param(&store, buf);
        let loss = tape.sum(tape.mul(wv, bv).unwrap());
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap().data(), &[5.0, 5.0]);
        assert!(g.param(buf).is_none());
        assert_eq!(store.trainable_len(), 2);
    }

    #[test]
    fn eval_batch_norm_is_affine() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let gamma = tape.constant(t(&[2], &[2.0, 1.0]));
        let beta = tape.constant(t(&[2], &[0.5, 0.0]));
        let mode = BatchNormMode::Eval {
            running_mean: &[1.0, 0.0],
            running_var: &[4.0, 1.0],
        };
        let (y, stats) = tape.batch_norm(x, gamma, beta, mode, 0.0).unwrap();
        assert!(stats.is_none());
        assert_eq!(y.value().data(), &[0.5, 2.0, 2.5, 4.0]);
    }

    #[test]
    fn train_batch_norm_reports_unbiased_stats() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 6.0]));
        let one = tape.constant(t(&[1], &[1.0]));
        let zero = tape.constant(t(&[1], &[0.0]));
        let (y, stats) = tape.batch_norm(x, one, zero, BatchNormMode::Train, 0.0).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![3.0]);
        assert!((stats.var[0] - 14.0 / 3.0).abs() < 1e-12);
        let s: f64 = y.value().data().iter().sum();
        assert!(s.abs() < 1e-12);
        let mut rm = [0.0];
        let mut rv = [1.0];
        stats.update_running(&mut rm, &mut rv, 0.1);
        assert!((rm[0] - 0.3).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-12);
    }
}
