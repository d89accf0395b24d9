//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] records every operation of one forward pass. Node ids are
//! assigned in recording order, which is therefore a topological order;
//! [`Tape::backward`] walks it in reverse. Trainable tensors live in a
//! [`ParamStore`] and enter a tape through [`Tape::param`]; their gradients
//! are written back to the store.
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of propagating poison.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::loss;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle of a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// A named trainable tensor and its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
}

/// Named parameters of a model, in registration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    by_name: BTreeMap<String, usize>,
    grads_pending: bool,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
            grads_pending: false,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            grad: vec![S::zero(); value.numel()],
            value,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
        self.grads_pending = false;
    }

    /// FNV-1a over names and value bits, for "unchanged" assertions.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        let mut buf = Vec::new();
        for p in &self.params {
            p.name.bytes().for_each(&mut eat);
            for v in p.value.data() {
                buf.clear();
                v.to_le_bytes_vec(&mut buf);
                buf.iter().copied().for_each(&mut eat);
            }
        }
        h
    }
}

/// Spatial padding of `conv2d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding that keeps the spatial size; odd kernels, stride 1.
    Same,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Input,
    Param(ParamId),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Relu(Var),
    Sigmoid(Var),
    LogSoftmax(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MeanAxes {
        x: Var,
        axes: Vec<usize>,
    },
    AvgPool2d(Var),
    ConcatRows(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    /// Gradient w.r.t. the input is computed during the forward pass.
    NtXent {
        x: Var,
        grad: Vec<S>,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<S>,
    },
    SoftmaxCrossEntropy {
        x: Var,
        targets: Vec<usize>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Linear { .. } => "linear",
            Op::MeanAxes { .. } => "global_avg_pool",
            Op::AvgPool2d(_) => "avg_pool2d",
            Op::ConcatRows(..) => "concat_rows",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::NtXent { .. } => "nt_xent",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    backpropagated: bool,
    fault: Option<&'static str>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output length of a valid strided window: `floor((len - k) / stride) + 1`.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || len < kernel {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backpropagated: false,
            fault: None,
        }
    }

    /// Test hook: doubles the gradient flowing back through every op named
    /// `op` (e.g. `"conv1d"`), to prove that gradient checks catch a broken
    /// backward pass.
    pub fn inject_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Hash of which ReLU inputs are positive, over every ReLU on the tape.
    /// Two passes with equal patterns took the same linear piece.
    pub fn relu_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.nodes[x.0].value.data() {
                    h ^= (v > S::zero()) as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// A constant input; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a parameter onto the tape. Its gradient flows back to `store`
    /// on [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Valid 1-D cross-correlation. `x: [B, C_in, L]`, `w: [C_out, C_in, K]`,
    /// `b: [C_out]` -> `[B, C_out, floor((L - K) / stride) + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(Error::shape(
                "conv1d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        let l_out = conv_out_len(len, k, stride).ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!("length {len} shorter than kernel {k} (stride {stride})"),
            )
        })?;
        let rows = c_in * k;
        let mut col = vec![S::zero(); rows * l_out];
        let mut out = vec![S::zero(); batch * c_out * l_out];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for bi in 0..batch {
            im2col_1d(&xv[bi * c_in * len..(bi + 1) * c_in * len], c_in, len, k, stride, l_out, &mut col);
            let ob = &mut out[bi * c_out * l_out..(bi + 1) * c_out * l_out];
            for (co, row) in ob.chunks_mut(l_out).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[co]);
            }
            S::gemm(
                c_out,
                rows,
                l_out,
                S::one(),
                wv,
                (rows as isize, 1),
                &col,
                (l_out as isize, 1),
                S::one(),
                ob,
                (l_out as isize, 1),
            );
        }
        let value = Tensor::new(vec![batch, c_out, l_out], out)?;
        self.push(value, Op::Conv1d { x, w, b, stride }, &[x, w, b])
    }

    /// 2-D cross-correlation. `x: [B, C_in, H, W]`, `w: [C_out, C_in, Kh, Kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs != [ws[0]] || xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if kh != kw || kh % 2 == 0 || stride != 1 {
                    return Err(Error::shape(
                        "conv2d",
                        "same padding needs a square odd kernel and stride 1",
                    ));
                }
                kh / 2
            }
        };
        let ho = conv_out_len(h + 2 * pad, kh, stride);
        let wo = conv_out_len(wd + 2 * pad, kw, stride);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {h}x{wd} smaller than kernel {kh}x{kw}"),
                ))
            }
        };
        let geo = Geo2d {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let rows = c_in * kh * kw;
        let spatial = ho * wo;
        let mut col = vec![S::zero(); rows * spatial];
        let mut out = vec![S::zero(); batch * c_out * spatial];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let in_sz = c_in * h * wd;
        for bi in 0..batch {
            im2col_2d(&xv[bi * in_sz..(bi + 1) * in_sz], &geo, &mut col);
            let ob = &mut out[bi * c_out * spatial..(bi + 1) * c_out * spatial];
            for (co, row) in ob.chunks_mut(spatial).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[co]);
            }
            S::gemm(
                c_out,
                rows,
                spatial,
                S::one(),
                wv,
                (rows as isize, 1),
                &col,
                (spatial as isize, 1),
                S::one(),
                ob,
                (spatial as isize, 1),
            );
        }
        let value = Tensor::new(vec![batch, c_out, ho, wo], out)?;
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[x, w, b],
        )
    }

    /// Per-sample, per-group standardization followed by a per-channel
    /// affine map. `x: [B, C, ...]`, `gamma`, `beta`: `[C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("group_norm", format!("input {xs:?} has no channel axis")));
        }
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", "gamma/beta must have one entry per channel"));
        }
        let batch = xs[0];
        let spatial: usize = xs[2..].iter().product();
        let per_group = (c / groups) * spatial;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![S::zero(); xv.len()];
        let mut means = Vec::with_capacity(batch * groups);
        let mut rstds = Vec::with_capacity(batch * groups);
        let eps = S::from_f64_lossy(eps);
        let inv_n = S::one() / S::from_usize(per_group).unwrap();
        for bg in 0..batch * groups {
            let seg = &xv[bg * per_group..(bg + 1) * per_group];
            let mean = seg.iter().copied().sum::<S>() * inv_n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rstd = S::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let g0 = (bg % groups) * (c / groups);
            let dst = &mut out[bg * per_group..(bg + 1) * per_group];
            for (ci, (drow, srow)) in dst.chunks_mut(spatial).zip(seg.chunks(spatial)).enumerate() {
                let (ga, be) = (gv[g0 + ci], bv[g0 + ci]);
                for (d, &s) in drow.iter_mut().zip(srow) {
                    *d = (s - mean) * rstd * ga + be;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a < S::zero() { S::zero() } else { a }).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let cols = *v.shape().last().ok_or_else(|| Error::shape("log_softmax", "scalar input"))?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|a| *a -= lse);
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// `x: [B, in]`, `w: [out, in]`, `b: [out]` -> `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(bv);
        }
        S::gemm(
            n,
            din,
            dout,
            S::one(),
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            S::one(),
            &mut out,
            (dout as isize, 1),
        );
        let value = Tensor::new(vec![n, dout], out)?;
        self.push(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Arithmetic mean over `axes`; those axes are removed from the shape.
    pub fn global_avg_pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() || axes.iter().any(|&a| a >= xs.len()) {
            return Err(Error::shape(
                "global_avg_pool",
                format!("axes {axes:?} out of range for rank {}", xs.len()),
            ));
        }
        let map = ReduceMap::new(&xs, &axes);
        let mut out = vec![S::zero(); map.out_len];
        let xv = self.value(x).data();
        map.for_each(|i, o| out[o] += xv[i]);
        let inv = S::one() / S::from_usize(map.count).unwrap();
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(map.out_shape.clone(), out)?;
        self.push(value, Op::MeanAxes { x, axes }, &[x])
    }

    /// 2x2 average pooling with stride 2 over the last two axes of
    /// `[B, C, H, W]`; odd trailing rows/columns are dropped.
    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape("avg_pool2d", format!("input {xs:?} too small to pool")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = S::from_f64_lossy(0.25);
        let mut out = vec![S::zero(); planes * ho * wo];
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let r0 = 2 * i * w + 2 * j;
                    let r1 = r0 + w;
                    dst[i * wo + j] = (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], ho, wo], out)?;
        self.push(value, Op::AvgPool2d(x), &[x])
    }

    /// Stacks `a: [n1, ...]` on top of `b: [n2, ...]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat_rows", format!("{sa:?} vs {sb:?}")));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::ConcatRows(a, b), &[a, b])
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// NT-Xent over the rows of `x: [2N, D]` with the given partner map.
    pub fn nt_xent(&mut self, x: Var, pairing: &[usize], temperature: f64) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::shape("nt_xent", format!("latents {xs:?} must be 2-D")));
        }
        let (rows, dim) = (xs[0], xs[1]);
        let (l, grad) = loss::nt_xent_with_grad(self.value(x).data(), rows, dim, pairing, temperature)?;
        self.push(
            Tensor::scalar(S::from_f64_lossy(l)),
            Op::NtXent { x, grad },
            &[x],
        )
    }

    /// Mean binary cross-entropy of logits `x` against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[S]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != targets.len() || xv.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", xv.len(), targets.len()),
            ));
        }
        let mut total = S::zero();
        for (&z, &t) in xv.iter().zip(targets) {
            total += z.max(S::zero()) - z * t + (S::one() + (-z.abs()).exp()).ln();
        }
        let value = Tensor::scalar(total / S::from_usize(xv.len()).unwrap());
        self.push(
            value,
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        )
    }

    /// Mean softmax cross-entropy of logits `x: [n, C]` against class ids.
    pub fn softmax_cross_entropy(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[0] != targets.len() || xs[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {xs:?}, {} targets", targets.len()),
            ));
        }
        let cols = xs[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::invalid(format!("class {t} out of range for {cols} logits")));
        }
        let mut total = S::zero();
        for (row, &t) in self.value(x).data().chunks(cols).zip(targets) {
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / S::from_usize(targets.len()).unwrap());
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        )
    }

    /// Backpropagates from scalar `loss` and writes parameter gradients into
    /// `store`.
    ///
    /// Fails if this tape was already backpropagated, or if `store` still
    /// holds gradients from an earlier pass that were never cleared with
    /// [`ParamStore::zero_grad`]. Use [`Tape::backward_accumulate`] to add to
    /// existing gradients on purpose.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        if store.grads_pending {
            return Err(Error::Autodiff(
                "parameter gradients from a previous backward pass were not reset".into(),
            ));
        }
        self.backward_accumulate(loss, store)
    }

    /// Like [`Tape::backward`] but adds to whatever gradients `store` holds.
    pub fn backward_accumulate(&mut self, loss: Var, store: &mut ParamStore<S>) -> Result<()> {
        if self.backpropagated {
            return Err(Error::Autodiff("tape was already backpropagated".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if self.fault == Some(node.op.name()) {
                g.iter_mut().for_each(|v| *v += *v);
            }
            if let Op::Param(id) = node.op {
                let p = store.get_mut(id);
                for (dst, src) in p.grad.iter_mut().zip(&g) {
                    *dst += *src;
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        store.grads_pending = true;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv1d { x, w, b, stride } => {
                let xs = self.shape(*x);
                let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (c_out, k) = (ws[0], ws[2]);
                let l_out = node.value.shape()[2];
                let rows = c_in * k;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.wants(*b) {
                    let db = slot(grads, *b, c_out);
                    for (bi, chunk) in g.chunks(l_out).enumerate() {
                        db[bi % c_out] += chunk.iter().copied().sum::<S>();
                    }
                }
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                let mut col = vec![S::zero(); rows * l_out];
                let mut dcol = vec![S::zero(); if want_x { rows * l_out } else { 0 }];
                for bi in 0..batch {
                    let gb = &g[bi * c_out * l_out..(bi + 1) * c_out * l_out];
                    if want_w {
                        im2col_1d(&xv[bi * c_in * len..(bi + 1) * c_in * len], c_in, len, k, *stride, l_out, &mut col);
                        let dw = slot(grads, *w, c_out * rows);
                        S::gemm(
                            c_out,
                            l_out,
                            rows,
                            S::one(),
                            gb,
                            (l_out as isize, 1),
                            &col,
                            (1, l_out as isize),
                            S::one(),
                            dw,
                            (rows as isize, 1),
                        );
                    }
                    if want_x {
                        S::gemm(
                            rows,
                            c_out,
                            l_out,
                            S::one(),
                            wv,
                            (1, rows as isize),
                            gb,
                            (l_out as isize, 1),
                            S::zero(),
                            &mut dcol,
                            (l_out as isize, 1),
                        );
                        let dx = slot(grads, *x, batch * c_in * len);
                        col2im_1d(&dcol, c_in, len, k, *stride, l_out, &mut dx[bi * c_in * len..(bi + 1) * c_in * len]);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.shape(*x);
                let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let ws = self.shape(*w);
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = node.value.shape();
                let geo = Geo2d {
                    c_in,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    ho: os[2],
                    wo: os[3],
                };
                let spatial = geo.ho * geo.wo;
                let rows = c_in * kh * kw;
                let in_sz = c_in * h * wd;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.wants(*b) {
                    let db = slot(grads, *b, c_out);
                    for (bi, chunk) in g.chunks(spatial).enumerate() {
                        db[bi % c_out] += chunk.iter().copied().sum::<S>();
                    }
                }
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                let mut col = vec![S::zero(); rows * spatial];
                let mut dcol = vec![S::zero(); if want_x { rows * spatial } else { 0 }];
                for bi in 0..batch {
                    let gb = &g[bi * c_out * spatial..(bi + 1) * c_out * spatial];
                    if want_w {
                        im2col_2d(&xv[bi * in_sz..(bi + 1) * in_sz], &geo, &mut col);
                        let dw = slot(grads, *w, c_out * rows);
                        S::gemm(
                            c_out,
                            spatial,
                            rows,
                            S::one(),
                            gb,
                            (spatial as isize, 1),
                            &col,
                            (1, spatial as isize),
                            S::one(),
                            dw,
                            (rows as isize, 1),
                        );
                    }
                    if want_x {
                        S::gemm(
                            rows,
                            c_out,
                            spatial,
                            S::one(),
                            wv,
                            (1, rows as isize),
                            gb,
                            (spatial as isize, 1),
                            S::zero(),
                            &mut dcol,
                            (spatial as isize, 1),
                        );
                        let dx = slot(grads, *x, batch * in_sz);
                        col2im_2d(&dcol, &geo, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xs = self.shape(*x);
                let (batch, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let cpg = c / groups;
                let per_group = cpg * spatial;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let want_x = self.wants(*x);
                let mut dx_local = vec![S::zero(); if want_x { per_group } else { 0 }];
                let inv_n = S::one() / S::from_usize(per_group).unwrap();
                for bg in 0..batch * groups {
                    let (m, r) = (mean[bg], rstd[bg]);
                    let g0 = (bg % groups) * cpg;
                    let seg = &xv[bg * per_group..(bg + 1) * per_group];
                    let gseg = &g[bg * per_group..(bg + 1) * per_group];
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    for ci in 0..cpg {
                        let ga = gv[g0 + ci];
                        let (mut dg, mut db) = (S::zero(), S::zero());
                        for s in 0..spatial {
                            let idx = ci * spatial + s;
                            let xhat = (seg[idx] - m) * r;
                            let dy = gseg[idx];
                            dg += dy * xhat;
                            db += dy;
                            let dxhat = dy * ga;
                            sum_d += dxhat;
                            sum_dx += dxhat * xhat;
                            if want_x {
                                dx_local[idx] = dxhat;
                            }
                        }
                        dgamma[g0 + ci] += dg;
                        dbeta[g0 + ci] += db;
                    }
                    if want_x {
                        let mean_d = sum_d * inv_n;
                        let mean_dx = sum_dx * inv_n;
                        let dx = slot(grads, *x, xv.len());
                        let dst = &mut dx[bg * per_group..(bg + 1) * per_group];
                        for idx in 0..per_group {
                            let xhat = (seg[idx] - m) * r;
                            dst[idx] += r * (dx_local[idx] - mean_d - xhat * mean_dx);
                        }
                    }
                }
                if self.wants(*gamma) {
                    add_into(slot(grads, *gamma, c), &dgamma);
                }
                if self.wants(*beta) {
                    add_into(slot(grads, *beta, c), &dbeta);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = slot(grads, *x, xv.len());
                for ((d, &gi), &a) in dx.iter_mut().zip(g).zip(xv) {
                    if a > S::zero() {
                        *d += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                let dx = slot(grads, *x, yv.len());
                for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(yv) {
                    *d += gi * y * (S::one() - y);
                }
            }
            Op::LogSoftmax(x) => {
                let yv = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let dx = slot(grads, *x, yv.len());
                for ((drow, grow), yrow) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(yv.chunks(cols)) {
                    let gs = grow.iter().copied().sum::<S>();
                    for ((d, &gi), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += gi - y.exp() * gs;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[0];
                if self.wants(*b) {
                    let db = slot(grads, *b, dout);
                    for row in g.chunks(dout) {
                        add_into(db, row);
                    }
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let dw = slot(grads, *w, dout * din);
                    S::gemm(
                        dout,
                        n,
                        din,
                        S::one(),
                        g,
                        (1, dout as isize),
                        xv,
                        (din as isize, 1),
                        S::one(),
                        dw,
                        (din as isize, 1),
                    );
                }
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let dx = slot(grads, *x, n * din);
                    S::gemm(
                        n,
                        dout,
                        din,
                        S::one(),
                        g,
                        (dout as isize, 1),
                        wv,
                        (din as isize, 1),
                        S::one(),
                        dx,
                        (din as isize, 1),
                    );
                }
            }
            Op::MeanAxes { x, axes } => {
                let xs = self.shape(*x).to_vec();
                let map = ReduceMap::new(&xs, axes);
                let inv = S::one() / S::from_usize(map.count).unwrap();
                let dx = slot(grads, *x, xs.iter().product());
                map.for_each(|i, o| dx[i] += g[o] * inv);
            }
            Op::AvgPool2d(x) => {
                let xs = self.shape(*x);
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = S::from_f64_lossy(0.25);
                let dx = slot(grads, *x, planes * h * w);
                for p in 0..planes {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    let src = &g[p * ho * wo..(p + 1) * ho * wo];
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = src[i * wo + j] * quarter;
                            let r0 = 2 * i * w + 2 * j;
                            dst[r0] += v;
                            dst[r0 + 1] += v;
                            dst[r0 + w] += v;
                            dst[r0 + w + 1] += v;
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                if self.wants(*a) {
                    add_into(slot(grads, *a, na), &g[..na]);
                }
                if self.wants(*b) {
                    add_into(slot(grads, *b, g.len() - na), &g[na..]);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let da = slot(grads, *a, av.len());
                    for ((d, &gi), &q) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * q;
                    }
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, bv.len());
                    for ((d, &gi), &p) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * p;
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let dx = slot(grads, *x, n);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::NtXent { x, grad } => {
                let dx = slot(grads, *x, grad.len());
                for (d, &v) in dx.iter_mut().zip(grad) {
                    *d += g[0] * v;
                }
            }
            Op::BceWithLogits { x, targets } => {
                let xv = self.value(*x).data();
                let scale = g[0] / S::from_usize(xv.len()).unwrap();
                let dx = slot(grads, *x, xv.len());
                for ((d, &z), &t) in dx.iter_mut().zip(xv).zip(targets) {
                    *d += (sigmoid(z) - t) * scale;
                }
            }
            Op::SoftmaxCrossEntropy { x, targets } => {
                let xv = self.value(*x).data();
                let cols = self.shape(*x)[1];
                let scale = g[0] / S::from_usize(targets.len()).unwrap();
                let dx = slot(grads, *x, xv.len());
                for ((drow, row), &t) in dx.chunks_mut(cols).zip(xv.chunks(cols)).zip(targets) {
                    let lse = log_sum_exp(row);
                    for (k, (d, &z)) in drow.iter_mut().zip(row).enumerate() {
                        let p = (z - lse).exp();
                        let target = if k == t { S::one() } else { S::zero() };
                        *d += (p - target) * scale;
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut Vec<S> {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln()
}

fn im2col_1d<S: Scalar>(x: &[S], c_in: usize, len: usize, k: usize, stride: usize, l_out: usize, col: &mut [S]) {
    for c in 0..c_in {
        let src = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &mut col[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
            if stride == 1 {
                row.copy_from_slice(&src[kk..kk + l_out]);
            } else {
                for (t, dst) in row.iter_mut().enumerate() {
                    *dst = src[t * stride + kk];
                }
            }
        }
    }
}

fn col2im_1d<S: Scalar>(dcol: &[S], c_in: usize, len: usize, k: usize, stride: usize, l_out: usize, dx: &mut [S]) {
    for c in 0..c_in {
        let dst = &mut dx[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &dcol[(c * k + kk) * l_out..(c * k + kk + 1) * l_out];
            for (t, &v) in row.iter().enumerate() {
                dst[t * stride + kk] += v;
            }
        }
    }
}

struct Geo2d {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geo2d {
    /// Input coordinate hit by output `o` at kernel offset `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        if p >= 0 && (p as usize) < limit {
            Some(p as usize)
        } else {
            None
        }
    }

    /// Range of outputs along the width whose input column at kernel
    /// offset `j` lies inside the image.
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let lo = (0..self.wo).find(|&o| self.src(o, j, self.w).is_some());
        match lo {
            None => (0, 0),
            Some(lo) => {
                let hi = (lo..self.wo)
                    .take_while(|&o| self.src(o, j, self.w).is_some())
                    .last()
                    .unwrap_or(lo);
                (lo, hi + 1)
            }
        }
    }
}

fn im2col_2d<S: Scalar>(x: &[S], geo: &Geo2d, col: &mut [S]) {
    let spatial = geo.ho * geo.wo;
    for c in 0..geo.c_in {
        let plane = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let row = (c * geo.kh + i) * geo.kw + j;
                let dst = &mut col[row * spatial..(row + 1) * spatial];
                let (lo, hi) = geo.valid_cols(j);
                for oh in 0..geo.ho {
                    let out = &mut dst[oh * geo.wo..(oh + 1) * geo.wo];
                    let Some(ih) = geo.src(oh, i, geo.h) else {
                        out.fill(S::zero());
                        continue;
                    };
                    let src_row = &plane[ih * geo.w..(ih + 1) * geo.w];
                    out[..lo].fill(S::zero());
                    out[hi..].fill(S::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * geo.stride + j - geo.pad;
                    if geo.stride == 1 {
                        out[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (t, v) in out[lo..hi].iter_mut().enumerate() {
                            *v = src_row[first + t * geo.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_2d<S: Scalar>(dcol: &[S], geo: &Geo2d, dx: &mut [S]) {
    let spatial = geo.ho * geo.wo;
    for c in 0..geo.c_in {
        let plane = &mut dx[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let row = (c * geo.kh + i) * geo.kw + j;
                let src = &dcol[row * spatial..(row + 1) * spatial];
                let (lo, hi) = geo.valid_cols(j);
                if lo == hi {
                    continue;
                }
                let first = lo * geo.stride + j - geo.pad;
                for oh in 0..geo.ho {
                    let Some(ih) = geo.src(oh, i, geo.h) else { continue };
                    let prow = &mut plane[ih * geo.w..(ih + 1) * geo.w];
                    let srow = &src[oh * geo.wo + lo..oh * geo.wo + hi];
                    if geo.stride == 1 {
                        add_into(&mut prow[first..first + hi - lo], srow);
                    } else {
                        for (t, &v) in srow.iter().enumerate() {
                            prow[first + t * geo.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Index mapping from an input tensor to its reduction over some axes.
struct ReduceMap {
    dims: Vec<usize>,
    out_strides: Vec<usize>,
    out_shape: Vec<usize>,
    out_len: usize,
    count: usize,
}

impl ReduceMap {
    fn new(dims: &[usize], axes: &[usize]) -> Self {
        let out_shape: Vec<usize> = dims
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &n)| n)
            .collect();
        let mut out_strides = vec![0; dims.len()];
        let mut stride = 1;
        for d in (0..dims.len()).rev() {
            if !axes.contains(&d) {
                out_strides[d] = stride;
                stride *= dims[d];
            }
        }
        ReduceMap {
            dims: dims.to_vec(),
            out_strides,
            out_len: out_shape.iter().product(),
            out_shape,
            count: axes.iter().map(|&a| dims[a]).product(),
        }
    }

    /// Calls `f(input_index, output_index)` for every input element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.dims.iter().product();
        let rank = self.dims.len();
        let mut idx = vec![0usize; rank];
        let mut out = 0usize;
        for i in 0..total {
            f(i, out);
            for d in (0..rank).rev() {
                idx[d] += 1;
                out += self.out_strides[d];
                if idx[d] < self.dims[d] {
                    break;
                }
                out -= self.out_strides[d] * self.dims[d];
                idx[d] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn output_length_formula() {
        assert_eq!(conv_out_len(48_000, 10, 5), Some(9599));
        assert_eq!(conv_out_len(9, 10, 5), None);
        assert_eq!(conv_out_len(10, 10, 5), Some(1));
    }

    #[test]
    fn identity_conv1d() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 5], &[1.0, -2.0, 3.0, 4.0, 0.5]));
        let w = tape.input(t(&[1, 1, 1], &[1.0]));
        let b = tape.input(t(&[1], &[0.0]));
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let y2 = tape.conv1d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y2).data(), &[1.0, 3.0, 0.5]);
    }

    #[test]
    fn conv1d_rejects_short_input() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::zeros(&[1, 1, 3]));
        let w = tape.input(Tensor::zeros(&[2, 1, 4]));
        let b = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.conv1d(x, w, b, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn identity_and_same_conv2d() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let x = tape.input(t(&[1, 1, 8, 8], &data));
        let w = tape.input(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.input(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
        let w3 = tape.input(Tensor::full(&[3, 1, 3, 3], 1.0));
        let b3 = tape.input(Tensor::zeros(&[3]));
        let y3 = tape.conv2d(x, w3, b3, 1, Padding::Same).unwrap();
        assert_eq!(tape.shape(y3), &[1, 3, 8, 8]);
        // corner sums the 2x2 neighbourhood
        assert_eq!(tape.value(y3).data()[0], 0.0 + 1.0 + 8.0 + 9.0);
        let yv = tape.conv2d(x, w3, b3, 1, Padding::Valid).unwrap();
        assert_eq!(tape.shape(yv), &[1, 3, 6, 6]);
    }

    #[test]
    fn group_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::full(&[2, 4, 5], 3.0));
        let g = tape.input(Tensor::full(&[4], 1.0));
        let b = tape.input(Tensor::zeros(&[4]));
        let y = tape.group_norm(x, g, b, 2, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(tape.group_norm(x, g, b, 3, 1e-5).is_err());
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..48).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let x = tape.input(t(&[2, 4, 6], &data));
        let g = tape.input(Tensor::full(&[4], 1.0));
        let b = tape.input(Tensor::zeros(&[4]));
        let y = tape.group_norm(x, g, b, 2, 1e-5).unwrap();
        for seg in tape.value(y).data().chunks(12) {
            let m = seg.iter().sum::<f64>() / 12.0;
            let v = seg.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn relu_and_pooling_values() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 2], &[-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let c = tape.input(Tensor::<f64>::full(&[2, 3, 7], 1.5));
        let p = tape.global_avg_pool(c, &[2]).unwrap();
        assert_eq!(tape.shape(p), &[2, 3]);
        assert!(tape.value(p).data().iter().all(|&v| v == 1.5));
        assert!(tape.global_avg_pool(c, &[3]).is_err());
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_params() {
        let mut store = ParamStore::new();
        let id = store.add("p", t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", t(&[2], &[1.0, 2.0])).unwrap();
        let unused = store.add("unused", t(&[2], &[3.0, 4.0])).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, used);
        let _q = tape.param(&store, unused);
        let l = tape.sum(p).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(unused).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn second_backward_needs_reset() {
        let mut store = ParamStore::new();
        let id = store.add("p", t(&[2], &[1.0, 2.0])).unwrap();
        let run = |store: &mut ParamStore<f64>| {
            let mut tape = Tape::new();
            let p = tape.param(store, id);
            let l = tape.sum(p).unwrap();
            (tape, l)
        };
        let (mut tape, l) = run(&mut store);
        tape.backward(l, &mut store).unwrap();
        assert!(tape.backward(l, &mut store).is_err());
        let (mut tape2, l2) = run(&mut store);
        assert!(tape2.backward(l2, &mut store).is_err());
        let (mut tape3, l3) = run(&mut store);
        tape3.backward_accumulate(l3, &mut store).unwrap();
        assert_eq!(store.get(id).grad, vec![2.0, 2.0]);
        store.zero_grad();
        let (mut tape4, l4) = run(&mut store);
        tape4.backward(l4, &mut store).unwrap();
        assert_eq!(store.get(id).grad, vec![1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(tape.backward(x, &mut store).is_err());
    }

    #[test]
    fn nan_is_caught_at_next_op() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 3], &[1.0, f64::NAN, 2.0]));
        assert_eq!(tape.relu(x), Err(Error::NonFinite { op: "relu" }));
        let y = tape.input(t(&[1, 3], &[1.0, f64::INFINITY, 2.0]));
        let w = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2]));
        assert_eq!(tape.linear(y, w, b), Err(Error::NonFinite { op: "linear" }));
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a/w", Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a/w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn reduce_map_over_middle_axis() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = tape.input(t(&[2, 3, 4], &data));
        let y = tape.global_avg_pool(x, &[1]).unwrap();
        assert_eq!(tape.shape(y), &[2, 4]);
        assert_eq!(tape.value(y).data()[0], (0.0 + 4.0 + 8.0) / 3.0);
        assert_eq!(tape.value(y).data()[7], (15.0 + 19.0 + 23.0) / 3.0);
    }
}
