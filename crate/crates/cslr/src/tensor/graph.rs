//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation method
//! evaluates eagerly, records the inputs it needs for the backward pass,
//! and returns a copyable [`Var`] handle. Because nodes are appended in
//! execution order, walking the arena backwards visits every node after
//! all of its consumers — no explicit topological sort is needed.
//!
//! Gradient accumulation happens in that fixed reverse order, and every
//! kernel sums in index order, so the backward pass is deterministic:
//! the same graph produces bit-identical gradients on every run.

use super::kernels as k;
use super::{broadcast_compatible, Element, Tensor};
use crate::alignment;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the
/// graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// One recorded operation with whatever context its backward pass needs.
#[derive(Debug)]
enum Op {
    /// Constant, differentiable input, or parameter leaf.
    Leaf { param: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Recip(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Matmul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        spec: k::ConvSpec1d,
    },
    DwConv1d {
        x: Var,
        w: Var,
        padding: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        pad: (usize, usize, usize),
    },
    DwConv3d {
        x: Var,
        w: Var,
        pad: (usize, usize, usize),
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum {
        x: Var,
        axes: Vec<usize>,
        keepdims: bool,
    },
    Broadcast(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    IndexSelect {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    /// Alignment loss over per-frame log-probabilities; `ext` is the
    /// blank-interleaved target sequence.
    Ctc {
        x: Var,
        ext: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<E> {
    op: Op,
    value: Tensor<E>,
    requires_grad: bool,
}

/// Append-only computation arena. See the module docs.
#[derive(Debug, Default)]
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads[v.0].take()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(Op::Leaf { param: None }, value, false)
    }

    /// Differentiable leaf that is not a model parameter (used by the
    /// gradient checker and for probing input sensitivities).
    pub fn input(&mut self, value: Tensor<E>) -> Var {
        self.push(Op::Leaf { param: None }, value, true)
    }

    /// Leaf backed by parameter `index` of a parameter store; gradients
    /// for it can be collected with [`Graph::param_grads`].
    pub fn param_leaf(&mut self, value: Tensor<E>, index: usize, requires_grad: bool) -> Var {
        self.push(
            Op::Leaf {
                param: Some(index),
            },
            value,
            requires_grad,
        )
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::DimMismatch {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let mut value = self.nodes[a.0].value.clone();
        value.add_assign(&self.nodes[b.0].value);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let value = Tensor::new(
            self.shape(a),
            self.nodes[a.0]
                .value
                .data()
                .iter()
                .zip(self.nodes[b.0].value.data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let value = Tensor::new(
            self.shape(a),
            self.nodes[a.0]
                .value
                .data()
                .iter()
                .zip(self.nodes[b.0].value.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    /// `a + b` with `b` broadcast up to `a`'s shape if needed.
    pub fn add_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let b = self.broadcast_like(b, a, "add")?;
        self.add(a, b)
    }

    /// `a * b` with `b` broadcast up to `a`'s shape if needed.
    pub fn mul_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let b = self.broadcast_like(b, a, "mul")?;
        self.mul(a, b)
    }

    fn broadcast_like(&mut self, b: Var, a: Var, op: &'static str) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            return Ok(b);
        }
        if !broadcast_compatible(self.shape(b), self.shape(a)) {
            return Err(Error::DimMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let target = self.shape(a).to_vec();
        self.broadcast(b, &target)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let ce = E::of(c);
        let value = self.nodes[x.0].value.map(|v| v + ce);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::AddScalar(x), value, rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let ce = E::of(c);
        let value = self.nodes[x.0].value.map(|v| v * ce);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::MulScalar(x, c), value, rg)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| E::one() / v);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Recip(x), value, rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.sqrt());
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Sqrt(x), value, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.exp());
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Exp(x), value, rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.ln());
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Ln(x), value, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.abs());
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Abs(x), value, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.tanh());
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Tanh(x), value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(sigmoid_scalar);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Sigmoid(x), value, rg)
    }

    /// GELU in the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(gelu_scalar);
        let rg = self.nodes[x.0].requires_grad;
        self.push(Op::Gelu(x), value, rg)
    }

    /// Batched matrix product. `a` is `(..., M, K)`; `b` is either `(K, N)`
    /// (shared across the batch) or `(..., K, N)` with identical leading
    /// dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::DimMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 {
            return Err(mismatch());
        }
        let (m, kk) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let shared = sb.len() == 2;
        let n = if shared {
            if sb[0] != kk {
                return Err(mismatch());
            }
            sb[1]
        } else {
            if sb.len() != sa.len()
                || sb[..sb.len() - 2] != sa[..sa.len() - 2]
                || sb[sb.len() - 2] != kk
            {
                return Err(mismatch());
            }
            sb[sb.len() - 1]
        };
        let nb: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = Tensor::zeros(&out_shape);
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            let od = out.data_mut();
            for i in 0..nb {
                let asl = &ad[i * m * kk..(i + 1) * m * kk];
                let bsl = if shared {
                    bd
                } else {
                    &bd[i * kk * n..(i + 1) * kk * n]
                };
                k::gemm_nn(asl, bsl, &mut od[i * m * n..(i + 1) * m * n], m, kk, n);
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), out, rg))
    }

    /// 1-d convolution, `x (B,Cin,T) * w (Cout,Cin,K) -> (B,Cout,To)`.
    /// The kernel width must be odd so that `padding = dilation * (K-1)/2`
    /// can preserve length exactly.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::DimMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sw[2] % 2 == 0 {
            return Err(Error::BadShape {
                op: "conv1d",
                shape: sw,
                detail: "kernel width must be odd".into(),
            });
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Contract("conv1d stride/dilation must be >= 1".into()));
        }
        let spec = k::ConvSpec1d {
            stride,
            dilation,
            padding,
        };
        if k::conv1d_out_len(sx[2], sw[2], spec).is_none() {
            return Err(Error::SequenceTooShort {
                op: "conv1d",
                len: sx[2],
                min: dilation * (sw[2] - 1) + 1 - 2 * padding,
            });
        }
        let value = k::conv1d_fwd(&self.nodes[x.0].value, &self.nodes[w.0].value, spec);
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Op::Conv1d { x, w, spec }, value, rg))
    }

    /// Depthwise 1-d convolution, `x (B,C,T) * w (C,K)`, stride 1.
    pub fn dwconv1d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::DimMismatch {
                op: "dwconv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sw[1] % 2 == 0 {
            return Err(Error::BadShape {
                op: "dwconv1d",
                shape: sw,
                detail: "kernel width must be odd".into(),
            });
        }
        let spec = k::ConvSpec1d {
            stride: 1,
            dilation: 1,
            padding,
        };
        if k::conv1d_out_len(sx[2], sw[1], spec).is_none() {
            return Err(Error::SequenceTooShort {
                op: "dwconv1d",
                len: sx[2],
                min: sw[1] - 2 * padding,
            });
        }
        let value = k::dwconv1d_fwd(&self.nodes[x.0].value, &self.nodes[w.0].value, padding);
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Op::DwConv1d { x, w, padding }, value, rg))
    }

    /// 3-d convolution, stride 1: `x (B,Cin,T,H,W) * w (Cout,Cin,Kt,Kh,Kw)`.
    pub fn conv3d(&mut self, x: Var, w: Var, pad: (usize, usize, usize)) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(Error::DimMismatch {
                op: "conv3d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 || sw[4] % 2 == 0 {
            return Err(Error::BadShape {
                op: "conv3d",
                shape: sw,
                detail: "kernel extents must be odd".into(),
            });
        }
        for (input, kk, p) in [
            (sx[2], sw[2], pad.0),
            (sx[3], sw[3], pad.1),
            (sx[4], sw[4], pad.2),
        ] {
            if input + 2 * p < kk {
                return Err(Error::SequenceTooShort {
                    op: "conv3d",
                    len: input,
                    min: kk.saturating_sub(2 * p),
                });
            }
        }
        let value = k::conv3d_fwd(&self.nodes[x.0].value, &self.nodes[w.0].value, pad);
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Op::Conv3d { x, w, pad }, value, rg))
    }

    /// Depthwise 3-d convolution, stride 1: `x (B,C,T,H,W) * w (C,Kt,Kh,Kw)`.
    pub fn dwconv3d(&mut self, x: Var, w: Var, pad: (usize, usize, usize)) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(Error::DimMismatch {
                op: "dwconv3d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sw[1] % 2 == 0 || sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(Error::BadShape {
                op: "dwconv3d",
                shape: sw,
                detail: "kernel extents must be odd".into(),
            });
        }
        let value = k::dwconv3d_fwd(&self.nodes[x.0].value, &self.nodes[w.0].value, pad);
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Op::DwConv3d { x, w, pad }, value, rg))
    }

    /// 1-d max pooling over `x (B,C,T)`. Ties resolve to the earliest
    /// element; padding never wins.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::BadShape {
                op: "maxpool1d",
                shape: sx,
                detail: "expected (B, C, T)".into(),
            });
        }
        if padding >= kernel {
            return Err(Error::Contract(
                "maxpool1d padding must be smaller than the kernel".into(),
            ));
        }
        let spec = k::ConvSpec1d {
            stride,
            dilation: 1,
            padding,
        };
        if k::conv1d_out_len(sx[2], kernel, spec).is_none() {
            return Err(Error::SequenceTooShort {
                op: "maxpool1d",
                len: sx[2],
                min: kernel.saturating_sub(2 * padding),
            });
        }
        let (value, argmax) = k::maxpool1d_fwd(&self.nodes[x.0].value, kernel, stride, padding);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::MaxPool1d { x, argmax }, value, rg))
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        for &a in axes {
            if a >= sx.len() || seen[a] {
                return Err(Error::BadShape {
                    op: "sum_axes",
                    shape: sx,
                    detail: format!("bad reduction axes {axes:?}"),
                });
            }
            seen[a] = true;
        }
        let value = k::reduce_sum(&self.nodes[x.0].value, axes, keepdims);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::Sum {
                x,
                axes: axes.to_vec(),
                keepdims,
            },
            value,
            rg,
        ))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        let n: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let s = self.sum_axes(x, axes, keepdims)?;
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes, false).expect("axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum_all(x);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if !broadcast_compatible(&sx, shape) {
            return Err(Error::DimMismatch {
                op: "broadcast",
                lhs: sx,
                rhs: shape.to_vec(),
            });
        }
        let value = k::broadcast_to(&self.nodes[x.0].value, shape);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Broadcast(x), value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::BadShape {
                op: "permute",
                shape: sx,
                detail: format!("{perm:?} is not a permutation of the axes"),
            });
        }
        let value = k::permute(&self.nodes[x.0].value, perm);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Gather along `axis`; indices may repeat (the backward pass
    /// scatter-adds). Covers slicing, rolls and edge-replication padding.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::BadShape {
                op: "index_select",
                shape: sx,
                detail: format!("axis {axis} out of range"),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= sx[axis]) {
            return Err(Error::BadShape {
                op: "index_select",
                shape: sx,
                detail: format!("index {bad} out of range for axis {axis}"),
            });
        }
        let value = k::index_select(&self.nodes[x.0].value, axis, indices);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            Op::IndexSelect {
                x,
                axis,
                indices: indices.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::BadShape {
                op: "concat",
                shape: first,
                detail: format!("axis {axis} out of range"),
            });
        }
        for &v in &xs[1..] {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::DimMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        let parts: Vec<&Tensor<E>> = xs.iter().map(|&v| &self.nodes[v.0].value).collect();
        let value = k::concat(&parts, axis);
        let rg = self.any_grad(xs);
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            value,
            rg,
        ))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::BadShape {
                op: "log_softmax",
                shape: sx,
                detail: format!("axis {axis} out of range"),
            });
        }
        let value = k::log_softmax(&self.nodes[x.0].value, axis);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::LogSoftmax { x, axis }, value, rg))
    }

    /// Softmax composed as `exp(log_softmax)` for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ls = self.log_softmax(x, axis)?;
        Ok(self.exp(ls))
    }

    /// Alignment loss (negative log-likelihood of the target under all
    /// monotonic alignments). `x` holds per-frame log-probabilities of
    /// shape `(T, V)`; `targets` are label indices excluding `blank`.
    pub fn ctc_loss(&mut self, x: Var, targets: &[usize], blank: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::BadShape {
                op: "ctc_loss",
                shape: sx,
                detail: "expected (T, V) log-probabilities".into(),
            });
        }
        let (t, v) = (sx[0], sx[1]);
        if blank >= v {
            return Err(Error::Contract(format!(
                "blank index {blank} outside vocabulary of size {v}"
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&l| l >= v || l == blank) {
            return Err(Error::Contract(format!(
                "target label {bad} invalid for vocabulary of size {v} with blank {blank}"
            )));
        }
        if targets.is_empty() {
            return Err(Error::Contract("alignment target must be non-empty".into()));
        }
        let min = alignment::min_frames(targets);
        if t < min {
            return Err(Error::Infeasible { timesteps: t, min });
        }
        let ext = alignment::extend_with_blanks(targets, blank);
        let loss = alignment::forward_loss(&self.nodes[x.0].value, &ext);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Op::Ctc { x, ext }, Tensor::scalar(loss), rg))
    }

    /// Reverse pass from a scalar `root`. Returns per-node gradients;
    /// parameters can then be pulled out via [`Graph::param_grads`].
    pub fn backward(&self, root: Var) -> Result<Gradients<E>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), E::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Pull out `(parameter index, gradient)` pairs in leaf creation order.
    pub fn param_grads(&self, grads: &mut Gradients<E>) -> Vec<(usize, Tensor<E>)> {
        let mut out = Vec::new();
        for i in 0..self.nodes.len() {
            if let Op::Leaf { param: Some(p) } = self.nodes[i].op {
                if let Some(g) = grads.take(Var(i)) {
                    out.push((p, g));
                }
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor<E>>], v: Var, g: Tensor<E>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.acc(grads, *a, zip_mul(g, val(*b)));
                }
                if self.nodes[b.0].requires_grad {
                    self.acc(grads, *b, zip_mul(g, val(*a)));
                }
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::MulScalar(x, c) => {
                let ce = E::of(*c);
                self.acc(grads, *x, g.map(|v| v * ce));
            }
            Op::Recip(x) => {
                // d(1/x) = -y^2 dx, with y the saved output.
                let gx = zip3(g, out, out, |gv, y, y2| -gv * y * y2);
                self.acc(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let half = E::of(0.5);
                let gx = zip2(g, out, |gv, y| gv * half / y);
                self.acc(grads, *x, gx);
            }
            Op::Exp(x) => self.acc(grads, *x, zip_mul(g, out)),
            Op::Ln(x) => {
                let gx = zip2(g, val(*x), |gv, xv| gv / xv);
                self.acc(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = zip2(g, val(*x), |gv, xv| {
                    if xv > E::zero() {
                        gv
                    } else if xv < E::zero() {
                        -gv
                    } else {
                        E::zero()
                    }
                });
                self.acc(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let one = E::one();
                let gx = zip2(g, out, |gv, y| gv * (one - y * y));
                self.acc(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let one = E::one();
                let gx = zip2(g, out, |gv, y| gv * y * (one - y));
                self.acc(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = zip2(g, val(*x), |gv, xv| gv * gelu_grad_scalar(xv));
                self.acc(grads, *x, gx);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, kk) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let shared = sb.len() == 2;
                let n = sb[sb.len() - 1];
                let nb: usize = sa[..sa.len() - 2].iter().product();
                let (ad, bd, gd) = (val(*a).data(), val(*b).data(), g.data());
                if self.nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros(sa);
                    let gad = ga.data_mut();
                    for bi in 0..nb {
                        let gsl = &gd[bi * m * n..(bi + 1) * m * n];
                        let bsl = if shared {
                            bd
                        } else {
                            &bd[bi * kk * n..(bi + 1) * kk * n]
                        };
                        k::gemm_nt(gsl, bsl, &mut gad[bi * m * kk..(bi + 1) * m * kk], m, n, kk);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = Tensor::zeros(sb);
                    let gbd = gb.data_mut();
                    for bi in 0..nb {
                        let asl = &ad[bi * m * kk..(bi + 1) * m * kk];
                        let gsl = &gd[bi * m * n..(bi + 1) * m * n];
                        let dst = if shared {
                            &mut gbd[..]
                        } else {
                            &mut gbd[bi * kk * n..(bi + 1) * kk * n]
                        };
                        k::gemm_tn(asl, gsl, dst, kk, m, n);
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Conv1d { x, w, spec } => {
                let (gx, gw) = k::conv1d_bwd(
                    val(*x),
                    val(*w),
                    g,
                    *spec,
                    self.nodes[x.0].requires_grad,
                    self.nodes[w.0].requires_grad,
                );
                if let Some(gx) = gx {
                    self.acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, gw);
                }
            }
            Op::DwConv1d { x, w, padding } => {
                let (gx, gw) = k::dwconv1d_bwd(
                    val(*x),
                    val(*w),
                    g,
                    *padding,
                    self.nodes[x.0].requires_grad,
                    self.nodes[w.0].requires_grad,
                );
                if let Some(gx) = gx {
                    self.acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, gw);
                }
            }
            Op::Conv3d { x, w, pad } => {
                let (gx, gw) = k::conv3d_bwd(
                    val(*x),
                    val(*w),
                    g,
                    *pad,
                    self.nodes[x.0].requires_grad,
                    self.nodes[w.0].requires_grad,
                );
                if let Some(gx) = gx {
                    self.acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, gw);
                }
            }
            Op::DwConv3d { x, w, pad } => {
                let (gx, gw) = k::dwconv3d_bwd(
                    val(*x),
                    val(*w),
                    g,
                    *pad,
                    self.nodes[x.0].requires_grad,
                    self.nodes[w.0].requires_grad,
                );
                if let Some(gx) = gx {
                    self.acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, gw);
                }
            }
            Op::MaxPool1d { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let gd = gx.data_mut();
                for (o, &src) in argmax.iter().enumerate() {
                    gd[src] = gd[src] + g.data()[o];
                }
                self.acc(grads, *x, gx);
            }
            Op::Sum { x, axes, keepdims } => {
                let in_shape = val(*x).shape().to_vec();
                let g_keep = if *keepdims {
                    g.clone()
                } else {
                    let mut ks = in_shape.clone();
                    for &a in axes {
                        ks[a] = 1;
                    }
                    g.reshaped(&ks).expect("kept-axis view")
                };
                self.acc(grads, *x, k::broadcast_to(&g_keep, &in_shape));
            }
            Op::Broadcast(x) => {
                self.acc(grads, *x, k::reduce_to(g, val(*x).shape()));
            }
            Op::Reshape(x) => {
                let gx = g.reshaped(val(*x).shape()).expect("same element count");
                self.acc(grads, *x, gx);
            }
            Op::Permute { x, perm } => {
                self.acc(grads, *x, k::permute(g, &k::invert_perm(perm)));
            }
            Op::IndexSelect { x, axis, indices } => {
                let gx = k::index_select_bwd(g, val(*x).shape(), *axis, indices);
                self.acc(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let mut start = 0usize;
                for &part in xs {
                    let len = val(part).shape()[*axis];
                    if self.nodes[part.0].requires_grad {
                        self.acc(grads, part, k::slice_axis(g, *axis, start, len));
                    }
                    start += len;
                }
            }
            Op::LogSoftmax { x, axis } => {
                self.acc(grads, *x, k::log_softmax_bwd(out, g, *axis));
            }
            Op::Ctc { x, ext } => {
                let mut gx = alignment::loss_grad(val(*x), ext);
                gx.scale(g.item());
                self.acc(grads, *x, gx);
            }
        }
    }
}

fn zip_mul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    zip2(a, b, |x, y| x * y)
}

fn zip2<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("shapes checked")
}

fn zip3<E: Element>(a: &Tensor<E>, b: &Tensor<E>, c: &Tensor<E>, f: impl Fn(E, E, E) -> E) -> Tensor<E> {
    Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data().iter().zip(c.data()))
            .map(|(&x, (&y, &z))| f(x, y, z))
            .collect(),
    )
    .expect("shapes checked")
}

fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_scalar<E: Element>(x: E) -> E {
    let c = E::of(GELU_SQRT_2_OVER_PI);
    let a = E::of(GELU_CUBIC);
    let half = E::of(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (E::one() + inner.tanh())
}

fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let c = E::of(GELU_SQRT_2_OVER_PI);
    let a = E::of(GELU_CUBIC);
    let half = E::of(0.5);
    let three = E::of(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = E::one() - th * th;
    half * (E::one() + th) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        match g.matmul(a, b) {
            Err(Error::DimMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected DimMismatch, got {other:?}"),
        }
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::from_fn(&[3, 2, 2], |i| i as f64));
        let b = g.constant(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn add_requires_same_shape() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        let c = g.constant(Tensor::zeros(&[1, 3]));
        // But the broadcasting helper accepts compatible shapes.
        assert!(g.add_b(a, c).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 2]));
        match g.backward(a) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected Contract error, got {other:?}"),
        }
    }

    #[test]
    fn gradient_of_simple_product() {
        // d/dx sum(x * y) = y, d/dy = x.
        let mut g = Graph::new();
        let x = g.input(t(&[2], vec![2.0, 3.0]));
        let y = g.input(t(&[2], vec![5.0, 7.0]));
        let p = g.mul(x, y).unwrap();
        let s = g.sum_all(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(grads.wrt(y).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // s = sum(x + x) => ds/dx = 2.
        let mut g = Graph::new();
        let x = g.input(t(&[3], vec![1.0, 2.0, 3.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], vec![1.0, 2.0]));
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let s = g.sum_all(p);
        let grads = g.backward(s).unwrap();
        // With the second factor detached the gradient is just its value.
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 2.0]);
        assert!(grads.wrt(d).is_none());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], vec![1.0, 2.0]));
        let c = g.constant(t(&[2], vec![4.0, 5.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum_all(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], vec![0.1, -2.0, 3.0, 8.0, 8.0, 8.0]));
        let p = g.softmax(x, 1).unwrap();
        let v = g.value(p);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| v.at(&[r, c])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((v.at(&[1, 0]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_matches_reference_points() {
        // Reference values for the tanh form, computed by hand in extended
        // precision: gelu(1) = 0.5 * (1 + tanh(0.7978845608 * 1.044715)).
        let mut g = Graph::new();
        let x = g.constant(t(&[3], vec![0.0, 1.0, -1.0]));
        let y = g.gelu(x);
        let v = g.value(y);
        assert_eq!(v.data()[0], 0.0);
        assert!((v.data()[1] - 0.841_191_990_607_477_3).abs() < 1e-12);
        assert!((v.data()[2] - (-0.158_808_009_392_522_74)).abs() < 1e-12);
        // gelu(x) - gelu(-x) = x for the tanh form (the even part cancels).
        assert!((v.data()[1] - v.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 4], vec![1.0, 5.0, 2.0, 5.0]));
        let p = g.maxpool1d(x, 3, 1, 1).unwrap();
        assert_eq!(g.value(p).data(), &[5.0, 5.0, 5.0, 5.0]);
        let s = g.sum_all(p);
        let grads = g.backward(s).unwrap();
        // Index 1 wins three windows (first-of-ties), index 3 one window.
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_is_bit_identical_across_runs() {
        let mut rng = Rng::new(5);
        let xt = Tensor::<f64>::from_fn(&[4, 6], |_| rng.next_f64() - 0.5);
        let wt = Tensor::<f64>::from_fn(&[6, 3], |_| rng.next_f64() - 0.5);
        let run = || {
            let mut g = Graph::new();
            let x = g.input(xt.clone());
            let w = g.input(wt.clone());
            let h = g.matmul(x, w).unwrap();
            let a = g.tanh(h);
            let s = g.mean_all(a);
            let grads = g.backward(s).unwrap();
            (
                g.value(s).item(),
                grads.wrt(x).unwrap().clone(),
                grads.wrt(w).unwrap().clone(),
            )
        };
        let (s1, gx1, gw1) = run();
        let (s2, gx2, gw2) = run();
        assert!(s1 == s2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
