//! Reverse-mode tape. Ops append nodes to an arena; `backward` walks the
//! arena in reverse id order (ids are already topological) exactly once.

use std::collections::HashMap;

use super::kernels::{self, ConvDims};
use super::{strides_of, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

enum Op<T> {
    Leaf {
        param: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Silu {
        x: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Mean {
        x: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
    WeightedMse {
        a: usize,
        b: usize,
        weights: Tensor<T>,
        weight_sum: f64,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Expand {
        x: usize,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    Upsample2x {
        x: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter leaf. Every `param` leaf on the tape gets
/// an entry; parameters the loss never touched get zeros.
pub struct Gradients<T> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<T>> {
        self.by_id.get(&id.0)
    }
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Element> Graph<T> {
    /// Graph that records backward information.
    pub fn recording() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Forward-only graph; `param` degrades to `constant` and `backward`
    /// is an error.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<ValueId> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let op = if self.recording { op } else { Op::Leaf { param: false } };
        let needs_grad = self.recording && needs_grad;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(ValueId(self.nodes.len() - 1))
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<ValueId> {
        self.push("constant", value, Op::Leaf { param: false }, false)
    }

    /// Leaf that participates in the gradient map.
    pub fn param(&mut self, value: Tensor<T>) -> Result<ValueId> {
        let recording = self.recording;
        self.push("param", value, Op::Leaf { param: recording }, recording)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(name, value, op, needs)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        let f = T::from_f64(factor);
        let value = self.nodes[x.0].value.map(|v| v * f);
        let needs = self.needs(x.0);
        self.push("scale", value, Op::Scale { x: x.0, factor }, needs)
    }

    /// 2D, batched 3D, or batched-lhs (3D @ 2D) matrix product.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
                if k != k2 {
                    return Err(mismatch());
                }
                let mut out = vec![T::zero(); m * n];
                kernels::mm_nn(ta.data(), tb.data(), m, k, n, &mut out);
                Tensor::from_vec(vec![m, n], out)?
            }
            (3, 3) => {
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                if sb[0] != bs || sb[1] != k {
                    return Err(mismatch());
                }
                let n = sb[2];
                let mut out = vec![T::zero(); bs * m * n];
                for i in 0..bs {
                    kernels::mm_nn(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::from_vec(vec![bs, m, n], out)?
            }
            (3, 2) => {
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                if sb[0] != k {
                    return Err(mismatch());
                }
                let n = sb[1];
                let mut out = vec![T::zero(); bs * m * n];
                for i in 0..bs {
                    kernels::mm_nn(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        tb.data(),
                        m,
                        k,
                        n,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::from_vec(vec![bs, m, n], out)?
            }
            _ => return Err(mismatch()),
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push("matmul", value, Op::Matmul { a: a.0, b: b.0 }, needs)
    }

    /// 2D convolution over [B, C_in, H, W] with weight [C_out, C_in, KH, KW],
    /// zero padding, stride 1 or 2.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("conv2d", format!("stride {} not in {{1,2}}", stride)));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {:?} larger than padded input {:?}", sw, sx),
            ));
        }
        if (sx[2] + 2 * pad - sw[2]) % stride != 0 || (sx[3] + 2 * pad - sw[3]) % stride != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("input {:?} not divisible by stride {}", sx, stride),
            ));
        }
        let dims = ConvDims {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let bias_data = match bias {
            Some(b) => {
                let sb = self.nodes[b.0].value.shape();
                if sb != [dims.c_out] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d",
                        lhs: sb.to_vec(),
                        rhs: vec![dims.c_out],
                    });
                }
                Some(b)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            bias_data.map(|b| self.nodes[b.0].value.data()),
            &dims,
        );
        let value = Tensor::from_vec(vec![dims.batch, dims.c_out, dims.out_h(), dims.out_w()], out)?;
        let needs = self.needs(x.0)
            || self.needs(w.0)
            || bias.map(|b| self.needs(b.0)).unwrap_or(false);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                stride,
                pad,
            },
            needs,
        )
    }

    pub fn group_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        groups: usize,
        eps: f64,
    ) -> Result<ValueId> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::invalid("group_norm", format!("expected rank 4, got {:?}", sx)));
        }
        let channels = sx[1];
        if groups == 0 || channels % groups != 0 {
            return Err(Error::invalid(
                "group_norm",
                format!("{} channels not divisible into {} groups", channels, groups),
            ));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[id.0].value.shape() != [channels] {
                return Err(Error::invalid(
                    "group_norm",
                    format!("{} must have shape [{}]", name, channels),
                ));
            }
        }
        let spatial = sx[2] * sx[3];
        let (y, means, rstds) = kernels::group_norm_forward(
            self.nodes[x.0].value.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            sx[0],
            channels,
            spatial,
            groups,
            eps,
        );
        let value = Tensor::from_vec(sx, y)?;
        let needs = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        self.push(
            "group_norm",
            value,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                means,
                rstds,
            },
            needs,
        )
    }

    pub fn silu(&mut self, x: ValueId) -> Result<ValueId> {
        let value = self.nodes[x.0].value.map(|v| v * sigmoid(v));
        let needs = self.needs(x.0);
        self.push("silu", value, Op::Silu { x: x.0 }, needs)
    }

    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let (outer, len, inner) = axis_blocks(&shape, axis);
        let y = kernels::softmax_forward(self.nodes[x.0].value.data(), outer, len, inner);
        let value = Tensor::from_vec(shape, y)?;
        let needs = self.needs(x.0);
        self.push("softmax", value, Op::Softmax { x: x.0, axis }, needs)
    }

    /// Mean over all elements; returns a scalar.
    pub fn mean(&mut self, x: ValueId) -> Result<ValueId> {
        let t = &self.nodes[x.0].value;
        let n = t.numel();
        if n == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let sum: T = t.data().iter().copied().sum();
        let value = Tensor::scalar(sum * T::from_f64(1.0 / n as f64));
        let needs = self.needs(x.0);
        self.push("mean", value, Op::Mean { x: x.0 }, needs)
    }

    /// Mean squared error over all elements; returns a scalar.
    pub fn mse(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = ta.numel();
        let mut acc = T::zero();
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x - y;
            acc += d * d;
        }
        let value = Tensor::scalar(acc * T::from_f64(1.0 / n as f64));
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push("mse", value, Op::Mse { a: a.0, b: b.0 }, needs)
    }

    /// Squared error averaged over elements with nonzero weight:
    /// sum(w * (a-b)^2) / sum(w). Weights are a constant, not a node.
    pub fn weighted_mse(&mut self, a: ValueId, b: ValueId, weights: &Tensor<T>) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() || ta.shape() != weights.shape() {
            return Err(Error::ShapeMismatch {
                op: "weighted_mse",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let weight_sum: f64 = weights.data().iter().map(|w| w.as_f64()).sum();
        if weight_sum <= 0.0 {
            return Err(Error::invalid("weighted_mse", "loss mask selects no elements"));
        }
        let mut acc = T::zero();
        for ((&x, &y), &w) in ta.data().iter().zip(tb.data()).zip(weights.data()) {
            let d = x - y;
            acc += w * d * d;
        }
        let value = Tensor::scalar(acc * T::from_f64(1.0 / weight_sum));
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(
            "weighted_mse",
            value,
            Op::WeightedMse {
                a: a.0,
                b: b.0,
                weights: weights.clone(),
                weight_sum,
            },
            needs,
        )
    }

    pub fn concat(&mut self, inputs: &[ValueId], axis: usize) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut axis_total = 0;
        for id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_blocks(&out_shape, axis);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0;
        for id in inputs {
            let t = &self.nodes[id.0].value;
            let len = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let value = Tensor::from_vec(out_shape, out)?;
        let needs = inputs.iter().any(|id| self.needs(id.0));
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.iter().map(|id| id.0).collect(),
                axis,
            },
            needs,
        )
    }

    pub fn slice(&mut self, x: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (outer, axis_len, inner) = axis_blocks(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![T::zero(); outer * len * inner];
        let data = self.nodes[x.0].value.data();
        for o in 0..outer {
            let src_start = (o * axis_len + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&data[src_start..src_start + len * inner]);
        }
        let value = Tensor::from_vec(out_shape, out)?;
        let needs = self.needs(x.0);
        self.push(
            "slice",
            value,
            Op::Slice {
                x: x.0,
                axis,
                start,
                len,
            },
            needs,
        )
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let t = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot reshape {:?} to {:?}", t.shape(), shape),
            ));
        }
        let value = Tensor::from_vec(shape, t.data().to_vec())?;
        let needs = self.needs(x.0);
        self.push("reshape", value, Op::Reshape { x: x.0 }, needs)
    }

    pub fn permute(&mut self, x: ValueId, perm: &[usize]) -> Result<ValueId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{:?} is not a permutation of axes for {:?}", perm, shape),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.nodes[x.0].value.data(), &shape, perm);
        let value = Tensor::from_vec(out_shape, out)?;
        let needs = self.needs(x.0);
        self.push(
            "permute",
            value,
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
            needs,
        )
    }

    /// Explicit broadcast: every source dim must equal the target or be 1.
    pub fn expand(&mut self, x: ValueId, target: &[usize]) -> Result<ValueId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != target.len()
            || shape
                .iter()
                .zip(target)
                .any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::ShapeMismatch {
                op: "expand",
                lhs: shape,
                rhs: target.to_vec(),
            });
        }
        let out = expand_data(self.nodes[x.0].value.data(), &shape, target);
        let value = Tensor::from_vec(target.to_vec(), out)?;
        let needs = self.needs(x.0);
        self.push("expand", value, Op::Expand { x: x.0 }, needs)
    }

    /// Row lookup into a [vocab, dim] table; output is [indices.len(), dim].
    pub fn embedding(&mut self, table: ValueId, indices: &[usize]) -> Result<ValueId> {
        let t = &self.nodes[table.0].value;
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(Error::invalid("embedding", format!("table must be 2D, got {:?}", shape)));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(
                "embedding",
                format!("index {} out of range for table of {} rows", bad, vocab),
            ));
        }
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::from_vec(vec![indices.len(), dim], out)?;
        let needs = self.needs(table.0);
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table: table.0,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    /// Nearest-neighbour 2x upsampling of [B, C, H, W].
    pub fn upsample2x(&mut self, x: ValueId) -> Result<ValueId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid("upsample2x", format!("expected rank 4, got {:?}", shape)));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let data = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for bc in 0..b * c {
            let src = &data[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * 4 * h * w..(bc + 1) * 4 * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    let r0 = (2 * i) * 2 * w + 2 * j;
                    let r1 = (2 * i + 1) * 2 * w + 2 * j;
                    dst[r0] = v;
                    dst[r0 + 1] = v;
                    dst[r1] = v;
                    dst[r1 + 1] = v;
                }
            }
        }
        let value = Tensor::from_vec(vec![b, c, 2 * h, 2 * w], out)?;
        let needs = self.needs(x.0);
        self.push("upsample2x", value, Op::Upsample2x { x: x.0 }, needs)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every param
    /// leaf on the tape; untouched parameters get zeros.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::invalid("backward", "graph is not recording"));
        }
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward", "loss id not on this tape"));
        }
        let loss_t = &self.nodes[loss.0].value;
        if !loss_t.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_t.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &g, &mut grads)?;
            if matches!(self.nodes[i].op, Op::Leaf { param: true }) {
                grads[i] = Some(g);
            }
        }

        let mut by_id = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: true } = node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                by_id.insert(i, g);
            }
        }
        Ok(Gradients { by_id })
    }

    fn accumulate_inputs(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor<T>>], idx: usize, delta: Tensor<T>| {
            match &mut grads[idx] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += *d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let tb = &self.nodes[*b].value;
                    let data = g.data().iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv).collect();
                    acc(grads, *a, Tensor::from_vec(g.shape().to_vec(), data)?);
                }
                if self.needs(*b) {
                    let ta = &self.nodes[*a].value;
                    let data = g.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect();
                    acc(grads, *b, Tensor::from_vec(g.shape().to_vec(), data)?);
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    let f = T::from_f64(*factor);
                    acc(grads, *x, g.map(|v| v * f));
                }
            }
            Op::Matmul { a, b } => self.backward_matmul(*a, *b, g, grads, acc)?,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let sx = self.nodes[*x].value.shape();
                let sw = self.nodes[*w].value.shape();
                let dims = ConvDims {
                    batch: sx[0],
                    c_in: sx[1],
                    h: sx[2],
                    w: sx[3],
                    c_out: sw[0],
                    kh: sw[2],
                    kw: sw[3],
                    stride: *stride,
                    pad: *pad,
                };
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    g.data(),
                    &dims,
                );
                if self.needs(*x) {
                    acc(grads, *x, Tensor::from_vec(sx.to_vec(), dx)?);
                }
                if self.needs(*w) {
                    acc(grads, *w, Tensor::from_vec(sw.to_vec(), dw)?);
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        acc(grads, *b, Tensor::from_vec(vec![dims.c_out], db)?);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                means,
                rstds,
            } => {
                let sx = self.nodes[*x].value.shape();
                let (batch, channels, spatial) = (sx[0], sx[1], sx[2] * sx[3]);
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    self.nodes[*x].value.data(),
                    self.nodes[*gamma].value.data(),
                    g.data(),
                    means,
                    rstds,
                    batch,
                    channels,
                    spatial,
                    *groups,
                );
                if self.needs(*x) {
                    acc(grads, *x, Tensor::from_vec(sx.to_vec(), dx)?);
                }
                if self.needs(*gamma) {
                    acc(grads, *gamma, Tensor::from_vec(vec![channels], dgamma)?);
                }
                if self.needs(*beta) {
                    acc(grads, *beta, Tensor::from_vec(vec![channels], dbeta)?);
                }
            }
            Op::Silu { x } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(&gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (T::one() + xv * (T::one() - s))
                        })
                        .collect();
                    acc(grads, *x, Tensor::from_vec(tx.shape().to_vec(), data)?);
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let probs = &self.nodes[i].value;
                    let (outer, len, inner) = axis_blocks(probs.shape(), *axis);
                    let dx = kernels::softmax_backward(probs.data(), g.data(), outer, len, inner);
                    acc(grads, *x, Tensor::from_vec(probs.shape().to_vec(), dx)?);
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let gv = g.scalar_value() * T::from_f64(1.0 / tx.numel() as f64);
                    acc(grads, *x, Tensor::full(tx.shape(), gv));
                }
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let gv = g.scalar_value() * T::from_f64(2.0 / ta.numel() as f64);
                if self.needs(*a) {
                    let data = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| gv * (x - y))
                        .collect();
                    acc(grads, *a, Tensor::from_vec(ta.shape().to_vec(), data)?);
                }
                if self.needs(*b) {
                    let data = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| -gv * (x - y))
                        .collect();
                    acc(grads, *b, Tensor::from_vec(tb.shape().to_vec(), data)?);
                }
            }
            Op::WeightedMse {
                a,
                b,
                weights,
                weight_sum,
            } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let gv = g.scalar_value() * T::from_f64(2.0 / *weight_sum);
                if self.needs(*a) {
                    let data = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .zip(weights.data())
                        .map(|((&x, &y), &w)| gv * w * (x - y))
                        .collect();
                    acc(grads, *a, Tensor::from_vec(ta.shape().to_vec(), data)?);
                }
                if self.needs(*b) {
                    let data = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .zip(weights.data())
                        .map(|((&x, &y), &w)| -gv * w * (x - y))
                        .collect();
                    acc(grads, *b, Tensor::from_vec(tb.shape().to_vec(), data)?);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, axis_total, inner) = axis_blocks(out_shape, *axis);
                let mut offset = 0;
                for id in inputs {
                    let t = &self.nodes[*id].value;
                    let len = t.shape()[*axis];
                    if self.needs(*id) {
                        let mut part = vec![T::zero(); t.numel()];
                        for o in 0..outer {
                            let src_start = (o * axis_total + offset) * inner;
                            part[o * len * inner..(o + 1) * len * inner]
                                .copy_from_slice(&g.data()[src_start..src_start + len * inner]);
                        }
                        acc(grads, *id, Tensor::from_vec(t.shape().to_vec(), part)?);
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let (outer, axis_len, inner) = axis_blocks(tx.shape(), *axis);
                    let mut dx = vec![T::zero(); tx.numel()];
                    for o in 0..outer {
                        let dst_start = (o * axis_len + start) * inner;
                        dx[dst_start..dst_start + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(grads, *x, Tensor::from_vec(tx.shape().to_vec(), dx)?);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    acc(grads, *x, Tensor::from_vec(tx.shape().to_vec(), g.data().to_vec())?);
                }
            }
            Op::Permute { x, perm } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let inverse = invert_perm(perm);
                    let dx = permute_data(g.data(), g.shape(), &inverse);
                    acc(grads, *x, Tensor::from_vec(tx.shape().to_vec(), dx)?);
                }
            }
            Op::Expand { x } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let dx = reduce_expanded(g.data(), g.shape(), tx.shape());
                    acc(grads, *x, Tensor::from_vec(tx.shape().to_vec(), dx)?);
                }
            }
            Op::Embedding { table, indices } => {
                if self.needs(*table) {
                    let tt = &self.nodes[*table].value;
                    let dim = tt.shape()[1];
                    let mut dt = vec![T::zero(); tt.numel()];
                    for (row, &idx) in indices.iter().enumerate() {
                        for d in 0..dim {
                            dt[idx * dim + d] += g.data()[row * dim + d];
                        }
                    }
                    acc(grads, *table, Tensor::from_vec(tt.shape().to_vec(), dt)?);
                }
            }
            Op::Upsample2x { x } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let s = tx.shape();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let mut dx = vec![T::zero(); tx.numel()];
                    for bc in 0..b * c {
                        let gsrc = &g.data()[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                        let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                let r0 = (2 * i) * 2 * w + 2 * j;
                                let r1 = (2 * i + 1) * 2 * w + 2 * j;
                                dst[i * w + j] = gsrc[r0] + gsrc[r0 + 1] + gsrc[r1] + gsrc[r1 + 1];
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(s.to_vec(), dx)?);
                }
            }
        }
        Ok(())
    }

    fn backward_matmul(
        &self,
        a: usize,
        b: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        acc: impl Fn(&mut [Option<Tensor<T>>], usize, Tensor<T>),
    ) -> Result<()> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::mm_nt(g.data(), tb.data(), m, n, k, &mut da);
                    acc(grads, a, Tensor::from_vec(sa.to_vec(), da)?);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::mm_tn(ta.data(), g.data(), k, m, n, &mut db);
                    acc(grads, b, Tensor::from_vec(sb.to_vec(), db)?);
                }
            }
            (3, 3) => {
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.needs(a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        kernels::mm_nt(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    acc(grads, a, Tensor::from_vec(sa.to_vec(), da)?);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        kernels::mm_tn(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut db[i * k * n..(i + 1) * k * n],
                        );
                    }
                    acc(grads, b, Tensor::from_vec(sb.to_vec(), db)?);
                }
            }
            (3, 2) => {
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
                if self.needs(a) {
                    let mut da = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        kernels::mm_nt(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            tb.data(),
                            m,
                            n,
                            k,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    acc(grads, a, Tensor::from_vec(sa.to_vec(), da)?);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..bs {
                        kernels::mm_tn(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut db,
                        );
                    }
                    acc(grads, b, Tensor::from_vec(sb.to_vec(), db)?);
                }
            }
            _ => unreachable!("matmul forward validated ranks"),
        }
        Ok(())
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Split a shape into (outer, axis_len, inner) blocks around `axis`.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![T::zero(); data.len()];
    let ndim = shape.len();
    let mut coords = vec![0usize; ndim];
    for (out_idx, slot) in out.iter_mut().enumerate() {
        let mut rem = out_idx;
        for d in 0..ndim {
            coords[d] = rem / out_strides[d];
            rem %= out_strides[d];
        }
        let mut in_idx = 0;
        for d in 0..ndim {
            in_idx += coords[d] * in_strides[perm[d]];
        }
        *slot = data[in_idx];
    }
    out
}

fn expand_data<T: Element>(data: &[T], shape: &[usize], target: &[usize]) -> Vec<T> {
    let numel: usize = target.iter().product();
    let src_strides = strides_of(shape);
    let out_strides = strides_of(target);
    let mut out = vec![T::zero(); numel];
    let ndim = target.len();
    for (out_idx, slot) in out.iter_mut().enumerate() {
        let mut rem = out_idx;
        let mut src_idx = 0;
        for d in 0..ndim {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            if shape[d] != 1 {
                src_idx += c * src_strides[d];
            }
        }
        *slot = data[src_idx];
    }
    out
}

fn reduce_expanded<T: Element>(grad: &[T], grad_shape: &[usize], src_shape: &[usize]) -> Vec<T> {
    let src_numel: usize = src_shape.iter().product();
    let src_strides = strides_of(src_shape);
    let out_strides = strides_of(grad_shape);
    let mut out = vec![T::zero(); src_numel];
    let ndim = grad_shape.len();
    for (g_idx, &gv) in grad.iter().enumerate() {
        let mut rem = g_idx;
        let mut src_idx = 0;
        for d in 0..ndim {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            if src_shape[d] != 1 {
                src_idx += c * src_strides[d];
            }
        }
        out[src_idx] += gv;
    }
    out
}

/// Sinusoidal features for a diffusion step index: first half sines,
/// second half cosines over log-spaced frequencies.
pub fn sinusoidal_time_features<T: Element>(t: f64, dim: usize) -> Tensor<T> {
    assert!(dim >= 2 && dim % 2 == 0, "feature dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        data.push(T::from_f64((t * freq).sin()));
    }
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        data.push(T::from_f64((t * freq).cos()));
    }
    Tensor::from_vec(vec![dim], data).expect("length matches dim")
}

#[cfg(test)]
mod tests {
    use super::super::grad_check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, &mut rng)
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = Graph::<f64>::recording();
        let eye = g
            .constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let a_t = Tensor::from_vec(vec![2, 2], vec![3.0, -1.5, 2.0, 0.25]).unwrap();
        let a = g.constant(a_t.clone()).unwrap();
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out), &a_t);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let x_t = randn(&[1, 1, 5, 5], 7);
        let mut delta = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0; // centre tap
        let mut g = Graph::recording();
        let x = g.constant(x_t.clone()).unwrap();
        let w = g.constant(delta).unwrap();
        let out = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(out), &x_t);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::recording();
        let x = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    /// Direct 4-loop convolution, independent of the kernels module.
    fn conv_oracle(x: &[f64], w: &[f64], h: usize, wd: usize, k: usize, pad: usize) -> Vec<f64> {
        let mut out = vec![0.0; h * wd];
        for oy in 0..h {
            for ox in 0..wd {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = oy as isize + ky as isize - pad as isize;
                        let ix = ox as isize + kx as isize - pad as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                            acc += x[iy as usize * wd + ix as usize] * w[ky * k + kx];
                        }
                    }
                }
                out[oy * wd + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_bruteforce_oracle() {
        let ramp: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let kernel = vec![0.5, -1.0, 0.25, 2.0, 0.0, -0.5, 1.0, 3.0, -2.0];
        let expected = conv_oracle(&ramp, &kernel, 3, 3, 3, 1);

        let mut g = Graph::<f64>::recording();
        let x = g
            .constant(Tensor::from_vec(vec![1, 1, 3, 3], ramp).unwrap())
            .unwrap();
        let w = g
            .constant(Tensor::from_vec(vec![1, 1, 3, 3], kernel).unwrap())
            .unwrap();
        let out = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(out).data(), expected.as_slice());
    }

    #[test]
    fn backward_of_mean_square() {
        // loss = mean(x²) with x=[1,2] → grad = 2x/n = [1, 2]
        let mut g = Graph::<f64>::recording();
        let x = g
            .param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.mean(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let mut g = Graph::<f64>::recording();
        let x = g.param(randn(&[4], 3)).unwrap();
        let y = g.constant(g.value(x).clone()).unwrap();
        let loss = g.mse(x, y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::recording();
        assert!(g.backward(ValueId(0)).is_err(), "empty tape");

        let x = g.param(randn(&[3], 1)).unwrap();
        let y = g.mul(x, x).unwrap();
        assert!(g.backward(y).is_err(), "non-scalar loss");

        let mut inf = Graph::<f64>::inference();
        let x = inf.param(Tensor::scalar(1.0)).unwrap();
        assert!(inf.backward(x).is_err(), "not recording");
    }

    #[test]
    fn non_participating_params_get_zero_gradients() {
        let mut g = Graph::<f64>::recording();
        let used = g.param(randn(&[2], 5)).unwrap();
        let unused = g.param(randn(&[3], 6)).unwrap();
        let loss = g.mse(used, used).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        // 3-layer MLP exercising matmul, add, silu, softmax, mean, mse.
        let inputs = vec![
            randn(&[2, 4], 10),  // x
            randn(&[4, 5], 11),  // w1
            randn(&[1, 5], 12),  // b1
            randn(&[5, 4], 13),  // w2
            randn(&[1, 4], 14),  // b2
            randn(&[4, 3], 15),  // w3
            randn(&[2, 3], 16),  // target
        ];
        let max_rel = grad_check(
            |g, ids| {
                let [x, w1, b1, w2, b2, w3, target] = ids else {
                    unreachable!()
                };
                let h1 = g.matmul(*x, *w1)?;
                let b1e = g.expand(*b1, &[2, 5])?;
                let h1 = g.add(h1, b1e)?;
                let h1 = g.silu(h1)?;
                let h2 = g.matmul(h1, *w2)?;
                let b2e = g.expand(*b2, &[2, 4])?;
                let h2 = g.add(h2, b2e)?;
                let h2 = g.silu(h2)?;
                let h3 = g.matmul(h2, *w3)?;
                let p = g.softmax(h3, 1)?;
                g.mse(p, *target)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max relative error {}", max_rel);
    }

    #[test]
    fn linear_layer_gradcheck_is_tight() {
        let inputs = vec![randn(&[3, 4], 20), randn(&[4, 2], 21), randn(&[3, 2], 22)];
        let max_rel = grad_check(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                g.mse(y, ids[2])
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-6, "max relative error {}", max_rel);
    }

    #[test]
    fn group_norm_gradcheck() {
        let inputs = vec![
            randn(&[2, 4, 3, 3], 30),
            randn(&[4], 31),
            randn(&[4], 32),
            randn(&[2, 4, 3, 3], 33),
        ];
        let max_rel = grad_check(
            |g, ids| {
                let y = g.group_norm(ids[0], ids[1], ids[2], 2, GROUP_NORM_EPS)?;
                g.mse(y, ids[3])
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max relative error {}", max_rel);
    }

    #[test]
    fn every_op_kind_passes_finite_difference_check() {
        // One compact subgraph per op kind; each is checked independently.
        type Case = (
            &'static str,
            Vec<Tensor<f64>>,
            fn(&mut Graph<f64>, &[ValueId]) -> Result<ValueId>,
        );
        let cases: Vec<Case> = vec![
            ("add", vec![randn(&[3, 2], 40), randn(&[3, 2], 41)], |g, ids| {
                let y = g.add(ids[0], ids[1])?;
                g.mean(y)
            }),
            ("sub", vec![randn(&[3, 2], 42), randn(&[3, 2], 43)], |g, ids| {
                let y = g.sub(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
            ("mul", vec![randn(&[4], 44), randn(&[4], 45)], |g, ids| {
                let y = g.mul(ids[0], ids[1])?;
                g.mean(y)
            }),
            ("scale", vec![randn(&[5], 46)], |g, ids| {
                let y = g.scale(ids[0], -2.5)?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
            ("matmul2d", vec![randn(&[2, 3], 47), randn(&[3, 4], 48)], |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
            (
                "matmul3d",
                vec![randn(&[2, 2, 3], 49), randn(&[2, 3, 2], 50)],
                |g, ids| {
                    let y = g.matmul(ids[0], ids[1])?;
                    let sq = g.mul(y, y)?;
                    g.mean(sq)
                },
            ),
            (
                "matmul_broadcast",
                vec![randn(&[2, 2, 3], 51), randn(&[3, 2], 52)],
                |g, ids| {
                    let y = g.matmul(ids[0], ids[1])?;
                    let sq = g.mul(y, y)?;
                    g.mean(sq)
                },
            ),
            (
                "conv2d_stride1",
                vec![randn(&[2, 2, 4, 4], 53), randn(&[3, 2, 3, 3], 54), randn(&[3], 55)],
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
                    let sq = g.mul(y, y)?;
                    g.mean(sq)
                },
            ),
            (
                "conv2d_stride2",
                vec![randn(&[1, 2, 5, 5], 56), randn(&[2, 2, 3, 3], 57), randn(&[2], 58)],
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
                    let sq = g.mul(y, y)?;
                    g.mean(sq)
                },
            ),
            (
                "group_norm",
                vec![randn(&[2, 4, 2, 2], 59), randn(&[4], 60), randn(&[4], 61)],
                |g, ids| {
                    let y = g.group_norm(ids[0], ids[1], ids[2], 2, GROUP_NORM_EPS)?;
                    let sq = g.mul(y, y)?;
                    g.mean(sq)
                },
            ),
            ("softmax", vec![randn(&[2, 5], 62)], |g, ids| {
                let y = g.softmax(ids[0], 1)?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
            ("silu", vec![randn(&[7], 63)], |g, ids| {
                let y = g.silu(ids[0])?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
            ("mean", vec![randn(&[6], 64)], |g, ids| g.mean(ids[0])),
            ("mse", vec![randn(&[5], 65), randn(&[5], 66)], |g, ids| {
                g.mse(ids[0], ids[1])
            }),
            (
                "weighted_mse",
                vec![randn(&[6], 67), randn(&[6], 68)],
                |g, ids| {
                    let w = Tensor::from_vec(vec![6], vec![1.0, 0.0, 1.0, 1.0, 0.0, 2.0]).unwrap();
                    g.weighted_mse(ids[0], ids[1], &w)
                },
            ),
            (
                "concat",
                vec![randn(&[2, 2], 69), randn(&[2, 3], 70)],
                |g, ids| {
                    let y = g.concat(&[ids[0], ids[1]], 1)?;
                    let sq = g.mul(y, y)?;
                    g.mean(sq)
                },
            ),
            ("slice", vec![randn(&[3, 4], 71)], |g, ids| {
                let y = g.slice(ids[0], 1, 1, 2)?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
            ("reshape", vec![randn(&[2, 6], 72)], |g, ids| {
                let y = g.reshape(ids[0], vec![3, 4])?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
            ("permute", vec![randn(&[2, 3, 4], 73)], |g, ids| {
                let y = g.permute(ids[0], &[2, 0, 1])?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
            ("expand", vec![randn(&[1, 3, 1], 74)], |g, ids| {
                let y = g.expand(ids[0], &[2, 3, 4])?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
            ("embedding", vec![randn(&[3, 4], 75)], |g, ids| {
                let y = g.embedding(ids[0], &[0, 2, 2, 1])?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
            ("upsample2x", vec![randn(&[1, 2, 3, 3], 76)], |g, ids| {
                let y = g.upsample2x(ids[0])?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            }),
        ];
        for (name, inputs, build) in cases {
            let max_rel = grad_check(build, &inputs, 1e-5).unwrap();
            assert!(max_rel < 1e-4, "{}: max relative error {}", name, max_rel);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::recording();
            let x = g.constant(randn(&[2, 3, 4, 4], 80).cast()).unwrap();
            let w = g.constant(randn(&[3, 3, 3, 3], 81).cast()).unwrap();
            let y = g.conv2d(x, w, None, 1, 1).unwrap();
            let z = g.silu(y).unwrap();
            let s = g.softmax(z, 1).unwrap();
            g.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concat_then_slice_restores_operands() {
        let a_t = randn(&[2, 3, 2], 82);
        let b_t = randn(&[2, 1, 2], 83);
        let mut g = Graph::<f64>::recording();
        let a = g.constant(a_t.clone()).unwrap();
        let b = g.constant(b_t.clone()).unwrap();
        let cat = g.concat(&[a, b], 1).unwrap();
        let a2 = g.slice(cat, 1, 0, 3).unwrap();
        let b2 = g.slice(cat, 1, 3, 1).unwrap();
        assert_eq!(g.value(a2), &a_t);
        assert_eq!(g.value(b2), &b_t);
    }

    #[test]
    fn embedding_rejects_out_of_range_index() {
        let mut g = Graph::<f64>::recording();
        let table = g.constant(randn(&[3, 4], 84)).unwrap();
        assert!(g.embedding(table, &[3]).is_err());
    }

    #[test]
    fn shape_mismatch_error_names_op_and_shapes() {
        let mut g = Graph::<f64>::recording();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"), "{}", err);
    }
}
