//! Tape-based reverse-mode autodiff over the fixed operator set the
//! detection graph needs. The tape records one node per op; `backward` seeds
//! a scalar loss with gradient 1 and walks the tape in reverse, accumulating
//! vector-Jacobian products. No higher-order gradients.
//!
//! Ids are indices into the tape, so an input always has a smaller id than
//! any op consuming it; a single reverse sweep is a valid topological order.

use super::ops;
use super::shape::conv_out_dim;
use super::{Act, Result, Shape4, Tensor4, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// A fused operator implemented outside the tensor crate (loss heads). The
/// tape stores it as a trait object and calls back into it during the
/// reverse sweep.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor4]) -> Result<Tensor4>;
    /// One gradient buffer per input, each the same length as that input's
    /// data, given the upstream gradient on the output.
    fn backward(&self, inputs: &[&Tensor4], output: &Tensor4, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug)]
enum Node {
    Leaf,
    Conv2d {
        x: VarId,
        kernel: VarId,
        bias: Option<VarId>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    /// Dense conv over the leading cp channels; the rest pass through.
    PConv2d {
        x: VarId,
        kernel: VarId,
        bias: Option<VarId>,
        cp: usize,
        padding: usize,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Activation {
        x: VarId,
        kind: Act,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<usize>,
    },
    Upsample2x {
        x: VarId,
    },
    ConcatC {
        xs: Vec<VarId>,
    },
    SliceC {
        x: VarId,
        c0: usize,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Recip {
        x: VarId,
    },
    Scale {
        x: VarId,
        k: f64,
    },
    MulScalarVar {
        x: VarId,
        s: VarId,
    },
    MatMul {
        a: VarId,
        b: VarId,
    },
    TransposeHW {
        x: VarId,
    },
    SoftmaxW {
        x: VarId,
    },
    ToTokens {
        x: VarId,
    },
    FromTokens {
        x: VarId,
    },
    SumAll {
        x: VarId,
    },
    Custom {
        inputs: Vec<VarId>,
        op: Box<dyn CustomOp>,
    },
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`]. Only leaf
/// variables retain their buffers; interior gradients are consumed during
/// the sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf that must have been reached by backward.
    pub fn wrt(&self, id: VarId) -> &[f64] {
        self.get(id).expect("no gradient recorded for this leaf")
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor4>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter value.
    pub fn leaf(&mut self, t: Tensor4) -> VarId {
        self.push(Node::Leaf, t)
    }

    pub fn value(&self, id: VarId) -> &Tensor4 {
        &self.vals[id.0]
    }

    pub fn shape(&self, id: VarId) -> Shape4 {
        self.vals[id.0].shape()
    }

    fn push(&mut self, node: Node, val: Tensor4) -> VarId {
        self.nodes.push(node);
        self.vals.push(val);
        VarId(self.vals.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        kernel: VarId,
        bias: Option<VarId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<VarId> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.c != groups * ks.c {
            return Err(TensorError::DimMismatch {
                axis: "c",
                expected: groups * ks.c,
                got: xs.c,
            });
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.c != ks.n || bs.len() != ks.n {
                return Err(TensorError::DimMismatch {
                    axis: "bias",
                    expected: ks.n,
                    got: bs.len(),
                });
            }
        }
        let h_out = conv_out_dim(xs.h, ks.h, padding, stride)?;
        let w_out = conv_out_dim(xs.w, ks.w, padding, stride)?;
        let out_shape = Shape4::new(xs.n, ks.n, h_out, w_out);
        let mut out = vec![0.0; out_shape.len()];
        let bias_data = bias.map(|b| self.vals[b.0].data().to_vec());
        ops::conv_forward_raw(
            self.vals[x.0].data(),
            xs,
            self.vals[kernel.0].data(),
            ks,
            bias_data.as_deref(),
            stride,
            padding,
            groups,
            &mut out,
            out_shape,
        );
        Ok(self.push(
            Node::Conv2d {
                x,
                kernel,
                bias,
                stride,
                padding,
                groups,
            },
            Tensor4::from_vec(out_shape, out)?,
        ))
    }

    pub fn pconv2d(&mut self, x: VarId, kernel: VarId, bias: Option<VarId>, cp: usize) -> Result<VarId> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if cp == 0 || cp > xs.c || ks.n != cp || ks.c != cp {
            return Err(TensorError::Config(format!(
                "pconv: cp={} with kernel {} on input c={}",
                cp,
                ks,
                xs.c
            )));
        }
        if ks.h % 2 == 0 {
            return Err(TensorError::Config("pconv kernel must be odd".into()));
        }
        let padding = (ks.h - 1) / 2;
        let kernel_t = self.vals[kernel.0].clone();
        let bias_data = bias.map(|b| self.vals[b.0].data().to_vec());
        let w = super::ConvWeights::new(kernel_t, bias_data, 1, padding, 1)?;
        let out = ops::pconv2d(&self.vals[x.0], &w, cp)?;
        Ok(self.push(
            Node::PConv2d {
                x,
                kernel,
                bias,
                cp,
                padding,
            },
            out,
        ))
    }

    /// Batch norm. Training mode computes batch statistics and folds them
    /// into `running_mean` / `running_var` in place; eval mode reads them.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        eps: f64,
        momentum: f64,
        training: bool,
    ) -> Result<VarId> {
        let xs = self.shape(x);
        let c = xs.c;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::DimMismatch {
                axis: "c",
                expected: c,
                got: running_mean.len(),
            });
        }
        if self.shape(gamma).len() != c || self.shape(beta).len() != c {
            return Err(TensorError::DimMismatch {
                axis: "c",
                expected: c,
                got: self.shape(gamma).len(),
            });
        }
        let (n, _, h, w) = xs.dims();
        let plane = h * w;
        let m = (n * plane) as f64;
        let xv = &self.vals[x.0];
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let (mu, var) = if training {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for ni in 0..n {
                    for &v in xv.plane(ni, ci) {
                        sum += v;
                        sq += v * v;
                    }
                }
                let mu = sum / m;
                let var = (sq / m - mu * mu).max(0.0);
                running_mean[ci] = (1.0 - momentum) * running_mean[ci] + momentum * mu;
                running_var[ci] = (1.0 - momentum) * running_var[ci] + momentum * var;
                (mu, var)
            } else {
                (running_mean[ci], running_var[ci])
            };
            mean[ci] = mu;
            inv_std[ci] = 1.0 / (var + eps).sqrt();
        }
        let g = &self.vals[gamma.0];
        let b = &self.vals[beta.0];
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = xs.idx(ni, ci, 0, 0);
                let scale = g.data()[ci] * inv_std[ci];
                let shift = b.data()[ci] - mean[ci] * scale;
                for i in base..base + plane {
                    out[i] = xv.data()[i] * scale + shift;
                }
            }
        }
        let out = Tensor4::from_vec(xs, out)?;
        Ok(self.push(
            Node::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
            out,
        ))
    }

    pub fn activation(&mut self, x: VarId, kind: Act) -> VarId {
        let out = ops::activation(&self.vals[x.0], kind);
        self.push(Node::Activation { x, kind }, out)
    }

    pub fn maxpool2d(&mut self, x: VarId, k: usize, s: usize, p: usize) -> Result<VarId> {
        let (out, argmax) = ops::maxpool2d_with_argmax(&self.vals[x.0], k, s, p)?;
        Ok(self.push(Node::MaxPool { x, argmax }, out))
    }

    pub fn upsample2x(&mut self, x: VarId) -> VarId {
        let out = ops::nearest_upsample2x(&self.vals[x.0]);
        self.push(Node::Upsample2x { x }, out)
    }

    pub fn concat_channels(&mut self, xs: &[VarId]) -> Result<VarId> {
        let tensors: Vec<&Tensor4> = xs.iter().map(|id| &self.vals[id.0]).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(Node::ConcatC { xs: xs.to_vec() }, out))
    }

    pub fn slice_channels(&mut self, x: VarId, c0: usize, c1: usize) -> Result<VarId> {
        let out = ops::slice_channels(&self.vals[x.0], c0, c1)?;
        Ok(self.push(Node::SliceC { x, c0 }, out))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.shape(a);
        if sa != self.shape(b) {
            return Err(TensorError::Config(format!(
                "add shape mismatch: {} vs {}",
                sa,
                self.shape(b)
            )));
        }
        let data = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor4::from_vec(sa, data)?;
        Ok(self.push(Node::Add { a, b }, out))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.shape(a);
        if sa != self.shape(b) {
            return Err(TensorError::Config(format!(
                "mul shape mismatch: {} vs {}",
                sa,
                self.shape(b)
            )));
        }
        let data = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor4::from_vec(sa, data)?;
        Ok(self.push(Node::Mul { a, b }, out))
    }

    pub fn recip(&mut self, x: VarId) -> VarId {
        let s = self.shape(x);
        let data = self.vals[x.0].data().iter().map(|&v| 1.0 / v).collect();
        let out = Tensor4::from_vec(s, data).unwrap();
        self.push(Node::Recip { x }, out)
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let s = self.shape(x);
        let data = self.vals[x.0].data().iter().map(|&v| k * v).collect();
        let out = Tensor4::from_vec(s, data).unwrap();
        self.push(Node::Scale { x, k }, out)
    }

    /// Broadcast-multiplies x by a (1,1,1,1) scalar variable.
    pub fn mul_scalar_var(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if self.shape(s).len() != 1 {
            return Err(TensorError::Config(
                "mul_scalar_var needs a (1,1,1,1) scalar".into(),
            ));
        }
        let k = self.vals[s.0].data()[0];
        let sh = self.shape(x);
        let data = self.vals[x.0].data().iter().map(|&v| k * v).collect();
        let out = Tensor4::from_vec(sh, data)?;
        Ok(self.push(Node::MulScalarVar { x, s }, out))
    }

    /// Batched matrix multiply over the trailing two axes:
    /// (n,c,p,q) x (n,c,q,r) -> (n,c,p,r).
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.n != sb.n || sa.c != sb.c {
            return Err(TensorError::DimMismatch {
                axis: "n",
                expected: sa.n,
                got: sb.n,
            });
        }
        if sa.w != sb.h {
            return Err(TensorError::DimMismatch {
                axis: "w",
                expected: sa.w,
                got: sb.h,
            });
        }
        let out_shape = Shape4::new(sa.n, sa.c, sa.h, sb.w);
        let mut out = vec![0.0; out_shape.len()];
        matmul_raw(
            self.vals[a.0].data(),
            self.vals[b.0].data(),
            &mut out,
            sa.n * sa.c,
            sa.h,
            sa.w,
            sb.w,
            false,
            false,
        );
        let out = Tensor4::from_vec(out_shape, out)?;
        Ok(self.push(Node::MatMul { a, b }, out))
    }

    /// Transposes the trailing two axes.
    pub fn transpose_hw(&mut self, x: VarId) -> VarId {
        let s = self.shape(x);
        let out_shape = Shape4::new(s.n, s.c, s.w, s.h);
        let mut out = vec![0.0; out_shape.len()];
        transpose_raw(self.vals[x.0].data(), &mut out, s.n * s.c, s.h, s.w);
        let out = Tensor4::from_vec(out_shape, out).unwrap();
        self.push(Node::TransposeHW { x }, out)
    }

    /// Softmax along the last (w) axis of every row.
    pub fn softmax_w(&mut self, x: VarId) -> VarId {
        let s = self.shape(x);
        let rows = s.n * s.c * s.h;
        let w = s.w;
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; s.len()];
        for r in 0..rows {
            let row = &xd[r * w..(r + 1) * w];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out[r * w..(r + 1) * w] {
                *o /= sum;
            }
        }
        let out = Tensor4::from_vec(s, out).unwrap();
        self.push(Node::SoftmaxW { x }, out)
    }

    /// (n,c,h,w) -> (n,1,h*w,c): rows are spatial positions, columns are
    /// channels. Inverse of [`Tape::from_tokens`].
    pub fn to_tokens(&mut self, x: VarId) -> VarId {
        let s = self.shape(x);
        let out_shape = Shape4::new(s.n, 1, s.h * s.w, s.c);
        let mut out = vec![0.0; out_shape.len()];
        let xd = self.vals[x.0].data();
        let plane = s.h * s.w;
        for ni in 0..s.n {
            for ci in 0..s.c {
                let src = &xd[(ni * s.c + ci) * plane..(ni * s.c + ci + 1) * plane];
                for (pos, &v) in src.iter().enumerate() {
                    out[(ni * plane + pos) * s.c + ci] = v;
                }
            }
        }
        let out = Tensor4::from_vec(out_shape, out).unwrap();
        self.push(Node::ToTokens { x }, out)
    }

    /// (n,1,h*w,c) -> (n,c,h,w).
    pub fn from_tokens(&mut self, x: VarId, h: usize, w: usize) -> Result<VarId> {
        let s = self.shape(x);
        if s.c != 1 || s.h != h * w {
            return Err(TensorError::Config(format!(
                "from_tokens: shape {} does not match {}x{} map",
                s, h, w
            )));
        }
        let c = s.w;
        let out_shape = Shape4::new(s.n, c, h, w);
        let mut out = vec![0.0; out_shape.len()];
        let xd = self.vals[x.0].data();
        let plane = h * w;
        for ni in 0..s.n {
            for pos in 0..plane {
                for ci in 0..c {
                    out[(ni * c + ci) * plane + pos] = xd[(ni * plane + pos) * c + ci];
                }
            }
        }
        let out = Tensor4::from_vec(out_shape, out)?;
        Ok(self.push(Node::FromTokens { x }, out))
    }

    /// Sums every element into a (1,1,1,1) scalar.
    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let total: f64 = self.vals[x.0].data().iter().sum();
        self.push(Node::SumAll { x }, Tensor4::scalar(total))
    }

    /// Records a fused custom operator.
    pub fn apply(&mut self, op: Box<dyn CustomOp>, inputs: &[VarId]) -> Result<VarId> {
        let tensors: Vec<&Tensor4> = inputs.iter().map(|id| &self.vals[id.0]).collect();
        let out = op.forward(&tensors)?;
        Ok(self.push(
            Node::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            out,
        ))
    }

    /// Reverse sweep from a scalar loss. Every leaf reachable from `loss`
    /// ends with its full gradient in the returned [`Gradients`].
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::TapeState(
                "backward called before any forward op was recorded".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::TapeState(format!(
                "loss id {} not on this tape (len {})",
                loss.0,
                self.nodes.len()
            )));
        }
        if self.vals[loss.0].shape().len() != 1 {
            return Err(TensorError::TapeState(format!(
                "loss must be scalar, got shape {}",
                self.vals[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i], Node::Leaf) {
                continue; // keep leaf gradients for the caller
            }
            let go = grads[i].take().unwrap();
            self.backprop_node(i, &go, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut Vec<Option<Vec<f64>>>, id: VarId, contribution: &[f64]) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.vals[id.0].shape().len()]);
        for (g, &c) in slot.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn grad_buf<'g>(
        &self,
        grads: &'g mut Vec<Option<Vec<f64>>>,
        id: VarId,
    ) -> &'g mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; self.vals[id.0].shape().len()])
    }

    /// Removes the gradient buffer for `id` (allocating zeros if absent) so
    /// it can be handed to a raw kernel as a mutable slice.
    fn take_buf(&self, grads: &mut [Option<Vec<f64>>], id: VarId) -> Vec<f64> {
        grads[id.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.vals[id.0].shape().len()])
    }

    fn backprop_node(&self, i: usize, go: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let out_shape = self.vals[i].shape();
        match &self.nodes[i] {
            Node::Leaf => {}
            Node::Conv2d {
                x,
                kernel,
                bias,
                stride,
                padding,
                groups,
            } => {
                let xs = self.shape(*x);
                let ks = self.shape(*kernel);
                // Take each buffer out to satisfy the borrow checker, then
                // hand raw slices to the shared kernel.
                let mut dx = self.take_buf(grads, *x);
                let mut dk = self.take_buf(grads, *kernel);
                let mut db = bias.map(|b| self.take_buf(grads, b));
                ops::conv_backward_raw(
                    self.vals[x.0].data(),
                    xs,
                    self.vals[kernel.0].data(),
                    ks,
                    *stride,
                    *padding,
                    *groups,
                    go,
                    out_shape,
                    Some(&mut dx),
                    Some(&mut dk),
                    db.as_deref_mut(),
                );
                grads[x.0] = Some(dx);
                grads[kernel.0] = Some(dk);
                if let (Some(b), Some(dbv)) = (bias, db) {
                    grads[b.0] = Some(dbv);
                }
            }
            Node::PConv2d {
                x,
                kernel,
                bias,
                cp,
                padding,
            } => {
                let xs = self.shape(*x);
                let ks = self.shape(*kernel);
                let (n, c, h, w) = xs.dims();
                let plane = h * w;
                let slice_shape = Shape4::new(n, *cp, h, w);
                // Gather the convolved slice of x and of the output grad.
                let mut x_slice = vec![0.0; slice_shape.len()];
                let mut go_slice = vec![0.0; slice_shape.len()];
                for ni in 0..n {
                    let src = xs.idx(ni, 0, 0, 0);
                    x_slice[ni * cp * plane..(ni + 1) * cp * plane]
                        .copy_from_slice(&self.vals[x.0].data()[src..src + cp * plane]);
                    go_slice[ni * cp * plane..(ni + 1) * cp * plane]
                        .copy_from_slice(&go[src..src + cp * plane]);
                }
                let mut dx_slice = vec![0.0; slice_shape.len()];
                let mut dk = self.take_buf(grads, *kernel);
                let mut db = bias.map(|b| self.take_buf(grads, b));
                ops::conv_backward_raw(
                    &x_slice,
                    slice_shape,
                    self.vals[kernel.0].data(),
                    ks,
                    1,
                    *padding,
                    1,
                    &go_slice,
                    slice_shape,
                    Some(&mut dx_slice),
                    Some(&mut dk),
                    db.as_deref_mut(),
                );
                grads[kernel.0] = Some(dk);
                if let (Some(b), Some(dbv)) = (bias, db) {
                    grads[b.0] = Some(dbv);
                }
                // dx: conv VJP on the leading slice, identity on the rest.
                let dx = self.grad_buf(grads, *x);
                for ni in 0..n {
                    let base = xs.idx(ni, 0, 0, 0);
                    for (j, &v) in dx_slice[ni * cp * plane..(ni + 1) * cp * plane]
                        .iter()
                        .enumerate()
                    {
                        dx[base + j] += v;
                    }
                    for j in cp * plane..c * plane {
                        dx[base + j] += go[base + j];
                    }
                }
            }
            Node::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = xs.dims();
                let plane = h * w;
                let m = (n * plane) as f64;
                let xd = self.vals[x.0].data();
                let gd = self.vals[gamma.0].data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = self.take_buf(grads, *x);
                for ci in 0..c {
                    let mu = mean[ci];
                    let istd = inv_std[ci];
                    let g = gd[ci];
                    if *training {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for ni in 0..n {
                            let base = xs.idx(ni, ci, 0, 0);
                            for j in base..base + plane {
                                let xhat = (xd[j] - mu) * istd;
                                sum_dy += go[j];
                                sum_dy_xhat += go[j] * xhat;
                            }
                        }
                        dgamma[ci] += sum_dy_xhat;
                        dbeta[ci] += sum_dy;
                        for ni in 0..n {
                            let base = xs.idx(ni, ci, 0, 0);
                            for j in base..base + plane {
                                let xhat = (xd[j] - mu) * istd;
                                dx[j] += g * istd * (go[j] - sum_dy / m - xhat * sum_dy_xhat / m);
                            }
                        }
                    } else {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for ni in 0..n {
                            let base = xs.idx(ni, ci, 0, 0);
                            for j in base..base + plane {
                                let xhat = (xd[j] - mu) * istd;
                                sum_dy += go[j];
                                sum_dy_xhat += go[j] * xhat;
                                dx[j] += g * istd * go[j];
                            }
                        }
                        dgamma[ci] += sum_dy_xhat;
                        dbeta[ci] += sum_dy;
                    }
                }
                grads[x.0] = Some(dx);
                self.accum(grads, *gamma, &dgamma);
                self.accum(grads, *beta, &dbeta);
            }
            Node::Activation { x, kind } => {
                let xd = self.vals[x.0].data();
                let dx = self.grad_buf(grads, *x);
                for ((d, &g), &xv) in dx.iter_mut().zip(go).zip(xd) {
                    *d += g * kind.derivative(xv);
                }
            }
            Node::MaxPool { x, argmax } => {
                let dx = self.grad_buf(grads, *x);
                for (oi, &src) in argmax.iter().enumerate() {
                    dx[src] += go[oi];
                }
            }
            Node::Upsample2x { x } => {
                let xs = self.shape(*x);
                let (n, c, h, w) = xs.dims();
                let dx = self.grad_buf(grads, *x);
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let mut acc = 0.0;
                                for dy in 0..2 {
                                    for dxx in 0..2 {
                                        acc += go[out_shape.idx(ni, ci, 2 * y + dy, 2 * xx + dxx)];
                                    }
                                }
                                dx[xs.idx(ni, ci, y, xx)] += acc;
                            }
                        }
                    }
                }
            }
            Node::ConcatC { xs } => {
                let (n, _, h, w) = out_shape.dims();
                let plane = h * w;
                let mut c_off = 0;
                for id in xs {
                    let cs = self.shape(*id).c;
                    let dx = self.grad_buf(grads, *id);
                    for ni in 0..n {
                        let src = out_shape.idx(ni, c_off, 0, 0);
                        for (j, d) in dx[ni * cs * plane..(ni + 1) * cs * plane]
                            .iter_mut()
                            .enumerate()
                        {
                            *d += go[src + j];
                        }
                    }
                    c_off += cs;
                }
            }
            Node::SliceC { x, c0 } => {
                let xs = self.shape(*x);
                let (n, _, h, w) = xs.dims();
                let cs = out_shape.c;
                let plane = h * w;
                let dx = self.grad_buf(grads, *x);
                for ni in 0..n {
                    let dst = xs.idx(ni, *c0, 0, 0);
                    for j in 0..cs * plane {
                        dx[dst + j] += go[ni * cs * plane + j];
                    }
                }
            }
            Node::Add { a, b } => {
                self.accum(grads, *a, go);
                self.accum(grads, *b, go);
            }
            Node::Mul { a, b } => {
                let bd = self.vals[b.0].data();
                let da = self.grad_buf(grads, *a);
                for ((d, &g), &bv) in da.iter_mut().zip(go).zip(bd) {
                    *d += g * bv;
                }
                let ad = self.vals[a.0].data();
                let db = self.grad_buf(grads, *b);
                for ((d, &g), &av) in db.iter_mut().zip(go).zip(ad) {
                    *d += g * av;
                }
            }
            Node::Recip { x } => {
                let yd = self.vals[i].data();
                let dx = self.grad_buf(grads, *x);
                for ((d, &g), &y) in dx.iter_mut().zip(go).zip(yd) {
                    *d -= g * y * y;
                }
            }
            Node::Scale { x, k } => {
                let dx = self.grad_buf(grads, *x);
                for (d, &g) in dx.iter_mut().zip(go) {
                    *d += g * k;
                }
            }
            Node::MulScalarVar { x, s } => {
                let k = self.vals[s.0].data()[0];
                let xd = self.vals[x.0].data();
                let ds_val: f64 = go.iter().zip(xd).map(|(&g, &xv)| g * xv).sum();
                let dx = self.grad_buf(grads, *x);
                for (d, &g) in dx.iter_mut().zip(go) {
                    *d += g * k;
                }
                self.accum(grads, *s, &[ds_val]);
            }
            Node::MatMul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let batch = sa.n * sa.c;
                let (p, q, r) = (sa.h, sa.w, sb.w);
                // dA = dO * B^T
                let mut da = self.take_buf(grads, *a);
                matmul_raw(go, self.vals[b.0].data(), &mut da, batch, p, r, q, false, true);
                grads[a.0] = Some(da);
                // dB = A^T * dO
                let mut db = self.take_buf(grads, *b);
                matmul_raw(self.vals[a.0].data(), go, &mut db, batch, q, p, r, true, false);
                grads[b.0] = Some(db);
            }
            Node::TransposeHW { x } => {
                let (h_out, w_out) = out_shape.spatial();
                let xs = self.shape(*x);
                let batch = xs.n * xs.c;
                let dx = self.grad_buf(grads, *x);
                // go has shape (.., w, h) relative to x; transpose it back.
                for bi in 0..batch {
                    let xb = bi * xs.h * xs.w;
                    let gb = bi * h_out * w_out;
                    for y in 0..h_out {
                        for xx in 0..w_out {
                            dx[xb + xx * xs.w + y] += go[gb + y * w_out + xx];
                        }
                    }
                }
            }
            Node::SoftmaxW { x } => {
                let s = out_shape;
                let rows = s.n * s.c * s.h;
                let w = s.w;
                let yd = self.vals[i].data();
                let dx = self.grad_buf(grads, *x);
                for r in 0..rows {
                    let y_row = &yd[r * w..(r + 1) * w];
                    let g_row = &go[r * w..(r + 1) * w];
                    let dot: f64 = y_row.iter().zip(g_row).map(|(&y, &g)| y * g).sum();
                    for ((d, &y), &g) in dx[r * w..(r + 1) * w].iter_mut().zip(y_row).zip(g_row) {
                        *d += y * (g - dot);
                    }
                }
            }
            Node::ToTokens { x } => {
                let xs = self.shape(*x);
                let plane = xs.h * xs.w;
                let dx = self.grad_buf(grads, *x);
                for ni in 0..xs.n {
                    for ci in 0..xs.c {
                        for pos in 0..plane {
                            dx[(ni * xs.c + ci) * plane + pos] +=
                                go[(ni * plane + pos) * xs.c + ci];
                        }
                    }
                }
            }
            Node::FromTokens { x } => {
                let xs = self.shape(*x);
                let c = xs.w;
                let plane = xs.h;
                let dx = self.grad_buf(grads, *x);
                for ni in 0..xs.n {
                    for pos in 0..plane {
                        for ci in 0..c {
                            dx[(ni * plane + pos) * c + ci] +=
                                go[(ni * c + ci) * plane + pos];
                        }
                    }
                }
            }
            Node::SumAll { x } => {
                let g = go[0];
                let dx = self.grad_buf(grads, *x);
                for d in dx.iter_mut() {
                    *d += g;
                }
            }
            Node::Custom { inputs, op } => {
                let tensors: Vec<&Tensor4> = inputs.iter().map(|id| &self.vals[id.0]).collect();
                let contributions = op.backward(&tensors, &self.vals[i], go);
                assert_eq!(
                    contributions.len(),
                    inputs.len(),
                    "custom op {} returned wrong number of gradients",
                    op.name()
                );
                for (id, contrib) in inputs.iter().zip(contributions) {
                    self.accum(grads, *id, &contrib);
                }
            }
        }
    }
}

/// C[b] += (transA ? A^T : A) * (transB ? B^T : B), batched. `p`, `q`, `r`
/// are the logical dims of the product: (p x q) * (q x r).
#[allow(clippy::too_many_arguments)]
fn matmul_raw(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    batch: usize,
    p: usize,
    q: usize,
    r: usize,
    trans_a: bool,
    trans_b: bool,
) {
    // Stored dims: A is (p x q) or (q x p) when trans_a; same for B.
    let a_sz = p * q;
    let b_sz = q * r;
    let c_sz = p * r;
    for bi in 0..batch {
        let ab = &a[bi * a_sz..(bi + 1) * a_sz];
        let bb = &b[bi * b_sz..(bi + 1) * b_sz];
        let cb = &mut c[bi * c_sz..(bi + 1) * c_sz];
        for i in 0..p {
            for kk in 0..q {
                let av = if trans_a { ab[kk * p + i] } else { ab[i * q + kk] };
                if av == 0.0 {
                    continue;
                }
                if trans_b {
                    for j in 0..r {
                        cb[i * r + j] += av * bb[j * q + kk];
                    }
                } else {
                    let brow = &bb[kk * r..kk * r + r];
                    for (cv, &bv) in cb[i * r..i * r + r].iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
}

fn transpose_raw(x: &[f64], out: &mut [f64], batch: usize, h: usize, w: usize) {
    for bi in 0..batch {
        let xb = &x[bi * h * w..(bi + 1) * h * w];
        let ob = &mut out[bi * h * w..(bi + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                ob[xx * h + y] = xb[y * w + xx];
            }
        }
    }
}
