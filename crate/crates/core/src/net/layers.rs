//! Building blocks of the graph. Every layer registers its parameters in the
//! store and its op descriptors in the cost ledger at build time, then
//! replays itself onto a tape at forward time.

use super::{Builder, ParamId, Session};
use crate::cost::OpDesc;
use crate::tensor::shape::conv_out_dim;
use crate::tensor::tape::VarId;
use crate::tensor::{ops, Act, BatchNormParams, ConvWeights, Result, Shape4, Tensor4};
use crate::util::kaiming_uniform;

/// Parameter handles of one batch-norm: gamma/beta trainable, running
/// mean/var as buffers.
#[derive(Debug, Clone, Copy)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BnIds {
    fn build(b: &mut Builder, name: &str, c: usize) -> Self {
        let shape = Shape4::new(1, c, 1, 1);
        let gamma = b
            .store
            .add(format!("{}.gamma", name), Tensor4::filled(shape, 1.0), true);
        let beta = b
            .store
            .add(format!("{}.beta", name), Tensor4::zeros(shape), true);
        let running_mean =
            b.store
                .add(format!("{}.running_mean", name), Tensor4::zeros(shape), false);
        let running_var = b.store.add(
            format!("{}.running_var", name),
            Tensor4::filled(shape, 1.0),
            false,
        );
        b.record(name, &OpDesc::BatchNorm { c: c as u64 });
        BnIds {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Snapshot as the plain parameter struct (for fusion and the pure ops).
    pub fn to_params(&self, sess: &Session) -> BatchNormParams {
        BatchNormParams {
            gamma: sess.store_value(self.gamma).data().to_vec(),
            beta: sess.store_value(self.beta).data().to_vec(),
            running_mean: sess.store_value(self.running_mean).data().to_vec(),
            running_var: sess.store_value(self.running_var).data().to_vec(),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

/// Conv (no bias) + batch norm + optional activation. In fused eval mode the
/// conv and bn collapse into a single biased conv.
#[derive(Debug)]
pub struct ConvBnAct {
    kernel: ParamId,
    bn: BnIds,
    act: Option<Act>,
    stride: usize,
    padding: usize,
    c_out: usize,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        hw: (usize, usize),
        act: Option<Act>,
    ) -> (Self, (usize, usize)) {
        let kernel = b.store.add(
            format!("{}.kernel", name),
            kaiming_uniform(b.rng, Shape4::new(c_out, c_in, k, k)),
            true,
        );
        let h_out = conv_out_dim(hw.0, k, padding, stride).expect("conv output too small");
        let w_out = conv_out_dim(hw.1, k, padding, stride).expect("conv output too small");
        b.record(
            name,
            &OpDesc::Conv {
                h: h_out as u64,
                w: w_out as u64,
                k: k as u64,
                c_in: c_in as u64,
                c_out: c_out as u64,
                stride: stride as u64,
                bias: false,
            },
        );
        let bn = BnIds::build(b, &format!("{}.bn", name), c_out);
        (
            ConvBnAct {
                kernel,
                bn,
                act,
                stride,
                padding,
                c_out,
            },
            (h_out, w_out),
        )
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        let y = if sess.fused {
            let weights = ConvWeights::new(
                sess.store_value(self.kernel).clone(),
                None,
                self.stride,
                self.padding,
                1,
            )?;
            let fused = ops::fuse_conv_bn(&weights, &self.bn.to_params(sess), false)?;
            let k = sess.tape.leaf(fused.kernel);
            let bias = sess.tape.leaf(Tensor4::from_vec(
                Shape4::new(1, self.c_out, 1, 1),
                fused.bias.unwrap(),
            )?);
            sess.tape
                .conv2d(x, k, Some(bias), self.stride, self.padding, 1)?
        } else {
            let k = sess.var(self.kernel);
            let y = sess.tape.conv2d(x, k, None, self.stride, self.padding, 1)?;
            sess.batchnorm(y, &self.bn)?
        };
        Ok(match self.act {
            Some(a) => sess.tape.activation(y, a),
            None => y,
        })
    }
}

/// Plain conv with optional bias and activation, no norm. Used for the
/// pointwise layers that standard FasterNet leaves bare and the head
/// projections.
#[derive(Debug)]
pub struct ConvLayer {
    kernel: ParamId,
    bias: Option<ParamId>,
    act: Option<Act>,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        hw: (usize, usize),
        bias_init: Option<f64>,
        act: Option<Act>,
    ) -> Self {
        let kernel = b.store.add(
            format!("{}.kernel", name),
            kaiming_uniform(b.rng, Shape4::new(c_out, c_in, k, k)),
            true,
        );
        let bias = bias_init.map(|v| {
            b.store.add(
                format!("{}.bias", name),
                Tensor4::filled(Shape4::new(1, c_out, 1, 1), v),
                true,
            )
        });
        let padding = (k - 1) / 2;
        b.record(
            name,
            &OpDesc::Conv {
                h: hw.0 as u64,
                w: hw.1 as u64,
                k: k as u64,
                c_in: c_in as u64,
                c_out: c_out as u64,
                stride: 1,
                bias: bias.is_some(),
            },
        );
        ConvLayer {
            kernel,
            bias,
            act,
            stride: 1,
            padding,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        let k = sess.var(self.kernel);
        let bias = self.bias.map(|b| sess.var(b));
        let y = sess
            .tape
            .conv2d(x, k, bias, self.stride, self.padding, 1)?;
        Ok(match self.act {
            Some(a) => sess.tape.activation(y, a),
            None => y,
        })
    }
}

/// FasterNet block: partial conv, expand pointwise conv with bn+act, restore
/// pointwise conv, residual add. Spatial dims preserved.
#[derive(Debug)]
pub struct FasterNetBlock {
    pconv_kernel: ParamId,
    cp: usize,
    pw1: ConvBnAct,
    pw2: ConvLayer,
}

impl FasterNetBlock {
    pub fn build(
        b: &mut Builder,
        name: &str,
        c: usize,
        cp: usize,
        hw: (usize, usize),
        pw_act: Act,
    ) -> Self {
        assert!(cp >= 1 && cp <= c, "pconv channel count out of range");
        let pconv_kernel = b.store.add(
            format!("{}.pconv.kernel", name),
            kaiming_uniform(b.rng, Shape4::new(cp, cp, 3, 3)),
            true,
        );
        b.record(
            &format!("{}.pconv", name),
            &OpDesc::PConv {
                h: hw.0 as u64,
                w: hw.1 as u64,
                k: 3,
                c: c as u64,
                cp: cp as u64,
            },
        );
        let (pw1, _) = ConvBnAct::build(
            b,
            &format!("{}.pw1", name),
            c,
            2 * c,
            1,
            1,
            0,
            hw,
            Some(pw_act),
        );
        let pw2 = ConvLayer::build(b, &format!("{}.pw2", name), 2 * c, c, 1, hw, None, None);
        FasterNetBlock {
            pconv_kernel,
            cp,
            pw1,
            pw2,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        let k = sess.var(self.pconv_kernel);
        let t = sess.tape.pconv2d(x, k, None, self.cp)?;
        let t = self.pw1.forward(sess, t)?;
        let t = self.pw2.forward(sess, t)?;
        sess.tape.add(x, t)
    }
}

/// SPPF: bottleneck conv, three serial same-padded max pools, concat of the
/// four stages, restore conv.
#[derive(Debug)]
pub struct Sppf {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
    pool_k: usize,
}

impl Sppf {
    pub fn build(b: &mut Builder, name: &str, c: usize, pool_k: usize, hw: (usize, usize), act: Act) -> Self {
        let hidden = c / 2;
        let (cv1, _) = ConvBnAct::build(b, &format!("{}.cv1", name), c, hidden, 1, 1, 0, hw, Some(act));
        let (cv2, _) =
            ConvBnAct::build(b, &format!("{}.cv2", name), hidden * 4, c, 1, 1, 0, hw, Some(act));
        Sppf { cv1, cv2, pool_k }
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        let p = (self.pool_k - 1) / 2;
        let y = self.cv1.forward(sess, x)?;
        let p1 = sess.tape.maxpool2d(y, self.pool_k, 1, p)?;
        let p2 = sess.tape.maxpool2d(p1, self.pool_k, 1, p)?;
        let p3 = sess.tape.maxpool2d(p2, self.pool_k, 1, p)?;
        let cat = sess.tape.concat_channels(&[y, p1, p2, p3])?;
        self.cv2.forward(sess, cat)
    }
}

/// Partial self-attention: split channels in half, run single-head attention
/// over flattened spatial positions plus a two-layer pointwise FFN (both with
/// residuals) on one half, concat, 1x1 fuse.
#[derive(Debug)]
pub struct Psa {
    qkv: ConvLayer,
    out_proj: ConvLayer,
    ffn1: ConvBnAct,
    ffn2: ConvLayer,
    fuse: ConvBnAct,
    half: usize,
    dq: usize,
    hw: (usize, usize),
}

impl Psa {
    pub fn build(b: &mut Builder, name: &str, c: usize, hw: (usize, usize), act: Act) -> Self {
        assert!(c % 4 == 0, "psa needs channels divisible by 4");
        let half = c / 2;
        let dq = half / 2;
        let qkv = ConvLayer::build(
            b,
            &format!("{}.qkv", name),
            half,
            2 * dq + half,
            1,
            hw,
            None,
            None,
        );
        let tokens = (hw.0 * hw.1) as u64;
        // q*k^T and attn*v, batched per image.
        b.record(
            &format!("{}.attn.scores", name),
            &OpDesc::MatMul { batch: 1, p: tokens, q: dq as u64, r: tokens },
        );
        b.record(
            &format!("{}.attn.mix", name),
            &OpDesc::MatMul { batch: 1, p: tokens, q: tokens, r: half as u64 },
        );
        let out_proj = ConvLayer::build(
            b,
            &format!("{}.out_proj", name),
            half,
            half,
            1,
            hw,
            None,
            None,
        );
        let (ffn1, _) = ConvBnAct::build(
            b,
            &format!("{}.ffn1", name),
            half,
            2 * half,
            1,
            1,
            0,
            hw,
            Some(act),
        );
        let ffn2 = ConvLayer::build(b, &format!("{}.ffn2", name), 2 * half, half, 1, hw, None, None);
        let (fuse, _) = ConvBnAct::build(b, &format!("{}.fuse", name), c, c, 1, 1, 0, hw, Some(act));
        Psa {
            qkv,
            out_proj,
            ffn1,
            ffn2,
            fuse,
            half,
            dq,
            hw,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        let c = sess.tape.shape(x).c;
        let a = sess.tape.slice_channels(x, 0, self.half)?;
        let bhalf = sess.tape.slice_channels(x, self.half, c)?;
        // Attention with residual.
        let qkv = self.qkv.forward(sess, bhalf)?;
        let q = sess.tape.slice_channels(qkv, 0, self.dq)?;
        let k = sess.tape.slice_channels(qkv, self.dq, 2 * self.dq)?;
        let v = sess.tape.slice_channels(qkv, 2 * self.dq, 2 * self.dq + self.half)?;
        let qt = sess.tape.to_tokens(q);
        let kt = sess.tape.to_tokens(k);
        let vt = sess.tape.to_tokens(v);
        let ktt = sess.tape.transpose_hw(kt);
        let scores = sess.tape.matmul(qt, ktt)?;
        let scaled = sess.tape.scale(scores, 1.0 / (self.dq as f64).sqrt());
        let attn = sess.tape.softmax_w(scaled);
        let mixed = sess.tape.matmul(attn, vt)?;
        let map = sess.tape.from_tokens(mixed, self.hw.0, self.hw.1)?;
        let proj = self.out_proj.forward(sess, map)?;
        let b1 = sess.tape.add(bhalf, proj)?;
        // FFN with residual.
        let f = self.ffn1.forward(sess, b1)?;
        let f = self.ffn2.forward(sess, f)?;
        let b2 = sess.tape.add(b1, f)?;
        let cat = sess.tape.concat_channels(&[a, b2])?;
        self.fuse.forward(sess, cat)
    }
}

/// Re-parameterizable conv: parallel 3x3 and 1x1 conv+bn branches summed then
/// activated at train time; [`RepConv::fused_weights`] collapses both into a
/// single biased 3x3 conv for inference.
#[derive(Debug)]
pub struct RepConv {
    k3: ParamId,
    bn3: BnIds,
    k1: ParamId,
    bn1: BnIds,
    act: Act,
}

impl RepConv {
    pub fn build(b: &mut Builder, name: &str, c: usize, hw: (usize, usize), act: Act) -> Self {
        let k3 = b.store.add(
            format!("{}.k3", name),
            kaiming_uniform(b.rng, Shape4::new(c, c, 3, 3)),
            true,
        );
        b.record(
            &format!("{}.conv3", name),
            &OpDesc::Conv {
                h: hw.0 as u64,
                w: hw.1 as u64,
                k: 3,
                c_in: c as u64,
                c_out: c as u64,
                stride: 1,
                bias: false,
            },
        );
        let bn3 = BnIds::build(b, &format!("{}.bn3", name), c);
        let k1 = b.store.add(
            format!("{}.k1", name),
            kaiming_uniform(b.rng, Shape4::new(c, c, 1, 1)),
            true,
        );
        b.record(
            &format!("{}.conv1", name),
            &OpDesc::Conv {
                h: hw.0 as u64,
                w: hw.1 as u64,
                k: 1,
                c_in: c as u64,
                c_out: c as u64,
                stride: 1,
                bias: false,
            },
        );
        let bn1 = BnIds::build(b, &format!("{}.bn1", name), c);
        RepConv { k3, bn3, k1, bn1, act }
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        let y = if sess.fused {
            let fused = self.fused_weights(sess)?;
            let k = sess.tape.leaf(fused.kernel);
            let c_out = sess.tape.shape(k).n;
            let bias = sess.tape.leaf(Tensor4::from_vec(
                Shape4::new(1, c_out, 1, 1),
                fused.bias.unwrap(),
            )?);
            sess.tape.conv2d(x, k, Some(bias), 1, 1, 1)?
        } else {
            let k3 = sess.var(self.k3);
            let y3 = sess.tape.conv2d(x, k3, None, 1, 1, 1)?;
            let y3 = sess.batchnorm(y3, &self.bn3)?;
            let k1 = sess.var(self.k1);
            let y1 = sess.tape.conv2d(x, k1, None, 1, 0, 1)?;
            let y1 = sess.batchnorm(y1, &self.bn1)?;
            sess.tape.add(y3, y1)?
        };
        Ok(sess.tape.activation(y, self.act))
    }

    /// Inference-time re-parameterization: fuse each branch with its bn, pad
    /// the 1x1 kernel to 3x3, and add kernels and biases into one conv.
    pub fn fused_weights(&self, sess: &Session) -> Result<ConvWeights> {
        let w3 = ConvWeights::new(sess.store_value(self.k3).clone(), None, 1, 1, 1)?;
        let f3 = ops::fuse_conv_bn(&w3, &self.bn3.to_params(sess), false)?;
        let w1 = ConvWeights::new(sess.store_value(self.k1).clone(), None, 1, 0, 1)?;
        let f1 = ops::fuse_conv_bn(&w1, &self.bn1.to_params(sess), false)?;
        let s = f3.kernel.shape();
        let mut kernel = f3.kernel.clone();
        for co in 0..s.n {
            for ci in 0..s.c {
                let v = kernel.at(co, ci, 1, 1) + f1.kernel.at(co, ci, 0, 0);
                kernel.set(co, ci, 1, 1, v);
            }
        }
        let bias: Vec<f64> = f3
            .bias
            .unwrap()
            .iter()
            .zip(f1.bias.unwrap())
            .map(|(&a, b)| a + b)
            .collect();
        ConvWeights::new(kernel, Some(bias), 1, 1, 1)
    }
}

/// 1x1 conv then RepConv 3x3, residual add.
#[derive(Debug)]
pub struct BasicBlockReverse {
    cv1: ConvBnAct,
    rep: RepConv,
}

impl BasicBlockReverse {
    pub fn build(b: &mut Builder, name: &str, c: usize, hw: (usize, usize), act: Act) -> Self {
        let (cv1, _) = ConvBnAct::build(b, &format!("{}.cv1", name), c, c, 1, 1, 0, hw, Some(act));
        let rep = RepConv::build(b, &format!("{}.rep", name), c, hw, act);
        BasicBlockReverse { cv1, rep }
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        let y = self.cv1.forward(sess, x)?;
        let y = self.rep.forward(sess, y)?;
        sess.tape.add(x, y)
    }
}

/// CSPStage: two parallel 1x1 convs split the stream, one side runs the
/// residual block chain, both concat and fuse through a final 1x1 conv.
#[derive(Debug)]
pub struct CspStage {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
    blocks: Vec<BasicBlockReverse>,
    fuse: ConvBnAct,
}

impl CspStage {
    pub fn build(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        n_blocks: usize,
        hw: (usize, usize),
        act: Act,
    ) -> Self {
        assert!(c_out % 2 == 0, "cspstage output channels must be even");
        let hidden = c_out / 2;
        let (cv1, _) = ConvBnAct::build(b, &format!("{}.cv1", name), c_in, hidden, 1, 1, 0, hw, Some(act));
        let (cv2, _) = ConvBnAct::build(b, &format!("{}.cv2", name), c_in, hidden, 1, 1, 0, hw, Some(act));
        let blocks = (0..n_blocks)
            .map(|i| BasicBlockReverse::build(b, &format!("{}.block{}", name, i), hidden, hw, act))
            .collect();
        let (fuse, _) = ConvBnAct::build(
            b,
            &format!("{}.fuse", name),
            hidden * 2,
            c_out,
            1,
            1,
            0,
            hw,
            Some(act),
        );
        CspStage {
            cv1,
            cv2,
            blocks,
            fuse,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        let bypass = self.cv1.forward(sess, x)?;
        let mut y = self.cv2.forward(sess, x)?;
        for block in &self.blocks {
            y = block.forward(sess, y)?;
        }
        let cat = sess.tape.concat_channels(&[bypass, y])?;
        self.fuse.forward(sess, cat)
    }
}

/// Plain two-conv fusion block, the stand-in for the pre-CSPStage neck.
#[derive(Debug)]
pub struct PlainBlock {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
}

impl PlainBlock {
    pub fn build(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        hw: (usize, usize),
        act: Act,
    ) -> Self {
        let (cv1, _) = ConvBnAct::build(b, &format!("{}.cv1", name), c_in, c_out, 1, 1, 0, hw, Some(act));
        let (cv2, _) = ConvBnAct::build(b, &format!("{}.cv2", name), c_out, c_out, 3, 1, 1, hw, Some(act));
        PlainBlock { cv1, cv2 }
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        let y = self.cv1.forward(sess, x)?;
        self.cv2.forward(sess, y)
    }
}

/// Either fusion block behind one interface.
#[derive(Debug)]
pub enum FusionModule {
    Csp(CspStage),
    Plain(PlainBlock),
}

impl FusionModule {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut Builder,
        kind: super::FusionBlockKind,
        name: &str,
        c_in: usize,
        c_out: usize,
        n_blocks: usize,
        hw: (usize, usize),
        act: Act,
    ) -> Self {
        match kind {
            super::FusionBlockKind::Csp => {
                FusionModule::Csp(CspStage::build(b, name, c_in, c_out, n_blocks, hw, act))
            }
            super::FusionBlockKind::Plain => {
                FusionModule::Plain(PlainBlock::build(b, name, c_in, c_out, hw, act))
            }
        }
    }

    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<VarId> {
        match self {
            FusionModule::Csp(m) => m.forward(sess, x),
            FusionModule::Plain(m) => m.forward(sess, x),
        }
    }
}

/// Learned fast-normalized fusion: y = sum_i relu(w_i) x_i / (sum relu(w_j)
/// + eps), one scalar weight per input.
#[derive(Debug)]
pub struct WeightedFuse {
    weights: Vec<ParamId>,
}

impl WeightedFuse {
    pub fn build(b: &mut Builder, name: &str, n_inputs: usize) -> Self {
        let weights = (0..n_inputs)
            .map(|i| {
                b.store.add(
                    format!("{}.w{}", name, i),
                    Tensor4::scalar(1.0),
                    true,
                )
            })
            .collect();
        b.record(name, &OpDesc::FusionWeights { count: n_inputs as u64 });
        WeightedFuse { weights }
    }

    pub fn forward(&self, sess: &mut Session, inputs: &[VarId]) -> Result<VarId> {
        assert_eq!(inputs.len(), self.weights.len());
        let relus: Vec<VarId> = self
            .weights
            .iter()
            .map(|&w| {
                let v = sess.var(w);
                sess.tape.activation(v, Act::Relu)
            })
            .collect();
        let mut total = relus[0];
        for &r in &relus[1..] {
            total = sess.tape.add(total, r)?;
        }
        let eps = sess.tape.leaf(Tensor4::scalar(1e-4));
        let total = sess.tape.add(total, eps)?;
        let inv = sess.tape.recip(total);
        let mut out: Option<VarId> = None;
        for (&x, &r) in inputs.iter().zip(&relus) {
            let wn = sess.tape.mul(r, inv)?;
            let term = sess.tape.mul_scalar_var(x, wn)?;
            out = Some(match out {
                Some(acc) => sess.tape.add(acc, term)?,
                None => term,
            });
        }
        Ok(out.unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostReport;
    use crate::net::{ParamStore, Session};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Ctx {
        store: ParamStore,
        costs: CostReport,
        rng: ChaCha8Rng,
    }

    impl Ctx {
        fn new(seed: u64) -> Self {
            Ctx {
                store: ParamStore::new(),
                costs: CostReport::default(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }
        }

        fn builder(&mut self) -> Builder<'_> {
            Builder {
                store: &mut self.store,
                rng: &mut self.rng,
                costs: &mut self.costs,
            }
        }
    }

    fn rand_input(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4 {
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn fasternet_block_with_zero_pw2_is_identity() {
        let mut ctx = Ctx::new(1);
        let block = {
            let mut b = ctx.builder();
            FasterNetBlock::build(&mut b, "blk", 8, 2, (6, 6), Act::Relu)
        };
        // Zero the restoring pointwise conv: the residual makes the block an
        // exact identity.
        let kid = block.pw2.kernel;
        for v in ctx.store.value_mut(kid).data_mut() {
            *v = 0.0;
        }
        let x = rand_input(&mut ctx.rng, Shape4::new(2, 8, 6, 6));
        let mut sess = Session::new(&mut ctx.store, false, false);
        let xv = sess.input(x.clone());
        let y = block.forward(&mut sess, xv).unwrap();
        assert_eq!(sess.tape.value(y), &x);
    }

    #[test]
    fn fasternet_block_preserves_shape_and_matches_ledger() {
        let mut ctx = Ctx::new(2);
        let (c, cp, hw) = (8usize, 2usize, (5usize, 5usize));
        let block = {
            let mut b = ctx.builder();
            FasterNetBlock::build(&mut b, "blk", c, cp, hw, Act::Relu)
        };
        let x = rand_input(&mut ctx.rng, Shape4::new(1, c, hw.0, hw.1));
        let mut sess = Session::new(&mut ctx.store, false, false);
        let xv = sess.input(x.clone());
        let y = block.forward(&mut sess, xv).unwrap();
        assert_eq!(sess.tape.shape(y), x.shape());
        // Ledger composition: pconv + expand pw + restore pw.
        let flops: u64 = ctx.costs.total_flops();
        let want = crate::cost::cost_pconv(hw.0 as u64, hw.1 as u64, 3, cp as u64).flops
            + crate::cost::cost_conv(hw.0 as u64, hw.1 as u64, 1, c as u64, 2 * c as u64).flops
            + crate::cost::cost_conv(hw.0 as u64, hw.1 as u64, 1, 2 * c as u64, c as u64).flops;
        assert_eq!(flops, want);
        let _ = block;
    }

    #[test]
    fn sppf_preserves_shape_and_serial_pools_match_wide_pools() {
        use crate::tensor::ops::maxpool2d;
        let mut ctx = Ctx::new(3);
        let sppf = {
            let mut b = ctx.builder();
            Sppf::build(&mut b, "sppf", 8, 5, (4, 4), Act::Silu)
        };
        let x = rand_input(&mut ctx.rng, Shape4::new(1, 8, 4, 4));
        let mut sess = Session::new(&mut ctx.store, false, false);
        let xv = sess.input(x.clone());
        let y = sppf.forward(&mut sess, xv).unwrap();
        assert_eq!(sess.tape.shape(y), x.shape());

        // Serial same-padded 5x5 pooling equals direct 9x9 / 13x13 pooling.
        let big = rand_input(&mut ctx.rng, Shape4::new(1, 2, 16, 16));
        let p1 = maxpool2d(&big, 5, 1, 2).unwrap();
        let p2 = maxpool2d(&p1, 5, 1, 2).unwrap();
        let p3 = maxpool2d(&p2, 5, 1, 2).unwrap();
        assert_eq!(p2, maxpool2d(&big, 9, 1, 4).unwrap());
        assert_eq!(p3, maxpool2d(&big, 13, 1, 6).unwrap());
    }

    #[test]
    fn psa_single_position_attention_is_value_chain() {
        let mut ctx = Ctx::new(4);
        let psa = {
            let mut b = ctx.builder();
            Psa::build(&mut b, "psa", 8, (1, 1), Act::Relu)
        };
        let x = rand_input(&mut ctx.rng, Shape4::new(2, 8, 1, 1));
        let full = {
            let mut sess = Session::new(&mut ctx.store, false, false);
            let xv = sess.input(x.clone());
            let y = psa.forward(&mut sess, xv).unwrap();
            sess.tape.value(y).clone()
        };
        // On a 1x1 map the attention weights are exactly 1, so the block is
        // the plain value-projection chain.
        let manual = {
            let mut sess = Session::new(&mut ctx.store, false, false);
            let xv = sess.input(x.clone());
            let a = sess.tape.slice_channels(xv, 0, 4).unwrap();
            let bh = sess.tape.slice_channels(xv, 4, 8).unwrap();
            let qkv = psa.qkv.forward(&mut sess, bh).unwrap();
            let v = sess.tape.slice_channels(qkv, 4, 8).unwrap();
            let proj = psa.out_proj.forward(&mut sess, v).unwrap();
            let b1 = sess.tape.add(bh, proj).unwrap();
            let f = psa.ffn1.forward(&mut sess, b1).unwrap();
            let f = psa.ffn2.forward(&mut sess, f).unwrap();
            let b2 = sess.tape.add(b1, f).unwrap();
            let cat = sess.tape.concat_channels(&[a, b2]).unwrap();
            let y = psa.fuse.forward(&mut sess, cat).unwrap();
            sess.tape.value(y).clone()
        };
        assert_eq!(full, manual);
    }

    #[test]
    fn psa_preserves_shape() {
        let mut ctx = Ctx::new(5);
        let psa = {
            let mut b = ctx.builder();
            Psa::build(&mut b, "psa", 16, (3, 4), Act::Silu)
        };
        let x = rand_input(&mut ctx.rng, Shape4::new(2, 16, 3, 4));
        let mut sess = Session::new(&mut ctx.store, false, false);
        let xv = sess.input(x.clone());
        let y = psa.forward(&mut sess, xv).unwrap();
        assert_eq!(sess.tape.shape(y), x.shape());
    }

    #[test]
    fn repconv_fuse_equivalence() {
        let mut ctx = Ctx::new(6);
        let rep = {
            let mut b = ctx.builder();
            RepConv::build(&mut b, "rep", 6, (5, 5), Act::Silu)
        };
        // Randomize bn statistics so the fusion is nontrivial.
        for bn in [&rep.bn3, &rep.bn1] {
            for (pid, lo, hi) in [
                (bn.gamma, 0.5, 1.5),
                (bn.beta, -0.5, 0.5),
                (bn.running_mean, -0.5, 0.5),
                (bn.running_var, 0.2, 1.8),
            ] {
                for v in ctx.store.value_mut(pid).data_mut() {
                    *v = ctx.rng.gen_range(lo..hi);
                }
            }
        }
        let x = rand_input(&mut ctx.rng, Shape4::new(2, 6, 5, 5));
        let branched = {
            let mut sess = Session::new(&mut ctx.store, false, false);
            let xv = sess.input(x.clone());
            let y = rep.forward(&mut sess, xv).unwrap();
            sess.tape.value(y).clone()
        };
        let fused = {
            let mut sess = Session::new(&mut ctx.store, false, true);
            let xv = sess.input(x.clone());
            let y = rep.forward(&mut sess, xv).unwrap();
            sess.tape.value(y).clone()
        };
        assert_eq!(branched.shape(), fused.shape());
        for (a, b) in branched.data().iter().zip(fused.data()) {
            assert!(
                (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0),
                "{} vs {}",
                a,
                b
            );
        }
    }

    #[test]
    fn cspstage_zero_blocks_is_split_concat_fuse() {
        let mut ctx = Ctx::new(7);
        let csp = {
            let mut b = ctx.builder();
            CspStage::build(&mut b, "csp", 12, 8, 0, (4, 4), Act::Silu)
        };
        assert!(csp.blocks.is_empty());
        let x = rand_input(&mut ctx.rng, Shape4::new(1, 12, 4, 4));
        let mut sess = Session::new(&mut ctx.store, false, false);
        let xv = sess.input(x.clone());
        let y = csp.forward(&mut sess, xv).unwrap();
        assert_eq!(sess.tape.shape(y), Shape4::new(1, 8, 4, 4));
    }

    #[test]
    fn weighted_fuse_normalizes_and_sums() {
        let mut ctx = Ctx::new(8);
        let wf = {
            let mut b = ctx.builder();
            WeightedFuse::build(&mut b, "wf", 2)
        };
        let a = rand_input(&mut ctx.rng, Shape4::new(1, 3, 2, 2));
        let bb = rand_input(&mut ctx.rng, Shape4::new(1, 3, 2, 2));
        let mut sess = Session::new(&mut ctx.store, false, false);
        let av = sess.input(a.clone());
        let bv = sess.input(bb.clone());
        let y = wf.forward(&mut sess, &[av, bv]).unwrap();
        // Both weights start at 1: y ~ (a + b) / (2 + eps).
        let yt = sess.tape.value(y);
        for ((&ya, &xa), &xb) in yt.data().iter().zip(a.data()).zip(bb.data()) {
            let want = (xa + xb) / (2.0 + 1e-4);
            assert!((ya - want).abs() < 1e-12);
        }
    }
}
