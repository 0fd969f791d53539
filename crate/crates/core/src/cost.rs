//! Analytic FLOPs / memory-access / parameter accounting for the operator
//! set, plus whole-graph roll-ups.
//!
//! Conventions: one FLOP = one multiply-accumulate pair, so a dense conv
//! producing an (h, w) map costs h*w*k^2*c_in*c_out. Bias adds and batch-norm
//! are excluded from FLOPs but their scalars count as parameters. Memory
//! access is counted in elements (reads of the input and kernel plus writes
//! of the output), not bytes.

/// Cost of one operator instance. `h`/`w` are the output spatial dims the
/// counts were computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCost {
    pub flops: u64,
    pub mem_access: u64,
    pub params: u64,
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub c_out: u64,
    pub cp: u64,
    pub k: u64,
    pub stride: u64,
}

impl ConvCost {
    fn zero() -> Self {
        ConvCost {
            flops: 0,
            mem_access: 0,
            params: 0,
            h: 0,
            w: 0,
            c: 0,
            c_out: 0,
            cp: 0,
            k: 0,
            stride: 1,
        }
    }

    /// Memory access with the k^2 kernel-read term dropped, the approximate
    /// form reports sometimes quote alongside the exact count.
    pub fn mem_access_approx(&self) -> u64 {
        self.h * self.w * (self.c + self.c_out)
    }
}

/// Dense convolution: flops = h*w*k^2*c_in*c_out,
/// mem = h*w*(c_in + c_out) + k^2*c_in*c_out.
pub fn cost_conv(h: u64, w: u64, k: u64, c_in: u64, c_out: u64) -> ConvCost {
    ConvCost {
        flops: h * w * k * k * c_in * c_out,
        mem_access: h * w * (c_in + c_out) + k * k * c_in * c_out,
        params: k * k * c_in * c_out,
        h,
        w,
        c: c_in,
        c_out,
        cp: c_in,
        k,
        stride: 1,
    }
}

/// Depthwise convolution: flops = h*w*k^2*c, mem = h*w*2c + k^2*c.
pub fn cost_dwconv(h: u64, w: u64, k: u64, c: u64) -> ConvCost {
    ConvCost {
        flops: h * w * k * k * c,
        mem_access: h * w * 2 * c + k * k * c,
        params: k * k * c,
        h,
        w,
        c,
        c_out: c,
        cp: c,
        k,
        stride: 1,
    }
}

/// Partial convolution over cp channels: flops = h*w*k^2*cp^2,
/// mem = h*w*2cp + k^2*cp^2.
pub fn cost_pconv(h: u64, w: u64, k: u64, cp: u64) -> ConvCost {
    ConvCost {
        flops: h * w * k * k * cp * cp,
        mem_access: h * w * 2 * cp + k * k * cp * cp,
        params: k * k * cp * cp,
        h,
        w,
        c: cp,
        c_out: cp,
        cp,
        k,
        stride: 1,
    }
}

/// What a graph layer is, for accounting purposes. Emitted by the
/// architecture module at build time, one entry per primitive op.
#[derive(Debug, Clone)]
pub enum OpDesc {
    /// Dense conv (groups = 1): output dims, kernel, channels, bias flag.
    Conv {
        h: u64,
        w: u64,
        k: u64,
        c_in: u64,
        c_out: u64,
        stride: u64,
        bias: bool,
    },
    /// Depthwise conv.
    DwConv { h: u64, w: u64, k: u64, c: u64, stride: u64 },
    /// Partial conv over the leading cp channels of c.
    PConv { h: u64, w: u64, k: u64, c: u64, cp: u64 },
    /// Batch norm: 2c trainable scalars, no FLOPs.
    BatchNorm { c: u64 },
    /// Token-space matmul (attention): (p x q) * (q x r).
    MatMul { batch: u64, p: u64, q: u64, r: u64 },
    /// Learnable fusion weights (weighted BiFPN variant).
    FusionWeights { count: u64 },
    /// Zero-FLOP plumbing (pool, upsample, concat, activation...) kept for
    /// the per-layer report; mem counts elements moved.
    Move { elems: u64 },
}

/// One named row of the ledger.
#[derive(Debug, Clone)]
pub struct LayerCost {
    pub layer: String,
    pub op: String,
    pub cost: ConvCost,
}

/// Whole-graph roll-up: per-layer rows plus totals.
#[derive(Debug, Clone, Default)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.cost.flops).sum()
    }

    pub fn total_mem_access(&self) -> u64 {
        self.layers.iter().map(|l| l.cost.mem_access).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.cost.params).sum()
    }

    pub fn push(&mut self, layer: &str, desc: &OpDesc) {
        self.layers.push(LayerCost {
            layer: layer.to_string(),
            op: op_name(desc).to_string(),
            cost: cost_of(desc),
        });
    }

    /// CSV rows: layer,op,flops,mem_access,params (one header line first).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,op,flops,mem_access,params\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.layer, l.op, l.cost.flops, l.cost.mem_access, l.cost.params
            ));
        }
        out.push_str(&format!(
            "total,,{},{},{}\n",
            self.total_flops(),
            self.total_mem_access(),
            self.total_params()
        ));
        out
    }
}

fn op_name(desc: &OpDesc) -> &'static str {
    match desc {
        OpDesc::Conv { .. } => "conv",
        OpDesc::DwConv { .. } => "dwconv",
        OpDesc::PConv { .. } => "pconv",
        OpDesc::BatchNorm { .. } => "batchnorm",
        OpDesc::MatMul { .. } => "matmul",
        OpDesc::FusionWeights { .. } => "fusion_weights",
        OpDesc::Move { .. } => "move",
    }
}

/// Costs a single descriptor using the closed-form op costs.
pub fn cost_of(desc: &OpDesc) -> ConvCost {
    match *desc {
        OpDesc::Conv {
            h,
            w,
            k,
            c_in,
            c_out,
            stride,
            bias,
        } => {
            let mut c = cost_conv(h, w, k, c_in, c_out);
            if bias {
                c.params += c_out;
            }
            c.stride = stride;
            c
        }
        OpDesc::DwConv { h, w, k, c, stride } => {
            let mut cost = cost_dwconv(h, w, k, c);
            cost.stride = stride;
            cost
        }
        OpDesc::PConv { h, w, k, c, cp } => {
            let mut cost = cost_pconv(h, w, k, cp);
            cost.c = c;
            cost
        }
        OpDesc::BatchNorm { c } => {
            let mut cost = ConvCost::zero();
            cost.params = 2 * c;
            cost.c = c;
            cost.c_out = c;
            cost.mem_access = 0;
            cost
        }
        OpDesc::MatMul { batch, p, q, r } => {
            let mut cost = ConvCost::zero();
            cost.flops = batch * p * q * r;
            cost.mem_access = batch * (p * q + q * r + p * r);
            cost
        }
        OpDesc::FusionWeights { count } => {
            let mut cost = ConvCost::zero();
            cost.params = count;
            cost
        }
        OpDesc::Move { elems } => {
            let mut cost = ConvCost::zero();
            cost.mem_access = 2 * elems;
            cost
        }
    }
}
