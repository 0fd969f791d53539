//! The FN-YOLO computation graph: FasterNet/PConv backbone with SPPF and PSA,
//! a BiFPN-connectivity neck fused by CSPStage blocks, and four dual
//! (one-to-many / one-to-one) detection heads. Built declaratively from
//! [`GraphConfig`]; every trainable scalar lives in a [`ParamStore`] and every
//! parametered op registers itself in the cost ledger at build time.

mod backbone;
mod head;
mod layers;
mod model;
mod neck;

#[cfg(test)]
mod tests;

pub use head::{BranchVars, HeadVars, ScaleVars};
pub use layers::BnIds;
pub use model::{graph_cost, FnYolo};

use rand_chacha::ChaCha8Rng;

use crate::cost::{CostReport, OpDesc};
use crate::tensor::tape::{Tape, VarId};
use crate::tensor::{Act, Result, Tensor4, TensorError};

/// Which pyramid topology the neck uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeckKind {
    /// Top-down plus bottom-up chains with per-level pass nodes (Fig.-6(b)
    /// style), concat fusion.
    Panet,
    /// PANet minus single-input nodes, plus same-level input-to-output skip
    /// edges, concat fusion.
    BifpnConcat,
    /// BiFPN connectivity at a uniform width with learned normalized fusion
    /// weights instead of concat.
    BifpnWeighted,
}

/// Which block fuses concatenated features at each neck node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionBlockKind {
    /// CSPStage: split, residual 1x1+RepConv3x3 chain, merge.
    Csp,
    /// Plain 1x1 + 3x3 conv pair (C2f stand-in for ablations).
    Plain,
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub stage_widths: [usize; 4],
    pub stage_depths: [usize; 4],
    /// PConv channel fraction r = cp / c.
    pub pconv_ratio: f64,
    pub num_classes: usize,
    pub head_channels: usize,
    pub input_size: (usize, usize),
    /// Extra stride-4 small-object scale (P2). Off means P3-P5 only.
    pub use_p2: bool,
    pub use_sppf: bool,
    pub use_psa: bool,
    pub sppf_pool: usize,
    pub neck: NeckKind,
    pub fusion_block: FusionBlockKind,
    /// Residual blocks per neck fusion stage.
    pub neck_depth: usize,
    /// Activation inside conv+bn blocks.
    pub conv_act: Act,
    /// Activation between the two pointwise convs of a FasterNet block.
    pub pwconv_act: Act,
    pub init_seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            stage_widths: [16, 32, 64, 128],
            stage_depths: [1, 1, 2, 1],
            pconv_ratio: 0.25,
            num_classes: 1,
            head_channels: 32,
            input_size: (64, 64),
            use_p2: true,
            use_sppf: true,
            use_psa: true,
            sppf_pool: 5,
            neck: NeckKind::BifpnConcat,
            fusion_block: FusionBlockKind::Csp,
            neck_depth: 1,
            conv_act: Act::Silu,
            pwconv_act: Act::Relu,
            init_seed: 0,
        }
    }
}

impl GraphConfig {
    /// Detection strides, low to high. Four with the P2 scale, three without.
    pub fn strides(&self) -> Vec<usize> {
        if self.use_p2 {
            vec![4, 8, 16, 32]
        } else {
            vec![8, 16, 32]
        }
    }

    /// cp for a stage width under the configured ratio.
    pub fn cp(&self, width: usize) -> usize {
        (self.pconv_ratio * width as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pconv_ratio > 0.0 && self.pconv_ratio <= 1.0) {
            return Err(TensorError::Config("pconv_ratio must lie in (0,1]".into()));
        }
        for win in self.stage_widths.windows(2) {
            if win[1] < win[0] {
                return Err(TensorError::Config(
                    "stage widths must be nondecreasing".into(),
                ));
            }
        }
        for &w in &self.stage_widths {
            let cp = self.pconv_ratio * w as f64;
            if cp < 1.0 || (cp - cp.round()).abs() > 1e-9 {
                return Err(TensorError::Config(format!(
                    "pconv_ratio {} does not give an integer channel count at width {}",
                    self.pconv_ratio, w
                )));
            }
            if w % 4 != 0 {
                return Err(TensorError::Config(format!(
                    "stage width {} must be divisible by 4 (PSA/CSP splits)",
                    w
                )));
            }
        }
        let (h, w) = self.input_size;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(TensorError::Config(format!(
                "input size {}x{} must be a positive multiple of 32",
                h, w
            )));
        }
        if self.num_classes == 0 {
            return Err(TensorError::Config("num_classes must be positive".into()));
        }
        if self.head_channels == 0 || self.neck_depth == 0 {
            return Err(TensorError::Config(
                "head_channels and neck_depth must be positive".into(),
            ));
        }
        if self.sppf_pool % 2 == 0 {
            return Err(TensorError::Config("sppf_pool must be odd".into()));
        }
        Ok(())
    }

    /// Flat `key=value` serialization.
    pub fn to_text(&self) -> String {
        fn act_name(a: Act) -> &'static str {
            match a {
                Act::Relu => "relu",
                Act::Silu => "silu",
                Act::Sigmoid => "sigmoid",
            }
        }
        let mut s = String::new();
        s.push_str(&format!(
            "stage_widths={},{},{},{}\n",
            self.stage_widths[0], self.stage_widths[1], self.stage_widths[2], self.stage_widths[3]
        ));
        s.push_str(&format!(
            "stage_depths={},{},{},{}\n",
            self.stage_depths[0], self.stage_depths[1], self.stage_depths[2], self.stage_depths[3]
        ));
        s.push_str(&format!("pconv_ratio={}\n", self.pconv_ratio));
        s.push_str(&format!("num_classes={}\n", self.num_classes));
        s.push_str(&format!("head_channels={}\n", self.head_channels));
        s.push_str(&format!(
            "input_size={}x{}\n",
            self.input_size.0, self.input_size.1
        ));
        s.push_str(&format!("use_p2={}\n", self.use_p2));
        s.push_str(&format!("use_sppf={}\n", self.use_sppf));
        s.push_str(&format!("use_psa={}\n", self.use_psa));
        s.push_str(&format!("sppf_pool={}\n", self.sppf_pool));
        s.push_str(&format!(
            "neck={}\n",
            match self.neck {
                NeckKind::Panet => "panet",
                NeckKind::BifpnConcat => "bifpn_concat",
                NeckKind::BifpnWeighted => "bifpn_weighted",
            }
        ));
        s.push_str(&format!(
            "fusion_block={}\n",
            match self.fusion_block {
                FusionBlockKind::Csp => "csp",
                FusionBlockKind::Plain => "plain",
            }
        ));
        s.push_str(&format!("neck_depth={}\n", self.neck_depth));
        s.push_str(&format!("conv_act={}\n", act_name(self.conv_act)));
        s.push_str(&format!("pwconv_act={}\n", act_name(self.pwconv_act)));
        s.push_str(&format!("init_seed={}\n", self.init_seed));
        s
    }

    /// Parses the `key=value` form; unknown keys are errors, missing keys
    /// keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = GraphConfig::default();
        let bad = |k: &str, v: &str| TensorError::Config(format!("bad value `{}` for {}", v, k));
        let parse_act = |k: &str, v: &str| match v {
            "relu" => Ok(Act::Relu),
            "silu" => Ok(Act::Silu),
            "sigmoid" => Ok(Act::Sigmoid),
            _ => Err(bad(k, v)),
        };
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TensorError::Config(format!("expected key=value, got `{}`", line)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "stage_widths" | "stage_depths" => {
                    let vals: Vec<usize> = value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(key, value))?;
                    if vals.len() != 4 {
                        return Err(bad(key, value));
                    }
                    let arr = [vals[0], vals[1], vals[2], vals[3]];
                    if key == "stage_widths" {
                        cfg.stage_widths = arr;
                    } else {
                        cfg.stage_depths = arr;
                    }
                }
                "pconv_ratio" => cfg.pconv_ratio = value.parse().map_err(|_| bad(key, value))?,
                "num_classes" => cfg.num_classes = value.parse().map_err(|_| bad(key, value))?,
                "head_channels" => {
                    cfg.head_channels = value.parse().map_err(|_| bad(key, value))?
                }
                "input_size" => {
                    let (h, w) = value.split_once('x').ok_or_else(|| bad(key, value))?;
                    cfg.input_size = (
                        h.trim().parse().map_err(|_| bad(key, value))?,
                        w.trim().parse().map_err(|_| bad(key, value))?,
                    );
                }
                "use_p2" => cfg.use_p2 = value.parse().map_err(|_| bad(key, value))?,
                "use_sppf" => cfg.use_sppf = value.parse().map_err(|_| bad(key, value))?,
                "use_psa" => cfg.use_psa = value.parse().map_err(|_| bad(key, value))?,
                "sppf_pool" => cfg.sppf_pool = value.parse().map_err(|_| bad(key, value))?,
                "neck" => {
                    cfg.neck = match value {
                        "panet" => NeckKind::Panet,
                        "bifpn_concat" => NeckKind::BifpnConcat,
                        "bifpn_weighted" => NeckKind::BifpnWeighted,
                        _ => return Err(bad(key, value)),
                    }
                }
                "fusion_block" => {
                    cfg.fusion_block = match value {
                        "csp" => FusionBlockKind::Csp,
                        "plain" => FusionBlockKind::Plain,
                        _ => return Err(bad(key, value)),
                    }
                }
                "neck_depth" => cfg.neck_depth = value.parse().map_err(|_| bad(key, value))?,
                "conv_act" => cfg.conv_act = parse_act(key, value)?,
                "pwconv_act" => cfg.pwconv_act = parse_act(key, value)?,
                "init_seed" => cfg.init_seed = value.parse().map_err(|_| bad(key, value))?,
                _ => return Err(TensorError::Config(format!("unknown config key `{}`", key))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
struct ParamEntry {
    name: String,
    value: Tensor4,
    trainable: bool,
}

/// Flat, deterministically ordered storage for every parameter and batch-norm
/// running buffer of a model.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: String, value: Tensor4, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor4 {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.entries[id.0].value
    }

    /// Two distinct entries mutably at once (batch-norm running buffers).
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor4, &mut Tensor4) {
        assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Total count of trainable scalars actually allocated.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.shape().len())
            .sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Replaces a named entry's value (checkpoint loading). Shape must match.
    pub fn set_by_name(&mut self, name: &str, value: Tensor4) -> Result<()> {
        for e in &mut self.entries {
            if e.name == name {
                if e.value.shape() != value.shape() {
                    return Err(TensorError::Config(format!(
                        "checkpoint tensor `{}` has shape {}, model wants {}",
                        name,
                        value.shape(),
                        e.value.shape()
                    )));
                }
                e.value = value;
                return Ok(());
            }
        }
        Err(TensorError::Config(format!(
            "checkpoint tensor `{}` not present in model",
            name
        )))
    }
}

/// Build-time context: parameter registration, init rng, and the cost ledger.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub costs: &'a mut CostReport,
}

impl Builder<'_> {
    pub fn record(&mut self, layer: &str, desc: &OpDesc) {
        self.costs.push(layer, desc);
    }
}

/// Forward-pass context: the tape, the (mutably borrowed) store for running
/// statistics, and the execution mode.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    bound: Vec<Option<VarId>>,
    pub training: bool,
    /// Eval-only: run conv+bn (and RepConv branches) as fused single convs.
    pub fused: bool,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, training: bool, fused: bool) -> Self {
        let n = store.len();
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            training: training && !fused,
            fused: fused && !training,
        }
    }

    /// Binds a parameter as a tape leaf (memoized per parameter).
    pub fn var(&mut self, id: ParamId) -> VarId {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store_value(&self, id: ParamId) -> &Tensor4 {
        self.store.value(id)
    }

    /// Feeds an input tensor.
    pub fn input(&mut self, t: Tensor4) -> VarId {
        self.tape.leaf(t)
    }

    /// The tape VarId a parameter was bound to, if it was used this pass.
    pub fn bound_var(&self, id: ParamId) -> Option<VarId> {
        self.bound[id.0]
    }

    /// Batch norm against store-resident running buffers.
    pub fn batchnorm(&mut self, x: VarId, bn: &BnIds) -> Result<VarId> {
        let gamma = self.var(bn.gamma);
        let beta = self.var(bn.beta);
        let training = self.training;
        let (rm, rv) = self.store.pair_mut(bn.running_mean, bn.running_var);
        self.tape.batchnorm(
            x,
            gamma,
            beta,
            rm.data_mut(),
            rv.data_mut(),
            bn.eps,
            bn.momentum,
            training,
        )
    }
}
