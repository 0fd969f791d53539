//! Whole-model assembly, checkpoint I/O, and the graph-level cost roll-up.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backbone::Backbone;
use super::head::{DualHeads, HeadVars};
use super::neck::Neck;
use super::{Builder, GraphConfig, ParamStore, Session};
use crate::cost::CostReport;
use crate::postprocess::ScaleOutput;
use crate::tensor::tape::VarId;
use crate::tensor::{io, Result, Tensor4, TensorError};

#[derive(Debug)]
struct ModelGraph {
    backbone: Backbone,
    neck: Neck,
    heads: DualHeads,
    active_stages: Vec<usize>,
}

impl ModelGraph {
    fn forward(&self, sess: &mut Session, x: VarId, with_o2m: bool) -> Result<HeadVars> {
        let taps = self.backbone.forward(sess, x)?;
        let active: Vec<VarId> = self.active_stages.iter().map(|&i| taps[i]).collect();
        let pyramid = self.neck.forward(sess, &active)?;
        self.heads.forward(sess, &pyramid, with_o2m)
    }
}

/// The detector: config, graph structure, parameters, and build-time cost
/// ledger.
#[derive(Debug)]
pub struct FnYolo {
    pub config: GraphConfig,
    graph: ModelGraph,
    pub store: ParamStore,
    costs: CostReport,
}

impl FnYolo {
    pub fn build(config: GraphConfig) -> Result<FnYolo> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut costs = CostReport::default();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            costs: &mut costs,
        };
        let backbone = Backbone::build(&mut b, &config);
        let (h, w) = config.input_size;
        let active_stages: Vec<usize> = if config.use_p2 { vec![0, 1, 2, 3] } else { vec![1, 2, 3] };
        let ch: Vec<usize> = active_stages.iter().map(|&i| config.stage_widths[i]).collect();
        let hws: Vec<(usize, usize)> = config
            .strides()
            .iter()
            .map(|&s| (h / s, w / s))
            .collect();
        let neck = Neck::build(&mut b, &config, &ch, &hws);
        let head_ch = neck.out_channels.clone();
        let heads = DualHeads::build(&mut b, &config, &head_ch, &hws);
        Ok(FnYolo {
            config,
            graph: ModelGraph {
                backbone,
                neck,
                heads,
                active_stages,
            },
            store,
            costs,
        })
    }

    pub fn cost_report(&self) -> &CostReport {
        &self.costs
    }

    /// (node name, input edge count) for every neck fusion node.
    pub fn neck_arities(&self) -> &[(String, usize)] {
        &self.graph.neck.arities
    }

    /// Total anchor points across the active scales for the configured input.
    pub fn anchor_count(&self) -> usize {
        let (h, w) = self.config.input_size;
        self.config.strides().iter().map(|&s| (h / s) * (w / s)).sum()
    }

    /// Records a forward pass on a fresh tape. `training` picks batch-norm
    /// mode (and updates running stats); `fused` (eval only) collapses
    /// conv+bn and RepConv branches into single convs; `with_o2m` evaluates
    /// the one-to-many branch alongside the one-to-one branch.
    pub fn run(
        &mut self,
        input: Tensor4,
        training: bool,
        fused: bool,
        with_o2m: bool,
    ) -> Result<(Session<'_>, HeadVars)> {
        let expect = self.config.input_size;
        let s = input.shape();
        if s.c != 3 || (s.h, s.w) != expect {
            return Err(TensorError::Config(format!(
                "model expects (n,3,{},{}) input, got {}",
                expect.0, expect.1, s
            )));
        }
        let FnYolo { graph, store, .. } = self;
        let mut sess = Session::new(store, training, fused);
        let x = sess.input(input);
        let outs = graph.forward(&mut sess, x, with_o2m)?;
        Ok((sess, outs))
    }

    /// Inference: one-to-one branch only, raw outputs per scale.
    pub fn infer(&mut self, input: Tensor4, fused: bool) -> Result<Vec<ScaleOutput>> {
        let (sess, outs) = self.run(input, false, fused, false)?;
        Ok(outs
            .o2o
            .scales
            .iter()
            .map(|sv| ScaleOutput {
                stride: sv.stride,
                cls_logits: sess.tape.value(sv.cls_logits).clone(),
                box_raw: sess.tape.value(sv.box_raw).clone(),
            })
            .collect())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor4)> = self.store.entries().collect();
        let file = File::create(path)
            .map_err(|e| TensorError::Io(format!("{}: {}", path.display(), e)))?;
        let mut w = BufWriter::new(file);
        io::write_named_tensors(&mut w, &entries)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let file = File::open(path)
            .map_err(|e| TensorError::Io(format!("{}: {}", path.display(), e)))?;
        let mut r = BufReader::new(file);
        let entries = io::read_named_tensors(&mut r)?;
        if entries.len() != self.store.len() {
            return Err(TensorError::Config(format!(
                "checkpoint has {} tensors, model has {}",
                entries.len(),
                self.store.len()
            )));
        }
        for (name, t) in entries {
            self.store.set_by_name(&name, t)?;
        }
        Ok(())
    }
}

/// Builds the graph for `config` and returns its cost report plus the count
/// of trainable scalars the build actually allocated.
pub fn graph_cost(config: &GraphConfig) -> Result<(CostReport, usize)> {
    let model = FnYolo::build(config.clone())?;
    let scalars = model.store.num_trainable_scalars();
    Ok((model.costs, scalars))
}
