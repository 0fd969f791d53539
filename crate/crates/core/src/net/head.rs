//! Dual detection heads. The one-to-many and one-to-one branches have
//! identical structure and independent parameters at every scale: two 3x3
//! conv+bn blocks, then 1x1 projections to class logits and to the four raw
//! box distances. Inference evaluates only the one-to-one branch.

use super::layers::{ConvBnAct, ConvLayer};
use super::{Builder, GraphConfig, Session};
use crate::tensor::tape::VarId;
use crate::tensor::{Act, Result};

/// Class-logit bias prior: starts every score near 0.01 so the early
/// background loss is tame.
fn cls_bias_init() -> f64 {
    -(99.0f64).ln()
}

#[derive(Debug)]
struct ScaleHead {
    stem1: ConvBnAct,
    stem2: ConvBnAct,
    cls: ConvLayer,
    reg: ConvLayer,
    stride: usize,
}

impl ScaleHead {
    fn build(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        cfg: &GraphConfig,
        stride: usize,
        hw: (usize, usize),
        act: Act,
    ) -> Self {
        let hc = cfg.head_channels;
        let (stem1, _) = ConvBnAct::build(b, &format!("{}.stem1", name), c_in, hc, 3, 1, 1, hw, Some(act));
        let (stem2, _) = ConvBnAct::build(b, &format!("{}.stem2", name), hc, hc, 3, 1, 1, hw, Some(act));
        let cls = ConvLayer::build(
            b,
            &format!("{}.cls", name),
            hc,
            cfg.num_classes,
            1,
            hw,
            Some(cls_bias_init()),
            None,
        );
        let reg = ConvLayer::build(b, &format!("{}.reg", name), hc, 4, 1, hw, Some(0.0), None);
        ScaleHead {
            stem1,
            stem2,
            cls,
            reg,
            stride,
        }
    }

    fn forward(&self, sess: &mut Session, x: VarId) -> Result<ScaleVars> {
        let y = self.stem1.forward(sess, x)?;
        let y = self.stem2.forward(sess, y)?;
        Ok(ScaleVars {
            cls_logits: self.cls.forward(sess, y)?,
            box_raw: self.reg.forward(sess, y)?,
            stride: self.stride,
        })
    }
}

/// Tape handles for one scale's outputs.
#[derive(Debug, Clone, Copy)]
pub struct ScaleVars {
    pub cls_logits: VarId,
    pub box_raw: VarId,
    pub stride: usize,
}

/// One branch's outputs across all scales (low stride first).
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub scales: Vec<ScaleVars>,
}

/// Outputs of the head stack. `o2m` is present only in training forwards.
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub o2m: Option<BranchVars>,
    pub o2o: BranchVars,
}

#[derive(Debug)]
pub struct DualHeads {
    o2m: Vec<ScaleHead>,
    o2o: Vec<ScaleHead>,
}

impl DualHeads {
    pub fn build(
        b: &mut Builder,
        cfg: &GraphConfig,
        in_channels: &[usize],
        hw: &[(usize, usize)],
    ) -> DualHeads {
        let strides = cfg.strides();
        let build_branch = |b: &mut Builder, tag: &str| -> Vec<ScaleHead> {
            strides
                .iter()
                .enumerate()
                .map(|(l, &s)| {
                    ScaleHead::build(
                        b,
                        &format!("head.{}.s{}", tag, s),
                        in_channels[l],
                        cfg,
                        s,
                        hw[l],
                        cfg.conv_act,
                    )
                })
                .collect()
        };
        DualHeads {
            o2m: build_branch(b, "o2m"),
            o2o: build_branch(b, "o2o"),
        }
    }

    pub fn forward(
        &self,
        sess: &mut Session,
        pyramid: &[VarId],
        with_o2m: bool,
    ) -> Result<HeadVars> {
        let run = |sess: &mut Session, heads: &[ScaleHead]| -> Result<BranchVars> {
            let mut scales = Vec::with_capacity(heads.len());
            for (head, &x) in heads.iter().zip(pyramid) {
                scales.push(head.forward(sess, x)?);
            }
            Ok(BranchVars { scales })
        };
        // One-to-one first: its outputs must be identical whether or not the
        // one-to-many branch is evaluated afterwards.
        let o2o = run(sess, &self.o2o)?;
        let o2m = if with_o2m {
            Some(run(sess, &self.o2m)?)
        } else {
            None
        };
        Ok(HeadVars { o2m, o2o })
    }
}
