//! Pyramid fusion neck. Three wirings share the machinery:
//!
//! * `Panet`: full top-down then bottom-up chains, with the single-input
//!   pass nodes at the chain ends that the classic drawing includes.
//! * `BifpnConcat`: the same chains minus every single-input node, plus
//!   same-level input-to-output skip edges; fusion is plain channel concat.
//! * `BifpnWeighted`: BiFPN connectivity at one uniform width with learned
//!   normalized scalar weights summing the inputs instead of concat.
//!
//! Upsampling is nearest 2x; downsampling is a stride-2 3x3 conv.

use super::layers::{ConvBnAct, FusionModule, WeightedFuse};
use super::{Builder, GraphConfig, NeckKind, Session};
use crate::tensor::tape::VarId;
use crate::tensor::Result;

/// One fusion node: gather inputs (concat or weighted sum), then run the
/// fusion block.
#[derive(Debug)]
struct FuseNode {
    block: FusionModule,
    weighted: Option<WeightedFuse>,
}

impl FuseNode {
    fn forward(&self, sess: &mut Session, inputs: &[VarId]) -> Result<VarId> {
        let gathered = match &self.weighted {
            Some(wf) => wf.forward(sess, inputs)?,
            None => sess.tape.concat_channels(inputs)?,
        };
        self.block.forward(sess, gathered)
    }
}

#[derive(Debug)]
pub struct Neck {
    kind: NeckKind,
    levels: usize,
    laterals: Vec<ConvBnAct>,
    pass_top: Option<FusionModule>,
    pass_bottom: Option<FusionModule>,
    /// Top-down nodes for levels L-2 down to 1, in that order.
    td: Vec<FuseNode>,
    /// Output node at the lowest level (bottom of the top-down path).
    bottom: FuseNode,
    /// Stride-2 convs feeding out[l] from out[l-1], l = 1..L-1.
    downs: Vec<ConvBnAct>,
    /// Output nodes for levels 1..L-1, in that order.
    outs: Vec<FuseNode>,
    /// Channels of each output level, low stride to high.
    pub out_channels: Vec<usize>,
    /// (node name, input edge count) for structural checks.
    pub arities: Vec<(String, usize)>,
}

impl Neck {
    pub fn build(b: &mut Builder, cfg: &GraphConfig, ch: &[usize], hw: &[(usize, usize)]) -> Neck {
        let levels = ch.len();
        assert!(levels >= 2);
        let kind = cfg.neck;
        let act = cfg.conv_act;
        let nd = cfg.neck_depth;
        let mut arities = Vec::new();

        // Uniform-width variant projects every tap first.
        let (node_ch, laterals): (Vec<usize>, Vec<ConvBnAct>) = if kind == NeckKind::BifpnWeighted
        {
            let w = cfg.head_channels;
            let lats = (0..levels)
                .map(|l| {
                    ConvBnAct::build(
                        b,
                        &format!("neck.lateral_s{}", stride_name(cfg, l)),
                        ch[l],
                        w,
                        1,
                        1,
                        0,
                        hw[l],
                        Some(act),
                    )
                    .0
                })
                .collect();
            (vec![w; levels], lats)
        } else {
            (ch.to_vec(), Vec::new())
        };

        let top = levels - 1;
        let mut pass_top = None;
        if kind == NeckKind::Panet {
            pass_top = Some(FusionModule::build(
                b,
                cfg.fusion_block,
                &format!("neck.pass_s{}", stride_name(cfg, top)),
                node_ch[top],
                node_ch[top],
                nd,
                hw[top],
                act,
            ));
            arities.push((format!("neck.pass_s{}", stride_name(cfg, top)), 1));
        }

        // Top-down chain: carry channels shrink as we descend.
        let mut td = Vec::new();
        let mut carry_ch = node_ch[top];
        for l in (1..levels - 1).rev() {
            let name = format!("neck.td_s{}", stride_name(cfg, l));
            let (inputs, in_ch) = match kind {
                NeckKind::BifpnWeighted => (2, node_ch[l]),
                _ => (2, node_ch[l] + carry_ch),
            };
            arities.push((name.clone(), inputs));
            td.push(FuseNode {
                block: FusionModule::build(b, cfg.fusion_block, &name, in_ch, node_ch[l], nd, hw[l], act),
                weighted: (kind == NeckKind::BifpnWeighted)
                    .then(|| WeightedFuse::build(b, &format!("{}.fuse_w", name), inputs)),
            });
            carry_ch = node_ch[l];
        }

        let bottom_name = format!("neck.out_s{}", stride_name(cfg, 0));
        let bottom_inputs = 2;
        let bottom_in_ch = match kind {
            NeckKind::BifpnWeighted => node_ch[0],
            _ => node_ch[0] + carry_ch,
        };
        arities.push((bottom_name.clone(), bottom_inputs));
        let bottom = FuseNode {
            block: FusionModule::build(
                b,
                cfg.fusion_block,
                &bottom_name,
                bottom_in_ch,
                node_ch[0],
                nd,
                hw[0],
                act,
            ),
            weighted: (kind == NeckKind::BifpnWeighted)
                .then(|| WeightedFuse::build(b, &format!("{}.fuse_w", bottom_name), bottom_inputs)),
        };
        let mut pass_bottom = None;
        if kind == NeckKind::Panet {
            let name = format!("neck.pass_out_s{}", stride_name(cfg, 0));
            pass_bottom = Some(FusionModule::build(
                b,
                cfg.fusion_block,
                &name,
                node_ch[0],
                node_ch[0],
                nd,
                hw[0],
                act,
            ));
            arities.push((name, 1));
        }

        // Bottom-up chain.
        let mut downs = Vec::new();
        let mut outs = Vec::new();
        for l in 1..levels {
            let (down, _) = ConvBnAct::build(
                b,
                &format!("neck.down_s{}", stride_name(cfg, l)),
                node_ch[l - 1],
                node_ch[l - 1],
                3,
                2,
                1,
                hw[l - 1],
                Some(act),
            );
            downs.push(down);
            let name = format!("neck.out_s{}", stride_name(cfg, l));
            let (inputs, in_ch) = if l == levels - 1 {
                // Top output: tap (or pass node) + downsampled lower output.
                match kind {
                    NeckKind::BifpnWeighted => (2, node_ch[l]),
                    _ => (2, node_ch[l] + node_ch[l - 1]),
                }
            } else {
                match kind {
                    // Same-level skip edge: tap + td node + lower output.
                    NeckKind::BifpnConcat => (3, node_ch[l] + node_ch[l] + node_ch[l - 1]),
                    NeckKind::BifpnWeighted => (3, node_ch[l]),
                    // PANet: td node + lower output only.
                    NeckKind::Panet => (2, node_ch[l] + node_ch[l - 1]),
                }
            };
            arities.push((name.clone(), inputs));
            outs.push(FuseNode {
                block: FusionModule::build(b, cfg.fusion_block, &name, in_ch, node_ch[l], nd, hw[l], act),
                weighted: (kind == NeckKind::BifpnWeighted)
                    .then(|| WeightedFuse::build(b, &format!("{}.fuse_w", name), inputs)),
            });
        }

        Neck {
            kind,
            levels,
            laterals,
            pass_top,
            pass_bottom,
            td,
            bottom,
            downs,
            outs,
            out_channels: node_ch,
            arities,
        }
    }

    /// taps: backbone outputs low stride to high. Returns the fused pyramid,
    /// same order and level count.
    pub fn forward(&self, sess: &mut Session, taps: &[VarId]) -> Result<Vec<VarId>> {
        assert_eq!(taps.len(), self.levels);
        let ins: Vec<VarId> = if self.laterals.is_empty() {
            taps.to_vec()
        } else {
            let mut v = Vec::with_capacity(self.levels);
            for (lat, &t) in self.laterals.iter().zip(taps) {
                v.push(lat.forward(sess, t)?);
            }
            v
        };
        let top = self.levels - 1;
        let mut carry = match &self.pass_top {
            Some(block) => block.forward(sess, ins[top])?,
            None => ins[top],
        };
        let top_entry = carry;
        // Top-down: build td nodes for levels L-2..1.
        let mut td_vars = vec![None; self.levels];
        for (i, l) in (1..self.levels - 1).rev().enumerate() {
            let up = sess.tape.upsample2x(carry);
            carry = self.td[i].forward(sess, &[ins[l], up])?;
            td_vars[l] = Some(carry);
        }
        let up = sess.tape.upsample2x(carry);
        let mut low = self.bottom.forward(sess, &[ins[0], up])?;
        if let Some(block) = &self.pass_bottom {
            low = block.forward(sess, low)?;
        }
        // Bottom-up.
        let mut outs = vec![low];
        for l in 1..self.levels {
            let down = self.downs[l - 1].forward(sess, outs[l - 1])?;
            let node = &self.outs[l - 1];
            let y = if l == self.levels - 1 {
                node.forward(sess, &[top_entry, down])?
            } else {
                let td = td_vars[l].expect("td node exists for interior level");
                match self.kind {
                    NeckKind::Panet => node.forward(sess, &[td, down])?,
                    _ => node.forward(sess, &[ins[l], td, down])?,
                }
            };
            outs.push(y);
        }
        Ok(outs)
    }
}

fn stride_name(cfg: &GraphConfig, level: usize) -> usize {
    cfg.strides()[level]
}
