//! FasterNet backbone: a stride-4 embedding conv, four stages of FasterNet
//! blocks joined by stride-2 merging convs, and (optionally) SPPF then PSA on
//! the deepest stage. Taps come out at strides 4, 8, 16 and 32.

use super::layers::{ConvBnAct, FasterNetBlock, Psa, Sppf};
use super::{Builder, GraphConfig, Session};
use crate::tensor::tape::VarId;
use crate::tensor::Result;

#[derive(Debug)]
pub struct Backbone {
    embed: ConvBnAct,
    stages: Vec<Vec<FasterNetBlock>>,
    merges: Vec<ConvBnAct>,
    sppf: Option<Sppf>,
    psa: Option<Psa>,
}

impl Backbone {
    pub fn build(b: &mut Builder, cfg: &GraphConfig) -> Backbone {
        let (h, w) = cfg.input_size;
        let (embed, mut hw) = ConvBnAct::build(
            b,
            "backbone.embed",
            3,
            cfg.stage_widths[0],
            4,
            4,
            0,
            (h, w),
            Some(cfg.conv_act),
        );
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for (si, (&width, &depth)) in cfg
            .stage_widths
            .iter()
            .zip(&cfg.stage_depths)
            .enumerate()
        {
            if si > 0 {
                let (merge, next_hw) = ConvBnAct::build(
                    b,
                    &format!("backbone.merge{}", si),
                    cfg.stage_widths[si - 1],
                    width,
                    2,
                    2,
                    0,
                    hw,
                    Some(cfg.conv_act),
                );
                merges.push(merge);
                hw = next_hw;
            }
            let blocks = (0..depth)
                .map(|bi| {
                    FasterNetBlock::build(
                        b,
                        &format!("backbone.stage{}.block{}", si, bi),
                        width,
                        cfg.cp(width),
                        hw,
                        cfg.pwconv_act,
                    )
                })
                .collect();
            stages.push(blocks);
        }
        let deep = cfg.stage_widths[3];
        let sppf = cfg
            .use_sppf
            .then(|| Sppf::build(b, "backbone.sppf", deep, cfg.sppf_pool, hw, cfg.conv_act));
        let psa = cfg
            .use_psa
            .then(|| Psa::build(b, "backbone.psa", deep, hw, cfg.conv_act));
        Backbone {
            embed,
            stages,
            merges,
            sppf,
            psa,
        }
    }

    /// Stage taps at strides 4, 8, 16, 32 (SPPF/PSA applied after stage 4).
    pub fn forward(&self, sess: &mut Session, x: VarId) -> Result<[VarId; 4]> {
        let mut taps = [VarId(0); 4];
        let mut y = self.embed.forward(sess, x)?;
        for (si, blocks) in self.stages.iter().enumerate() {
            if si > 0 {
                y = self.merges[si - 1].forward(sess, y)?;
            }
            for block in blocks {
                y = block.forward(sess, y)?;
            }
            if si == 3 {
                if let Some(sppf) = &self.sppf {
                    y = sppf.forward(sess, y)?;
                }
                if let Some(psa) = &self.psa {
                    y = psa.forward(sess, y)?;
                }
            }
            taps[si] = y;
        }
        Ok(taps)
    }
}
