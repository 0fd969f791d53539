//! The training loss: per branch, a sum-reduced binary cross-entropy on the
//! class logits against the assignment targets, plus lambda_box times
//! sum(1 - CIoU) over the positive anchors. Both branches share every
//! backbone/neck feature, so their gradients accumulate there.
//!
//! Targets come from a separate assignment step and are treated as constants
//! by the gradient (the usual detached-target convention); the CIoU gradient
//! below is the full derivative of the value actually computed, including the
//! aspect-ratio coupling term, so the loss passes finite-difference checks
//! holding the assignment fixed.

use crate::assign::{assign_o2m, assign_o2o, build_anchor_predictions, AssignmentResult, MatchingParams};
use crate::eval::GtBox;
use crate::net::{BranchVars, HeadVars};
use crate::postprocess::{anchor_point, BBox, ScaleOutput};
use crate::tensor::tape::{CustomOp, Tape, VarId};
use crate::tensor::{sigmoid, softplus, Result, Tensor4, TensorError};

/// Matching parameters plus the box-term weight.
#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    pub matching: MatchingParams,
    pub lambda_box: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            matching: MatchingParams::default(),
            lambda_box: 5.0,
        }
    }
}

// --- CIoU -------------------------------------------------------------------

const CIOU_EPS: f64 = 1e-9;

/// Complete IoU: IoU - rho^2/c^2 - alpha*v, with v the aspect-ratio penalty
/// and alpha = v / (1 - IoU + v).
pub fn ciou(pred: &BBox, gt: &BBox) -> f64 {
    ciou_with_grad(pred, gt).0
}

/// CIoU and its full gradient with respect to (px1, py1, px2, py2).
pub fn ciou_with_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let (px1, py1, px2, py2) = (pred.x1, pred.y1, pred.x2, pred.y2);
    let (gx1, gy1, gx2, gy2) = (gt.x1, gt.y1, gt.x2, gt.y2);
    let pw = px2 - px1;
    let ph = py2 - py1;
    let gw = gx2 - gx1;
    let gh = gy2 - gy1;

    // IoU with corner subgradients.
    let iw = (px2.min(gx2) - px1.max(gx1)).max(0.0);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let area_p = pw * ph;
    let area_g = gw * gh;
    let union = area_p + area_g - inter;
    let iou = inter / union.max(CIOU_EPS);

    // d(inter)/d corner: active only when that corner bounds the overlap.
    let live = iw > 0.0 && ih > 0.0;
    let di = [
        if live && px1 > gx1 { -ih } else { 0.0 },
        if live && py1 > gy1 { -iw } else { 0.0 },
        if live && px2 < gx2 { ih } else { 0.0 },
        if live && py2 < gy2 { iw } else { 0.0 },
    ];
    let da = [-ph, -pw, ph, pw];
    let mut diou = [0.0; 4];
    let u2 = union.max(CIOU_EPS) * union.max(CIOU_EPS);
    for k in 0..4 {
        let du = da[k] - di[k];
        diou[k] = (di[k] * union - inter * du) / u2;
    }

    // Center-distance term rho^2 / c^2.
    let dx = (px1 + px2 - gx1 - gx2) / 2.0;
    let dy = (py1 + py2 - gy1 - gy2) / 2.0;
    let rho2 = dx * dx + dy * dy;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let c2 = cw * cw + ch * ch + CIOU_EPS;
    let drho2 = [dx, dy, dx, dy];
    let dcw = [
        if px1 < gx1 { -1.0 } else { 0.0 },
        0.0,
        if px2 > gx2 { 1.0 } else { 0.0 },
        0.0,
    ];
    let dch = [
        0.0,
        if py1 < gy1 { -1.0 } else { 0.0 },
        0.0,
        if py2 > gy2 { 1.0 } else { 0.0 },
    ];
    let dist = rho2 / c2;
    let mut ddist = [0.0; 4];
    for k in 0..4 {
        let dc2 = 2.0 * cw * dcw[k] + 2.0 * ch * dch[k];
        ddist[k] = (drho2[k] * c2 - rho2 * dc2) / (c2 * c2);
    }

    // Aspect-ratio term v and its coupling alpha = v / (1 - IoU + v).
    let four_over_pi2 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let q = (gw / gh).atan() - (pw / ph).atan();
    let v = four_over_pi2 * q * q;
    let ratio = pw / ph;
    let datan = -1.0 / (1.0 + ratio * ratio);
    let dratio = [-1.0 / ph, pw / (ph * ph), 1.0 / ph, -pw / (ph * ph)];
    let mut dv = [0.0; 4];
    for k in 0..4 {
        dv[k] = four_over_pi2 * 2.0 * q * datan * dratio[k];
    }
    let d_denom = 1.0 - iou + v;
    let alpha_term = if d_denom.abs() < CIOU_EPS {
        0.0
    } else {
        v * v / d_denom
    };

    let value = iou - dist - alpha_term;

    // d(v^2/D) = (2v/D - v^2/D^2) dv + (v^2/D^2) dIoU.
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_alpha_term = if d_denom.abs() < CIOU_EPS {
            0.0
        } else {
            (2.0 * v / d_denom - v * v / (d_denom * d_denom)) * dv[k]
                + (v * v / (d_denom * d_denom)) * diou[k]
        };
        grad[k] = diou[k] - ddist[k] - d_alpha_term;
    }
    (value, grad)
}

// --- tape loss ops ------------------------------------------------------------

/// Sum-reduced binary cross-entropy with logits against a fixed target
/// tensor: sum over every (anchor, class) element of
/// max(z,0) - z*t + ln(1 + e^-|z|).
#[derive(Debug)]
pub struct BceWithLogits {
    pub targets: Tensor4,
}

impl CustomOp for BceWithLogits {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn forward(&self, inputs: &[&Tensor4]) -> Result<Tensor4> {
        let logits = inputs[0];
        if logits.shape() != self.targets.shape() {
            return Err(TensorError::DimMismatch {
                axis: "targets",
                expected: self.targets.shape().len(),
                got: logits.shape().len(),
            });
        }
        let mut total = 0.0;
        for (&z, &t) in logits.data().iter().zip(self.targets.data()) {
            total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        Ok(Tensor4::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor4], _output: &Tensor4, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let g = grad_out[0];
        let grad = inputs[0]
            .data()
            .iter()
            .zip(self.targets.data())
            .map(|(&z, &t)| g * (sigmoid(z) - t))
            .collect();
        vec![grad]
    }
}

/// One positive anchor of one scale: batch index, cell, anchor point, and
/// the target box in pixels.
#[derive(Debug, Clone, Copy)]
pub struct BoxTarget {
    pub n: usize,
    pub iy: usize,
    pub ix: usize,
    pub ax: f64,
    pub ay: f64,
    pub gt: BBox,
}

/// Sum over positives of (1 - CIoU(decode(raw), gt)) for one scale's raw box
/// tensor. Decode: ltrb = stride * softplus(raw), box = anchor -/+ ltrb.
#[derive(Debug)]
pub struct BoxCiouLoss {
    pub stride: usize,
    pub positives: Vec<BoxTarget>,
}

impl BoxCiouLoss {
    fn decode(&self, raw: [f64; 4], ax: f64, ay: f64) -> BBox {
        let s = self.stride as f64;
        BBox::new(
            ax - s * softplus(raw[0]),
            ay - s * softplus(raw[1]),
            ax + s * softplus(raw[2]),
            ay + s * softplus(raw[3]),
        )
    }
}

impl CustomOp for BoxCiouLoss {
    fn name(&self) -> &'static str {
        "box_ciou_loss"
    }

    fn forward(&self, inputs: &[&Tensor4]) -> Result<Tensor4> {
        let raw = inputs[0];
        let mut total = 0.0;
        for p in &self.positives {
            let r = [
                raw.at(p.n, 0, p.iy, p.ix),
                raw.at(p.n, 1, p.iy, p.ix),
                raw.at(p.n, 2, p.iy, p.ix),
                raw.at(p.n, 3, p.iy, p.ix),
            ];
            total += 1.0 - ciou(&self.decode(r, p.ax, p.ay), &p.gt);
        }
        Ok(Tensor4::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor4], _output: &Tensor4, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let raw = inputs[0];
        let g = grad_out[0];
        let s = self.stride as f64;
        let shape = raw.shape();
        let mut grad = vec![0.0; shape.len()];
        for p in &self.positives {
            let r = [
                raw.at(p.n, 0, p.iy, p.ix),
                raw.at(p.n, 1, p.iy, p.ix),
                raw.at(p.n, 2, p.iy, p.ix),
                raw.at(p.n, 3, p.iy, p.ix),
            ];
            let (_, dcorner) = ciou_with_grad(&self.decode(r, p.ax, p.ay), &p.gt);
            // d(1-ciou)/d raw_k through corner = anchor -/+ stride*softplus.
            let signs = [-1.0, -1.0, 1.0, 1.0];
            for k in 0..4 {
                let d = -dcorner[k] * signs[k] * s * sigmoid(r[k]);
                grad[shape.idx(p.n, k, p.iy, p.ix)] += g * d;
            }
        }
        vec![grad]
    }
}

// --- assignment-to-targets glue ----------------------------------------------

/// Fixed supervision for one branch: per-scale classification target tensors
/// and positive box lists, plus the assignment results for inspection.
#[derive(Debug)]
pub struct BranchTargets {
    pub cls_targets: Vec<Tensor4>,
    pub box_positives: Vec<Vec<BoxTarget>>,
    pub assignments: Vec<AssignmentResult>,
    pub num_positives: usize,
}

/// Both branches' targets for one batch.
#[derive(Debug)]
pub struct LossTargets {
    pub o2m: BranchTargets,
    pub o2o: BranchTargets,
}

/// Loss values by component (already batch-normalized like the total).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls_o2m: f64,
    pub box_o2m: f64,
    pub cls_o2o: f64,
    pub box_o2o: f64,
    pub num_pos_o2m: usize,
    pub num_pos_o2o: usize,
}

/// Snapshot of branch outputs as plain tensors (detached from the tape).
pub fn branch_outputs(tape: &Tape, branch: &BranchVars) -> Vec<ScaleOutput> {
    branch
        .scales
        .iter()
        .map(|sv| ScaleOutput {
            stride: sv.stride,
            cls_logits: tape.value(sv.cls_logits).clone(),
            box_raw: tape.value(sv.box_raw).clone(),
        })
        .collect()
}

fn branch_targets(
    scales: &[ScaleOutput],
    gts_batch: &[Vec<GtBox>],
    params: &MatchingParams,
    one_to_one: bool,
) -> BranchTargets {
    let batch = scales[0].cls_logits.shape().n;
    assert_eq!(batch, gts_batch.len());
    let mut cls_targets: Vec<Tensor4> = scales
        .iter()
        .map(|sc| Tensor4::zeros(sc.cls_logits.shape()))
        .collect();
    let mut box_positives: Vec<Vec<BoxTarget>> = vec![Vec::new(); scales.len()];
    let mut assignments = Vec::with_capacity(batch);
    let mut num_positives = 0;
    // Scale extents for anchor-index bookkeeping.
    let extents: Vec<(usize, usize)> = scales
        .iter()
        .map(|sc| {
            let s = sc.cls_logits.shape();
            (s.h, s.w)
        })
        .collect();
    for (n, gts) in gts_batch.iter().enumerate() {
        let preds = build_anchor_predictions(scales, n);
        let result = if one_to_one {
            assign_o2o(&preds, gts, params)
        } else {
            assign_o2m(&preds, gts, params)
        };
        let mut offset = 0;
        for (si, &(h, w)) in extents.iter().enumerate() {
            let count = h * w;
            for a in offset..offset + count {
                if let Some(asg) = result.assignments[a] {
                    let cell = a - offset;
                    let (iy, ix) = (cell / w, cell % w);
                    let cls = gts[asg.gt].class_id;
                    cls_targets[si].set(n, cls, iy, ix, asg.target_score);
                    let (ax, ay) = anchor_point(ix, iy, scales[si].stride);
                    box_positives[si].push(BoxTarget {
                        n,
                        iy,
                        ix,
                        ax,
                        ay,
                        gt: gts[asg.gt].bbox,
                    });
                    num_positives += 1;
                }
            }
            offset += count;
        }
        assignments.push(result);
    }
    BranchTargets {
        cls_targets,
        box_positives,
        assignments,
        num_positives,
    }
}

/// Runs both assignments over detached head outputs and freezes the targets.
pub fn build_targets(
    tape: &Tape,
    heads: &HeadVars,
    gts_batch: &[Vec<GtBox>],
    params: &MatchingParams,
) -> LossTargets {
    let o2m_branch = heads
        .o2m
        .as_ref()
        .expect("training loss needs the one-to-many branch");
    let o2m_scales = branch_outputs(tape, o2m_branch);
    let o2o_scales = branch_outputs(tape, &heads.o2o);
    LossTargets {
        o2m: branch_targets(&o2m_scales, gts_batch, params, false),
        o2o: branch_targets(&o2o_scales, gts_batch, params, true),
    }
}

fn branch_loss(
    tape: &mut Tape,
    branch: &BranchVars,
    targets: &BranchTargets,
    lambda_box: f64,
) -> Result<(VarId, VarId)> {
    let mut cls_total: Option<VarId> = None;
    let mut box_total: Option<VarId> = None;
    for (si, sv) in branch.scales.iter().enumerate() {
        let bce = tape.apply(
            Box::new(BceWithLogits {
                targets: targets.cls_targets[si].clone(),
            }),
            &[sv.cls_logits],
        )?;
        cls_total = Some(match cls_total {
            Some(acc) => tape.add(acc, bce)?,
            None => bce,
        });
        if !targets.box_positives[si].is_empty() {
            let bl = tape.apply(
                Box::new(BoxCiouLoss {
                    stride: sv.stride,
                    positives: targets.box_positives[si].clone(),
                }),
                &[sv.box_raw],
            )?;
            box_total = Some(match box_total {
                Some(acc) => tape.add(acc, bl)?,
                None => bl,
            });
        }
    }
    let cls = cls_total.expect("at least one scale");
    let boxed = match box_total {
        Some(b) => b,
        None => tape.leaf(Tensor4::scalar(0.0)),
    };
    let weighted = tape.scale(boxed, lambda_box);
    Ok((cls, weighted))
}

/// Assembles the scalar loss node from frozen targets. Total =
/// (cls_o2m + lambda*box_o2m + cls_o2o + lambda*box_o2o) / batch.
pub fn loss_from_targets(
    tape: &mut Tape,
    heads: &HeadVars,
    targets: &LossTargets,
    params: &LossParams,
) -> Result<(VarId, LossBreakdown)> {
    let o2m_branch = heads
        .o2m
        .as_ref()
        .expect("training loss needs the one-to-many branch");
    let batch = tape.shape(o2m_branch.scales[0].cls_logits).n as f64;
    let (cls_m, box_m) = branch_loss(tape, o2m_branch, &targets.o2m, params.lambda_box)?;
    let (cls_o, box_o) = branch_loss(tape, &heads.o2o, &targets.o2o, params.lambda_box)?;
    let s1 = tape.add(cls_m, box_m)?;
    let s2 = tape.add(cls_o, box_o)?;
    let sum = tape.add(s1, s2)?;
    let total = tape.scale(sum, 1.0 / batch);
    let breakdown = LossBreakdown {
        total: tape.value(total).scalar_value(),
        cls_o2m: tape.value(cls_m).scalar_value() / batch,
        box_o2m: tape.value(box_m).scalar_value() / batch,
        cls_o2o: tape.value(cls_o).scalar_value() / batch,
        box_o2o: tape.value(box_o).scalar_value() / batch,
        num_pos_o2m: targets.o2m.num_positives,
        num_pos_o2o: targets.o2o.num_positives,
    };
    Ok((total, breakdown))
}

/// Full detection loss: assign, freeze targets, build the loss node.
pub fn detection_loss(
    tape: &mut Tape,
    heads: &HeadVars,
    gts_batch: &[Vec<GtBox>],
    params: &LossParams,
) -> Result<(VarId, LossBreakdown, LossTargets)> {
    let targets = build_targets(tape, heads, gts_batch, &params.matching);
    let (total, breakdown) = loss_from_targets(tape, heads, &targets, params)?;
    Ok((total, breakdown, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ScaleVars;
    use crate::reference;
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ciou_identical_boxes_is_one() {
        let b = BBox::new(1.0, 2.0, 5.0, 7.0);
        let (v, g) = ciou_with_grad(&b, &b);
        assert!((v - 1.0).abs() < 1e-9);
        // The maximum sits on a kink (one-sided derivatives differ), so only
        // require a finite subgradient here; smooth points are checked
        // against finite differences below.
        for gi in g {
            assert!(gi.is_finite());
        }
    }

    #[test]
    fn ciou_below_iou_when_centers_differ() {
        let a = BBox::new(0.0, 0.0, 4.0, 4.0);
        let b = BBox::new(2.0, 2.0, 6.0, 6.0);
        let v = ciou(&a, &b);
        let i = crate::postprocess::iou(&a, &b);
        assert!(v < i);
        assert!(v > -1.0 && v < 1.0);
    }

    #[test]
    fn ciou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..200 {
            let gt = BBox::new(
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..10.0),
                rng.gen_range(12.0..20.0),
                rng.gen_range(12.0..20.0),
            );
            // Mix of overlapping and disjoint predictions.
            let off = if case % 3 == 0 { 25.0 } else { 0.0 };
            let px1 = rng.gen_range(0.0..10.0) + off;
            let py1 = rng.gen_range(0.0..10.0) + off;
            let pred = BBox::new(
                px1,
                py1,
                px1 + rng.gen_range(2.0..12.0),
                py1 + rng.gen_range(2.0..12.0),
            );
            let (_, grad) = ciou_with_grad(&pred, &gt);
            let flat = [pred.x1, pred.y1, pred.x2, pred.y2];
            let fd = reference::finite_diff_grad(&flat, 1e-6, |x| {
                ciou(&BBox::new(x[0], x[1], x[2], x[3]), &gt)
            });
            let err = reference::max_rel_error(&grad, &fd);
            assert!(err < 1e-4, "case {}: grad {:?} vs fd {:?}", case, grad, fd);
        }
    }

    fn scale_vars(
        tape: &mut Tape,
        cls: Tensor4,
        boxr: Tensor4,
        stride: usize,
    ) -> ScaleVars {
        ScaleVars {
            cls_logits: tape.leaf(cls),
            box_raw: tape.leaf(boxr),
            stride,
        }
    }

    fn toy_heads(tape: &mut Tape, cls: &Tensor4, boxr: &Tensor4, stride: usize) -> HeadVars {
        HeadVars {
            o2m: Some(BranchVars {
                scales: vec![scale_vars(tape, cls.clone(), boxr.clone(), stride)],
            }),
            o2o: BranchVars {
                scales: vec![scale_vars(tape, cls.clone(), boxr.clone(), stride)],
            },
        }
    }

    /// softplus^-1: raw value whose decoded distance is `d` at stride s.
    fn inv_softplus(x: f64) -> f64 {
        (x.exp() - 1.0).ln()
    }

    #[test]
    fn perfect_predictions_zero_box_term() {
        // One 4x4 map at stride 8; gt centered on anchor (1,1) = (12, 12)
        // with extents exactly decodable.
        let mut tape = Tape::new();
        let shape_cls = Shape4::new(1, 1, 4, 4);
        let mut cls = Tensor4::filled(shape_cls, -12.0);
        cls.set(0, 0, 1, 1, 12.0); // p ~ 1 at the positive
        let mut boxr = Tensor4::zeros(Shape4::new(1, 4, 4, 4));
        let d = 6.0; // distances in pixels
        for k in 0..4 {
            for iy in 0..4 {
                for ix in 0..4 {
                    boxr.set(0, k, iy, ix, inv_softplus(d / 8.0));
                }
            }
        }
        let gts = vec![vec![GtBox {
            class_id: 0,
            bbox: BBox::new(12.0 - d, 12.0 - d, 12.0 + d, 12.0 + d),
        }]];
        let heads = toy_heads(&mut tape, &cls, &boxr, 8);
        let (_, breakdown, _) =
            detection_loss(&mut tape, &heads, &gts, &LossParams::default()).unwrap();
        assert!(breakdown.box_o2m < 1e-9, "box term {}", breakdown.box_o2m);
        assert!(breakdown.box_o2o < 1e-9);
        assert!(breakdown.num_pos_o2o == 1);
        assert!(breakdown.num_pos_o2m >= 1);
    }

    #[test]
    fn empty_gts_scores_zero_loss_near_zero() {
        let mut tape = Tape::new();
        let cls = Tensor4::filled(Shape4::new(1, 1, 4, 4), -30.0);
        let boxr = Tensor4::zeros(Shape4::new(1, 4, 4, 4));
        let heads = toy_heads(&mut tape, &cls, &boxr, 8);
        let gts = vec![vec![]];
        let (total, breakdown, _) =
            detection_loss(&mut tape, &heads, &gts, &LossParams::default()).unwrap();
        assert!(breakdown.total < 1e-9, "loss {}", breakdown.total);
        assert_eq!(breakdown.num_pos_o2m, 0);
        // Classification-only: the box nodes contribute nothing.
        assert_eq!(tape.value(total).scalar_value(), breakdown.total);
    }

    #[test]
    fn loss_gradient_matches_finite_differences_with_fixed_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape_cls = Shape4::new(2, 2, 4, 4);
        let shape_box = Shape4::new(2, 4, 4, 4);
        let cls = Tensor4::from_vec(
            shape_cls,
            (0..shape_cls.len()).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let boxr = Tensor4::from_vec(
            shape_box,
            (0..shape_box.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let gts = vec![
            vec![GtBox {
                class_id: 0,
                bbox: BBox::new(4.0, 4.0, 20.0, 24.0),
            }],
            vec![GtBox {
                class_id: 1,
                bbox: BBox::new(8.0, 2.0, 30.0, 18.0),
            }],
        ];
        let params = LossParams::default();

        // Freeze targets from the unperturbed outputs.
        let mut tape = Tape::new();
        let heads = toy_heads(&mut tape, &cls, &boxr, 8);
        let targets = build_targets(&tape, &heads, &gts, &params.matching);
        let (loss, _) = loss_from_targets(&mut tape, &heads, &targets, &params).unwrap();
        let grads = tape.backward(loss).unwrap();
        let cls_ids: Vec<_> = [&heads.o2m.as_ref().unwrap().scales, &heads.o2o.scales]
            .iter()
            .flat_map(|b| b.iter().map(|s| (s.cls_logits, s.box_raw)))
            .collect();

        // Finite differences with the same frozen targets. The two branches
        // share the same leaf values but separate leaves, so probe each.
        let flat: Vec<f64> = cls.data().iter().chain(boxr.data()).copied().collect();
        for (which, &(cls_id, box_id)) in cls_ids.iter().enumerate() {
            let analytic: Vec<f64> = grads
                .wrt(cls_id)
                .iter()
                .chain(grads.wrt(box_id))
                .copied()
                .collect();
            let numeric = reference::finite_diff_grad(&flat, 1e-5, |x| {
                let pc = Tensor4::from_vec(shape_cls, x[..shape_cls.len()].to_vec()).unwrap();
                let pb = Tensor4::from_vec(shape_box, x[shape_cls.len()..].to_vec()).unwrap();
                let mut t2 = Tape::new();
                // Perturb only the probed branch scale's leaves.
                let mk = |t2: &mut Tape, want: usize, c: &Tensor4, b: &Tensor4| BranchVars {
                    scales: vec![{
                        let (cc, bb) = if want == 1 {
                            (c.clone(), b.clone())
                        } else {
                            (cls.clone(), boxr.clone())
                        };
                        scale_vars(t2, cc, bb, 8)
                    }],
                };
                let heads2 = HeadVars {
                    o2m: Some(mk(&mut t2, usize::from(which == 0), &pc, &pb)),
                    o2o: mk(&mut t2, usize::from(which == 1), &pc, &pb),
                };
                let (l2, _) = loss_from_targets(&mut t2, &heads2, &targets, &params).unwrap();
                t2.value(l2).scalar_value()
            });
            let err = reference::max_rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "branch {}: max rel err {}", which, err);
        }
    }
}
