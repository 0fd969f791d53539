//! Dual label assignment. Both branches rank anchors against each ground
//! truth with the unified matching metric m = s * p^alpha * IoU^beta (s the
//! in-box spatial prior): the one-to-many branch keeps the top-k anchors per
//! ground truth, the one-to-one branch exactly one. With consistent exponents
//! (alpha_o2o = r * alpha_o2m, beta_o2o = r * beta_o2m) the metric of one
//! branch is a monotone power of the other, so both rank anchors identically.

use crate::eval::GtBox;
use crate::postprocess::{anchor_point, decode_box, iou, BBox, ScaleOutput};
use crate::tensor::sigmoid;

/// Metric exponents and branch coupling. The one-to-one exponents are derived:
/// alpha_o2o = r * alpha_o2m, beta_o2o = r * beta_o2m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchingParams {
    pub alpha_o2m: f64,
    pub beta_o2m: f64,
    pub r: f64,
    pub topk: usize,
}

impl Default for MatchingParams {
    fn default() -> Self {
        MatchingParams {
            alpha_o2m: 0.5,
            beta_o2m: 6.0,
            r: 1.0,
            topk: 10,
        }
    }
}

impl MatchingParams {
    pub fn alpha_o2o(&self) -> f64 {
        self.r * self.alpha_o2m
    }

    pub fn beta_o2o(&self) -> f64 {
        self.r * self.beta_o2m
    }
}

/// One anchor's decoded prediction: grid-cell center in input pixels, its
/// stride, per-class sigmoid scores, and the decoded (unclamped) box.
#[derive(Debug, Clone)]
pub struct AnchorPrediction {
    pub point: (f64, f64),
    pub stride: usize,
    pub cls_scores: Vec<f64>,
    pub bbox: BBox,
}

/// Decodes every anchor of image `n` across the scales, in scale-major
/// row-major order (the canonical anchor indexing).
pub fn build_anchor_predictions(scales: &[ScaleOutput], n: usize) -> Vec<AnchorPrediction> {
    let mut out = Vec::new();
    for sc in scales {
        let (_, nc, h, w) = sc.cls_logits.shape().dims();
        for iy in 0..h {
            for ix in 0..w {
                let point = anchor_point(ix, iy, sc.stride);
                let raw = [
                    sc.box_raw.at(n, 0, iy, ix),
                    sc.box_raw.at(n, 1, iy, ix),
                    sc.box_raw.at(n, 2, iy, ix),
                    sc.box_raw.at(n, 3, iy, ix),
                ];
                let cls_scores = (0..nc)
                    .map(|c| sigmoid(sc.cls_logits.at(n, c, iy, ix)))
                    .collect();
                out.push(AnchorPrediction {
                    point,
                    stride: sc.stride,
                    cls_scores,
                    bbox: decode_box(point.0, point.1, raw, sc.stride),
                });
            }
        }
    }
    out
}

/// The unified matching metric m(alpha, beta) = s * p^alpha * IoU^beta, where
/// s is 1 iff the anchor point lies inside the ground-truth box and p is the
/// predicted score of the ground truth's class.
pub fn matching_metric(pred: &AnchorPrediction, gt: &GtBox, alpha: f64, beta: f64) -> f64 {
    debug_assert!(alpha > 0.0 && beta > 0.0);
    if !gt.bbox.contains(pred.point.0, pred.point.1) {
        return 0.0;
    }
    let p = pred.cls_scores.get(gt.class_id).copied().unwrap_or(0.0);
    let overlap = iou(&pred.bbox, &gt.bbox);
    p.powf(alpha) * overlap.powf(beta)
}

/// Which branch an assignment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    O2m,
    O2o,
}

/// Per-anchor assignment: the ground truth it serves, the raw metric, the
/// IoU, and the normalized target score t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorAssignment {
    pub gt: usize,
    pub metric: f64,
    pub iou: f64,
    pub target_score: f64,
}

/// Result of one branch's assignment over one image.
#[derive(Debug, Clone)]
pub struct AssignmentResult {
    pub branch: Branch,
    /// Indexed by anchor; None for negatives.
    pub assignments: Vec<Option<AnchorAssignment>>,
}

impl AssignmentResult {
    /// Anchors assigned to `gt`, as (anchor index, assignment).
    pub fn positives_of(&self, gt: usize) -> Vec<(usize, AnchorAssignment)> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.filter(|a| a.gt == gt).map(|a| (i, a)))
            .collect()
    }

    pub fn num_positives(&self) -> usize {
        self.assignments.iter().flatten().count()
    }

    /// Debug CSV `anchor,gt,metric,iou,target,branch`, positives only.
    pub fn to_csv(&self) -> String {
        let tag = match self.branch {
            Branch::O2m => "o2m",
            Branch::O2o => "o2o",
        };
        let mut out = String::from("anchor,gt,metric,iou,target,branch\n");
        for (i, a) in self.assignments.iter().enumerate() {
            if let Some(a) = a {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{}\n",
                    i, a.gt, a.metric, a.iou, a.target_score, tag
                ));
            }
        }
        out
    }
}

/// Candidate list for one gt: (metric, anchor index), best first. Only
/// anchors with the spatial prior satisfied (m > 0) qualify.
fn ranked_candidates(
    preds: &[AnchorPrediction],
    gt: &GtBox,
    alpha: f64,
    beta: f64,
) -> Vec<(f64, usize)> {
    let mut cands: Vec<(f64, usize)> = preds
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let m = matching_metric(p, gt, alpha, beta);
            (m > 0.0).then_some((m, i))
        })
        .collect();
    cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    cands
}

/// Rescales raw metrics into target scores: per gt, t_i = m_i * max(IoU) /
/// max(m) over that gt's positives, so the best positive's target equals the
/// best achieved IoU.
fn normalize_targets(
    preds: &[AnchorPrediction],
    gts: &[GtBox],
    chosen: &[(usize, usize, f64)], // (anchor, gt, metric)
    branch: Branch,
    n_anchors: usize,
) -> AssignmentResult {
    let mut per_gt_max_m = vec![0.0f64; gts.len()];
    let mut per_gt_max_iou = vec![0.0f64; gts.len()];
    let ious: Vec<f64> = chosen
        .iter()
        .map(|&(a, g, m)| {
            let v = iou(&preds[a].bbox, &gts[g].bbox);
            per_gt_max_m[g] = per_gt_max_m[g].max(m);
            per_gt_max_iou[g] = per_gt_max_iou[g].max(v);
            v
        })
        .collect();
    let mut assignments = vec![None; n_anchors];
    for (&(a, g, m), &v) in chosen.iter().zip(&ious) {
        let t = if per_gt_max_m[g] > 0.0 {
            m / per_gt_max_m[g] * per_gt_max_iou[g]
        } else {
            0.0
        };
        assignments[a] = Some(AnchorAssignment {
            gt: g,
            metric: m,
            iou: v,
            target_score: t,
        });
    }
    AssignmentResult {
        branch,
        assignments,
    }
}

/// One-to-many assignment: per ground truth the top-k anchors by metric
/// become positives; an anchor ranked by several ground truths goes to the
/// one with the larger metric (ties to the lower gt index). A gt whose
/// candidate list is empty simply gets no positives.
pub fn assign_o2m(
    preds: &[AnchorPrediction],
    gts: &[GtBox],
    params: &MatchingParams,
) -> AssignmentResult {
    let (alpha, beta) = (params.alpha_o2m, params.beta_o2m);
    // anchor -> best (metric, gt) among gts whose top-k include it.
    let mut claim: Vec<Option<(f64, usize)>> = vec![None; preds.len()];
    for (g, gt) in gts.iter().enumerate() {
        for &(m, a) in ranked_candidates(preds, gt, alpha, beta)
            .iter()
            .take(params.topk)
        {
            let better = match claim[a] {
                None => true,
                Some((m0, g0)) => m > m0 || (m == m0 && g < g0),
            };
            if better {
                claim[a] = Some((m, g));
            }
        }
    }
    let chosen: Vec<(usize, usize, f64)> = claim
        .iter()
        .enumerate()
        .filter_map(|(a, c)| c.map(|(m, g)| (a, g, m)))
        .collect();
    normalize_targets(preds, gts, &chosen, Branch::O2m, preds.len())
}

/// One-to-one assignment: globally greedy over all (gt, anchor) candidate
/// pairs in descending metric order; each gt takes at most one anchor and
/// each anchor serves at most one gt, so a gt that loses its best anchor to
/// a stronger claim falls through to its next-best.
pub fn assign_o2o(
    preds: &[AnchorPrediction],
    gts: &[GtBox],
    params: &MatchingParams,
) -> AssignmentResult {
    let (alpha, beta) = (params.alpha_o2o(), params.beta_o2o());
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new(); // (m, anchor, gt)
    for (g, gt) in gts.iter().enumerate() {
        for (m, a) in ranked_candidates(preds, gt, alpha, beta) {
            pairs.push((m, a, g));
        }
    }
    pairs.sort_by(|x, y| {
        y.0
            .partial_cmp(&x.0)
            .unwrap()
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut gt_done = vec![false; gts.len()];
    let mut anchor_done = vec![false; preds.len()];
    let mut chosen = Vec::new();
    for (m, a, g) in pairs {
        if gt_done[g] || anchor_done[a] {
            continue;
        }
        gt_done[g] = true;
        anchor_done[a] = true;
        chosen.push((a, g, m));
    }
    normalize_targets(preds, gts, &chosen, Branch::O2o, preds.len())
}

/// The supervision-gap diagnostic, computed exactly as printed:
/// A = t_o2o,i - I(i in Omega) * t_o2m,i + sum_{k in Omega \ {i}} t_o2m,k,
/// with Omega the one-to-many positive set of the image. (The printed
/// rendering of the indicator and sum is ambiguous in places; this implements
/// it term by term as written. Diagnostic only, never a training signal.)
pub fn supervision_gap(o2m: &AssignmentResult, o2o: &AssignmentResult, i: usize) -> f64 {
    let t_o2o_i = o2o.assignments[i].map_or(0.0, |a| a.target_score);
    let in_omega = o2m.assignments[i].is_some();
    let t_o2m_i = o2m.assignments[i].map_or(0.0, |a| a.target_score);
    let rest: f64 = o2m
        .assignments
        .iter()
        .enumerate()
        .filter(|&(k, a)| k != i && a.is_some())
        .map(|(_, a)| a.unwrap().target_score)
        .sum();
    t_o2o_i - if in_omega { t_o2m_i } else { 0.0 } + rest
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn anchor(x: f64, y: f64, score: f64, bbox: BBox) -> AnchorPrediction {
        AnchorPrediction {
            point: (x, y),
            stride: 8,
            cls_scores: vec![score],
            bbox,
        }
    }

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> GtBox {
        GtBox {
            class_id: 0,
            bbox: BBox::new(x1, y1, x2, y2),
        }
    }

    #[test]
    fn metric_fixed_point_and_prior() {
        let g = gt(0.0, 0.0, 10.0, 10.0);
        // p = 1, IoU = 1, anchor inside: m = 1 for any exponents.
        let a = anchor(5.0, 5.0, 1.0, BBox::new(0.0, 0.0, 10.0, 10.0));
        for (al, be) in [(0.5, 6.0), (1.0, 1.0), (2.0, 3.0)] {
            assert_eq!(matching_metric(&a, &g, al, be), 1.0);
        }
        // Outside the box: m = 0 regardless.
        let far = anchor(20.0, 20.0, 1.0, BBox::new(0.0, 0.0, 10.0, 10.0));
        assert_eq!(matching_metric(&far, &g, 0.5, 6.0), 0.0);
    }

    #[test]
    fn metric_scalar_arithmetic_case() {
        // p = 0.5, IoU = 0.8, alpha = 0.5, beta = 6 -> 0.5^0.5 * 0.8^6.
        // Box geometry chosen for IoU exactly 0.8: pred [0,0,10,8] in gt
        // [0,0,10,10]: inter 80, union 100.
        let g = gt(0.0, 0.0, 10.0, 10.0);
        let a = anchor(5.0, 4.0, 0.5, BBox::new(0.0, 0.0, 10.0, 8.0));
        let m = matching_metric(&a, &g, 0.5, 6.0);
        assert!((m - 0.185364).abs() < 1e-6, "m = {}", m);
        assert!((m - 0.5f64.sqrt() * 0.8f64.powi(6)).abs() < 1e-15);
    }

    #[test]
    fn metric_monotone_in_p_and_iou() {
        let g = gt(0.0, 0.0, 10.0, 10.0);
        let mut last = 0.0;
        for p in [0.1, 0.3, 0.5, 0.9] {
            let a = anchor(5.0, 5.0, p, BBox::new(0.0, 0.0, 10.0, 9.0));
            let m = matching_metric(&a, &g, 0.5, 6.0);
            assert!(m > last);
            last = m;
        }
        let mut last = 0.0;
        for y2 in [6.0, 8.0, 9.0, 10.0] {
            let a = anchor(5.0, 3.0, 0.7, BBox::new(0.0, 0.0, 10.0, y2));
            let m = matching_metric(&a, &g, 0.5, 6.0);
            assert!(m > last);
            last = m;
        }
    }

    fn rand_field(
        rng: &mut ChaCha8Rng,
        side: usize,
        n_gts: usize,
    ) -> (Vec<AnchorPrediction>, Vec<GtBox>) {
        // Disjoint gt boxes on a 64x64 canvas (grid placement), anchors on an
        // 8-px lattice with random scores and boxes around their points.
        let mut gts = Vec::new();
        let cells = [(2.0, 2.0), (34.0, 2.0), (2.0, 34.0), (34.0, 34.0)];
        for g in 0..n_gts.min(4) {
            let (bx, by) = cells[g];
            let w: f64 = rng.gen_range(12.0..26.0);
            let h: f64 = rng.gen_range(12.0..26.0);
            gts.push(gt(bx, by, bx + w, by + h));
        }
        let mut preds = Vec::new();
        for iy in 0..side {
            for ix in 0..side {
                let (x, y) = ((ix as f64 + 0.5) * 8.0, (iy as f64 + 0.5) * 8.0);
                let l: f64 = rng.gen_range(4.0..16.0);
                let t: f64 = rng.gen_range(4.0..16.0);
                let r2: f64 = rng.gen_range(4.0..16.0);
                let b: f64 = rng.gen_range(4.0..16.0);
                preds.push(anchor(
                    x,
                    y,
                    rng.gen_range(0.01..0.99),
                    BBox::new(x - l, y - t, x + r2, y + b),
                ));
            }
        }
        (preds, gts)
    }

    #[test]
    fn o2m_single_anchor_inside_becomes_positive() {
        let g = vec![gt(0.0, 0.0, 10.0, 10.0)];
        let preds = vec![
            anchor(5.0, 5.0, 0.6, BBox::new(1.0, 1.0, 9.0, 9.0)),
            anchor(50.0, 50.0, 0.9, BBox::new(45.0, 45.0, 55.0, 55.0)),
        ];
        let r = assign_o2m(&preds, &g, &MatchingParams::default());
        assert!(r.assignments[0].is_some());
        assert!(r.assignments[1].is_none());
        // Sole positive's target equals its own IoU.
        let a = r.assignments[0].unwrap();
        assert!((a.target_score - a.iou).abs() < 1e-12);
    }

    #[test]
    fn o2m_respects_topk_and_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..50 {
            let (preds, gts) = rand_field(&mut rng, 7, 3);
            let params = MatchingParams {
                topk: 4,
                ..Default::default()
            };
            let r = assign_o2m(&preds, &gts, &params);
            // Brute-force re-derivation: exhaustive sort per gt, then the
            // larger-metric-wins conflict rule.
            let mut want: Vec<Option<(usize, f64)>> = vec![None; preds.len()];
            for (g, gtb) in gts.iter().enumerate() {
                let mut ms: Vec<(f64, usize)> = preds
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (matching_metric(p, gtb, 0.5, 6.0), i))
                    .filter(|&(m, _)| m > 0.0)
                    .collect();
                ms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                for &(m, i) in ms.iter().take(4) {
                    if want[i].map_or(true, |(_, m0)| m > m0) {
                        want[i] = Some((g, m));
                    }
                }
            }
            for g in 0..gts.len() {
                assert!(r.positives_of(g).len() <= 4);
            }
            for (i, a) in r.assignments.iter().enumerate() {
                match (a, want[i]) {
                    (Some(a), Some((g, m))) => {
                        assert_eq!(a.gt, g);
                        assert!((a.metric - m).abs() < 1e-12);
                    }
                    (None, None) => {}
                    other => panic!("anchor {} mismatch: {:?}", i, other),
                }
            }
        }
    }

    #[test]
    fn o2o_selects_argmax_and_matches_o2m_top1() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let (preds, gts) = rand_field(&mut rng, 7, 3);
            let params = MatchingParams::default();
            let o2o = assign_o2o(&preds, &gts, &params);
            for (g, gtb) in gts.iter().enumerate() {
                let best = preds
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (matching_metric(p, gtb, 0.5, 6.0), i))
                    .filter(|&(m, _)| m > 0.0)
                    .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.cmp(&a.1)));
                let selected = o2o.positives_of(g);
                match best {
                    Some((_, i)) => {
                        assert_eq!(selected.len(), 1);
                        assert_eq!(selected[0].0, i);
                    }
                    None => assert!(selected.is_empty()),
                }
            }
            assert!(o2o.num_positives() <= gts.len());
        }
    }

    #[test]
    fn o2o_loser_takes_next_best_on_conflict() {
        // Two overlapping gts whose best anchor coincides.
        let gts = vec![gt(0.0, 0.0, 10.0, 10.0), gt(2.0, 0.0, 12.0, 10.0)];
        let a0 = anchor(5.0, 5.0, 0.9, BBox::new(0.5, 0.2, 10.5, 9.8)); // best for both
        let a1 = anchor(7.0, 5.0, 0.5, BBox::new(2.5, 0.4, 11.5, 9.7)); // 2nd for gt1
        let preds = vec![a0, a1];
        let r = assign_o2o(&preds, &gts, &MatchingParams::default());
        // gt0 should win anchor 0 (larger metric there), gt1 falls to 1.
        let m00 = matching_metric(&preds[0], &gts[0], 0.5, 6.0);
        let m01 = matching_metric(&preds[0], &gts[1], 0.5, 6.0);
        assert!(m00 > m01);
        assert_eq!(r.assignments[0].unwrap().gt, 0);
        assert_eq!(r.assignments[1].unwrap().gt, 1);
    }

    #[test]
    fn metric_rank_invariant_under_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (preds, gts) = rand_field(&mut rng, 6, 2);
        let base = MatchingParams::default();
        for r in [0.5, 1.0, 2.0] {
            let p = MatchingParams { r, ..base };
            for gtb in &gts {
                let m_o2m: Vec<f64> = preds
                    .iter()
                    .map(|a| matching_metric(a, gtb, base.alpha_o2m, base.beta_o2m))
                    .collect();
                let m_o2o: Vec<f64> = preds
                    .iter()
                    .map(|a| matching_metric(a, gtb, p.alpha_o2o(), p.beta_o2o()))
                    .collect();
                // log m_o2o = r log m_o2m wherever s = 1; ranking preserved.
                for i in 0..preds.len() {
                    if m_o2m[i] > 0.0 {
                        assert!(
                            (m_o2o[i].ln() - r * m_o2m[i].ln()).abs() < 1e-9,
                            "log-scaling violated"
                        );
                    }
                    for j in 0..preds.len() {
                        let d1 = m_o2m[i] - m_o2m[j];
                        let d2 = m_o2o[i] - m_o2o[j];
                        assert!(
                            d1.signum() == d2.signum() || (d1 == 0.0 && d2 == 0.0),
                            "rank flip between anchors {} and {}",
                            i,
                            j
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gap_zero_for_sole_consistent_member() {
        // One anchor, one gt, identical targets in both branches.
        let g = vec![gt(0.0, 0.0, 10.0, 10.0)];
        let preds = vec![anchor(5.0, 5.0, 0.7, BBox::new(1.0, 1.0, 9.0, 9.0))];
        let o2m = assign_o2m(&preds, &g, &MatchingParams::default());
        let o2o = assign_o2o(&preds, &g, &MatchingParams::default());
        let a = supervision_gap(&o2m, &o2o, 0);
        assert!(a.abs() < 1e-12, "gap = {}", a);
    }

    #[test]
    fn gap_decreases_as_o2m_target_rises() {
        // Three anchors in one gt; raising t_o2m of the probed anchor (via a
        // better box) lowers A while the others' contributions are fixed.
        let g = vec![gt(0.0, 0.0, 16.0, 16.0)];
        let mk = |probe_quality: f64| {
            let preds = vec![
                anchor(4.0, 8.0, 0.5, BBox::new(0.5, 0.5, 15.0, 15.0)),
                anchor(8.0, 8.0, 0.4, BBox::new(0.0, 0.0, 16.0 * probe_quality, 16.0)),
                anchor(12.0, 8.0, 0.3, BBox::new(2.0, 2.0, 14.0, 14.0)),
            ];
            let o2m = assign_o2m(&preds, &g, &MatchingParams::default());
            let o2o = assign_o2o(&preds, &g, &MatchingParams::default());
            supervision_gap(&o2m, &o2o, 1)
        };
        let lo = mk(0.6);
        let hi = mk(0.95);
        assert!(hi < lo, "gap should fall as the probe improves: {} vs {}", hi, lo);
    }

    #[test]
    fn gap_hand_computed_three_anchor_case() {
        let g = vec![gt(0.0, 0.0, 16.0, 16.0)];
        let preds = vec![
            anchor(4.0, 8.0, 0.5, BBox::new(0.0, 0.0, 15.0, 16.0)),
            anchor(8.0, 8.0, 0.6, BBox::new(0.0, 0.0, 16.0, 14.0)),
            anchor(12.0, 8.0, 0.4, BBox::new(1.0, 1.0, 15.0, 15.0)),
        ];
        let o2m = assign_o2m(&preds, &g, &MatchingParams::default());
        let o2o = assign_o2o(&preds, &g, &MatchingParams::default());
        // Recompute A by hand from the published targets.
        let t: Vec<f64> = (0..3)
            .map(|i| o2m.assignments[i].map_or(0.0, |a| a.target_score))
            .collect();
        let t_o2o: Vec<f64> = (0..3)
            .map(|i| o2o.assignments[i].map_or(0.0, |a| a.target_score))
            .collect();
        for i in 0..3 {
            let want = t_o2o[i] - t[i] + (t.iter().sum::<f64>() - t[i]);
            assert!((supervision_gap(&o2m, &o2o, i) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_csv_has_positive_rows() {
        let g = vec![gt(0.0, 0.0, 10.0, 10.0)];
        let preds = vec![anchor(5.0, 5.0, 0.7, BBox::new(1.0, 1.0, 9.0, 9.0))];
        let r = assign_o2m(&preds, &g, &MatchingParams::default());
        let csv = r.to_csv();
        assert!(csv.starts_with("anchor,gt,metric"));
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().ends_with("o2m"));
    }
}
