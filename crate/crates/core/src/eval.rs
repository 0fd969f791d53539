//! Precision / recall / PR-curve / AP evaluation.
//!
//! Detections are matched greedily in score order against unmatched ground
//! truths of the same class; the PR curve sweeps a threshold over the
//! detection scores; AP is the area under the monotone precision envelope
//! integrated over recall (all-points interpolation). A 101-point COCO-style
//! interpolation is available behind [`ApInterp::Points101`].

use crate::postprocess::{iou, BBox, Detection};

/// Ground truth box in absolute pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

/// True/false positive and miss counts at one IoU threshold.
/// `tp + fn_` always equals the ground-truth count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy matching of one image's detections against its ground truths.
///
/// Detections are visited in descending score order (ties by input index);
/// each claims the not-yet-matched ground truth of its class with the highest
/// IoU, provided that IoU reaches `iou_thresh`. Returns the counts plus a
/// true-positive flag per detection, indexed like the input.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GtBox],
    iou_thresh: f64,
) -> (EvalCounts, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut gt_used = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    let mut tp = 0;
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_used[gi] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            gt_used[gi] = true;
            flags[di] = true;
            tp += 1;
        }
    }
    let counts = EvalCounts {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
    };
    (counts, flags)
}

/// (precision, recall) with the degenerate cases pinned: no predictions and
/// no errors means precision 1; recall is 0 when ground truths exist but none
/// were found, and 1 when there was nothing to find.
pub fn precision_recall(counts: EvalCounts) -> (f64, f64) {
    let p = if counts.tp + counts.fp == 0 {
        1.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fp) as f64
    };
    let r = if counts.tp + counts.fn_ == 0 {
        1.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fn_) as f64
    };
    (p, r)
}

/// One PR point at a concrete score threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// PR curve (recall nondecreasing along `points`) and its area.
#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// Integration scheme for the area under the PR curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApInterp {
    /// Exact area under the monotone precision envelope (all points).
    AllPoints,
    /// COCO-style 101-point sampling of the envelope over recall [0,1].
    Points101,
}

/// AP from per-detection (score, is_tp) pairs against `total_gts` ground
/// truths. Thresholds sweep the distinct detection scores from high to low;
/// a PR point is emitted per distinct score (tied scores cannot be separated
/// by any threshold, so they move the operating point together).
pub fn average_precision(
    scored_flags: &[(f64, bool)],
    total_gts: usize,
    interp: ApInterp,
) -> PRCurve {
    if total_gts == 0 {
        // Nothing to find: perfect if nothing was claimed, zero otherwise.
        let ap = if scored_flags.is_empty() { 1.0 } else { 0.0 };
        return PRCurve { points: Vec::new(), ap };
    }
    let mut order: Vec<usize> = (0..scored_flags.len()).collect();
    order.sort_by(|&a, &b| scored_flags[b].0.partial_cmp(&scored_flags[a].0).unwrap());
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (pos, &i) in order.iter().enumerate() {
        let (score, is_tp) = scored_flags[i];
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let next_same = order
            .get(pos + 1)
            .map_or(false, |&j| scored_flags[j].0 == score);
        if !next_same {
            points.push(PrPoint {
                threshold: score,
                recall: tp as f64 / total_gts as f64,
                precision: tp as f64 / (tp + fp) as f64,
            });
        }
    }
    let ap = area_under_envelope(&points, interp);
    PRCurve { points, ap }
}

fn area_under_envelope(points: &[PrPoint], interp: ApInterp) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    // Monotone envelope: precision at index k becomes max over j >= k.
    let mut env: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    match interp {
        ApInterp::AllPoints => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (k, p) in points.iter().enumerate() {
                ap += (p.recall - prev_r) * env[k];
                prev_r = p.recall;
            }
            ap
        }
        ApInterp::Points101 => {
            let mut acc = 0.0;
            for i in 0..101 {
                let r = i as f64 / 100.0;
                // Envelope precision at the first point with recall >= r.
                let p = points
                    .iter()
                    .position(|pt| pt.recall >= r - 1e-12)
                    .map_or(0.0, |k| env[k]);
                acc += p;
            }
            acc / 101.0
        }
    }
}

/// The ten COCO IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds_50_95() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Pools per-image matches for one class at one IoU threshold and computes
/// the AP (plus the pooled flags for curve export).
pub fn class_ap(
    images: &[(Vec<Detection>, Vec<GtBox>)],
    class_id: usize,
    iou_thresh: f64,
    interp: ApInterp,
) -> PRCurve {
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    let mut total_gts = 0usize;
    for (dets, gts) in images {
        let cls_dets: Vec<Detection> = dets
            .iter()
            .copied()
            .filter(|d| d.class_id == class_id)
            .collect();
        let cls_gts: Vec<GtBox> = gts
            .iter()
            .copied()
            .filter(|g| g.class_id == class_id)
            .collect();
        total_gts += cls_gts.len();
        let (_, flags) = match_detections(&cls_dets, &cls_gts, iou_thresh);
        pooled.extend(cls_dets.iter().zip(&flags).map(|(d, &f)| (d.score, f)));
    }
    average_precision(&pooled, total_gts, interp)
}

/// Dataset-level summary across classes and IoU thresholds.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    /// Mean over classes of AP at IoU 0.5 (Eq.-(10)-style mean AP).
    pub ap50: f64,
    /// Mean over classes and the ten thresholds 0.50..0.95.
    pub ap50_95: f64,
    /// Per-class AP at IoU 0.5, ordered by class id.
    pub per_class_ap50: Vec<(usize, f64)>,
    /// Precision and recall at the score threshold maximizing pooled F1
    /// (IoU 0.5), and that threshold.
    pub precision: f64,
    pub recall: f64,
    pub best_f1_threshold: f64,
}

/// Evaluates a whole dataset: mAP over the classes present in the ground
/// truth (detections for absent classes count against nothing and score 0
/// only if a class appears with ground truth).
pub fn evaluate_dataset(images: &[(Vec<Detection>, Vec<GtBox>)], interp: ApInterp) -> EvalSummary {
    let mut classes: Vec<usize> = images
        .iter()
        .flat_map(|(_, gts)| gts.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class_ap50 = Vec::new();
    let mut sum50 = 0.0;
    let mut sum50_95 = 0.0;
    for &cls in &classes {
        let c50 = class_ap(images, cls, 0.5, interp);
        per_class_ap50.push((cls, c50.ap));
        sum50 += c50.ap;
        let mut acc = 0.0;
        for t in iou_thresholds_50_95() {
            acc += class_ap(images, cls, t, interp).ap;
        }
        sum50_95 += acc / 10.0;
    }
    let n = classes.len().max(1) as f64;
    let (p, r, thresh) = best_f1_operating_point(images);
    EvalSummary {
        ap50: if classes.is_empty() { 1.0 } else { sum50 / n },
        ap50_95: if classes.is_empty() { 1.0 } else { sum50_95 / n },
        per_class_ap50,
        precision: p,
        recall: r,
        best_f1_threshold: thresh,
    }
}

/// Sweeps score thresholds (pooled over classes, IoU 0.5) and returns
/// (precision, recall, threshold) at the best F1.
fn best_f1_operating_point(images: &[(Vec<Detection>, Vec<GtBox>)]) -> (f64, f64, f64) {
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    let mut total_gts = 0usize;
    for (dets, gts) in images {
        total_gts += gts.len();
        let (_, flags) = match_detections(dets, gts, 0.5);
        pooled.extend(dets.iter().zip(&flags).map(|(d, &f)| (d.score, f)));
    }
    if pooled.is_empty() {
        let r = if total_gts == 0 { 1.0 } else { 0.0 };
        return (1.0, r, 1.0);
    }
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut best = (1.0, 0.0, pooled[0].0, -1.0); // (p, r, thresh, f1)
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (pos, &(score, is_tp)) in pooled.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let next_same = pooled.get(pos + 1).map_or(false, |n| n.0 == score);
        if next_same {
            continue;
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = if total_gts == 0 {
            1.0
        } else {
            tp as f64 / total_gts as f64
        };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f1 > best.3 {
            best = (p, r, score, f1);
        }
    }
    (best.0, best.1, best.2)
}

/// Curve CSV `threshold,precision,recall`, one line per point plus header.
pub fn curve_to_csv(curve: &PRCurve) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        out.push_str(&format!(
            "{:.6},{:.6},{:.6}\n",
            p.threshold, p.precision, p.recall
        ));
    }
    out
}

/// Flat `key=value` summary text.
pub fn summary_to_text(s: &EvalSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!("ap50={:.6}\n", s.ap50));
    out.push_str(&format!("ap50_95={:.6}\n", s.ap50_95));
    out.push_str(&format!("precision={:.6}\n", s.precision));
    out.push_str(&format!("recall={:.6}\n", s.recall));
    out.push_str(&format!("best_f1_threshold={:.6}\n", s.best_f1_threshold));
    for (cls, ap) in &s.per_class_ap50 {
        out.push_str(&format!("ap50_class_{}={:.6}\n", cls, ap));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: usize) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2),
            score,
            class_id,
        }
    }

    fn gt(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> GtBox {
        GtBox {
            class_id,
            bbox: BBox::new(x1, y1, x2, y2),
        }
    }

    #[test]
    fn perfect_detector_counts() {
        let gts = vec![gt(0.0, 0.0, 2.0, 2.0, 0), gt(5.0, 5.0, 7.0, 7.0, 0)];
        let dets = vec![
            det(0.0, 0.0, 2.0, 2.0, 0.9, 0),
            det(5.0, 5.0, 7.0, 7.0, 0.8, 0),
        ];
        let (c, flags) = match_detections(&dets, &gts, 0.5);
        assert_eq!(c, EvalCounts { tp: 2, fp: 0, fn_: 0 });
        assert_eq!(flags, vec![true, true]);
    }

    #[test]
    fn no_detections_all_missed() {
        let gts = vec![gt(0.0, 0.0, 2.0, 2.0, 0)];
        let (c, flags) = match_detections(&[], &gts, 0.5);
        assert_eq!(c, EvalCounts { tp: 0, fp: 0, fn_: 1 });
        assert!(flags.is_empty());
        let (p, r) = precision_recall(c);
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn crafted_three_det_two_gt_case() {
        // Hand-worked: d0 (score .9) overlaps g0 well -> TP. d1 (.8) overlaps
        // g0 too, but g0 is taken and its IoU with g1 is below threshold ->
        // FP. d2 (.7) matches g1 -> TP.
        let gts = vec![gt(0.0, 0.0, 4.0, 4.0, 0), gt(10.0, 10.0, 14.0, 14.0, 0)];
        let dets = vec![
            det(0.0, 0.0, 4.0, 4.2, 0.9, 0),
            det(0.5, 0.5, 4.0, 4.0, 0.8, 0),
            det(10.0, 10.0, 14.0, 13.5, 0.7, 0),
        ];
        let (c, flags) = match_detections(&dets, &gts, 0.5);
        assert_eq!(c, EvalCounts { tp: 2, fp: 1, fn_: 0 });
        assert_eq!(flags, vec![true, false, true]);
        let (p, r) = precision_recall(c);
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn precision_recall_arithmetic() {
        let (p, _) = precision_recall(EvalCounts { tp: 9, fp: 1, fn_: 0 });
        assert!((p - 0.9).abs() < 1e-12);
        let (_, r) = precision_recall(EvalCounts { tp: 9, fp: 0, fn_: 3 });
        assert!((r - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ap_perfect_ranking_is_one() {
        // All TPs ahead of any FP, full recall.
        let flags = vec![(0.9, true), (0.8, true), (0.7, true), (0.1, false)];
        let c = average_precision(&flags, 3, ApInterp::AllPoints);
        assert_eq!(c.ap, 1.0);
    }

    #[test]
    fn ap_all_false_positives_is_zero() {
        let flags = vec![(0.9, false), (0.8, false)];
        let c = average_precision(&flags, 2, ApInterp::AllPoints);
        assert_eq!(c.ap, 0.0);
    }

    #[test]
    fn ap_degenerate_gt_rules() {
        assert_eq!(average_precision(&[], 0, ApInterp::AllPoints).ap, 1.0);
        assert_eq!(
            average_precision(&[(0.5, false)], 0, ApInterp::AllPoints).ap,
            0.0
        );
        assert_eq!(average_precision(&[], 3, ApInterp::AllPoints).ap, 0.0);
    }

    #[test]
    fn ap_crafted_five_detections() {
        // Ranking TP, FP, TP, FP, TP against 3 gts.
        // Points: (1/3, 1), (1/3, 1/2), (2/3, 2/3), (2/3, 1/2), (1, 3/5).
        // Envelope: (1/3)->1, (2/3)->2/3, 1->3/5.
        // AP = 1/3*1 + 1/3*2/3 + 1/3*3/5 = 0.7555...
        let flags = vec![
            (0.9, true),
            (0.8, false),
            (0.7, true),
            (0.6, false),
            (0.5, true),
        ];
        let c = average_precision(&flags, 3, ApInterp::AllPoints);
        let expect = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        assert!((c.ap - expect).abs() < 1e-12, "got {}", c.ap);
        // Recall nondecreasing along the curve.
        for w in c.points.windows(2) {
            assert!(w[1].recall >= w[0].recall);
        }
    }

    #[test]
    fn tied_scores_move_together() {
        // Two dets with an identical score form a single threshold point.
        let flags = vec![(0.5, true), (0.5, false)];
        let c = average_precision(&flags, 1, ApInterp::AllPoints);
        assert_eq!(c.points.len(), 1);
        assert!((c.ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_never_raises_ap() {
        let base = vec![(0.9, true), (0.6, true)];
        let ap0 = average_precision(&base, 2, ApInterp::AllPoints).ap;
        // A duplicate of an already-matched gt is an FP wherever it lands.
        for dup_score in [0.95, 0.75, 0.5] {
            let mut with_dup = base.clone();
            with_dup.push((dup_score, false));
            let ap1 = average_precision(&with_dup, 2, ApInterp::AllPoints).ap;
            assert!(ap1 <= ap0 + 1e-15, "dup at {} raised AP", dup_score);
        }
    }

    #[test]
    fn single_class_map_equals_class_ap() {
        let images = vec![(
            vec![det(0.0, 0.0, 2.0, 2.0, 0.9, 0)],
            vec![gt(0.0, 0.0, 2.0, 2.0, 0)],
        )];
        let s = evaluate_dataset(&images, ApInterp::AllPoints);
        let c = class_ap(&images, 0, 0.5, ApInterp::AllPoints);
        assert_eq!(s.ap50, c.ap);
        assert_eq!(s.ap50, 1.0);
        assert_eq!(s.ap50_95, 1.0);
    }

    #[test]
    fn two_class_map_averages() {
        let images = vec![(
            vec![
                det(0.0, 0.0, 2.0, 2.0, 0.9, 0),
                det(10.0, 10.0, 12.0, 12.0, 0.8, 1),
                det(20.0, 20.0, 22.0, 22.0, 0.7, 1), // FP
            ],
            vec![gt(0.0, 0.0, 2.0, 2.0, 0), gt(10.0, 10.0, 12.0, 12.0, 1)],
        )];
        let s = evaluate_dataset(&images, ApInterp::AllPoints);
        let c0 = class_ap(&images, 0, 0.5, ApInterp::AllPoints).ap;
        let c1 = class_ap(&images, 1, 0.5, ApInterp::AllPoints).ap;
        assert!((s.ap50 - (c0 + c1) / 2.0).abs() < 1e-12);
        assert_eq!(c0, 1.0);
        assert_eq!(c1, 1.0); // the FP ranks below the TP
    }

    #[test]
    fn ap50_at_least_ap50_95() {
        // Boxes that match loosely: pass at 0.5 but fail at strict IoUs.
        let images = vec![(
            vec![det(0.0, 0.0, 2.0, 1.7, 0.9, 0)],
            vec![gt(0.0, 0.0, 2.0, 2.0, 0)],
        )];
        let s = evaluate_dataset(&images, ApInterp::AllPoints);
        assert!(s.ap50 >= s.ap50_95);
        assert!(s.ap50_95 < 1.0);
    }
}
