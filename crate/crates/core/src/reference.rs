//! Slow, independent reference implementations used as test oracles.
//!
//! Everything here is written against the operator definitions directly
//! (plain nested loops, explicit procedural steps) and deliberately shares
//! no code with the production paths in [`crate::tensor::ops`],
//! [`crate::postprocess`] or [`crate::eval`]. The unit and acceptance suites
//! compare the fast implementations against these.

use crate::postprocess::{Detection, BBox};
use crate::tensor::{BatchNormParams, ConvWeights, Shape4, Tensor4};

/// Direct six-nested-loop cross-correlation with zero padding, stride and
/// groups. Every output element is an independent scalar accumulation.
pub fn conv2d_loops(x: &Tensor4, w: &ConvWeights) -> Tensor4 {
    let (n, c_in, h, wid) = x.shape().dims();
    let (c_out, c_in_pg, k, _) = w.kernel.shape().dims();
    let s = w.stride;
    let p = w.padding;
    let h_out = (h + 2 * p - k) / s + 1;
    let w_out = (wid + 2 * p - k) / s + 1;
    let c_out_pg = c_out / w.groups;
    assert_eq!(c_in, w.groups * c_in_pg);
    let mut out = Tensor4::zeros(Shape4::new(n, c_out, h_out, w_out));
    for ni in 0..n {
        for co in 0..c_out {
            let group = co / c_out_pg;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = w.bias.as_ref().map_or(0.0, |b| b[co]);
                    for ci_g in 0..c_in_pg {
                        let ci = group * c_in_pg + ci_g;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize * s as isize + ky as isize - p as isize;
                                let ix = ox as isize * s as isize + kx as isize - p as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wid as isize {
                                    acc += x.at(ni, ci, iy as usize, ix as usize)
                                        * w.kernel.at(co, ci_g, ky, kx);
                                }
                            }
                        }
                    }
                    out.set(ni, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Batch norm by the written-out formula (x - mu) / sqrt(var + eps) * gamma
/// + beta, with explicit loops for the statistics. Does not touch running
/// stats; pass `training` to pick batch vs running statistics.
pub fn batchnorm_loops(x: &Tensor4, p: &BatchNormParams, training: bool) -> Tensor4 {
    let (n, c, h, w) = x.shape().dims();
    let mut out = Tensor4::zeros(x.shape());
    let m = (n * h * w) as f64;
    for ci in 0..c {
        let (mu, var) = if training {
            let mut sum = 0.0;
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        sum += x.at(ni, ci, y, xx);
                    }
                }
            }
            let mu = sum / m;
            let mut var = 0.0;
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let d = x.at(ni, ci, y, xx) - mu;
                        var += d * d;
                    }
                }
            }
            (mu, var / m)
        } else {
            (p.running_mean[ci], p.running_var[ci])
        };
        for ni in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let v = (x.at(ni, ci, y, xx) - mu) / (var + p.eps).sqrt() * p.gamma[ci]
                        + p.beta[ci];
                    out.set(ni, ci, y, xx, v);
                }
            }
        }
    }
    out
}

/// Central finite-difference gradient of a scalar function of a flat vector,
/// step `h` (the gradient checks use 1e-5 at 64-bit).
pub fn finite_diff_grad<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error |a-b| / max(|a|, |b|, 1): relative for large magnitudes,
/// absolute below 1.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest elementwise [`rel_error`] between two gradient buffers.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_error(x, y))
        .fold(0.0, f64::max)
}

/// The five suppression steps executed literally, O(n^2): sort by confidence,
/// take the best remaining, drop everything overlapping it beyond the
/// threshold, repeat. Ties go to the earlier index.
pub fn nms_steps(dets: &[Detection], iou_thresh: f64, class_aware: bool) -> Vec<Detection> {
    fn iou_direct(a: &BBox, b: &BBox) -> f64 {
        let ix1 = if a.x1 > b.x1 { a.x1 } else { b.x1 };
        let iy1 = if a.y1 > b.y1 { a.y1 } else { b.y1 };
        let ix2 = if a.x2 < b.x2 { a.x2 } else { b.x2 };
        let iy2 = if a.y2 < b.y2 { a.y2 } else { b.y2 };
        if ix2 <= ix1 || iy2 <= iy1 {
            return 0.0;
        }
        let inter = (ix2 - ix1) * (iy2 - iy1);
        let area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
        let area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
        inter / (area_a + area_b - inter)
    }
    // Step 1: sort all boxes by confidence, descending.
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    remaining.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        // Step 2: the highest-scoring box is the current best result.
        let best = remaining.remove(0);
        kept.push(dets[best]);
        // Steps 3 and 4: measure overlap against the best box and suppress
        // boxes over the threshold. Step 5: loop.
        remaining.retain(|&j| {
            if class_aware && dets[j].class_id != dets[best].class_id {
                return true;
            }
            iou_direct(&dets[best].bbox, &dets[j].bbox) <= iou_thresh
        });
    }
    kept
}

/// Exhaustive-threshold average precision: for every distinct score taken as
/// a threshold, precision and recall are recomputed from scratch over the
/// kept detections; the area uses max-precision-to-the-right interpolation
/// evaluated pointwise, O(n^2) overall.
pub fn ap_exhaustive(scored_flags: &[(f64, bool)], total_gts: usize) -> f64 {
    if total_gts == 0 {
        return if scored_flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut thresholds: Vec<f64> = scored_flags.iter().map(|&(s, _)| s).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut total = 0usize;
        for &(s, flag) in scored_flags {
            if s >= t {
                total += 1;
                if flag {
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / total_gts as f64, tp as f64 / total as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, _) in &points {
        if r <= prev_recall {
            continue;
        }
        // Interpolated precision: the best precision at any recall >= r.
        let p_interp = points
            .iter()
            .filter(|&&(rr, _)| rr >= r)
            .map(|&(_, pp)| pp)
            .fold(0.0, f64::max);
        ap += (r - prev_recall) * p_interp;
        prev_recall = r;
    }
    ap
}
