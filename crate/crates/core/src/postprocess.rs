//! Decoding raw head outputs into detections, plus the two output paths:
//! classic greedy NMS (for the one-to-many branch and baselines) and the
//! NMS-free top-k path (one-to-one branch).

use crate::tensor::{sigmoid, softplus, Tensor4};

/// Axis-aligned box in absolute pixels, corner format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn clamp(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// Intersection-over-union of two boxes, in [0, 1]. Disjoint boxes give 0,
/// identical boxes 1.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One scored box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// Greedy non-maximum suppression, the five-step procedure: sort by score
/// descending, keep the best, suppress every remaining box whose IoU with it
/// exceeds the threshold, repeat on what is left. With `class_aware` set,
/// suppression only applies between boxes of the same class.
///
/// Output is sorted by descending score; ties break toward the earlier input
/// index so results are deterministic.
pub fn nms(dets: &[Detection], iou_thresh: f64, class_aware: bool) -> Vec<Detection> {
    assert!(
        iou_thresh > 0.0 && iou_thresh < 1.0,
        "nms iou threshold must lie in (0,1)"
    );
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // Step 1: sort by confidence, descending. Stable sort keeps index order
    // for equal scores.
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        // Step 2: highest-scoring remaining box is kept.
        keep.push(dets[i]);
        // Steps 3-4: suppress overlapping boxes; step 5 is the outer loop.
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            if class_aware && dets[j].class_id != dets[i].class_id {
                continue;
            }
            if iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Raw outputs of one head scale for a whole batch.
#[derive(Debug, Clone)]
pub struct ScaleOutput {
    pub stride: usize,
    /// (n, num_classes, h_s, w_s) raw logits.
    pub cls_logits: Tensor4,
    /// (n, 4, h_s, w_s) raw box regressions (pre-softplus ltrb).
    pub box_raw: Tensor4,
}

/// Grid-cell center of anchor (ix, iy) at the given stride, input pixels.
pub fn anchor_point(ix: usize, iy: usize, stride: usize) -> (f64, f64) {
    (
        (ix as f64 + 0.5) * stride as f64,
        (iy as f64 + 0.5) * stride as f64,
    )
}

/// ltrb distances from raw regressions: stride * softplus(raw), guaranteeing
/// positive extent.
pub fn decode_ltrb(raw: [f64; 4], stride: usize) -> [f64; 4] {
    let s = stride as f64;
    [
        s * softplus(raw[0]),
        s * softplus(raw[1]),
        s * softplus(raw[2]),
        s * softplus(raw[3]),
    ]
}

/// Decoded (unclamped) box around an anchor point.
pub fn decode_box(ax: f64, ay: f64, raw: [f64; 4], stride: usize) -> BBox {
    let [l, t, r, b] = decode_ltrb(raw, stride);
    BBox::new(ax - l, ay - t, ax + r, ay + b)
}

/// All candidate detections of image `n` across the given scales, one entry
/// per (anchor, class), unfiltered and unclamped. Anchor order is scale-major
/// then row-major, which every consumer relies on for determinism.
pub fn decode_candidates(scales: &[ScaleOutput], n: usize) -> Vec<Detection> {
    let mut out = Vec::new();
    for sc in scales {
        let (_, nc, h, w) = sc.cls_logits.shape().dims();
        for iy in 0..h {
            for ix in 0..w {
                let (ax, ay) = anchor_point(ix, iy, sc.stride);
                let raw = [
                    sc.box_raw.at(n, 0, iy, ix),
                    sc.box_raw.at(n, 1, iy, ix),
                    sc.box_raw.at(n, 2, iy, ix),
                    sc.box_raw.at(n, 3, iy, ix),
                ];
                let bbox = decode_box(ax, ay, raw, sc.stride);
                for cls in 0..nc {
                    out.push(Detection {
                        bbox,
                        score: sigmoid(sc.cls_logits.at(n, cls, iy, ix)),
                        class_id: cls,
                    });
                }
            }
        }
    }
    out
}

/// NMS-free decode of the one-to-one branch: sigmoid scores, decode boxes,
/// keep everything at or above `score_thresh`, truncate to the `max_dets`
/// best by score. No suppression of any kind.
pub fn decode_nms_free(
    scales: &[ScaleOutput],
    n: usize,
    score_thresh: f64,
    max_dets: usize,
    img_w: f64,
    img_h: f64,
) -> Vec<Detection> {
    let mut dets: Vec<Detection> = decode_candidates(scales, n)
        .into_iter()
        .filter(|d| d.score >= score_thresh)
        .map(|d| Detection {
            bbox: d.bbox.clamp(img_w, img_h),
            ..d
        })
        .collect();
    // Stable: ties keep anchor order.
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    dets.truncate(max_dets);
    dets
}

/// Classic path: threshold, clamp, then greedy NMS, then truncate.
#[allow(clippy::too_many_arguments)]
pub fn decode_with_nms(
    scales: &[ScaleOutput],
    n: usize,
    score_thresh: f64,
    iou_thresh: f64,
    class_aware: bool,
    max_dets: usize,
    img_w: f64,
    img_h: f64,
) -> Vec<Detection> {
    let mut dets: Vec<Detection> = decode_candidates(scales, n)
        .into_iter()
        .filter(|d| d.score >= score_thresh)
        .map(|d| Detection {
            bbox: d.bbox.clamp(img_w, img_h),
            ..d
        })
        .collect();
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut kept = nms(&dets, iou_thresh, class_aware);
    kept.truncate(max_dets);
    kept
}

/// CSV rows `class,score,x1,y1,x2,y2`, one detection per line, no header.
pub fn detections_to_csv(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&format!(
            "{},{:.6},{:.3},{:.3},{:.3},{:.3}\n",
            d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
        ));
    }
    out
}

pub fn detections_from_csv(text: &str) -> Result<Vec<Detection>, String> {
    let mut dets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(format!(
                "line {}: expected 6 comma-separated fields, got {}",
                lineno + 1,
                fields.len()
            ));
        }
        let parse = |s: &str| -> Result<f64, String> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("line {}: {}", lineno + 1, e))
        };
        dets.push(Detection {
            class_id: fields[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| format!("line {}: {}", lineno + 1, e))?,
            score: parse(fields[1])?,
            bbox: BBox::new(
                parse(fields[2])?,
                parse(fields[3])?,
                parse(fields[4])?,
                parse(fields[5])?,
            ),
        });
    }
    Ok(dets)
}

/// YOLO-txt style normalized output: `class cx cy w h score` per line.
pub fn detections_to_yolo_txt(dets: &[Detection], img_w: f64, img_h: f64) -> String {
    let mut out = String::new();
    for d in dets {
        let (cx, cy) = d.bbox.center();
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            d.class_id,
            cx / img_w,
            cy / img_h,
            (d.bbox.x2 - d.bbox.x1) / img_w,
            (d.bbox.y2 - d.bbox.y1) / img_h,
            d.score
        ));
    }
    out
}
