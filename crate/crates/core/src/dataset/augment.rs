//! The four annotation-preserving augmentations: flips, scaling, translation
//! and crop-and-rescale sub-views. Pixels use nearest-neighbour sampling with
//! black fill; boxes get the exact matching affine transform, are clipped to
//! the frame, and are dropped when less than 20% of their (transformed) area
//! survives the clip.
//!
//! Flips are involutions: pixel mirroring is a pure permutation, and the
//! coordinate map x -> 1-x round-trips exactly whenever coordinates are
//! multiples of 2^-53 (true of generator-produced and pixel-derived boxes).

use rand::Rng;

use super::{GroundTruth, Sample};
use crate::tensor::Tensor4;

/// One concrete augmentation. Parameters are normalized to the image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augment {
    HFlip,
    VFlip,
    /// Zoom about the image center by `f` (> 1 zooms in, < 1 zooms out).
    Scale(f64),
    /// Shift content by (dx, dy), rounded to whole pixels.
    Translate(f64, f64),
    /// Crop the normalized region and rescale it to the full frame.
    Crop { x: f64, y: f64, w: f64, h: f64 },
}

/// Box survives clipping only if it keeps at least this share of its area.
const MIN_BOX_AREA_FRACTION: f64 = 0.2;

/// Applies one augmentation, returning a new sample with the same id.
pub fn augment(s: &Sample, op: &Augment) -> Sample {
    let (_, _, h, w) = s.image.shape().dims();
    let (image, fwd) = match *op {
        Augment::HFlip => (flip_pixels(&s.image, true), BoxMap::flip_x()),
        Augment::VFlip => (flip_pixels(&s.image, false), BoxMap::flip_y()),
        Augment::Scale(f) => {
            assert!(f > 0.0, "scale factor must be positive");
            (scale_pixels(&s.image, f), BoxMap::scale(f))
        }
        Augment::Translate(dx, dy) => {
            let sx = (dx * w as f64).round();
            let sy = (dy * h as f64).round();
            (
                translate_pixels(&s.image, sx as isize, sy as isize),
                BoxMap::translate(sx / w as f64, sy / h as f64),
            )
        }
        Augment::Crop { x, y, w: rw, h: rh } => {
            let x0 = ((x * w as f64).round() as isize).clamp(0, w as isize - 1) as usize;
            let y0 = ((y * h as f64).round() as isize).clamp(0, h as isize - 1) as usize;
            let cw = ((rw * w as f64).round() as usize).clamp(1, w - x0);
            let ch = ((rh * h as f64).round() as usize).clamp(1, h - y0);
            (
                crop_pixels(&s.image, x0, y0, cw, ch),
                BoxMap::crop(
                    x0 as f64 / w as f64,
                    y0 as f64 / h as f64,
                    cw as f64 / w as f64,
                    ch as f64 / h as f64,
                ),
            )
        }
    };
    let gts = s.gts.iter().filter_map(|gt| fwd.apply(gt)).collect();
    Sample {
        image,
        gts,
        id: s.id.clone(),
    }
}

/// Augmentation pipeline probabilities and magnitudes. The paper names the
/// four operations but no magnitudes; these defaults are config knobs.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_scale: f64,
    pub scale_range: (f64, f64),
    pub p_translate: f64,
    pub max_translate: f64,
    pub p_crop: f64,
    pub min_crop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_scale: 0.5,
            scale_range: (0.75, 1.25),
            p_translate: 0.5,
            max_translate: 0.1,
            p_crop: 0.0,
            min_crop: 0.6,
        }
    }
}

/// Samples and applies a random pipeline from `cfg` using the caller's rng.
pub fn random_augment<R: Rng>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut out = s.clone();
    if rng.gen_bool(cfg.p_hflip) {
        out = augment(&out, &Augment::HFlip);
    }
    if rng.gen_bool(cfg.p_vflip) {
        out = augment(&out, &Augment::VFlip);
    }
    if rng.gen_bool(cfg.p_scale) {
        let f = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
        out = augment(&out, &Augment::Scale(f));
    }
    if rng.gen_bool(cfg.p_translate) {
        let dx = rng.gen_range(-cfg.max_translate..=cfg.max_translate);
        let dy = rng.gen_range(-cfg.max_translate..=cfg.max_translate);
        out = augment(&out, &Augment::Translate(dx, dy));
    }
    if rng.gen_bool(cfg.p_crop) {
        let cw = rng.gen_range(cfg.min_crop..=1.0);
        let ch = rng.gen_range(cfg.min_crop..=1.0);
        let x = rng.gen_range(0.0..=1.0 - cw);
        let y = rng.gen_range(0.0..=1.0 - ch);
        out = augment(&out, &Augment::Crop { x, y, w: cw, h: ch });
    }
    out
}

/// Affine map on normalized box coordinates: u' = su*u + tu, v' = sv*v + tv.
struct BoxMap {
    su: f64,
    tu: f64,
    sv: f64,
    tv: f64,
    flip_u: bool,
    flip_v: bool,
}

impl BoxMap {
    fn flip_x() -> Self {
        BoxMap { su: 1.0, tu: 0.0, sv: 1.0, tv: 0.0, flip_u: true, flip_v: false }
    }
    fn flip_y() -> Self {
        BoxMap { su: 1.0, tu: 0.0, sv: 1.0, tv: 0.0, flip_u: false, flip_v: true }
    }
    fn scale(f: f64) -> Self {
        // u' = (u - 0.5) * f + 0.5
        BoxMap { su: f, tu: 0.5 - 0.5 * f, sv: f, tv: 0.5 - 0.5 * f, flip_u: false, flip_v: false }
    }
    fn translate(dx: f64, dy: f64) -> Self {
        BoxMap { su: 1.0, tu: dx, sv: 1.0, tv: dy, flip_u: false, flip_v: false }
    }
    fn crop(rx: f64, ry: f64, rw: f64, rh: f64) -> Self {
        // u' = (u - rx) / rw
        BoxMap { su: 1.0 / rw, tu: -rx / rw, sv: 1.0 / rh, tv: -ry / rh, flip_u: false, flip_v: false }
    }

    fn apply(&self, gt: &GroundTruth) -> Option<GroundTruth> {
        // Flips are applied exactly on the center so the double application
        // is the identity; other maps go through corners and clipping.
        if self.flip_u || self.flip_v {
            return Some(GroundTruth {
                class_id: gt.class_id,
                cx: if self.flip_u { 1.0 - gt.cx } else { gt.cx },
                cy: if self.flip_v { 1.0 - gt.cy } else { gt.cy },
                w: gt.w,
                h: gt.h,
            });
        }
        let x1 = self.su * (gt.cx - gt.w / 2.0) + self.tu;
        let x2 = self.su * (gt.cx + gt.w / 2.0) + self.tu;
        let y1 = self.sv * (gt.cy - gt.h / 2.0) + self.tv;
        let y2 = self.sv * (gt.cy + gt.h / 2.0) + self.tv;
        let area = (x2 - x1) * (y2 - y1);
        let cx1 = x1.clamp(0.0, 1.0);
        let cx2 = x2.clamp(0.0, 1.0);
        let cy1 = y1.clamp(0.0, 1.0);
        let cy2 = y2.clamp(0.0, 1.0);
        let clipped = (cx2 - cx1) * (cy2 - cy1);
        if clipped <= 0.0 || clipped < MIN_BOX_AREA_FRACTION * area {
            return None;
        }
        Some(GroundTruth {
            class_id: gt.class_id,
            cx: (cx1 + cx2) / 2.0,
            cy: (cy1 + cy2) / 2.0,
            w: cx2 - cx1,
            h: cy2 - cy1,
        })
    }
}

fn flip_pixels(img: &Tensor4, horizontal: bool) -> Tensor4 {
    let (n, c, h, w) = img.shape().dims();
    let mut out = Tensor4::zeros(img.shape());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                    out.set(ni, ci, y, x, img.at(ni, ci, sy, sx));
                }
            }
        }
    }
    out
}

fn scale_pixels(img: &Tensor4, f: f64) -> Tensor4 {
    let (n, c, h, w) = img.shape().dims();
    let mut out = Tensor4::zeros(img.shape());
    let (hc, wc) = (h as f64 / 2.0, w as f64 / 2.0);
    for y in 0..h {
        let sy = ((y as f64 + 0.5 - hc) / f + hc).floor();
        for x in 0..w {
            let sx = ((x as f64 + 0.5 - wc) / f + wc).floor();
            if sy < 0.0 || sy >= h as f64 || sx < 0.0 || sx >= w as f64 {
                continue;
            }
            for ni in 0..n {
                for ci in 0..c {
                    out.set(ni, ci, y, x, img.at(ni, ci, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

fn translate_pixels(img: &Tensor4, sx: isize, sy: isize) -> Tensor4 {
    let (n, c, h, w) = img.shape().dims();
    let mut out = Tensor4::zeros(img.shape());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let src_y = y as isize - sy;
                if src_y < 0 || src_y >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let src_x = x as isize - sx;
                    if src_x < 0 || src_x >= w as isize {
                        continue;
                    }
                    out.set(ni, ci, y, x, img.at(ni, ci, src_y as usize, src_x as usize));
                }
            }
        }
    }
    out
}

fn crop_pixels(img: &Tensor4, x0: usize, y0: usize, cw: usize, ch: usize) -> Tensor4 {
    let (n, c, h, w) = img.shape().dims();
    let mut out = Tensor4::zeros(img.shape());
    for y in 0..h {
        let sy = y0 + ((y as f64 + 0.5) * ch as f64 / h as f64).floor() as usize;
        let sy = sy.min(y0 + ch - 1);
        for x in 0..w {
            let sx = x0 + ((x as f64 + 0.5) * cw as f64 / w as f64).floor() as usize;
            let sx = sx.min(x0 + cw - 1);
            for ni in 0..n {
                for ci in 0..c {
                    out.set(ni, ci, y, x, img.at(ni, ci, sy, sx));
                }
            }
        }
    }
    out
}
