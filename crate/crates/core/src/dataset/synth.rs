//! Synthetic blob dataset: bright ellipses on a dark noisy background, with
//! ground-truth boxes that tightly bound the painted pixels. A desk-scale
//! stand-in that lets the whole train/eval pipeline run without any real
//! imagery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GroundTruth, Sample};
use crate::tensor::{Shape4, Tensor4};

/// Painted blob pixels are at least this bright; background stays well below.
pub const BLOB_MIN_BRIGHTNESS: f64 = 0.55;
const BACKGROUND_MAX: f64 = 0.15;

/// Generates `n_images` square samples of side `size` containing between one
/// and `max_objects` non-overlapping bright ellipses each (zero when
/// `max_objects` is zero). Deterministic in `seed`.
pub fn synth_blobs(n_images: usize, size: usize, max_objects: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_images)
        .map(|i| synth_one(&mut rng, i, size, max_objects))
        .collect()
}

fn synth_one<R: Rng>(rng: &mut R, index: usize, size: usize, max_objects: usize) -> Sample {
    let shape = Shape4::new(1, 3, size, size);
    let mut data = vec![0.0; shape.len()];
    let plane = size * size;
    // Dark noisy background, channels share the base level.
    for p in 0..plane {
        let g: f64 = rng.gen_range(0.02..BACKGROUND_MAX);
        for c in 0..3 {
            data[c * plane + p] = g;
        }
    }

    let mut gts: Vec<GroundTruth> = Vec::new();
    if max_objects > 0 {
        let want = rng.gen_range(1..=max_objects);
        let mut placed = 0;
        let mut tries = 0;
        while placed < want && tries < 40 * want {
            tries += 1;
            let a: f64 = rng.gen_range(2.5..(size as f64 / 5.0).max(3.0));
            let b: f64 = rng.gen_range(2.5..(size as f64 / 5.0).max(3.0));
            let cx: f64 = rng.gen_range(a..size as f64 - a);
            let cy: f64 = rng.gen_range(b..size as f64 - b);
            // Skip candidates whose bounding box touches an existing one so
            // the ground truth stays unambiguous.
            let sep = gts.iter().all(|g| {
                let dx = (g.cx * size as f64 - cx).abs();
                let dy = (g.cy * size as f64 - cy).abs();
                dx > (g.w * size as f64 / 2.0 + a + 1.0) || dy > (g.h * size as f64 / 2.0 + b + 1.0)
            });
            if !sep {
                continue;
            }
            let brightness: f64 = rng.gen_range(BLOB_MIN_BRIGHTNESS + 0.1..1.0);
            // Slight per-channel tint keeps the blobs from being pure gray.
            let tint = [
                rng.gen_range(0.9..1.0),
                rng.gen_range(0.9..1.0),
                rng.gen_range(0.9..1.0),
            ];
            let (mut min_x, mut min_y, mut max_x, mut max_y) = (size, size, 0usize, 0usize);
            let mut painted = false;
            for py in 0..size {
                for px in 0..size {
                    let u = (px as f64 + 0.5 - cx) / a;
                    let v = (py as f64 + 0.5 - cy) / b;
                    let d2 = u * u + v * v;
                    if d2 <= 1.0 {
                        // Shaded toward the rim but never below the floor.
                        let val = (brightness * (1.0 - 0.25 * d2)).max(BLOB_MIN_BRIGHTNESS);
                        for c in 0..3 {
                            data[c * plane + py * size + px] = (val * tint[c]).min(1.0);
                        }
                        painted = true;
                        min_x = min_x.min(px);
                        min_y = min_y.min(py);
                        max_x = max_x.max(px);
                        max_y = max_y.max(py);
                    }
                }
            }
            if !painted {
                continue;
            }
            // Tight bounds over the painted pixel extents.
            let x1 = min_x as f64 / size as f64;
            let y1 = min_y as f64 / size as f64;
            let x2 = (max_x + 1) as f64 / size as f64;
            let y2 = (max_y + 1) as f64 / size as f64;
            gts.push(GroundTruth {
                class_id: 0,
                cx: (x1 + x2) / 2.0,
                cy: (y1 + y2) / 2.0,
                w: x2 - x1,
                h: y2 - y1,
            });
            placed += 1;
        }
    }

    Sample {
        image: Tensor4::from_vec(shape, data).unwrap(),
        gts,
        id: format!("blob{:05}", index),
    }
}
