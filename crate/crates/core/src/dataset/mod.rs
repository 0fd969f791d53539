//! Dataset handling: YOLO-txt annotations, binary PPM images, deterministic
//! splits, augmentation, and a synthetic blob generator for desk-scale
//! experiments.
//!
//! On-disk layout: `<root>/images/<id>.ppm` with sibling
//! `<root>/labels/<id>.txt`; split manifests are plain text, one id per line.

mod augment;
mod synth;

pub use augment::{augment, random_augment, Augment, AugmentConfig};
pub use synth::synth_blobs;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::postprocess::BBox;
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One annotated object: class id plus a normalized center-format box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruth {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let ok01 = |v: f64| (0.0..=1.0).contains(&v);
        if !ok01(self.cx) || !ok01(self.cy) {
            return Err(format!("center ({}, {}) outside [0,1]", self.cx, self.cy));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(format!("size ({}, {}) outside (0,1]", self.w, self.h));
        }
        let eps = 1e-9;
        if self.cx - self.w / 2.0 < -eps
            || self.cx + self.w / 2.0 > 1.0 + eps
            || self.cy - self.h / 2.0 < -eps
            || self.cy + self.h / 2.0 > 1.0 + eps
        {
            return Err("box extends outside the image".into());
        }
        Ok(())
    }

    /// Corner box in absolute pixels for a (img_w, img_h) image.
    pub fn to_pixels(&self, img_w: f64, img_h: f64) -> BBox {
        BBox::new(
            (self.cx - self.w / 2.0) * img_w,
            (self.cy - self.h / 2.0) * img_h,
            (self.cx + self.w / 2.0) * img_w,
            (self.cy + self.h / 2.0) * img_h,
        )
    }
}

/// One image paired with its annotations.
#[derive(Debug, Clone)]
pub struct Sample {
    /// (1, 3, h, w), values in [0, 1].
    pub image: Tensor4,
    pub gts: Vec<GroundTruth>,
    pub id: String,
}

// --- YOLO txt -------------------------------------------------------------

/// Parses YOLO-txt annotation content: one `class cx cy w h` line per object,
/// whitespace separated. Out-of-range coordinates are parse errors carrying
/// the 1-based line number.
pub fn parse_yolo_txt(text: &str, path: &str) -> Result<Vec<GroundTruth>> {
    let mut gts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|e| err(format!("bad class id: {}", e)))?;
        let mut vals = [0.0f64; 4];
        for (j, v) in vals.iter_mut().enumerate() {
            *v = fields[j + 1]
                .parse()
                .map_err(|e| err(format!("bad coordinate: {}", e)))?;
        }
        let gt = GroundTruth {
            class_id,
            cx: vals[0],
            cy: vals[1],
            w: vals[2],
            h: vals[3],
        };
        gt.validate().map_err(err)?;
        gts.push(gt);
    }
    Ok(gts)
}

pub fn load_yolo_txt(path: &Path) -> Result<Vec<GroundTruth>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_yolo_txt(&text, &path.display().to_string())
}

pub fn format_yolo_txt(gts: &[GroundTruth]) -> String {
    let mut out = String::new();
    for gt in gts {
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            gt.class_id, gt.cx, gt.cy, gt.w, gt.h
        ));
    }
    out
}

pub fn save_yolo_txt(path: &Path, gts: &[GroundTruth]) -> Result<()> {
    fs::write(path, format_yolo_txt(gts)).map_err(|e| io_err(path, e))
}

// --- PPM ------------------------------------------------------------------

/// Writes a (1, 3, h, w) tensor as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, image: &Tensor4) -> Result<()> {
    let (n, c, h, w) = image.shape().dims();
    if n != 1 || c != 3 {
        return Err(DataError::Invalid(format!(
            "ppm wants a (1,3,h,w) tensor, got {}",
            image.shape()
        )));
    }
    let mut buf = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (image.at(0, ch, y, x) * 255.0).round().clamp(0.0, 255.0);
                buf.push(v as u8);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Reads a binary PPM (P6) into a (1, 3, h, w) tensor with values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor4> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    parse_ppm(&bytes, &path.display().to_string())
}

pub fn parse_ppm(bytes: &[u8], path: &str) -> Result<Tensor4> {
    let err = |msg: &str| DataError::Parse {
        path: path.to_string(),
        line: 0,
        msg: msg.to_string(),
    };
    // Header: "P6", width, height, maxval as whitespace-separated tokens with
    // optional '#' comments, then a single whitespace byte before pixel data.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<(usize, usize)> {
        // skip whitespace and comments
        while pos < bytes.len() {
            let b = bytes[pos];
            if b == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (start < pos).then_some((start, pos))
    };
    let (m0, m1) = token(bytes).ok_or_else(|| err("missing magic"))?;
    if &bytes[m0..m1] != b"P6" {
        return Err(err("not a P6 ppm"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let (a, b) = token(bytes).ok_or_else(|| err("truncated header"))?;
        *d = std::str::from_utf8(&bytes[a..b])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad header number"))?;
    }
    let (w, h, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(err("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(err("truncated pixel data"));
    }
    let shape = Shape4::new(1, 3, h, w);
    let mut data = vec![0.0; shape.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = bytes[pos + (y * w + x) * 3 + ch] as f64 / 255.0;
                data[shape.idx(0, ch, y, x)] = v;
            }
        }
    }
    Tensor4::from_vec(shape, data).map_err(|e| DataError::Invalid(e.to_string()))
}

// --- dataset directory ----------------------------------------------------

pub fn images_dir(root: &Path) -> PathBuf {
    root.join("images")
}

pub fn labels_dir(root: &Path) -> PathBuf {
    root.join("labels")
}

pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(images_dir(root)).map_err(|e| io_err(root, e))?;
    fs::create_dir_all(labels_dir(root)).map_err(|e| io_err(root, e))?;
    write_ppm(&images_dir(root).join(format!("{}.ppm", sample.id)), &sample.image)?;
    save_yolo_txt(
        &labels_dir(root).join(format!("{}.txt", sample.id)),
        &sample.gts,
    )
}

pub fn load_sample(root: &Path, id: &str) -> Result<Sample> {
    let image = read_ppm(&images_dir(root).join(format!("{}.ppm", id)))?;
    let label_path = labels_dir(root).join(format!("{}.txt", id));
    let gts = if label_path.exists() {
        load_yolo_txt(&label_path)?
    } else {
        Vec::new()
    };
    Ok(Sample {
        image,
        gts,
        id: id.to_string(),
    })
}

/// All sample ids under `root`, sorted, from the images directory.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let dir = images_dir(root);
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
        let entry = entry.map_err(|e| io_err(&dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix(".ppm") {
            ids.push(stem.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

// --- split ----------------------------------------------------------------

/// Deterministic (train, val, test) partition. Ids are shuffled by the seed,
/// then sized by largest-remainder apportionment so the parts are exhaustive
/// and as close to the ratios as integers allow.
pub fn split(
    ids: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> (Vec<String>, Vec<String>, Vec<String>) {
    let (r0, r1, r2) = ratios;
    assert!(
        r0 >= 0.0 && r1 >= 0.0 && r2 >= 0.0 && r0 + r1 + r2 > 0.0,
        "split ratios must be nonnegative and not all zero"
    );
    let total = r0 + r1 + r2;
    let n = ids.len();
    let raw = [
        n as f64 * r0 / total,
        n as f64 * r1 / total,
        n as f64 * r2 / total,
    ];
    let mut sizes = [raw[0] as usize, raw[1] as usize, raw[2] as usize];
    let mut rem: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, &r)| (i, r - r.floor()))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut assigned: usize = sizes.iter().sum();
    let mut k = 0;
    while assigned < n {
        sizes[rem[k % 3].0] += 1;
        assigned += 1;
        k += 1;
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let val_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    (
        shuffled[..val_start].to_vec(),
        shuffled[val_start..test_start].to_vec(),
        shuffled[test_start..].to_vec(),
    )
}

/// The paper-shaped split ratios (600/200/250 out of 1050).
pub const PAPER_SPLIT: (f64, f64, f64) = (600.0 / 1050.0, 200.0 / 1050.0, 250.0 / 1050.0);
