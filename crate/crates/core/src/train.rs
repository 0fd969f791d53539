//! Training: SGD with momentum and cosine learning-rate decay over the tape
//! gradients, a deterministic data loop with on-the-fly augmentation,
//! NMS-free evaluation hooks, and the seven-row ablation harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{random_augment, AugmentConfig, Sample};
use crate::eval::{evaluate_dataset, ApInterp, EvalSummary, GtBox};
use crate::loss::{detection_loss, LossBreakdown, LossParams};
use crate::net::{FnYolo, FusionBlockKind, GraphConfig, NeckKind, ParamId};
use crate::postprocess::{decode_nms_free, Detection};
use crate::tensor::{Result, Shape4, Tensor4, TensorError};

/// Everything one training run needs beyond the model and data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossParams,
    pub augment: Option<AugmentConfig>,
    /// Evaluate train-set AP@50 every this many iterations (0 = never).
    pub eval_every: usize,
    /// Stop once an evaluation reaches this AP@50.
    pub target_ap50: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch_size: 4,
            lr: 0.01,
            final_lr: 0.0001,
            momentum: 0.937,
            weight_decay: 0.0,
            seed: 0,
            loss: LossParams::default(),
            augment: Some(AugmentConfig::default()),
            eval_every: 50,
            target_ap50: None,
        }
    }
}

/// Plain SGD with momentum (velocity = mu*velocity + grad) and a cosine
/// schedule from `lr` down to `final_lr` across the configured iterations.
pub struct SgdMomentum {
    lr0: f64,
    lr1: f64,
    momentum: f64,
    weight_decay: f64,
    total: usize,
    velocities: Vec<Option<Vec<f64>>>,
}

impl SgdMomentum {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        SgdMomentum {
            lr0: cfg.lr,
            lr1: cfg.final_lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            total: cfg.iterations.max(1),
            velocities: vec![None; n_params],
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let t = (step as f64 / self.total as f64).min(1.0);
        self.lr1 + 0.5 * (self.lr0 - self.lr1) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn step(&mut self, model: &mut FnYolo, step: usize, grads: &[(ParamId, Vec<f64>)]) {
        let lr = self.lr_at(step);
        for (pid, grad) in grads {
            let value = model.store.value_mut(*pid);
            let v = self.velocities[pid.0]
                .get_or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, g), vel) in value.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
                let g = g + self.weight_decay * *p;
                *vel = self.momentum * *vel + g;
                *p -= lr * *vel;
            }
        }
    }
}

/// One row of the loss log plus optional evaluation points.
#[derive(Debug, Clone)]
pub struct TrainLog {
    /// Formatted per-iteration lines; format is stable so fixed seeds give
    /// bit-identical logs.
    pub lines: Vec<String>,
    pub losses: Vec<f64>,
    /// (iteration, train-set AP@50) at each evaluation point.
    pub ap50_points: Vec<(usize, f64)>,
    /// Iterations actually executed (early stop may cut the run short).
    pub iterations_run: usize,
}

/// Deterministic epoch-shuffled batch index stream.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.pos >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Stacks single-image tensors into one (B,3,h,w) batch.
pub fn stack_batch(images: &[&Tensor4]) -> Result<Tensor4> {
    let s0 = images[0].shape();
    let out_shape = Shape4::new(images.len(), s0.c, s0.h, s0.w);
    let mut data = Vec::with_capacity(out_shape.len());
    for img in images {
        if img.shape() != s0 {
            return Err(TensorError::Config(format!(
                "batch images must share shape: {} vs {}",
                img.shape(),
                s0
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor4::from_vec(out_shape, data)
}

fn gts_in_pixels(sample: &Sample) -> Vec<GtBox> {
    let (_, _, h, w) = sample.image.shape().dims();
    sample
        .gts
        .iter()
        .map(|g| GtBox {
            class_id: g.class_id,
            bbox: g.to_pixels(w as f64, h as f64),
        })
        .collect()
}

/// Runs the model over every sample (NMS-free path) and scores it against
/// the ground truth.
pub fn evaluate_model(
    model: &mut FnYolo,
    samples: &[Sample],
    score_floor: f64,
    max_dets: usize,
) -> Result<EvalSummary> {
    let mut images: Vec<(Vec<Detection>, Vec<GtBox>)> = Vec::with_capacity(samples.len());
    let (h, w) = model.config.input_size;
    for s in samples {
        let scales = model.infer(s.image.clone(), false)?;
        let dets = decode_nms_free(&scales, 0, score_floor, max_dets, w as f64, h as f64);
        images.push((dets, gts_in_pixels(s)));
    }
    Ok(evaluate_dataset(&images, ApInterp::AllPoints))
}

/// Runs one optimization step on a prepared batch; returns the breakdown.
pub fn train_step(
    model: &mut FnYolo,
    opt: &mut SgdMomentum,
    step: usize,
    batch: Tensor4,
    gts: &[Vec<GtBox>],
    loss_params: &LossParams,
) -> Result<LossBreakdown> {
    let trainable = model.store.trainable_ids();
    let (mut sess, heads) = model.run(batch, true, false, true)?;
    let (loss_var, breakdown, _) = detection_loss(&mut sess.tape, &heads, gts, loss_params)?;
    if !breakdown.total.is_finite() {
        return Err(TensorError::NonFinite {
            index: 0,
            value: breakdown.total,
        });
    }
    let grads = sess.tape.backward(loss_var)?;
    let mut updates = Vec::with_capacity(trainable.len());
    for pid in trainable {
        if let Some(var) = sess.bound_var(pid) {
            if let Some(g) = grads.get(var) {
                updates.push((pid, g.to_vec()));
            }
        }
    }
    drop(sess);
    opt.step(model, step, &updates);
    Ok(breakdown)
}

/// Full training loop: deterministic batches, optional augmentation, joint
/// optimization of both heads, periodic train-set AP@50 and optional early
/// stop at a target.
pub fn train(model: &mut FnYolo, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainLog> {
    assert!(cfg.batch_size >= 1, "batch size must be at least 1");
    assert!(!samples.is_empty(), "training needs at least one sample");
    let mut opt = SgdMomentum::new(cfg, model.store.len());
    let mut sampler = BatchSampler::new(samples.len(), cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut log = TrainLog {
        lines: Vec::new(),
        losses: Vec::new(),
        ap50_points: Vec::new(),
        iterations_run: 0,
    };
    for step in 0..cfg.iterations {
        let idxs = sampler.next_batch(cfg.batch_size);
        let mut batch_samples: Vec<Sample> = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let s = match &cfg.augment {
                Some(acfg) => random_augment(&samples[i], acfg, &mut aug_rng),
                None => samples[i].clone(),
            };
            batch_samples.push(s);
        }
        let images: Vec<&Tensor4> = batch_samples.iter().map(|s| &s.image).collect();
        let batch = stack_batch(&images)?;
        let gts: Vec<Vec<GtBox>> = batch_samples.iter().map(gts_in_pixels).collect();
        let breakdown = train_step(model, &mut opt, step, batch, &gts, &cfg.loss)?;
        log.losses.push(breakdown.total);
        log.lines.push(format!(
            "iter={} loss={:.6e} cls_o2m={:.6e} box_o2m={:.6e} cls_o2o={:.6e} box_o2o={:.6e} pos={}/{} lr={:.6e}",
            step,
            breakdown.total,
            breakdown.cls_o2m,
            breakdown.box_o2m,
            breakdown.cls_o2o,
            breakdown.box_o2o,
            breakdown.num_pos_o2m,
            breakdown.num_pos_o2o,
            opt.lr_at(step)
        ));
        log.iterations_run = step + 1;
        let eval_due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if eval_due {
            let summary = evaluate_model(model, samples, 0.001, 300)?;
            log.ap50_points.push((step + 1, summary.ap50));
            log.lines
                .push(format!("eval iter={} train_ap50={:.6}", step + 1, summary.ap50));
            if let Some(target) = cfg.target_ap50 {
                if summary.ap50 >= target {
                    log.lines.push(format!(
                        "early_stop iter={} ap50={:.6} target={:.6}",
                        step + 1,
                        summary.ap50,
                        target
                    ));
                    break;
                }
            }
        }
    }
    Ok(log)
}

// --- ablation harness -------------------------------------------------------

/// One evaluated configuration.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub iterations: usize,
    pub final_loss: f64,
    pub ap50: f64,
    pub ap50_95: f64,
    pub finite: bool,
}

/// The seven build-up rows: backbone-only through the full model, plus the
/// weighted-fusion variant. Each entry derives from `base` so desk-scale
/// sizing carries over.
pub fn ablation_configs(base: &GraphConfig) -> Vec<(String, GraphConfig)> {
    let mut rows = Vec::new();
    let mut cfg = base.clone();
    cfg.use_sppf = false;
    cfg.use_psa = false;
    cfg.use_p2 = false;
    cfg.neck = NeckKind::Panet;
    cfg.fusion_block = FusionBlockKind::Plain;
    rows.push(("fasternet".to_string(), cfg.clone()));
    cfg.use_sppf = true;
    rows.push(("fasternet+sppf".to_string(), cfg.clone()));
    cfg.use_psa = true;
    rows.push(("fasternet+sppf+psa".to_string(), cfg.clone()));
    cfg.use_p2 = true;
    rows.push(("fasternet+sppf+psa+p2".to_string(), cfg.clone()));
    cfg.neck = NeckKind::BifpnConcat;
    rows.push(("fasternet+sppf+psa+p2+bifpn".to_string(), cfg.clone()));
    cfg.fusion_block = FusionBlockKind::Csp;
    rows.push(("fasternet+sppf+psa+p2+bifpn+csp".to_string(), cfg.clone()));
    cfg.neck = NeckKind::BifpnWeighted;
    rows.push(("fasternet+sppf+psa+p2+csp+weighted-bifpn".to_string(), cfg));
    rows
}

/// Builds, trains, and evaluates every ablation configuration.
pub fn run_ablation(
    base: &GraphConfig,
    samples: &[Sample],
    iterations: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, mut cfg) in ablation_configs(base) {
        cfg.init_seed = seed;
        let mut model = FnYolo::build(cfg)?;
        let params = model.store.num_trainable_scalars() as u64;
        let flops = model.cost_report().total_flops();
        let tcfg = TrainConfig {
            iterations,
            batch_size: 2,
            seed,
            eval_every: 0,
            augment: None,
            ..TrainConfig::default()
        };
        let (final_loss, finite) = match train(&mut model, samples, &tcfg) {
            Ok(log) => {
                let last = log.losses.last().copied().unwrap_or(f64::NAN);
                (last, last.is_finite())
            }
            Err(TensorError::NonFinite { value, .. }) => (value, false),
            Err(e) => return Err(e),
        };
        let (ap50, ap50_95) = if finite {
            let summary = evaluate_model(&mut model, samples, 0.001, 300)?;
            (summary.ap50, summary.ap50_95)
        } else {
            (0.0, 0.0)
        };
        rows.push(AblationRow {
            name,
            params,
            flops,
            iterations,
            final_loss,
            ap50,
            ap50_95,
            finite,
        });
    }
    Ok(rows)
}

/// CSV: name,params,flops,iterations,final_loss,ap50,ap50_95,finite.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("name,params,flops,iterations,final_loss,ap50,ap50_95,finite\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.name, r.params, r.flops, r.iterations, r.final_loss, r.ap50, r.ap50_95, r.finite
        ));
    }
    out
}
