use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::train::ablation_configs;

fn desk() -> GraphConfig {
    GraphConfig::default()
}

fn tiny() -> GraphConfig {
    GraphConfig {
        stage_widths: [8, 16, 32, 64],
        stage_depths: [1, 1, 1, 1],
        head_channels: 16,
        input_size: (32, 32),
        ..GraphConfig::default()
    }
}

fn rand_image(seed: u64, n: usize, hw: (usize, usize)) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = crate::tensor::Shape4::new(n, 3, hw.0, hw.1);
    let data = (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

#[test]
fn desk_forward_yields_four_scales_and_340_anchors() {
    let mut model = FnYolo::build(desk()).unwrap();
    assert_eq!(model.anchor_count(), 340); // 16^2 + 8^2 + 4^2 + 2^2
    let x = rand_image(1, 1, (64, 64));
    let scales = model.infer(x, false).unwrap();
    assert_eq!(scales.len(), 4);
    let spatial: Vec<(usize, usize)> = scales
        .iter()
        .map(|s| s.cls_logits.shape().spatial())
        .collect();
    assert_eq!(spatial, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    for s in &scales {
        assert_eq!(s.cls_logits.shape().c, 1);
        assert_eq!(s.box_raw.shape().c, 4);
    }
    let strides: Vec<usize> = scales.iter().map(|s| s.stride).collect();
    assert_eq!(strides, vec![4, 8, 16, 32]);
}

#[test]
fn three_scale_variant_drops_p2() {
    let mut cfg = tiny();
    cfg.use_p2 = false;
    let mut model = FnYolo::build(cfg).unwrap();
    let scales = model.infer(rand_image(2, 1, (32, 32)), false).unwrap();
    assert_eq!(scales.len(), 3);
    assert_eq!(
        scales.iter().map(|s| s.stride).collect::<Vec<_>>(),
        vec![8, 16, 32]
    );
}

#[test]
fn ledger_params_equal_allocated_scalars_for_every_ablation_config() {
    for (name, cfg) in ablation_configs(&tiny()) {
        let (report, scalars) = graph_cost(&cfg).unwrap();
        assert_eq!(
            report.total_params() as usize,
            scalars,
            "ledger/store mismatch for {}",
            name
        );
    }
    // And the desk default.
    let (report, scalars) = graph_cost(&desk()).unwrap();
    assert_eq!(report.total_params() as usize, scalars);
}

#[test]
fn one_to_many_branch_removal_is_bit_exact_on_inference() {
    let mut model = FnYolo::build(tiny()).unwrap();
    let x = rand_image(3, 1, (32, 32));
    // Forward with both branches vs the inference-only pass.
    let (sess, outs) = model.run(x.clone(), false, false, true).unwrap();
    let with_o2m: Vec<Tensor4> = outs
        .o2o
        .scales
        .iter()
        .flat_map(|s| {
            [
                sess.tape.value(s.cls_logits).clone(),
                sess.tape.value(s.box_raw).clone(),
            ]
        })
        .collect();
    drop(sess);
    let without: Vec<Tensor4> = model
        .infer(x, false)
        .unwrap()
        .into_iter()
        .flat_map(|s| [s.cls_logits, s.box_raw])
        .collect();
    assert_eq!(with_o2m, without);
}

#[test]
fn both_head_branches_have_equal_param_counts() {
    let model = FnYolo::build(tiny()).unwrap();
    let count = |tag: &str| -> usize {
        model
            .store
            .ids()
            .filter(|&id| model.store.is_trainable(id) && model.store.name(id).contains(tag))
            .map(|id| model.store.value(id).shape().len())
            .sum()
    };
    let o2m = count("head.o2m");
    let o2o = count("head.o2o");
    assert!(o2m > 0);
    assert_eq!(o2m, o2o);
}

#[test]
fn bifpn_fusion_nodes_have_at_least_two_inputs() {
    let model = FnYolo::build(desk()).unwrap();
    for (name, arity) in model.neck_arities() {
        assert!(
            *arity >= 2,
            "bifpn node {} has a single input edge",
            name
        );
    }
    // Interior output nodes carry the same-level skip edge: 3 inputs.
    let three: Vec<_> = model
        .neck_arities()
        .iter()
        .filter(|(_, a)| *a == 3)
        .collect();
    assert_eq!(three.len(), 2, "expected skip edges at the two interior levels");
    // The PANet wiring keeps its single-input pass nodes.
    let mut pcfg = desk();
    pcfg.neck = NeckKind::Panet;
    let pmodel = FnYolo::build(pcfg).unwrap();
    assert!(pmodel.neck_arities().iter().any(|(_, a)| *a == 1));
}

#[test]
fn zero_input_stays_finite_in_eval_mode() {
    let mut model = FnYolo::build(tiny()).unwrap();
    let x = Tensor4::zeros(crate::tensor::Shape4::new(1, 3, 32, 32));
    for s in model.infer(x, false).unwrap() {
        s.cls_logits.validate_finite().unwrap();
        s.box_raw.validate_finite().unwrap();
    }
}

#[test]
fn forward_backward_finite_for_100_random_inits() {
    for seed in 0..100u64 {
        let mut cfg = tiny();
        cfg.init_seed = seed;
        let mut model = FnYolo::build(cfg).unwrap();
        let trainable = model.store.trainable_ids();
        let x = rand_image(seed.wrapping_add(100), 1, (32, 32));
        let (mut sess, outs) = model.run(x, true, false, true).unwrap();
        // Reduce every output to one scalar and backprop.
        let mut total = None;
        for branch in [outs.o2m.as_ref().unwrap(), &outs.o2o] {
            for sv in &branch.scales {
                for id in [sv.cls_logits, sv.box_raw] {
                    let s = sess.tape.sum_all(id);
                    total = Some(match total {
                        Some(acc) => sess.tape.add(acc, s).unwrap(),
                        None => s,
                    });
                }
            }
        }
        let loss = total.unwrap();
        assert!(sess.tape.value(loss).scalar_value().is_finite(), "seed {}", seed);
        let grads = sess.tape.backward(loss).unwrap();
        for pid in trainable {
            let var = sess.bound_var(pid).expect("trainable param bound in pass");
            let g = grads.wrt(var);
            assert!(g.iter().all(|v| v.is_finite()), "seed {}", seed);
        }
    }
}

#[test]
fn fused_inference_matches_unfused_within_1e10() {
    let mut model = FnYolo::build(tiny()).unwrap();
    // Push the bn running stats off their init values first.
    let samples = crate::dataset::synth_blobs(2, 32, 2, 9);
    let tcfg = crate::train::TrainConfig {
        iterations: 3,
        batch_size: 2,
        eval_every: 0,
        augment: None,
        ..crate::train::TrainConfig::default()
    };
    crate::train::train(&mut model, &samples, &tcfg).unwrap();
    let x = rand_image(4, 1, (32, 32));
    let plain = model.infer(x.clone(), false).unwrap();
    let fused = model.infer(x, true).unwrap();
    for (a, b) in plain.iter().zip(&fused) {
        for (va, vb) in a
            .cls_logits
            .data()
            .iter()
            .chain(a.box_raw.data())
            .zip(b.cls_logits.data().iter().chain(b.box_raw.data()))
        {
            assert!(
                (va - vb).abs() <= 1e-10 * va.abs().max(vb.abs()).max(1.0),
                "{} vs {}",
                va,
                vb
            );
        }
    }
}

#[test]
fn config_text_roundtrip_and_validation() {
    let mut cfg = desk();
    cfg.neck = NeckKind::BifpnWeighted;
    cfg.fusion_block = FusionBlockKind::Plain;
    cfg.pwconv_act = Act::Silu;
    cfg.init_seed = 99;
    let text = cfg.to_text();
    let back = GraphConfig::from_text(&text).unwrap();
    assert_eq!(cfg, back);

    assert!(GraphConfig::from_text("pconv_ratio=0.3\n").is_err()); // non-integer cp
    assert!(GraphConfig::from_text("input_size=50x64\n").is_err());
    assert!(GraphConfig::from_text("bogus_key=1\n").is_err());
    let mut bad = desk();
    bad.stage_widths = [32, 16, 64, 128];
    assert!(bad.validate().is_err()); // widths must be nondecreasing
}

#[test]
fn checkpoint_roundtrip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let path_a = dir.path().join("a.ckpt");
    let path_b = dir.path().join("b.ckpt");
    let model_a = FnYolo::build(tiny()).unwrap();
    model_a.save_checkpoint(&path_a).unwrap();
    // Different init, same structure; load then re-save: files must match
    // byte for byte (f32 -> f64 -> f32 is exact).
    let mut cfg = tiny();
    cfg.init_seed = 1234;
    let mut model_b = FnYolo::build(cfg).unwrap();
    model_b.load_checkpoint(&path_a).unwrap();
    model_b.save_checkpoint(&path_b).unwrap();
    assert_eq!(std::fs::read(&path_a).unwrap(), std::fs::read(&path_b).unwrap());
    // Shape mismatches are rejected.
    let mut other = desk();
    other.init_seed = 5;
    let mut model_c = FnYolo::build(other).unwrap();
    assert!(model_c.load_checkpoint(&path_a).is_err());
}

#[test]
fn training_forward_is_rejected_for_wrong_input_size() {
    let mut model = FnYolo::build(tiny()).unwrap();
    let x = rand_image(5, 1, (64, 64));
    assert!(model.run(x, true, false, true).is_err());
}
