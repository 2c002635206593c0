use super::*;
use crate::backbone::BackboneConfig;
use crate::data::gen_shapes;
use crate::schedule::make_schedule;
use crate::testutil::{random_backbone, rng, tiny_config};

fn setup(seed: u64) -> (Backbone, FeedbackState) {
    let mut bb = random_backbone(tiny_config(), seed);
    bb.set_trainable(false);
    let fs = FeedbackState::new(&bb, LoopRange::new(1, 2, bb.n_blocks()).unwrap(), &mut rng(seed + 1)).unwrap();
    (bb, fs)
}

fn randomize(fs: &mut FeedbackState, seed: u64) {
    let mut r = rng(seed);
    for (_, p) in fs.named_params_mut() {
        let noise = Tensor::randn(p.shape(), 0.2, &mut r);
        for (v, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

#[test]
fn zero_scales_reproduce_backbone_bit_exactly() {
    let (bb, mut fs) = setup(1);
    // nonzero gates: only the zero scales keep the feedback out
    randomize(&mut fs, 2);
    fs.scales = Tensor::zeros(&[2]).into_param();
    let x = Tensor::randn(&bb.config.image_shape(2), 1.0, &mut rng(3));
    let t = [60.0, 20.0];
    let (base, _) = bb.forward(&x, &t, &[0, 2], false).unwrap();
    let (ilf, count) = ilf_forward(&bb, &fs, &x, &t, &t, &[0, 2]).unwrap();
    assert_eq!(ilf.data(), base.data());
    assert_eq!(count, 4 + 2 + 1);
    assert_eq!(count, fs.cost(4));
}

#[test]
fn t_post_changes_output_and_must_not_exceed_t() {
    let (bb, fs) = setup(4);
    let x = Tensor::randn(&bb.config.image_shape(1), 1.0, &mut rng(5));
    let (a, _) = ilf_forward(&bb, &fs, &x, &[60.0], &[60.0], &[1]).unwrap();
    let (b, _) = ilf_forward(&bb, &fs, &x, &[60.0], &[40.0], &[1]).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
    assert!(ilf_forward(&bb, &fs, &x, &[60.0], &[61.0], &[1]).is_err());
    assert!(ilf_forward(&bb, &fs, &x, &[60.0], &[50.0, 50.0], &[1]).is_err());
}

#[test]
fn cost_counts_every_loop_size() {
    let bb = random_backbone(tiny_config(), 6);
    let x = Tensor::randn(&bb.config.image_shape(1), 1.0, &mut rng(7));
    for b in 0..4 {
        for e in b..4 {
            let fs = FeedbackState::new(&bb, LoopRange { start: b, end: e }, &mut rng(8)).unwrap();
            let (_, count) = ilf_forward(&bb, &fs, &x, &[50.0], &[40.0], &[0]).unwrap();
            assert_eq!(count, 4 + (e - b + 1) + 1, "loop ({b}, {e})");
        }
    }
    assert!(FeedbackState::new(&bb, LoopRange { start: 2, end: 4 }, &mut rng(8)).is_err());
}

#[test]
fn injection_is_affine_in_each_scale_with_identity_loop() {
    let mut bb = random_backbone(tiny_config(), 9);
    let d = bb.config.hidden_dim;
    for i in 1..=2 {
        bb.blocks[i] = DiTBlock::new(d, bb.config.n_heads, &mut rng(10 + i as u64));
    }
    let mut fs = FeedbackState::new(&bb, LoopRange::new(1, 2, 4).unwrap(), &mut rng(12)).unwrap();
    randomize(&mut fs, 13);
    let x = Tensor::randn(&bb.config.image_shape(1), 1.0, &mut rng(14));
    let loop_out = |fs: &FeedbackState| {
        let mut tape = Tape::no_grad();
        let out = ilf_forward_on(&mut tape, &bb, fs, &x, &[70.0], &[50.0], &[2]).unwrap();
        tape.value(out.loop_out).clone()
    };
    for idx in 0..2 {
        let at = |s: f32| {
            let mut f = fs.clone();
            f.scales.data_mut()[idx] = s;
            loop_out(&f)
        };
        let (f0, f1, f2) = (at(0.0), at(1.0), at(2.0));
        for j in 0..f0.numel() {
            let lhs = f2.data()[j] - f0.data()[j];
            let rhs = 2.0 * (f1.data()[j] - f0.data()[j]);
            assert!((lhs - rhs).abs() < 1e-5, "scale {idx} elem {j}: {lhs} vs {rhs}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    // toy-sized: in the 16-wide test model f32 forward noise at h = 1e-3 is
    // comparable to the directional derivative itself
    let cfg = BackboneConfig {
        image_size: 16,
        patch_size: 4,
        hidden_dim: 64,
        n_heads: 4,
        n_blocks: 6,
        n_classes: 8,
        ..tiny_config()
    };
    for seed in 0..3 {
        let mut bb = random_backbone(cfg.clone(), 100 + seed);
        bb.set_trainable(false);
        let mut fs = FeedbackState::new(&bb, LoopRange::new(2, 4, 6).unwrap(), &mut rng(seed)).unwrap();
        randomize(&mut fs, 200 + seed);
        let x = Tensor::randn(&bb.config.image_shape(2), 1.0, &mut rng(300 + seed));
        let probes = probe_feedback_gradients(
            &bb,
            &fs,
            &x,
            &[80.0, 30.0],
            &[40.0, 15.0],
            &[0, 1],
            5,
            1e-3,
            &mut rng(18),
        )
        .unwrap();
        assert_eq!(probes.len(), 5);
        for p in probes {
            assert!(p.rel_err() <= 1e-3, "analytic {} numeric {}", p.analytic, p.numeric);
        }
    }
}

#[test]
fn fresh_state_gradient_reaches_only_scales() {
    let (bb, fs) = setup(19);
    let x = Tensor::randn(&bb.config.image_shape(1), 1.0, &mut rng(20));
    let mut tape = Tape::new();
    let out = ilf_forward_on(&mut tape, &bb, &fs, &x, &[50.0], &[25.0], &[0]).unwrap();
    let loss = tape.sum(out.eps);
    tape.backward(loss).unwrap();
    for (_, p) in bb.named_params() {
        assert!(tape.grad_of(p).is_none());
    }
    let gs = tape.grad_of(&fs.scales).unwrap();
    assert_eq!(gs.len(), 2);
}

fn train_setup() -> (Backbone, NoiseSchedule, Dataset) {
    let cfg = BackboneConfig {
        n_classes: 4,
        ..tiny_config()
    };
    let mut bb = random_backbone(cfg.clone(), 21);
    bb.set_trainable(false);
    let ns = make_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max).unwrap();
    let ds = gen_shapes(3, 8, 4, 8).unwrap();
    (bb, ns, ds)
}

fn hash(bb: &Backbone) -> Vec<u32> {
    bb.named_params()
        .iter()
        .flat_map(|(_, p)| p.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn training_updates_feedback_and_leaves_backbone() {
    let (bb, ns, ds) = train_setup();
    let before = hash(&bb);
    let mut fs = FeedbackState::new(&bb, LoopRange::new(1, 2, 4).unwrap(), &mut rng(22)).unwrap();
    let init = fs.clone();
    let cfg = TrainConfig {
        batch_size: 8,
        lr: 1e-3,
        iterations: 5,
        ..Default::default()
    };
    let mut seen = Vec::new();
    let curve = train(&bb, &mut fs, &ns, &ds, &cfg, &mut rng(23), |step, _| {
        seen.push(step);
        Ok(())
    })
    .unwrap();
    assert_eq!(curve.len(), 5);
    assert_eq!(seen, vec![1, 2, 3, 4, 5]);
    assert_eq!(hash(&bb), before);
    assert!(fs.scales.data().iter().all(|&s| s != 0.0));
    assert_ne!(fs.block.mod_w.data(), init.block.mod_w.data());
    for c in &curve {
        let total = cfg.w_recon * c.recon + cfg.w_distill * c.distill;
        assert!((c.total - total).abs() <= 1e-5 * total.abs().max(1.0));
    }
}

#[test]
fn training_is_deterministic_and_variants_run() {
    let (bb, ns, ds) = train_setup();
    let run = |cfg: &TrainConfig| {
        let mut fs = FeedbackState::new(&bb, LoopRange::new(0, 1, 4).unwrap(), &mut rng(24)).unwrap();
        let curve = train(&bb, &mut fs, &ns, &ds, cfg, &mut rng(25), |_, _| Ok(())).unwrap();
        (curve, fs.scales.data().to_vec())
    };
    let cfg = TrainConfig {
        batch_size: 4,
        iterations: 3,
        ..Default::default()
    };
    assert_eq!(run(&cfg), run(&cfg));
    let same = TrainConfig {
        tpost_mode_training: TrainTPost::Same,
        teacher_steps: 3,
        ..cfg.clone()
    };
    assert!(run(&same).0.iter().all(|c| c.total.is_finite()));
    let empty = TrainConfig { iterations: 0, ..cfg };
    assert!(run(&empty).0.is_empty());
}

#[test]
fn training_rejects_trainable_backbone_and_bad_config() {
    let (mut bb, ns, ds) = train_setup();
    bb.set_trainable(true);
    let mut fs = FeedbackState::new(&bb, LoopRange::new(1, 2, 4).unwrap(), &mut rng(26)).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        iterations: 1,
        ..Default::default()
    };
    assert!(train(&bb, &mut fs, &ns, &ds, &cfg, &mut rng(27), |_, _| Ok(())).is_err());
    bb.set_trainable(false);
    let bad = TrainConfig {
        w_recon: 0.0,
        w_distill: 0.0,
        ..cfg
    };
    assert!(matches!(
        train(&bb, &mut fs, &ns, &ds, &bad, &mut rng(27), |_, _| Ok(())),
        Err(Error::Config { .. })
    ));
}
