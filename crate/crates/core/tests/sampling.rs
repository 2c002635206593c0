use ilf_core::backbone::{Backbone, BackboneConfig};
use ilf_core::caching::{CacheConfig, CachePreset};
use ilf_core::ilf::FeedbackState;
use ilf_core::numerics::Tensor;
use ilf_core::schedule::{
    make_plan, make_schedule, sample, CostReport, InferencePlan, LoopRange, ModelKind, NoiseSchedule, PlanSpec,
    RatioOrientation, SampleOutput, SampleRequest, SkipPreset, TPostMode,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(n_blocks: usize) -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 2,
        channels: 1,
        hidden_dim: 16,
        n_heads: 2,
        n_blocks,
        n_classes: 3,
        timesteps: 1000,
        ..BackboneConfig::default()
    }
}

/// Fresh blocks are the identity, so perturb everything to get a model whose
/// blocks all matter.
fn perturb(params: Vec<(String, &mut Tensor)>, rng: &mut ChaCha8Rng) {
    for (_, p) in params {
        let noise = Tensor::randn(p.shape(), 0.1, rng);
        for (v, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

struct Fixture {
    backbone: Backbone,
    feedback: FeedbackState,
    schedule: NoiseSchedule,
}

fn fixture(n_blocks: usize, loop_range: (usize, usize)) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut backbone = Backbone::new(config(n_blocks), &mut rng).unwrap();
    perturb(backbone.named_params_mut(), &mut rng);
    backbone.set_trainable(false);
    let lr = LoopRange::new(loop_range.0, loop_range.1, n_blocks).unwrap();
    let mut feedback = FeedbackState::new(&backbone, lr, &mut rng).unwrap();
    perturb(feedback.named_params_mut(), &mut rng);
    Fixture {
        backbone,
        feedback,
        schedule: make_schedule(1000, 1e-4, 0.02).unwrap(),
    }
}

fn plan(f: &Fixture, steps: usize, preset: SkipPreset, tpost_mode: TPostMode) -> InferencePlan {
    make_plan(PlanSpec {
        steps,
        timesteps: 1000,
        tpost_mode,
        preset,
        orientation: RatioOrientation::NOverM,
        loop_range: f.feedback.loop_range,
        n_blocks: f.backbone.n_blocks(),
    })
    .unwrap()
}

fn run(
    f: &Fixture,
    kind: ModelKind,
    plan: &InferencePlan,
    cache: Option<&CacheConfig>,
    seed: u64,
) -> (SampleOutput, CostReport) {
    let classes = [0, 1, 2, 1];
    let req = SampleRequest {
        kind,
        backbone: &f.backbone,
        schedule: &f.schedule,
        plan,
        feedback: (kind == ModelKind::Ilf).then_some(&f.feedback),
        cache,
        classes: &classes,
        seed,
        tap: false,
    };
    let out = sample(&req).unwrap();
    let report = CostReport::new(&req, &out);
    (out, report)
}

#[test]
fn baseline_costs_n_per_step() {
    let f = fixture(6, (2, 4));
    let p = plan(&f, 20, SkipPreset::None, TPostMode::Rescaled);
    let (out, report) = run(&f, ModelKind::Baseline, &p, None, 1);
    assert_eq!(out.block_forwards, 120);
    assert_eq!(report.block_forwards, 120);
    assert_eq!(out.images.shape(), &[4, 1, 8, 8]);
    assert!(out.images.data().iter().all(|v| v.is_finite()));
}

#[test]
fn ilf_skip_inner_cost_matches_closed_form() {
    let f = fixture(6, (2, 4));
    let p = plan(&f, 10, SkipPreset::SkipInner, TPostMode::Rescaled);
    let (out, report) = run(&f, ModelKind::Ilf, &p, None, 1);
    // 6 blocks x 10 steps, plus the 3-block loop and feedback block on 4 steps.
    assert_eq!(out.block_forwards, 76);
    assert_eq!((report.n, report.m, report.feedback_steps), (6, 3, 4));
}

#[test]
fn ddim_updates_key_on_the_true_timestep() {
    let f = fixture(6, (2, 4));
    let p = plan(&f, 8, SkipPreset::All, TPostMode::Uniform);
    let (out, _) = run(&f, ModelKind::Ilf, &p, None, 2);
    let expected: Vec<(f64, f64)> = (0..p.len()).map(|k| (p.steps[k], p.next(k))).collect();
    assert_eq!(out.ddim_calls, expected);
    for (k, tp) in out.t_posts.iter().enumerate() {
        let tp = tp.expect("feedback on every step");
        assert!(tp < p.steps[k], "t_post {tp} should precede t {}", p.steps[k]);
    }
}

#[test]
fn zero_feedback_at_unchanged_time_matches_baseline_bitwise() {
    let mut f = fixture(6, (2, 4));
    f.feedback.scales.data_mut().fill(0.0);
    let p = plan(&f, 8, SkipPreset::All, TPostMode::Unchanged);
    for seed in 0..10 {
        let (ilf, _) = run(&f, ModelKind::Ilf, &p, None, seed);
        let (base, _) = run(&f, ModelKind::Baseline, &p.without_feedback(), None, seed);
        assert_eq!(ilf.images.data(), base.images.data(), "seed {seed}");
        assert!(ilf.block_forwards > base.block_forwards);
    }
}

#[test]
fn active_feedback_changes_samples() {
    let f = fixture(6, (2, 4));
    let p = plan(&f, 8, SkipPreset::All, TPostMode::Rescaled);
    let (ilf, _) = run(&f, ModelKind::Ilf, &p, None, 3);
    let (base, _) = run(&f, ModelKind::Baseline, &p.without_feedback(), None, 3);
    assert_ne!(ilf.images.data(), base.images.data());
}

#[test]
fn refresh_every_step_cache_matches_baseline_bitwise() {
    let f = fixture(6, (2, 4));
    let p = plan(&f, 8, SkipPreset::None, TPostMode::Rescaled);
    let cache = CacheConfig::from_preset(CachePreset::Inner, 4, 6, 1).unwrap();
    for seed in 0..3 {
        let (cached, _) = run(&f, ModelKind::Cached, &p, Some(&cache), seed);
        let (base, _) = run(&f, ModelKind::Baseline, &p, None, seed);
        assert_eq!(cached.images.data(), base.images.data());
        assert_eq!(cached.block_forwards, base.block_forwards);
    }
}

#[test]
fn cached_runs_save_block_forwards() {
    let f = fixture(6, (2, 4));
    let p = plan(&f, 8, SkipPreset::None, TPostMode::Rescaled);
    let cache = CacheConfig::from_preset(CachePreset::Inner, 4, 6, 2).unwrap();
    let (cached, report) = run(&f, ModelKind::Cached, &p, Some(&cache), 0);
    // 2 uncached blocks every step, 4 cached blocks on the 4 refresh steps.
    assert_eq!(cached.block_forwards, 2 * 8 + 4 * 4);
    assert_eq!((report.m, report.feedback_steps), (4, 4));
    let (base, _) = run(&f, ModelKind::Baseline, &p, None, 0);
    assert_ne!(cached.images.data(), base.images.data());
}

#[test]
fn sampling_is_a_function_of_the_seed() {
    let f = fixture(4, (1, 2));
    let p = plan(&f, 6, SkipPreset::SkipInner, TPostMode::Annealed);
    let (a, _) = run(&f, ModelKind::Ilf, &p, None, 11);
    let (b, _) = run(&f, ModelKind::Ilf, &p, None, 11);
    let (c, _) = run(&f, ModelKind::Ilf, &p, None, 12);
    assert_eq!(a.images.data(), b.images.data());
    assert_eq!(a.t_posts, b.t_posts);
    assert_ne!(a.images.data(), c.images.data());
}

#[test]
fn mismatched_requests_are_rejected() {
    let f = fixture(6, (2, 4));
    let p = plan(&f, 8, SkipPreset::All, TPostMode::Rescaled);
    let classes = [0];
    let base = SampleRequest {
        kind: ModelKind::Ilf,
        backbone: &f.backbone,
        schedule: &f.schedule,
        plan: &p,
        feedback: None,
        cache: None,
        classes: &classes,
        seed: 0,
        tap: false,
    };
    assert!(sample(&base).is_err(), "ilf without feedback state");
    assert!(
        sample(&SampleRequest {
            kind: ModelKind::Cached,
            ..base
        })
        .is_err(),
        "cached without config"
    );
    assert!(sample(&SampleRequest {
        kind: ModelKind::Baseline,
        classes: &[],
        ..base
    })
    .is_err());
}
