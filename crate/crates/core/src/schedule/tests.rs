use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn default_schedule() -> NoiseSchedule {
    make_schedule(1000, 1e-4, 0.02).unwrap()
}

fn plan(
    steps: usize,
    preset: SkipPreset,
    mode: TPostMode,
    loop_range: (usize, usize),
    n: usize,
) -> Result<InferencePlan> {
    make_plan(PlanSpec {
        steps,
        timesteps: 1000,
        tpost_mode: mode,
        preset,
        orientation: RatioOrientation::NOverM,
        loop_range: LoopRange {
            start: loop_range.0,
            end: loop_range.1,
        },
        n_blocks: n,
    })
}

#[test]
fn single_step_schedule() {
    let ns = make_schedule(1, 0.1, 0.1).unwrap();
    assert_eq!(ns.alpha_bars(), &[1.0, 0.9]);
}

#[test]
fn alpha_bar_is_cumulative_product_and_decreasing() {
    let ns = default_schedule();
    let ab = ns.alpha_bars();
    assert_eq!(ab[2], (1.0 - ns.beta(1)) * (1.0 - ns.beta(2)));
    let mut direct = 1.0;
    for t in 1..=1000 {
        direct *= 1.0 - ns.beta(t);
        assert!((ab[t] - direct).abs() <= 1e-15 * direct.max(1e-300));
        assert!(ab[t] < ab[t - 1]);
    }
    assert!(ab[1000] < ab[1]);
    assert!((ns.beta(1) - 1e-4).abs() < 1e-18 && (ns.beta(1000) - 0.02).abs() < 1e-15);
}

#[test]
fn schedule_rejects_bad_ranges() {
    assert!(make_schedule(10, 0.0, 0.1).is_err());
    assert!(make_schedule(10, 0.2, 0.1).is_err());
    assert!(make_schedule(10, 0.1, 1.0).is_err());
    assert!(make_schedule(0, 0.1, 0.2).is_err());
}

#[test]
fn fractional_alpha_bar_interpolates_between_neighbours() {
    let ns = default_schedule();
    let mid = ns.alpha_bar(500.5).unwrap();
    let (lo, hi) = (ns.alpha_bar(500.0).unwrap(), ns.alpha_bar(501.0).unwrap());
    assert!(hi < mid && mid < lo);
    assert!((mid - (lo * hi).sqrt()).abs() < 1e-12);
    assert!(ns.alpha_bar(-0.1).is_err() && ns.alpha_bar(1000.5).is_err());
}

#[test]
fn noise_sample_endpoints() {
    let ns = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng);
    let eps = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng);
    assert_eq!(ns.noise_sample(&x0, &[0.0, 0.0], &eps).unwrap().data(), x0.data());
    let late = ns.noise_sample(&x0, &[1000.0, 1000.0], &eps).unwrap();
    assert!(late.max_abs_diff(&eps) < 0.05);
    assert!(ns.noise_sample(&x0, &[1001.0, 0.0], &eps).is_err());
    assert!(ns.noise_sample(&x0, &[0.0], &eps).is_err());
}

#[test]
fn monte_carlo_variance_matches_schedule() {
    let ns = default_schedule();
    let dim = 16;
    let x0_val = 1.0 / (dim as f32).sqrt();
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in [100.0, 500.0, 900.0] {
        let x0 = Tensor::full(&[draws, dim], x0_val);
        let eps = Tensor::randn(&[draws, dim], 1.0, &mut rng);
        let xt = ns.noise_sample(&x0, &vec![t; draws], &eps).unwrap();
        let ab = ns.alpha_bar(t).unwrap();
        let mut var = 0.0;
        for j in 0..dim {
            let col: Vec<f64> = (0..draws).map(|i| f64::from(xt.data()[i * dim + j])).collect();
            let mean = col.iter().sum::<f64>() / draws as f64;
            var += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        }
        let var = var / dim as f64;
        let expected = 1.0 - ab;
        assert!(
            (var / expected - 1.0).abs() < 0.03,
            "t={t} var={var} expected={expected}"
        );
    }
}

#[test]
fn spacing_examples() {
    assert_eq!(spacing(1, 1000).unwrap(), vec![1000.0]);
    assert_eq!(spacing(4, 1000).unwrap(), vec![1000.0, 750.0, 500.0, 250.0]);
    let full = spacing(50, 50).unwrap();
    assert_eq!(full, (1..=50).rev().map(f64::from).collect::<Vec<_>>());
    assert!(spacing(0, 10).is_err());
    assert!(spacing(11, 10).is_err());
}

#[test]
fn ddim_with_true_noise_recovers_x0() {
    let ns = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = Tensor::randn(&[1, 1, 4, 4], 0.5, &mut rng);
    let eps = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
    for t in [1.0, 250.0, 750.0] {
        let xt = ns.noise_sample(&x0, &[t], &eps).unwrap();
        let back = ns.ddim_step(&xt, &eps, t, 0.0).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-5, "t={t}");
    }
}

#[test]
fn ddim_two_half_steps_equal_one_step_for_constant_predictor() {
    let ns = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng);
    let eps = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut rng);
    let one = ns.ddim_step(&x, &eps, 800.0, 200.0).unwrap();
    let mid = ns.ddim_step(&x, &eps, 800.0, 500.0).unwrap();
    let two = ns.ddim_step(&mid, &eps, 500.0, 200.0).unwrap();
    assert!(one.max_abs_diff(&two) < 1e-5);
}

#[test]
fn ddim_rejects_non_decreasing_time() {
    let ns = default_schedule();
    let x = Tensor::zeros(&[1, 1, 2, 2]);
    assert!(ns.ddim_step(&x, &x, 10.0, 10.0).is_err());
    assert!(ns.ddim_step(&x, &x, 10.0, -1.0).is_err());
}

#[test]
fn t_post_rule_values() {
    assert_eq!(t_post_uniform(1000.0, 100.0), 950.0);
    assert_eq!(t_post_uniform(100.0, 100.0), 50.0);
    assert_eq!(t_post_uniform(321.0, 0.0), 321.0);

    assert!((t_post_rescaled(1000.0, 100.0, 12, 28).unwrap() - 957.142_857_142_857).abs() < 1e-9);
    assert_eq!(t_post_rescaled(500.0, 100.0, 28, 28).unwrap(), 400.0);
    assert_eq!(t_post_rescaled(500.0, 0.0, 3, 28).unwrap(), 500.0);
    assert!(t_post_rescaled(500.0, 10.0, 29, 28).is_err());

    let printed = t_post_annealed(900.0, 100.0, 12, 28, RatioOrientation::NOverM, 1000).unwrap();
    assert!((printed - 690.0).abs() < 1e-9);
    let swapped = t_post_annealed(900.0, 100.0, 12, 28, RatioOrientation::MOverN, 1000).unwrap();
    assert!((swapped - (900.0 - 100.0 * 12.0 / 28.0 * 0.9)).abs() < 1e-9);
    assert!((swapped - 861.428_571_428_571).abs() < 1e-9);
    let floor = t_post_annealed(100.0, 1.0, 12, 28, RatioOrientation::MOverN, 1000).unwrap();
    assert_eq!(floor, 90.0);
    assert_eq!(
        t_post_annealed(5.0, 1.0, 12, 28, RatioOrientation::MOverN, 1000).unwrap(),
        0.0
    );
}

#[test]
fn skip_presets() {
    let fb = |s, p: SkipPreset| -> Vec<usize> {
        p.flags(s)
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(k, _)| k + 1)
            .collect()
    };
    assert_eq!(fb(10, SkipPreset::SkipInner), vec![1, 2, 9, 10]);
    assert_eq!(fb(12, SkipPreset::SkipInner), vec![1, 2, 11, 12]);
    assert_eq!(fb(6, SkipPreset::All).len(), 6);
    assert!(fb(6, SkipPreset::None).is_empty());
    assert_eq!(fb(8, SkipPreset::FirstOnly), vec![5, 6, 7, 8]);
    assert_eq!(fb(8, SkipPreset::LastOnly), vec![1, 2, 3, 4]);
    assert_eq!(fb(5, SkipPreset::Alternating), vec![1, 3, 5]);
    for s in 5..20 {
        let inner = SkipPreset::SkipInner.flags(s).unwrap();
        let outer = SkipPreset::OuterOnly.flags(s).unwrap();
        assert!(inner.iter().zip(&outer).all(|(a, b)| a != b));
    }
    assert!(SkipPreset::SkipInner.flags(3).is_err());
    assert!(SkipPreset::FirstOnly.flags(4).is_err());
}

#[test]
fn plan_gap_and_t_post() {
    let p = plan(10, SkipPreset::All, TPostMode::Rescaled, (11, 22), 28).unwrap();
    assert_eq!(p.gap(0), 100.0);
    assert_eq!(p.gap(9), 100.0);
    assert_eq!(p.next(9), 0.0);
    assert!((p.t_post(0).unwrap() - 957.142_857_142_857).abs() < 1e-9);

    let a = plan(10, SkipPreset::All, TPostMode::Annealed, (11, 22), 28).unwrap();
    assert_eq!(a.t_post(0).unwrap(), p.t_post(0).unwrap());
    assert!((a.t_post(1).unwrap() - 690.0).abs() < 1e-9);
    for mode in [
        TPostMode::Unchanged,
        TPostMode::Uniform,
        TPostMode::Rescaled,
        TPostMode::Annealed,
    ] {
        let q = plan(10, SkipPreset::All, mode, (0, 27), 28).unwrap();
        for k in 0..q.len() {
            let tp = q.t_post(k).unwrap();
            assert!((0.0..=q.steps[k]).contains(&tp), "{mode:?} step {k}: {tp}");
        }
    }
    let u = plan(4, SkipPreset::All, TPostMode::Unchanged, (1, 2), 6).unwrap();
    assert_eq!(u.t_post(2).unwrap(), u.steps[2]);
}

#[test]
fn plan_validation() {
    assert!(plan(10, SkipPreset::All, TPostMode::Rescaled, (3, 2), 6).is_err());
    assert!(plan(10, SkipPreset::All, TPostMode::Rescaled, (2, 6), 6).is_err());
    assert!(plan(3, SkipPreset::SkipInner, TPostMode::Rescaled, (2, 4), 6).is_err());
    let p = plan(10, SkipPreset::SkipInner, TPostMode::Rescaled, (2, 4), 6).unwrap();
    assert_eq!(p.feedback_steps(), 4);
    assert_eq!(p.without_feedback().feedback_steps(), 0);
}

#[test]
fn plan_cost_closed_forms() {
    let b20 = plan(20, SkipPreset::None, TPostMode::Rescaled, (11, 22), 28).unwrap();
    assert_eq!(plan_cost(ModelKind::Baseline, &b20, None).unwrap(), 560);
    let b12 = plan(12, SkipPreset::None, TPostMode::Rescaled, (11, 22), 28).unwrap();
    assert_eq!(plan_cost(ModelKind::Baseline, &b12, None).unwrap(), 336);
    let ilf10 = plan(10, SkipPreset::SkipInner, TPostMode::Rescaled, (8, 19), 28).unwrap();
    assert_eq!(plan_cost(ModelKind::Ilf, &ilf10, None).unwrap(), 332);
    let loop6 = plan(12, SkipPreset::All, TPostMode::Rescaled, (11, 16), 28).unwrap();
    assert_eq!(plan_cost(ModelKind::Ilf, &loop6, None).unwrap(), 420);
    let skip8 = plan(12, SkipPreset::SkipInner, TPostMode::Rescaled, (8, 19), 28).unwrap();
    assert_eq!(plan_cost(ModelKind::Ilf, &skip8, None).unwrap(), 388);
    let toy = plan(10, SkipPreset::SkipInner, TPostMode::Rescaled, (2, 4), 6).unwrap();
    assert_eq!(plan_cost(ModelKind::Ilf, &toy, None).unwrap(), 76);
    assert!(plan_cost(ModelKind::Cached, &b20, None).is_err());
}
