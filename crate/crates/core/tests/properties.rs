use nalgebra::DVector;
use proptest::prelude::*;

use ttc_core::correction::CorrectionMode;
use ttc_core::harness::config::{StrategyKind, TtsMode};
use ttc_core::harness::run::run_scenario;
use ttc_core::rng::NoiseStream;
use ttc_core::sampler::{ChunkContext, ContextTag};
use ttc_core::ttx::{best_of_n, BoundReward};
use ttc_core::world::{conditional_prior, exact_posterior_mean, responsibilities};
use ttc_core::{
    parse_config, rollout, CorrectionConfig, Denoiser, Latent, NoiseLevel, NoiseSchedule, RewardKind, RolloutConfig,
    Scenario, Strategy,
};

fn vec_of(xs: &[f64]) -> Latent {
    DVector::from_column_slice(xs)
}

fn small_world() -> Scenario {
    let mut s = Scenario::default();
    s.world.frame_dim = 3;
    s.world.frames_per_chunk = 2;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn responsibilities_sum_to_one(
        k in 2usize..5,
        spread in 0.1f64..4.0,
        tau in 0.01f64..1.0,
        xs in prop::collection::vec(-30.0f64..30.0, 6),
        ctx in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let mut s = small_world();
        s.world.mixture_components = k;
        s.world.mixture_spread = spread;
        let world = s.world_spec().unwrap();
        let prior = conditional_prior(&world, &vec_of(&ctx)).unwrap();
        let r = responsibilities(&prior, &vec_of(&xs), NoiseLevel::new(tau).unwrap());
        prop_assert_eq!(r.len(), k);
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(r.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn posterior_mean_is_affine(
        tau in 0.01f64..1.0,
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        t in -2.0f64..3.0,
    ) {
        let world = small_world().world_spec().unwrap();
        let prior = world.init_prior().moment_matched();
        let level = NoiseLevel::new(tau).unwrap();
        let (xa, xb) = (vec_of(&a), vec_of(&b));
        let xc = &xa + (&xb - &xa) * t;
        let ga = exact_posterior_mean(&prior, &xa, level).unwrap();
        let gb = exact_posterior_mean(&prior, &xb, level).unwrap();
        let gc = exact_posterior_mean(&prior, &xc, level).unwrap();
        let expected = &ga + (&gb - &ga) * t;
        prop_assert!((gc - expected).amax() <= 1e-10);
    }

    #[test]
    fn one_step_from_pure_noise_is_the_prior_mean(seed in any::<u64>(), ctx in prop::collection::vec(-2.0f64..2.0, 6)) {
        let world = small_world().world_spec().unwrap();
        let prior = conditional_prior(&world, &vec_of(&ctx)).unwrap();
        let x = NoiseStream::from_seed(seed).normal_vec(6);
        let g = Denoiser::Exact.denoise(&x, &prior, NoiseLevel::NOISE).unwrap();
        prop_assert_eq!(g, prior.mean());
    }

    #[test]
    fn nfe_and_phase_order_follow_the_correction_set(
        levels in 2usize..7,
        mask in prop::collection::vec(any::<bool>(), 6),
        single in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let s = small_world();
        let world = s.world_spec().unwrap();
        let den = s.denoiser(&world).unwrap();
        let schedule = NoiseSchedule::uniform(levels).unwrap();
        let chosen: Vec<f64> = schedule.taus()[1..].iter().zip(&mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        let cfg = if single && !chosen.is_empty() {
            CorrectionConfig::single_point(chosen[0]).unwrap()
        } else {
            CorrectionConfig::path_wise(&chosen).unwrap()
        };
        let expected = match cfg.mode {
            CorrectionMode::PathWise => levels + chosen.len(),
            _ => levels,
        };
        prop_assert_eq!(cfg.nfe_per_chunk(&schedule), expected);
        let rec = rollout(&den, &world, &RolloutConfig::new(3, schedule.clone(), Strategy::Correction(cfg.clone())), seed).unwrap();
        for traces in &rec.traces {
            prop_assert_eq!(traces.len(), expected);
            let mut i = 0;
            for level in schedule.levels() {
                let corrected = cfg.is_corrected(*level);
                match cfg.mode {
                    CorrectionMode::PathWise if corrected => {
                        prop_assert_eq!(traces[i].context_tag, ContextTag::Reference);
                        prop_assert_eq!(traces[i + 1].context_tag, ContextTag::Evolving);
                        prop_assert!(traces[i].level.approx_eq(*level) && traces[i + 1].level.approx_eq(*level));
                        i += 2;
                    }
                    CorrectionMode::SinglePoint if corrected => {
                        prop_assert_eq!(traces[i].context_tag, ContextTag::Reference);
                        i += 1;
                    }
                    _ => {
                        prop_assert_eq!(traces[i].context_tag, ContextTag::Evolving);
                        i += 1;
                    }
                }
            }
            prop_assert_eq!(i, traces.len());
        }
        prop_assert_eq!(rec.total_nfe, 3 * expected);
    }

    #[test]
    fn empty_correction_set_reproduces_baseline(seed in any::<u64>(), levels in 2usize..6) {
        let s = small_world();
        let world = s.world_spec().unwrap();
        let den = s.denoiser(&world).unwrap();
        let schedule = NoiseSchedule::uniform(levels).unwrap();
        let run = |strategy| rollout(&den, &world, &RolloutConfig::new(4, schedule.clone(), strategy), seed).unwrap();
        let base = run(Strategy::baseline());
        let empty = run(Strategy::Correction(CorrectionConfig::path_wise(&[]).unwrap()));
        prop_assert_eq!(base.chunks, empty.chunks);
    }

    #[test]
    fn context_window_keeps_the_newest_chunks(window in 1usize..5, n in 1usize..10) {
        let mut ctx = ChunkContext::new(window);
        for t in 0..n {
            ctx.push(vec_of(&[t as f64]));
            prop_assert_eq!(ctx.len(), (t + 1).min(window));
            prop_assert_eq!(ctx.latest().unwrap()[0], t as f64);
            prop_assert_eq!(ctx.reference().unwrap()[0], 0.0);
        }
        let held: Vec<f64> = ctx.window().map(|c| c[0]).collect();
        let expected: Vec<f64> = (n.saturating_sub(window)..n).map(|t| t as f64).collect();
        prop_assert_eq!(held, expected);
    }

    #[test]
    fn best_of_n_returns_the_maximum(n in 1usize..12, seed in any::<u64>()) {
        let reference = vec_of(&[0.0; 6]);
        let reward = BoundReward::new(RewardKind::Reconstruction, reference, None, 3);
        let sel = best_of_n(
            |i| Ok((NoiseStream::new(seed, 0, ttc_core::rng::Purpose::Search, i as u64).normal_vec(6), Vec::new())),
            &reward,
            n,
            ttc_core::exec::ExecMode::Sequential,
        ).unwrap();
        prop_assert_eq!(sel.rewards.len(), n);
        prop_assert!(sel.rewards.iter().all(|&r| sel.reward >= r));
        prop_assert_eq!(sel.reward, sel.rewards[sel.index]);
    }

    #[test]
    fn scenarios_round_trip_through_toml(
        n_chunks in 1usize..100,
        n_seeds in 1usize..500,
        gain in 0.5f64..1.5,
        bias in -0.1f64..0.1,
        mode in 0usize..4,
        mask in prop::collection::vec(any::<bool>(), 3),
        lambda in 0.0f64..=1.0,
        tts in prop::option::of((any::<bool>(), 1usize..9)),
        window in 1usize..6,
    ) {
        let mut s = Scenario { name: "fuzz".into(), n_chunks, n_seeds, window, ..Scenario::default() };
        s.drift.gain = gain;
        s.drift.bias = bias;
        let below_top: Vec<f64> = s.schedule[1..].iter().zip(&mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        match mode {
            1 => {
                s.correction.mode = CorrectionMode::PathWise;
                s.correction.levels = below_top;
            }
            2 if !below_top.is_empty() => {
                s.correction.mode = CorrectionMode::SinglePoint;
                s.correction.levels = vec![below_top[0]];
            }
            3 => {
                s.correction.mode = CorrectionMode::Sink;
                s.correction.sink_lambda = lambda;
            }
            _ => {}
        }
        if let Some((sop, n)) = tts {
            s.strategy = StrategyKind::Tts;
            s.tts.mode = if sop { TtsMode::Sop } else { TtsMode::Bon };
            s.tts.n = n;
        }
        let text = s.to_toml().unwrap();
        prop_assert_eq!(parse_config(&text).unwrap(), s);
    }
}

#[test]
fn runs_are_deterministic_end_to_end() {
    let mut s = small_world();
    s.n_chunks = 8;
    s.n_seeds = 6;
    s.correction.mode = CorrectionMode::PathWise;
    s.correction.levels = vec![0.5, 0.25];
    let a = run_scenario(&s, 11).unwrap();
    let b = run_scenario(&s, 11).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.aggregates, b.aggregates);
    let c = run_scenario(&s, 12).unwrap();
    assert_ne!(a.rows, c.rows);
}
