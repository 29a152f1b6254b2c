use ovkv::anchors::protected_count;
use ovkv::compression::min_max_normalize;
use ovkv::rating::gaussian_blur;
use ovkv::sim::{SceneKind, Simulation};
use ovkv::{
    allocate_budgets, compress_layer, coverage_ratio, protection_bound, AnchorId, Engine, EngineConfig,
    GaussianKernel, Intrinsics, LayerCache, ModelDims, PointMap, Pose, Protection, TokenEntry,
};
use proptest::prelude::*;

fn dims() -> ModelDims {
    ModelDims::new(1, 1, 2, 2, 3, 2).unwrap()
}

/// A cache of `protections.len() / M` frames; each flag marks one token
/// as anchor-protected.
fn cache_from(protections: &[bool]) -> LayerCache {
    let d = dims();
    let m = d.tokens_per_frame();
    let mut cache = LayerCache::new(0, &d, 0);
    for (f, chunk) in protections.chunks_exact(m).enumerate() {
        let frame = f as u64 + 1;
        let toks = chunk
            .iter()
            .enumerate()
            .map(|(slot, &p)| TokenEntry {
                frame_index: frame,
                slot_index: slot,
                kind: d.kind_of(slot),
                key: vec![0.0; d.token_width()],
                value: vec![0.0; d.token_width()],
                protection: if p {
                    Protection::HistoricalAnchor(AnchorId(frame))
                } else {
                    Protection::Unprotected
                },
            })
            .collect();
        cache.append_frame(toks).unwrap();
    }
    cache
}

fn compress_case() -> impl Strategy<Value = (Vec<bool>, Vec<f64>, usize)> {
    (1usize..8)
        .prop_flat_map(|frames| proptest::collection::vec(proptest::bool::weighted(0.2), frames * 8))
        .prop_flat_map(|prot| {
            let evictable = prot.iter().filter(|p| !**p).count();
            let protected = prot.len() - evictable;
            let n = prot.len();
            (
                Just(prot),
                proptest::collection::vec((0u8..6).prop_map(|x| f64::from(x) / 5.0), evictable),
                protected..=n,
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn compression_keeps_protected_and_meets_budget((prot, scores, budget) in compress_case()) {
        let mut cache = cache_from(&prot);
        let before = cache.entries().to_vec();
        compress_layer(&mut cache, &scores, budget).unwrap();
        prop_assert_eq!(cache.len(), budget.min(before.len()));
        for e in before.iter().filter(|e| e.protection.is_protected()) {
            prop_assert!(cache.entries().iter().any(|s| s.id() == e.id()));
        }
        // survivors keep arrival order
        let ids: Vec<_> = cache.entries().iter().map(|e| e.id()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        prop_assert_eq!(ids, sorted);
    }

    #[test]
    fn no_evicted_token_outscores_a_survivor((prot, scores, budget) in compress_case()) {
        let mut cache = cache_from(&prot);
        let evictable: Vec<TokenEntry> = cache.entries().iter().filter(|e| !e.protection.is_protected()).cloned().collect();
        compress_layer(&mut cache, &scores, budget).unwrap();
        let kept = |e: &TokenEntry| cache.entries().iter().any(|s| s.id() == e.id());
        let min_kept = evictable.iter().zip(&scores).filter(|(e, _)| kept(e)).map(|(_, s)| *s).fold(f64::INFINITY, f64::min);
        let max_gone = evictable.iter().zip(&scores).filter(|(e, _)| !kept(e)).map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(max_gone <= min_kept);
    }

    #[test]
    fn compression_is_idempotent((prot, scores, budget) in compress_case()) {
        let mut cache = cache_from(&prot);
        compress_layer(&mut cache, &scores, budget).unwrap();
        let once = cache.clone();
        let left = cache.entries().iter().filter(|e| !e.protection.is_protected()).count();
        compress_layer(&mut cache, &vec![0.0; left], budget).unwrap();
        prop_assert_eq!(cache, once);
    }

    #[test]
    fn allocation_respects_floors_and_proportion(
        floors in proptest::collection::vec(0usize..40, 1..10),
        weights in proptest::collection::vec(0.0f64..3.0, 10),
        extra in 0usize..500,
    ) {
        let w = &weights[..floors.len()];
        let total = floors.iter().sum::<usize>() + extra;
        let a = allocate_budgets(total, w, &floors).unwrap();
        prop_assert_eq!(a.total(), total);
        let wsum: f64 = w.iter().sum();
        for (i, (&b, &f)) in a.budgets.iter().zip(&floors).enumerate() {
            prop_assert!(b >= f);
            let quota = if wsum > 0.0 { extra as f64 * w[i] / wsum } else { extra as f64 / floors.len() as f64 };
            prop_assert!(((b - f) as f64 - quota).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn blur_is_linear_and_bounded(
        rows in 1usize..10,
        cols in 1usize..10,
        seed in proptest::collection::vec(0.0f64..5.0, 200),
        a in -2.0f64..2.0,
        size in prop_oneof![Just(1usize), Just(3), Just(5), Just(7)],
        sigma in 0.2f64..3.0,
    ) {
        let n = rows * cols;
        let (x, y) = (&seed[..n], &seed[100..100 + n]);
        let k = GaussianKernel::new(size, sigma).unwrap();
        let mix: Vec<f64> = x.iter().zip(y).map(|(p, q)| a * p + q).collect();
        let lhs = gaussian_blur(&mix, rows, cols, &k);
        let (bx, by) = (gaussian_blur(x, rows, cols, &k), gaussian_blur(y, rows, cols, &k));
        for i in 0..n {
            prop_assert!((lhs[i] - (a * bx[i] + by[i])).abs() < 1e-9);
        }
        let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        for v in &bx {
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn normalization_lands_in_unit_interval(xs in proptest::collection::vec(-1e6f64..1e6, 1..50)) {
        let (out, range) = min_max_normalize(&xs);
        let range = range.unwrap();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        if range.max > range.min {
            prop_assert!(out.contains(&0.0) && out.contains(&1.0));
        }
    }

    #[test]
    fn coverage_is_a_fraction(
        angle in -3.2f64..3.2,
        shift in proptest::array::uniform3(-4.0f64..4.0),
        pts in proptest::collection::vec(proptest::array::uniform3(-10.0f64..10.0), 1..40),
    ) {
        let cam = Intrinsics::for_patch_grid(8, 8, 14);
        let map = PointMap { confidence: vec![1.0; pts.len()], points: pts };
        let anchor = Pose::from_translation([0.5, 0.0, -1.0]);
        let current = Pose::from_axis_angle([0.2, 1.0, 0.1], angle, shift);
        let rho = coverage_ratio(&map, &anchor, &current, &cam);
        prop_assert!((0.0..=1.0).contains(&rho));
        let k = (rho * map.len() as f64).round();
        prop_assert!((rho * map.len() as f64 - k).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn engine_invariants_hold_for_any_feasible_config(
        slack in 0usize..800,
        max_anchors in 1usize..4,
        interval in 1u64..12,
        tau in 0.05f64..0.9,
        beta in 0.0f64..=1.0,
        alpha in 0.0f64..=1.0,
        scene in prop_oneof![Just(SceneKind::Orbit), Just(SceneKind::Corridor), Just(SceneKind::RandomWalk)],
        seed in 0u64..1000,
    ) {
        let mut cfg = EngineConfig {
            max_anchors,
            min_anchor_interval: interval,
            coverage_tau: tau,
            hybrid_beta: beta,
            smoothing_alpha: alpha,
            ..EngineConfig::toy()
        };
        cfg.total_budget = cfg.min_total_budget() + slack;
        let m = cfg.dims.tokens_per_frame();
        let bound = protection_bound(&cfg);
        let sim = Simulation::new(&cfg, scene, seed, 40);
        let mut engine = Engine::new(cfg.clone()).unwrap();
        let mut registered = 0;
        for f in sim.frames() {
            let s = engine.step(&f.input).unwrap();
            prop_assert_eq!(s.budget_violations(cfg.total_budget), 0);
            prop_assert!(s.resident_tokens <= cfg.total_budget);
            prop_assert!(s.peak_tokens <= cfg.total_budget + cfg.dims.num_layers * m);
            prop_assert!(s.live_anchors.len() <= max_anchors);
            prop_assert!(s.protected.iter().all(|&p| p <= bound));
            registered += usize::from(s.registered.is_some());
            for l in 0..cfg.dims.num_layers {
                let zero = engine.layer(l).entries().iter().filter(|e| e.frame_index == 0).count();
                prop_assert_eq!(zero, m);
            }
            prop_assert!(engine.check_consistency().is_ok());
        }
        // each live anchor pins ceil(eta * N_p) patches in every layer
        let per_anchor = protected_count(cfg.anchor_eta, cfg.dims.num_patches());
        let live = engine.metrics().last().unwrap().live_anchors.len();
        prop_assert_eq!(engine.layer(0).protected_count(), m + live * per_anchor);
        prop_assert!(live <= registered);
    }
}

#[test]
fn identical_runs_produce_identical_metrics() {
    let cfg = EngineConfig {
        total_budget: 700,
        ..EngineConfig::toy()
    };
    let run = || {
        let sim = Simulation::new(&cfg, SceneKind::RandomWalk, 17, 60);
        let mut engine = Engine::new(cfg.clone()).unwrap();
        sim.frames()
            .map(|f| {
                let mut s = engine.step(&f.input).unwrap();
                s.step_ms = 0.0;
                s
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn failed_step_leaves_engine_untouched() {
    let cfg = EngineConfig::toy();
    let sim = Simulation::new(&cfg, SceneKind::Orbit, 3, 3);
    let mut engine = Engine::new(cfg).unwrap();
    engine.step(&sim.frame(0).input).unwrap();
    let before = engine.state().clone();
    // skipping a frame index is rejected
    assert!(engine.step(&sim.frame(2).input).is_err());
    assert_eq!(engine.state(), &before);
    let mut bad = sim.frame(1).input;
    bad.residuals[1] = ovkv::FfnResidual::new(1, vec![f32::NAN; 69]).unwrap();
    assert!(engine.step(&bad).is_err());
    assert_eq!(engine.state(), &before);
    engine.step(&sim.frame(1).input).unwrap();
}
