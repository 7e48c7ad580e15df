use super::*;
use crate::exec::simulate_cache;
use crate::graphs;
use crate::ir::DType;
use crate::layout::derive_layout;
use crate::pipeline::oracle_check;
use proptest::prelude::*;

fn c2d8() -> Graph {
    graphs::conv2d(DType::Int32, 1, 8, 8, 8, 8, 1, 1, 1)
}

fn small_cache() -> CacheConfig {
    CacheConfig {
        num_lines: 32,
        ..CacheConfig::default()
    }
}

fn quick(budget: usize, joint: usize, seed: u64) -> TuneConfig {
    TuneConfig {
        budget,
        joint,
        batch: 32,
        episode_len: 32,
        seed,
        ..TuneConfig::default()
    }
}

fn plan_for(g: &Graph, t: &LayoutTemplate, f: &[usize]) -> PropagationPlan {
    let mut claims = OpLayouts::new();
    claims.insert(t.op.clone(), t.decode(f).unwrap());
    build_plan(g, &claims).unwrap()
}

#[test]
fn factor_from_action() {
    assert_eq!(action_to_factor(0.5, 32), 16);
    assert_eq!(action_to_factor(0.42, 12), 6);
    // 12 * 0.375 = 4.5 sits between 4 and 6: not a tie, 4 is nearer
    assert_eq!(action_to_factor(0.375, 12), 4);
    // 8 * 0.375 = 3 ties 2 and 4: the smaller wins
    assert_eq!(action_to_factor(0.375, 8), 2);
    assert_eq!(action_to_factor(1.0, 7), 7);
    assert_eq!(action_to_factor(0.0, 7), 1);
}

#[test]
fn conv_space_size() {
    let t = &build_layout_space(&c2d8(), 1).unwrap()[0];
    assert_eq!(t.tunables.len(), 6);
    assert_eq!(t.space_size(), 4usize.pow(6));
    assert_eq!(t.enumerate().len(), 4096);
}

#[test]
fn default_point_is_identity() {
    for name in ["c2d", "dep", "gmm", "stem"] {
        let g = graphs::by_name(name, DType::Int32).unwrap();
        for t in build_layout_space(&g, 1).unwrap() {
            assert!(t.decode(&t.default_point()).unwrap().is_empty(), "{name}");
        }
    }
}

#[test]
fn state_encoding() {
    let g = graphs::conv2d(DType::Int32, 1, 32, 8, 8, 32, 1, 1, 1);
    let t = &build_layout_space(&g, 1).unwrap()[0];
    let d = t.default_point();
    let s0 = t.encode_state(&d);
    assert_eq!(s0.len(), LAYOUT_STATE_WIDTH);
    // output O untiled reads [1, 32]
    assert_eq!(&s0[4..6], &[1.0, 32.0]);
    let mut f = d.clone();
    f[2] = 16;
    assert_eq!(&t.encode_state(&f)[4..6], &[2.0, 16.0]);
}

#[test]
fn state_encoding_is_injective() {
    let t = &build_layout_space(&c2d8(), 1).unwrap()[0];
    let mut seen = std::collections::HashSet::new();
    for p in t.enumerate() {
        let key: Vec<u64> = t.encode_state(&p).iter().map(|v| v.to_bits()).collect();
        assert!(seen.insert(key), "{p:?}");
    }
}

#[test]
fn every_conv_point_decodes() {
    let g = graphs::c2d_chain(DType::Int32, 8, 8, 8);
    let t = &build_layout_space(&g, 1).unwrap()[0];
    for p in t.enumerate() {
        let seqs = t.decode(&p).unwrap();
        for (id, seq) in &seqs {
            derive_layout(seq, &g.tensor(id).unwrap().dims).unwrap();
        }
    }
    assert!(t.decode(&[3, 8, 8, 8, 8, 8]).is_err());
    assert!(t.decode(&[8, 8]).is_err());
}

fn check_points(g: &Graph, levels: usize, n: usize, seed: u64) {
    let t = &build_layout_space(g, levels).unwrap()[0];
    let pts = t.enumerate();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let p = pts.choose(&mut rng).unwrap();
        let plan = plan_for(g, t, p);
        let prog = compile(g, &plan, &Schedules::new()).unwrap();
        assert_eq!(oracle_check(g, &prog, 1).unwrap(), None, "{p:?}");
    }
}

#[test]
fn decoded_layouts_compute_the_same_values() {
    check_points(&graphs::c2d_chain(DType::Int32, 8, 8, 4), 1, 12, 1);
    check_points(&graphs::dep_chain(DType::Int32, 8, 8, 4), 1, 8, 2);
    check_points(&graphs::gmm_bias(DType::Int32, 8, 4, 8), 1, 12, 3);
    check_points(&graphs::gmm_bias(DType::Int32, 8, 4, 8), 2, 8, 4);
    check_points(&graphs::conv2d(DType::Int32, 1, 2, 8, 8, 4, 3, 3, 1), 2, 8, 5);
}

#[test]
fn stem_tiles_keep_trailing_rows() {
    // 30 padded rows, 7-row window, stride 2: 12 output rows, one row unread
    let g = graphs::stem(DType::Int32, 24, 24);
    let t = &build_layout_space(&g, 1).unwrap()[0];
    let mut f = t.default_point();
    f[0] = 6;
    f[1] = 4;
    f[2] = 16;
    let plan = plan_for(&g, t, &f);
    let x = &t.tensors[0];
    let seq = &plan.assignments[x];
    let phys = derive_layout(seq, &g.tensor(x).unwrap().dims).unwrap();
    // two tiles of 18 rows, three tiles of 14 columns
    let ext: Vec<usize> = phys.iter().map(|d| d.extent).collect();
    assert_eq!(ext, vec![1, 2, 3, 3, 18, 14]);
    let prog = compile(&g, &plan, &Schedules::new()).unwrap();
    assert_eq!(oracle_check(&g, &prog, 3).unwrap(), None);
}

#[test]
fn loop_points_lower_correctly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, g) in [
        ("c2d", graphs::c2d_chain(DType::Int32, 8, 8, 4)),
        ("gmm", graphs::gmm_bias(DType::Int32, 8, 4, 8)),
        ("dep", graphs::dep_chain(DType::Int32, 8, 8, 4)),
    ] {
        for k in 0..10 {
            let plan = if k % 2 == 0 { default_plan(&g).unwrap() } else { random_plan(&g, 1, &mut rng).unwrap() };
            let ctx = Ctx::new(&g, plan).unwrap();
            let mut points: Vec<LoopPoint> = ctx.spaces.iter().map(|s| s.random_point(&mut rng)).collect();
            // force fusion on every other draw
            if k % 4 < 2 {
                for (s, p) in ctx.spaces.iter().zip(&mut points) {
                    let n = p.len();
                    p[n - 1] = s.options()[n - 1] - 1;
                }
            }
            let prog = ctx.program(&points).unwrap_or_else(|e| panic!("{name} {points:?}: {e}"));
            assert_eq!(oracle_check(&g, &prog, k).unwrap(), None, "{name} {points:?}");
        }
    }
}

#[test]
fn epilogue_chain_is_found() {
    let g = graphs::c2d_chain(DType::Int32, 8, 8, 4);
    let ctx = Ctx::new(&g, default_plan(&g).unwrap()).unwrap();
    assert_eq!(ctx.spaces.len(), 1);
    assert_eq!(ctx.spaces[0].chain, vec!["Bias".to_string(), "Y".to_string()]);
}

#[test]
fn budget_of_one_round_is_exact() {
    let g = graphs::gmm_bias(DType::Float32, 16, 16, 16);
    let cfg = TuneConfig {
        budget: 8,
        joint: 0,
        ..TuneConfig::default()
    };
    let r = tune_loops(&g, &default_plan(&g).unwrap(), &small_cache(), &cfg).unwrap();
    assert_eq!(r.history.len(), 8);
    let min = r.history.iter().map(|h| h.cost).fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_cost, min);
    assert!(r.history.iter().all(|h| h.stage == Stage::LoopOnly));
}

#[test]
fn zero_budget_returns_warm_schedules() {
    let g = graphs::gmm_bias(DType::Float32, 16, 16, 16);
    let r = tune(&g, &small_cache(), &quick(0, 0, 1)).unwrap();
    assert!(r.history.is_empty());
    assert_eq!(r.plan, default_plan(&g).unwrap());
    let ctx = Ctx::new(&g, r.plan.clone()).unwrap();
    assert_eq!(r.schedules, ctx.schedules(&ctx.default_points()).unwrap());
}

#[test]
fn zero_joint_budget_keeps_default_layouts() {
    let g = graphs::gmm_bias(DType::Float32, 16, 16, 16);
    let r = tune(&g, &small_cache(), &quick(32, 0, 2)).unwrap();
    assert_eq!(r.plan, default_plan(&g).unwrap());
    assert_eq!(r.rebuilds, Rebuilds::default());
    assert!(r.history.len() <= 32);
}

#[test]
fn tuning_accounts_and_is_monotone() {
    let g = graphs::c2d_chain(DType::Float32, 8, 8, 8);
    let cfg = quick(64, 32, 3);
    let r = tune(&g, &small_cache(), &cfg).unwrap();
    assert!(r.history.len() <= cfg.budget);
    assert_eq!(r.rebuilds.loop_only, 0);
    let joint_best = r
        .history
        .iter()
        .filter(|h| h.stage == Stage::Joint)
        .map(|h| h.cost)
        .fold(f64::INFINITY, f64::min);
    assert!(r.history.iter().filter(|h| h.stage == Stage::Joint).count() <= cfg.joint);
    assert!(r.best_cost <= joint_best);
    // the report recompiles to the same counters
    let back = TuneResult::from_json(&r.to_json()).unwrap();
    let prog = back.program(&g).unwrap();
    assert_eq!(simulate_cache(&prog, &small_cache()).unwrap(), r.counters);
    assert_eq!(r.counters.cost, r.best_cost);
    assert_eq!(oracle_check(&g, &prog, 5).unwrap(), None);
}

#[test]
fn tuning_is_deterministic() {
    let g = graphs::gmm_bias(DType::Float32, 16, 16, 16);
    let mut cfg = quick(48, 24, 9);
    let a = tune(&g, &small_cache(), &cfg).unwrap().to_json();
    let b = tune(&g, &small_cache(), &cfg).unwrap().to_json();
    cfg.parallel = false;
    let c = tune(&g, &small_cache(), &cfg).unwrap().to_json();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn layout_changes_count_rebuilds() {
    let g = graphs::gmm_bias(DType::Float32, 16, 16, 16);
    let r = tune(&g, &small_cache(), &quick(64, 64, 4)).unwrap();
    assert!(r.rebuilds.joint >= 1);
    assert_eq!(r.rebuilds.loop_only, 0);
}

#[test]
fn bad_configs_are_rejected() {
    let g = graphs::gmm_bias(DType::Float32, 8, 8, 8);
    let cfg = TuneConfig {
        joint: 300,
        ..TuneConfig::default()
    };
    assert!(matches!(tune(&g, &small_cache(), &cfg), Err(Error::Config(_))));
    let cfg = TuneConfig {
        top_k: 0,
        ..TuneConfig::default()
    };
    assert!(matches!(tune(&g, &small_cache(), &cfg), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factors_always_divide(a in proptest::collection::vec(0.0f64..1.0, 6)) {
        let t = &build_layout_space(&c2d8(), 2).unwrap()[0];
        let mut acts = a.clone();
        acts.resize(t.tunables.len(), 0.5);
        let f = t.factors_from_actions(&acts);
        for k in 0..f.len() {
            prop_assert_eq!(t.domain(k, &f) % f[k], 0);
        }
        prop_assert!(t.decode(&f).is_ok());
    }

    #[test]
    fn loop_steps_stay_in_range(seed in 0u64..1000, dirs in proptest::collection::vec(0usize..3, 64)) {
        let g = graphs::c2d_chain(DType::Int32, 8, 8, 4);
        let ctx = Ctx::new(&g, default_plan(&g).unwrap()).unwrap();
        let s = &ctx.spaces[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = s.random_point(&mut rng);
        let q = s.step(&p, &dirs[..s.dims()]);
        for (v, n) in q.iter().zip(s.options()) {
            prop_assert!(v < n);
        }
        prop_assert!(s.decode(&q).is_ok());
    }
}

