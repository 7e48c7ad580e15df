use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::expr::{AccessExpr, VarId};
use crate::graphs;
use crate::ir::{Attrs, DType, Dim, OpKind, OperatorNode, Role, TensorDecl};
use crate::layout::{rewrite_accesses_pass, SeqMap};
use crate::loops::{lower, LoopPrim, Schedules};
use crate::program::{Annotation, BufferDecl, BufferKind, Load, Program, Stmt, Value};

fn v(k: u32) -> AccessExpr {
    AccessExpr::Var(VarId(k))
}

fn buf(name: &str, dims: &[usize], role: Role) -> BufferDecl {
    BufferDecl {
        name: name.into(),
        dims: dims.iter().enumerate().map(|(k, e)| Dim::new(format!("d{k}"), *e)).collect(),
        role,
        kind: BufferKind::Tensor,
    }
}

fn for_(var: u32, extent: usize, body: Vec<Stmt>) -> Stmt {
    Stmt::For {
        var: VarId(var),
        extent,
        ann: Annotation::None,
        body,
    }
}

fn load(b: usize, index: Vec<AccessExpr>) -> Value {
    Value::Load(Load {
        buf: b,
        index,
        guard: Vec::new(),
    })
}

fn program(buffers: Vec<BufferDecl>, body: Vec<Stmt>, vars: usize) -> Program {
    Program {
        dtype: DType::Float32,
        buffers,
        body,
        var_names: (0..vars).map(|k| format!("i{k}")).collect(),
        layouts: BTreeMap::new(),
    }
}

/// `B[i][j] = A[i][j]` over a `rows × cols` block.
fn copy_block(rows: usize, cols: usize) -> Program {
    program(
        vec![buf("A", &[rows, cols], Role::Input), buf("B", &[rows, cols], Role::Output)],
        vec![for_(
            0,
            rows,
            vec![for_(
                1,
                cols,
                vec![Stmt::Store {
                    buf: 1,
                    index: vec![v(0), v(1)],
                    value: load(0, vec![v(0), v(1)]),
                    accumulate: false,
                }],
            )],
        )],
        2,
    )
}

#[test]
fn prefetch_prediction_column() {
    let cfg = CacheConfig::default();
    for (cols, misses) in [(4, 32), (16, 128), (64, 512), (256, 2048)] {
        let c = simulate_cache(&copy_block(512, cols), &cfg).unwrap();
        assert_eq!(c.l1_misses, misses, "512x{cols}");
        assert_eq!(c.l1_loads, 512 * cols as u64);
        assert_eq!(c.l1_stores, 512 * cols as u64);
    }
}

#[test]
fn contiguous_pass_rule() {
    for (e, line, pf) in [(100, 16, 4), (1000, 8, 2), (63, 16, 1), (4096, 4, 3)] {
        let cfg = CacheConfig {
            line_elems: line,
            prefetch_lines: pf,
            ..CacheConfig::default()
        };
        let c = simulate_cache(&copy_block(1, e), &cfg).unwrap();
        assert_eq!(c.l1_misses as usize, e.div_ceil(line * pf), "E={e}");
    }
}

#[test]
fn resident_line_hits() {
    let p = program(
        vec![buf("A", &[4], Role::Input), buf("B", &[1], Role::Output)],
        vec![for_(
            0,
            2,
            vec![Stmt::Store {
                buf: 1,
                index: vec![AccessExpr::Const(0)],
                value: load(0, vec![AccessExpr::Const(1)]),
                accumulate: false,
            }],
        )],
        1,
    );
    let c = simulate_cache(&p, &CacheConfig::default()).unwrap();
    assert_eq!((c.l1_loads, c.l1_misses), (2, 1));
}

#[test]
fn lru_evicts_oldest() {
    // Two lines of capacity, no prefetch beyond the demanded line.
    let cfg = CacheConfig {
        line_elems: 1,
        num_lines: 2,
        prefetch_lines: 1,
        ..CacheConfig::default()
    };
    let seq = [0i64, 1, 0, 2, 1];
    let body = seq
        .iter()
        .map(|&a| Stmt::Store {
            buf: 1,
            index: vec![AccessExpr::Const(0)],
            value: load(0, vec![AccessExpr::Const(a)]),
            accumulate: false,
        })
        .collect();
    let p = program(vec![buf("A", &[3], Role::Input), buf("B", &[1], Role::Output)], body, 0);
    // Output line B[0] competes too: 0 m, B, 1 m (evicts 0), B, 0 m, ...
    let c = simulate_cache(&p, &cfg).unwrap();
    assert_eq!(c.l1_misses, 5);
    let big = CacheConfig {
        num_lines: 8,
        ..cfg
    };
    assert_eq!(simulate_cache(&p, &big).unwrap().l1_misses, 3);
}

#[test]
fn cost_is_weighted_sum() {
    let cfg = CacheConfig::default();
    let c = simulate_cache(&copy_block(8, 8), &cfg).unwrap();
    let want = c.insts as f64 + c.l1_loads as f64 + 30.0 * c.l1_misses as f64 + 2.0 * c.l1_stores as f64;
    assert_eq!(c.cost, want);
    assert!(c.l1_misses <= c.l1_loads);
}

#[test]
fn bad_cache_config() {
    assert!(matches!(
        CacheConfig::from_json(r#"{"line_elems":0,"num_lines":4,"prefetch_lines":1}"#),
        Err(Error::Config(_))
    ));
    assert!(CacheConfig::from_json("{").is_err());
    let c = CacheConfig::from_json(r#"{"line_elems":16,"num_lines":512,"prefetch_lines":4,"weights":[1,1,30,2]}"#).unwrap();
    assert_eq!(c, CacheConfig::default());
}

#[test]
fn vectorized_loop_counts_lines() {
    let mut p = copy_block(4, 32);
    if let Stmt::For { body, .. } = &mut p.body[0] {
        if let Stmt::For { ann, .. } = &mut body[0] {
            *ann = Annotation::Vectorize;
        }
    }
    let c = simulate_cache(&p, &CacheConfig::default()).unwrap();
    assert_eq!(c.l1_loads, 4 * 2);
    assert_eq!(c.l1_stores, 4 * 2);
    let scalar = simulate_cache(&copy_block(4, 32), &CacheConfig::default()).unwrap();
    assert!(c.insts < scalar.insts);
    assert_eq!(c.l1_misses, scalar.l1_misses);
}

#[test]
fn interpreter_reports_out_of_bounds() {
    let p = program(
        vec![buf("A", &[4], Role::Input), buf("B", &[5], Role::Output)],
        vec![for_(
            0,
            5,
            vec![Stmt::Store {
                buf: 1,
                index: vec![v(0)],
                value: load(0, vec![v(0)]),
                accumulate: false,
            }],
        )],
        1,
    );
    let mut bufs = vec![vec![1.0f32; 4], vec![0.0; 5]];
    match interpret(&p, &mut bufs) {
        Err(Error::OutOfBounds { buffer, indices, stmt }) => {
            assert_eq!(buffer, "A");
            assert_eq!(indices, vec![4]);
            assert_eq!(stmt, "A[i0]");
        }
        other => panic!("{other:?}"),
    }
}

fn one_op(kind: OpKind, tensors: Vec<TensorDecl>, inputs: &[&str], attrs: Attrs) -> crate::ir::Graph {
    let mut g = crate::ir::Graph::new();
    for t in tensors {
        g.add_tensor(t);
    }
    g.add_tensor(TensorDecl::new("Y", vec![], DType::Float32, Role::Output));
    g.add_node(OperatorNode::new(kind, inputs, "Y").with_attrs(attrs));
    g.infer_shapes().unwrap()
}

fn t(id: &str, dims: &[usize], role: Role) -> TensorDecl {
    TensorDecl::new(
        id,
        dims.iter().enumerate().map(|(k, e)| Dim::new(["N", "C", "H", "W"][k], *e)).collect(),
        DType::Float32,
        role,
    )
}

#[test]
fn reference_add_zero() {
    let g = one_op(
        OpKind::EwAdd,
        vec![t("X", &[2, 3], Role::Input), t("Z", &[2, 3], Role::Constant)],
        &["X", "Z"],
        Attrs::default(),
    );
    let x: Vec<f32> = (0..6).map(|k| k as f32 * 0.5).collect();
    let inputs = BTreeMap::from([("X".to_string(), x.clone()), ("Z".to_string(), vec![0.0; 6])]);
    assert_eq!(reference_eval(&g, &inputs).unwrap()["Y"], x);
}

#[test]
fn reference_ones_conv() {
    let g = graphs::conv2d(DType::Float32, 1, 1, 5, 5, 1, 3, 3, 1);
    let inputs = BTreeMap::from([("Inp".to_string(), vec![1.0f32; 25]), ("Ker".to_string(), vec![1.0; 9])]);
    let out = &reference_eval(&g, &inputs).unwrap()["Conv"];
    assert_eq!(out.len(), 9);
    assert!(out.iter().all(|&x| x == 9.0));
}

#[test]
fn reference_depthwise_matches_per_channel() {
    let g = one_op(
        OpKind::DEP,
        vec![t("X", &[1, 4, 6, 6], Role::Input), t("K", &[4, 1, 3, 3], Role::Constant)],
        &["X", "K"],
        Attrs::default(),
    );
    let inputs = random_inputs::<f32>(&g, 5);
    let out = &reference_eval(&g, &inputs).unwrap()["Y"];
    let (x, k) = (&inputs["X"], &inputs["K"]);
    for c in 0..4 {
        // Each channel on its own as a single-channel convolution.
        let single = graphs::conv2d(DType::Float32, 1, 1, 6, 6, 1, 3, 3, 1);
        let sub = BTreeMap::from([
            ("Inp".to_string(), x[c * 36..(c + 1) * 36].to_vec()),
            ("Ker".to_string(), k[c * 9..(c + 1) * 9].to_vec()),
        ]);
        let want = &reference_eval(&single, &sub).unwrap()["Conv"];
        assert_eq!(&out[c * 16..(c + 1) * 16], &want[..]);
    }
}

#[test]
fn interpreter_examples() {
    // 1x1 convolution with an identity weight copies the input.
    let g = graphs::conv2d(DType::Int32, 1, 3, 4, 4, 3, 1, 1, 1);
    let mut inputs = random_inputs::<i32>(&g, 2);
    inputs.insert("Ker".into(), (0..9).map(|k| i32::from(k % 4 == 0)).collect());
    let prog = lower(&rewrite_accesses_pass(&g, &SeqMap::new()).unwrap(), &Schedules::new()).unwrap();
    let (out, _) = run_program(&prog, &inputs).unwrap();
    assert_eq!(out["Conv"], inputs["Inp"]);

    // identity × A = A
    let g = graphs::gmm_bias(DType::Int32, 2, 2, 3);
    let mut inputs = random_inputs::<i32>(&g, 4);
    inputs.insert("A".into(), vec![1, 0, 0, 1]);
    inputs.insert("Bias".into(), vec![0; 3]);
    let prog = lower(&rewrite_accesses_pass(&g, &SeqMap::new()).unwrap(), &Schedules::new()).unwrap();
    let (out, _) = run_program(&prog, &inputs).unwrap();
    assert_eq!(out["C"], inputs["Bm"]);
}

#[test]
fn features_basic() {
    let empty = program(vec![], vec![], 0);
    let f = extract_features(&empty);
    assert_eq!(f.len(), FEATURE_LEN);
    assert!(f.iter().all(|x| *x == 0.0));

    let p = copy_block(8, 16);
    assert_eq!(extract_features(&p), extract_features(&p.clone()));

    // Same loops, swapped order: inner stride goes from 1 to 16.
    let mut swapped = copy_block(8, 16);
    swapped.body = vec![for_(
        1,
        16,
        vec![for_(
            0,
            8,
            vec![Stmt::Store {
                buf: 1,
                index: vec![v(0), v(1)],
                value: load(0, vec![v(0), v(1)]),
                accumulate: false,
            }],
        )],
    )];
    assert_ne!(extract_features(&p), extract_features(&swapped));
}

#[test]
fn features_truncate_deep_programs() {
    let mut body = vec![Stmt::Store {
        buf: 0,
        index: vec![AccessExpr::Const(0)],
        value: Value::Const(1.0),
        accumulate: false,
    }];
    for k in 0..40 {
        body = vec![for_(k, 1, body)];
    }
    let p = program(vec![buf("A", &[1], Role::Output)], body, 40);
    assert_eq!(extract_features(&p).len(), FEATURE_LEN);
}

#[test]
fn surrogate_needs_samples() {
    let pairs: Vec<(FeatureVector, f64)> = (0..7).map(|k| (vec![k as f64], 1.0)).collect();
    let p = train_surrogate(&pairs);
    assert!(!p.is_trained());
    assert_eq!(predict_cost(&p, &vec![0.0]), None);
}

#[test]
fn surrogate_constant_features() {
    let pairs: Vec<(FeatureVector, f64)> = (0..10).map(|_| (vec![3.0, 1.0], 42.5)).collect();
    let p = train_surrogate(&pairs);
    assert!((predict_cost(&p, &vec![3.0, 1.0]).unwrap() - 42.5).abs() < 1e-12);
}

#[test]
fn surrogate_fits_linear_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sample = |rng: &mut ChaCha8Rng| {
        let x = vec![rng.gen_range(0.0..1000.0), 5.0, rng.gen_range(-1.0..1.0) * 0.0];
        let y = 3.0 * x[0] + 7.0;
        (x, y)
    };
    let train: Vec<_> = (0..40).map(|_| sample(&mut rng)).collect();
    let p = train_surrogate(&train);
    for _ in 0..20 {
        let (x, y) = sample(&mut rng);
        assert!((predict_cost(&p, &x).unwrap() - y).abs() < 1e-6);
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

pub(crate) fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn random_gmm_program(rng: &mut ChaCha8Rng) -> Program {
    let g = graphs::gmm_bias(DType::Float32, 64, 64, 64);
    let mut prims = Vec::new();
    let mut names = vec!["m".to_string(), "n".to_string(), "rk".to_string()];
    let mut spatial = vec!["m".to_string(), "n".to_string()];
    let mut reds = vec!["rk".to_string()];
    for l in ["m", "n", "rk"] {
        if rng.gen_bool(0.6) {
            let f = *[2usize, 4, 8, 16, 32].choose(rng).unwrap();
            prims.push(LoopPrim::Split { var: l.into(), factor: f });
            let list = if l == "rk" { &mut reds } else { &mut spatial };
            let pos = list.iter().position(|x| x == l).unwrap();
            list.splice(pos..=pos, [format!("{l}o"), format!("{l}i")]);
        }
    }
    // Keep spatial loops outermost so the reduction stays a suffix.
    spatial.shuffle(rng);
    reds.shuffle(rng);
    names.clear();
    names.extend(spatial);
    names.extend(reds);
    prims.push(LoopPrim::Reorder { order: names });
    let sched = Schedules::from([("C".to_string(), prims)]);
    lower(&rewrite_accesses_pass(&g, &SeqMap::new()).unwrap(), &sched).unwrap()
}

#[test]
fn surrogate_ranks_simulated_costs() {
    let cfg = CacheConfig {
        num_lines: 64,
        ..CacheConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut sample = || {
        let p = random_gmm_program(&mut rng);
        (extract_features(&p), simulate_cache(&p, &cfg).unwrap().cost)
    };
    let train: Vec<_> = (0..50).map(|_| sample()).collect();
    let test: Vec<_> = (0..50).map(|_| sample()).collect();
    let model = train_surrogate(&train);
    let pred: Vec<f64> = test.iter().map(|(f, _)| predict_cost(&model, f).unwrap()).collect();
    let truth: Vec<f64> = test.iter().map(|(_, c)| *c).collect();
    let rho = spearman(&pred, &truth);
    assert!(rho >= 0.7, "spearman {rho}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulation_is_deterministic(rows in 1usize..40, cols in 1usize..40, lines in 1usize..16) {
        let cfg = CacheConfig { num_lines: lines, ..CacheConfig::default() };
        let p = copy_block(rows, cols);
        let a = simulate_cache(&p, &cfg).unwrap();
        prop_assert_eq!(&a, &simulate_cache(&p, &cfg).unwrap());
        prop_assert!(a.l1_misses <= a.l1_loads);
        prop_assert!(a.cost >= 0.0);
    }

    #[test]
    fn surrogate_predictions_finite(seed in 0u64..1000, n in 8usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(FeatureVector, f64)> = (0..n)
            .map(|_| ((0..6).map(|_| rng.gen_range(-1e6..1e6)).collect(), rng.gen_range(0.0..1e9)))
            .collect();
        let p = train_surrogate(&pairs);
        for (f, _) in &pairs {
            prop_assert!(predict_cost(&p, f).unwrap().is_finite());
        }
    }
}
