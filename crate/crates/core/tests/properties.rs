use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use layoutforge::exec::{random_inputs, run_program, simulate_cache, CacheConfig};
use layoutforge::expr::{AccessExpr, VarId};
use layoutforge::graphs;
use layoutforge::ir::{DType, Dim, Graph, OpKind, OperatorNode, Role, TensorDecl};
use layoutforge::layout::{derive_layout, forward_map, invert_sequence, LayoutPrimitive as P, PrimitiveSeq};
use layoutforge::pipeline::{compile, oracle_check};
use layoutforge::program::{Annotation, BufferDecl, BufferKind, Load, Program, Stmt, Value};
use layoutforge::tuner::{default_plan, random_plan, random_schedules, tune, tune_loops, TuneConfig};

/// Element-wise DAG over `n` ops; op k reads two earlier tensors picked by
/// `picks`, and nodes are inserted in the order of `perm`.
fn random_dag(n: usize, picks: &[(usize, usize)], perm: &[usize]) -> Graph {
    let mut g = Graph::new();
    g.add_tensor(TensorDecl::new("t0", vec![Dim::new("A", 2), Dim::new("B", 3)], DType::Int32, Role::Input));
    let mut nodes = Vec::new();
    for k in 1..=n {
        g.add_tensor(TensorDecl::new(format!("t{k}"), Vec::new(), DType::Int32, Role::Intermediate));
        let (a, b) = (picks[k - 1].0 % k, picks[k - 1].1 % k);
        let (a, b) = (format!("t{a}"), format!("t{b}"));
        let node = if a == b {
            OperatorNode::new(OpKind::ReLU, &[a.as_str()], &format!("t{k}"))
        } else {
            OperatorNode::new(OpKind::EwAdd, &[a.as_str(), b.as_str()], &format!("t{k}"))
        };
        nodes.push(node);
    }
    for &p in perm {
        g.add_node(nodes[p].clone());
    }
    g
}

fn basic_seq(ext: &[usize], ops: &[(u8, usize, usize)]) -> (PrimitiveSeq, Vec<usize>) {
    let mut dims = ext.to_vec();
    let mut prims = Vec::new();
    for &(kind, a, b) in ops {
        let r = dims.len();
        match kind % 3 {
            0 => {
                let d = a % r;
                let divs: Vec<usize> = (1..=dims[d]).filter(|f| dims[d] % f == 0).collect();
                let f = divs[b % divs.len()];
                prims.push(P::Split {
                    dim: d + 1,
                    factors: vec![dims[d] / f, f],
                });
                dims.splice(d..=d, [dims[d] / f, f]);
            }
            1 if r > 1 => {
                let d = a % (r - 1);
                let len = 2 + b % (r - d - 1).max(1);
                let len = len.min(r - d);
                prims.push(P::Fuse {
                    dims: (d + 1..=d + len).collect(),
                });
                let prod = dims[d..d + len].iter().product();
                dims.splice(d..d + len, [prod]);
            }
            _ => {
                // rotate by `a`, then swap two positions
                let mut perm: Vec<usize> = (1..=r).collect();
                perm.rotate_left(a % r);
                perm.swap(b % r, (a + b) % r);
                dims = perm.iter().map(|&p| dims[p - 1]).collect();
                prims.push(P::Reorder { perm });
            }
        }
    }
    (PrimitiveSeq::new(prims), dims)
}

fn all_indices(ext: &[usize]) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for &e in ext {
        out = out
            .into_iter()
            .flat_map(|p: Vec<i64>| {
                (0..e as i64).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    out
}

fn copy_row(e: usize) -> Program {
    let buf = |name: &str, role| BufferDecl {
        name: name.into(),
        dims: vec![Dim::new("x", e)],
        role,
        kind: BufferKind::Tensor,
    };
    let x = AccessExpr::Var(VarId(0));
    Program {
        dtype: DType::Float32,
        buffers: vec![buf("A", Role::Input), buf("B", Role::Output)],
        body: vec![Stmt::For {
            var: VarId(0),
            extent: e,
            ann: Annotation::None,
            body: vec![Stmt::Store {
                buf: 1,
                index: vec![x.clone()],
                value: Value::Load(Load {
                    buf: 0,
                    index: vec![x],
                    guard: Vec::new(),
                }),
                accumulate: false,
            }],
        }],
        var_names: vec!["i".into()],
        layouts: BTreeMap::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topo_order_respects_edges(
        n in 1usize..10,
        picks in proptest::collection::vec((0usize..10, 0usize..10), 10),
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let g = random_dag(n, &picks, &perm);
        let order = g.topo_order().unwrap();
        let mut sorted = order.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(k, &ni)| (g.nodes[ni].output.as_str(), k)).collect();
        for (k, &ni) in order.iter().enumerate() {
            for i in &g.nodes[ni].inputs {
                if let Some(&p) = pos.get(i.as_str()) {
                    prop_assert!(p < k, "{} read before it is written", i);
                }
            }
        }
        let once = g.infer_shapes().unwrap();
        let twice = once.infer_shapes().unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn basic_sequences_are_bijections(
        ext in proptest::collection::vec(1usize..9, 1..5),
        ops in proptest::collection::vec((0u8..3, 0usize..8, 0usize..8), 0..5),
    ) {
        let total: usize = ext.iter().product();
        prop_assume!(total <= 4096);
        let dims: Vec<Dim> = ext.iter().enumerate().map(|(k, &e)| Dim::new(format!("D{k}"), e)).collect();
        let (seq, new_ext) = basic_seq(&ext, &ops);
        let map = forward_map(&seq, &dims).unwrap();
        prop_assert_eq!(map.dims.iter().map(|d| d.extent).collect::<Vec<_>>(), new_ext.clone());
        let mut seen = HashSet::new();
        for ix in all_indices(&ext) {
            let y = map.eval(&ix);
            prop_assert!(y.iter().zip(&new_ext).all(|(&v, &e)| v >= 0 && (v as usize) < e));
            prop_assert!(seen.insert(y));
        }
        prop_assert_eq!(seen.len(), total);

        let inv = invert_sequence(&seq, &dims).unwrap();
        let back = derive_layout(&inv, &map.dims).unwrap();
        prop_assert_eq!(back.iter().map(|d| d.extent).collect::<Vec<_>>(), ext);
    }

    #[test]
    fn contiguous_pass_misses(e in 1usize..3000, line in 1usize..32, pf in 1usize..6) {
        let cfg = CacheConfig { line_elems: line, prefetch_lines: pf, ..CacheConfig::default() };
        let c = simulate_cache(&copy_row(e), &cfg).unwrap();
        prop_assert_eq!(c.l1_misses as usize, e.div_ceil(line * pf));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any plan and schedule keeps results and runs each output's
    /// reduction exactly `I·KH·KW` times.
    #[test]
    fn schedules_keep_semantics_and_reduction_counts(
        seed in any::<u64>(),
        i in 1usize..4,
        h in 5usize..11,
        o in prop_oneof![Just(2usize), Just(4), Just(6)],
        v in 1usize..3,
    ) {
        let g = graphs::conv2d(DType::Int32, 1, i, h, h, o, 3, 3, v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = random_plan(&g, 1 + (seed % 2) as usize, &mut rng).unwrap();
        let sched = random_schedules(&g, &plan, &mut rng).unwrap();
        let prog = compile(&g, &plan, &sched).unwrap();
        prop_assert_eq!(oracle_check(&g, &prog, seed).unwrap(), None);
        let (_, stats) = run_program(&prog, &random_inputs::<i32>(&g, seed)).unwrap();
        let out = g.tensor("Conv").unwrap().dims.iter().map(|d| d.extent).product::<usize>();
        let conv = prog.buffer_index("Conv").unwrap();
        prop_assert_eq!(stats.accumulations[conv], (out * i * 9) as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Simulator calls equal the budget, and the loop-only stage never
    /// rebuilds a loop space.
    #[test]
    fn budget_is_exact(seed in 0u64..1000, budget in 0usize..24, joint_frac in 0.0f64..1.0) {
        let g = graphs::gmm_bias(DType::Float32, 8, 8, 8);
        let joint = (budget as f64 * joint_frac) as usize;
        let cfg = TuneConfig { budget, joint, seed, ..TuneConfig::default() };
        let r = tune(&g, &CacheConfig::default(), &cfg).unwrap();
        prop_assert_eq!(r.history.len(), budget);
        prop_assert_eq!(r.rebuilds.loop_only, 0);
        let l = tune_loops(&g, &default_plan(&g).unwrap(), &CacheConfig::default(), &TuneConfig { joint: 0, ..cfg }).unwrap();
        prop_assert_eq!(l.history.len(), budget);
        prop_assert_eq!(l.rebuilds.loop_only + l.rebuilds.joint, 0);
    }
}
