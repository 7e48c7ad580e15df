use super::*;
use crate::error::Error;
use crate::exec::{first_mismatch, random_inputs, reference_eval, run_program};
use crate::graphs;
use crate::ir::{DType, Graph};
use crate::layout::{rewrite_accesses_pass, LayoutPrimitive as P, PrimitiveSeq, SeqMap};
use crate::program::Program;

fn seq(p: Vec<P>) -> PrimitiveSeq {
    PrimitiveSeq(p)
}

fn lower_with(g: &Graph, seqs: &SeqMap, sched: &Schedules) -> Result<Program> {
    lower(&rewrite_accesses_pass(g, seqs)?, sched)
}

fn check_oracle(g: &Graph, prog: &Program) {
    let inputs = random_inputs::<i32>(g, 11);
    let (got, _) = run_program(prog, &inputs).unwrap();
    let want = reference_eval(g, &inputs).unwrap();
    assert_eq!(first_mismatch(&got, &want), None, "\n{prog}");
}

fn nest_of(g: &Graph, seqs: &SeqMap, out: &str) -> LoopNest {
    let rg = rewrite_accesses_pass(g, seqs).unwrap();
    let rn = rg.nodes.iter().find(|n| n.output == out).unwrap();
    build_loop_nest(rn)
}

// Output N·2·2·(O/ot)·(H/2)·(W/2)·ot with ot = 4, the input unfolded to
// half-height tiles overlapping by KH-1, and the weight's O split likewise.
fn tiled_conv_seqs(h: usize, o: usize) -> SeqMap {
    let half = h / 2;
    let mut m = SeqMap::new();
    m.insert(
        "Conv".into(),
        seq(vec![
            P::Split { dim: 3, factors: vec![2, half] },
            P::Split { dim: 5, factors: vec![2, half] },
            P::Split { dim: 2, factors: vec![o / 4, 4] },
            P::Reorder { perm: vec![1, 4, 6, 2, 5, 7, 3] },
        ]),
    );
    m.insert(
        "Inp".into(),
        seq(vec![
            P::Unfold { dim: 3, tile: half + 2, stride: half },
            P::Unfold { dim: 5, tile: half + 2, stride: half },
            P::Reorder { perm: vec![1, 3, 5, 2, 4, 6] },
        ]),
    );
    m.insert(
        "Ker".into(),
        seq(vec![
            P::Split { dim: 1, factors: vec![o / 4, 4] },
            P::Reorder { perm: vec![1, 3, 4, 5, 2] },
        ]),
    );
    m
}

#[test]
fn naive_conv_nest() {
    let g = graphs::conv2d(DType::Int32, 1, 2, 6, 6, 4, 3, 3, 1);
    let nest = nest_of(&g, &SeqMap::new(), "Conv");
    assert_eq!(nest.loop_names(), ["n", "o", "h", "w", "ri", "rh", "rw"]);
    let prog = lower_with(&g, &SeqMap::new(), &Schedules::new()).unwrap();
    check_oracle(&g, &prog);
}

#[test]
fn tiled_layout_program() {
    let g = graphs::conv2d(DType::Int32, 1, 2, 10, 10, 8, 3, 3, 1);
    let seqs = tiled_conv_seqs(8, 8);
    let nest = nest_of(&g, &seqs, "Conv");
    assert_eq!(
        nest.loop_names(),
        ["n", "ho", "wo", "oo", "hi", "wi", "oi", "ri", "rh", "rw"]
    );
    let order = ["n", "ho", "wo", "oo", "hi", "wi", "ri", "rh", "rw", "oi"];
    let mut sched = Schedules::new();
    sched.insert(
        "Conv".into(),
        vec![LoopPrim::Reorder {
            order: order.iter().map(|s| s.to_string()).collect(),
        }],
    );
    let prog = lower_with(&g, &seqs, &sched).unwrap();
    let want = "\
for n in range(1):
  for ho in range(2):
    for wo in range(2):
      for oo in range(2):
        for hi in range(4):
          for wi in range(4):
            for oi in range(4):
              Conv[n][ho][wo][oo][hi][wi][oi] = 0
            for ri in range(2):
              for rh in range(3):
                for rw in range(3):
                  for oi in range(4):
                    Conv[n][ho][wo][oo][hi][wi][oi] += Inp[n][ho][wo][ri][hi + rh][wi + rw] * Ker[oo][ri][rh][rw][oi]
";
    assert_eq!(prog.pseudocode(), want);
    check_oracle(&g, &prog);
}

fn row_tiled_seqs(with_relu: bool) -> SeqMap {
    let s = seq(vec![
        P::Split { dim: 3, factors: vec![2, 4] },
        P::Reorder { perm: vec![1, 3, 5, 2, 4] },
    ]);
    let mut m = SeqMap::new();
    if with_relu {
        m.insert("ReLU".into(), s.clone());
    }
    m.insert("Conv".into(), s);
    m
}

#[test]
fn tiled_output_without_propagation_conflicts() {
    let g = graphs::conv_relu(DType::Int32, 1, 2, 10, 6, 4, 3, 3);
    let seqs = row_tiled_seqs(false);
    let conv = nest_of(&g, &seqs, "Conv");
    let relu = nest_of(&g, &seqs, "ReLU");
    assert_eq!(conv.loop_names(), ["n", "ho", "w", "o", "hi", "ri", "rh", "rw"]);
    assert_eq!(relu.loop_names(), ["n", "o", "h", "w"]);
    let prog = lower_with(&g, &seqs, &Schedules::new()).unwrap();
    assert!(prog
        .pseudocode()
        .contains("ReLU[n][o][h][w] = max(Conv[n][h//4][w][o][h%4], 0)"));
    for depth in [2, 4] {
        let err = compute_at(&conv, &relu, depth).unwrap_err();
        assert!(matches!(err, Error::FusionConflict { .. }), "{err}");
    }
    check_oracle(&g, &prog);
}

#[test]
fn propagated_layout_fuses() {
    let g = graphs::conv_relu(DType::Int32, 1, 2, 10, 6, 4, 3, 3);
    let seqs = row_tiled_seqs(true);
    let mut sched = Schedules::new();
    sched.insert(
        "Conv".into(),
        vec![LoopPrim::ComputeAt {
            consumer: "ReLU".into(),
            depth: 5,
        }],
    );
    let prog = lower_with(&g, &seqs, &sched).unwrap();
    let want = "\
for n in range(1):
  for ho in range(2):
    for w in range(4):
      for o in range(4):
        for hi in range(4):
          Conv[n][ho][w][o][hi] = 0
          for ri in range(2):
            for rh in range(3):
              for rw in range(3):
                Conv[n][ho][w][o][hi] += Inp[n][ri][ho*4 + hi + rh][w + rw] * Ker[o][ri][rh][rw]
          ReLU[n][ho][w][o][hi] = max(Conv[n][ho][w][o][hi], 0)
";
    assert_eq!(prog.pseudocode(), want);
    check_oracle(&g, &prog);
}

#[test]
fn compute_at_depth_zero_concatenates() {
    let g = graphs::conv_relu(DType::Int32, 1, 1, 5, 5, 2, 3, 3);
    let mut sched = Schedules::new();
    sched.insert(
        "Conv".into(),
        vec![LoopPrim::ComputeAt {
            consumer: "ReLU".into(),
            depth: 0,
        }],
    );
    let fused = lower_with(&g, &SeqMap::new(), &sched).unwrap();
    let plain = lower_with(&g, &SeqMap::new(), &Schedules::new()).unwrap();
    assert_eq!(fused.pseudocode(), plain.pseudocode());
}

#[test]
fn split_strip_mines() {
    let g = graphs::gmm_bias(DType::Int32, 4, 3, 32);
    let nest = nest_of(&g, &SeqMap::new(), "C");
    let s = loop_split(&nest, "n", 16).unwrap();
    assert_eq!(s.loop_names(), ["m", "no", "ni", "rk"]);
    assert_eq!(s.loops[1].extent, 2);
    assert_eq!(s.loops[2].extent, 16);
    assert!(loop_split(&nest, "n", 5).is_err());
    assert!(loop_split(&nest, "zz", 2).is_err());
}

#[test]
fn identity_reorder_is_noop() {
    let g = graphs::gmm_bias(DType::Int32, 4, 3, 8);
    let nest = nest_of(&g, &SeqMap::new(), "C");
    let names: Vec<String> = nest.loop_names().iter().map(|s| s.to_string()).collect();
    let r = loop_reorder(&nest, &names).unwrap();
    assert_eq!(r, nest);
    assert!(loop_reorder(&nest, &names[..2]).is_err());
}

#[test]
fn vectorize_legality() {
    let g = graphs::gmm_bias(DType::Int32, 4, 3, 8);
    let nest = nest_of(&g, &SeqMap::new(), "C");
    // rk is innermost but a reduction.
    assert!(annotate(&nest, "rk", Annotation::Vectorize).is_err());
    let order: Vec<String> = ["m", "rk", "n"].iter().map(|s| s.to_string()).collect();
    let r = loop_reorder(&nest, &order).unwrap();
    assert!(annotate(&r, "n", Annotation::Vectorize).is_ok());
    assert!(annotate(&r, "m", Annotation::Vectorize).is_err());
    // m innermost strides A by K.
    let order: Vec<String> = ["n", "rk", "m"].iter().map(|s| s.to_string()).collect();
    let r = loop_reorder(&nest, &order).unwrap();
    assert!(annotate(&r, "m", Annotation::Vectorize).is_err());
    assert!(annotate(&r, "rk", Annotation::Unroll).is_ok());
}

#[test]
fn cache_read_stages_and_preserves_values() {
    let g = graphs::gmm_bias(DType::Int32, 8, 4, 8);
    let mut sched = Schedules::new();
    sched.insert(
        "C".into(),
        vec![
            LoopPrim::Split { var: "n".into(), factor: 4 },
            LoopPrim::CacheRead { tensor: "Bm".into(), depth: 2 },
        ],
    );
    let prog = lower_with(&g, &SeqMap::new(), &sched).unwrap();
    assert!(prog.buffers.iter().any(|b| b.name.starts_with("Bm_s")));
    check_oracle(&g, &prog);
}

#[test]
fn schedule_errors_aggregate() {
    let g = graphs::c2d_chain(DType::Int32, 4, 4, 2);
    let mut sched = Schedules::new();
    sched.insert("Conv".into(), vec![LoopPrim::Split { var: "h".into(), factor: 3 }]);
    sched.insert("Y".into(), vec![LoopPrim::Split { var: "nope".into(), factor: 2 }]);
    let err = lower_with(&g, &SeqMap::new(), &sched).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("nope") && msg.contains("3"), "{msg}");
}

#[test]
fn chain_lowers_to_reference_values() {
    let g = graphs::stem(DType::Int32, 6, 6);
    let mut sched = Schedules::new();
    sched.insert("Bias".into(), vec![LoopPrim::Inline { consumer: "Y".into() }]);
    let prog = lower_with(&g, &SeqMap::new(), &sched).unwrap();
    check_oracle(&g, &prog);
}

#[test]
fn conv_reduction_count() {
    let g = graphs::conv2d(DType::Int32, 1, 3, 7, 7, 2, 3, 3, 2);
    let prog = lower_with(&g, &SeqMap::new(), &Schedules::new()).unwrap();
    let inputs = random_inputs::<i32>(&g, 3);
    let (_, stats) = run_program(&prog, &inputs).unwrap();
    let conv = prog.buffer_index("Conv").unwrap();
    assert_eq!(stats.accumulations[conv], (2 * 3 * 3) as u64 * 3 * 3 * 3);
}
