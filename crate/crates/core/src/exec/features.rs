use crate::expr::AccessExpr;
use crate::program::{Annotation, Program, Stmt, Value};

const MAX_LOOPS: usize = 32;
const LOOP_FEATS: usize = 5;
const TOTALS: usize = 8;
const MAX_BUFFERS: usize = 8;
const BUFFER_FEATS: usize = 4;
const LOCALITY: usize = 4;
/// Reference line size for the locality estimates, in elements.
const REF_LINE: f64 = 16.0;

pub const FEATURE_LEN: usize =
    MAX_LOOPS * LOOP_FEATS + TOTALS + MAX_BUFFERS * BUFFER_FEATS + LOCALITY;

/// Fixed-length numeric summary of a program.
pub type FeatureVector = Vec<f64>;

#[derive(Clone, Copy)]
struct Frame {
    var: usize,
    extent: f64,
}

#[derive(Default)]
struct BufStats {
    weight: f64,
    log_stride: f64,
    unit: f64,
    zero: f64,
}

struct Walk {
    strides: Vec<Vec<i64>>,
    f: Vec<f64>,
    loops_seen: usize,
    iterations: f64,
    stores: f64,
    loads: f64,
    ops: f64,
    guarded: f64,
    max_depth: usize,
    bufs: Vec<BufStats>,
    locality: [f64; LOCALITY],
}

fn ln1(x: f64) -> f64 {
    (1.0 + x.max(0.0)).ln()
}

impl Walk {
    /// Address step in elements when `var` moves by one from the origin.
    fn step(&self, buf: usize, index: &[AccessExpr], var: usize) -> i64 {
        let addr = |one: bool| -> i64 {
            index
                .iter()
                .zip(&self.strides[buf])
                .map(|(e, s)| e.eval_with(&|v| i64::from(one && v.index() == var)) * s)
                .sum()
        };
        addr(true) - addr(false)
    }

    fn site(&mut self, buf: usize, index: &[AccessExpr], stack: &[Frame], execs: f64) {
        let steps: Vec<i64> = stack.iter().map(|fr| self.step(buf, index, fr.var)).collect();
        if let Some(b) = self.bufs.get_mut(buf) {
            let inner = steps.last().copied().unwrap_or(0).unsigned_abs() as f64;
            b.weight += execs;
            b.log_stride += execs * ln1(inner);
            if inner == 1.0 {
                b.unit += execs;
            }
            if inner == 0.0 {
                b.zero += execs;
            }
        }
        for k in 0..LOCALITY {
            let take = (k + 1).min(stack.len());
            let inner = &stack[stack.len() - take..];
            let span: f64 = 1.0
                + inner
                    .iter()
                    .zip(&steps[steps.len() - take..])
                    .map(|(fr, s)| s.unsigned_abs() as f64 * (fr.extent - 1.0))
                    .sum::<f64>();
            let points: f64 = inner.iter().map(|fr| fr.extent).product();
            let lines = (span / REF_LINE).ceil().min(points).max(1.0);
            self.locality[k] += execs / points * lines;
        }
    }

    fn walk(&mut self, stmts: &[Stmt], stack: &mut Vec<Frame>, execs: f64) {
        for s in stmts {
            match s {
                Stmt::For {
                    var,
                    extent,
                    ann,
                    body,
                } => {
                    let depth = stack.len();
                    if self.loops_seen < MAX_LOOPS {
                        let o = self.loops_seen * LOOP_FEATS;
                        self.f[o] = ln1(*extent as f64);
                        self.f[o + 1] = depth as f64 / 8.0;
                        self.f[o + 2] = f64::from(*ann == Annotation::Vectorize);
                        self.f[o + 3] = f64::from(*ann == Annotation::Unroll);
                        self.f[o + 4] = f64::from(*ann == Annotation::Parallel);
                    }
                    self.loops_seen += 1;
                    let n = execs * *extent as f64;
                    self.iterations += n;
                    self.max_depth = self.max_depth.max(depth + 1);
                    stack.push(Frame {
                        var: var.index(),
                        extent: *extent as f64,
                    });
                    self.walk(body, stack, n);
                    stack.pop();
                }
                Stmt::Store {
                    buf,
                    index,
                    value,
                    accumulate,
                } => {
                    self.stores += execs;
                    self.ops += execs * value.op_count() as f64;
                    self.value(value, stack, execs);
                    if *accumulate {
                        self.loads += execs;
                    }
                    self.site(*buf, index, stack, execs);
                }
                Stmt::If { conds, body } => {
                    self.guarded += execs * conds.len() as f64;
                    self.walk(body, stack, execs);
                }
            }
        }
    }

    fn value(&mut self, v: &Value, stack: &[Frame], execs: f64) {
        for l in v.loads() {
            self.loads += execs;
            if !l.guard.is_empty() {
                self.guarded += execs * l.guard.len() as f64;
            }
            self.site(l.buf, &l.index, stack, execs);
        }
    }
}


/// Extracts the feature vector of `prog`: per-loop extent, depth and
/// annotation slots for the first 32 loops, dynamic totals, per-buffer
/// stride statistics and line-footprint estimates of the innermost loops.
pub fn extract_features(prog: &Program) -> FeatureVector {
    let mut w = Walk {
        strides: prog.buffers.iter().map(|b| b.strides()).collect(),
        f: vec![0.0; FEATURE_LEN],
        loops_seen: 0,
        iterations: 0.0,
        stores: 0.0,
        loads: 0.0,
        ops: 0.0,
        guarded: 0.0,
        max_depth: 0,
        bufs: (0..prog.buffers.len().min(MAX_BUFFERS)).map(|_| BufStats::default()).collect(),
        locality: [0.0; LOCALITY],
    };
    w.walk(&prog.body, &mut Vec::new(), 1.0);
    let roots = prog.body.iter().filter(|s| matches!(s, Stmt::For { .. })).count();
    let footprint: usize = prog.buffers.iter().map(|b| b.len()).sum();
    let mut f = w.f;
    let t = MAX_LOOPS * LOOP_FEATS;
    if !prog.body.is_empty() {
        f[t] = ln1(w.iterations);
        f[t + 1] = ln1(w.stores);
        f[t + 2] = ln1(w.loads);
        f[t + 3] = ln1(w.ops);
        f[t + 4] = ln1(footprint as f64);
        f[t + 5] = roots as f64;
        f[t + 6] = w.max_depth as f64;
        f[t + 7] = ln1(w.guarded);
    }
    let b0 = t + TOTALS;
    for (k, b) in w.bufs.iter().enumerate() {
        if b.weight > 0.0 {
            let o = b0 + k * BUFFER_FEATS;
            f[o] = b.log_stride / b.weight;
            f[o + 1] = b.unit / b.weight;
            f[o + 2] = b.zero / b.weight;
            f[o + 3] = ln1(b.weight);
        }
    }
    let l0 = b0 + MAX_BUFFERS * BUFFER_FEATS;
    for k in 0..LOCALITY {
        f[l0 + k] = ln1(w.locality[k]);
    }
    f
}
