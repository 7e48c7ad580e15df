use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::AccessExpr;
use crate::program::{Annotation, Bound, Program, Stmt, Value};

/// Cache model parameters. Sizes are in elements and lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub line_elems: usize,
    pub num_lines: usize,
    pub prefetch_lines: usize,
    /// Cost weights for `[insts, l1_loads, l1_misses, l1_stores]`.
    #[serde(default = "default_weights")]
    pub weights: [f64; 4],
}

fn default_weights() -> [f64; 4] {
    [1.0, 1.0, 30.0, 2.0]
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            line_elems: 16,
            num_lines: 512,
            prefetch_lines: 4,
            weights: default_weights(),
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.line_elems == 0 || self.num_lines == 0 || self.prefetch_lines == 0 {
            return Err(Error::Config(
                "line_elems, num_lines and prefetch_lines must be positive".into(),
            ));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("cost weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: CacheConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileCounters {
    pub insts: u64,
    pub l1_loads: u64,
    pub l1_misses: u64,
    pub l1_stores: u64,
    pub cost: f64,
}

impl ProfileCounters {
    fn finish(&mut self, w: &[f64; 4]) {
        self.cost = w[0] * self.insts as f64
            + w[1] * self.l1_loads as f64
            + w[2] * self.l1_misses as f64
            + w[3] * self.l1_stores as f64;
    }
}

/// Fully associative LRU over line numbers.
struct Lru {
    cap: usize,
    stamp: HashMap<u64, u64>,
    order: BTreeMap<u64, u64>,
    clock: u64,
    /// Most recently used line; touching it again changes nothing.
    last: Option<u64>,
}

impl Lru {
    fn new(cap: usize) -> Self {
        Lru {
            cap,
            stamp: HashMap::with_capacity(cap * 2),
            order: BTreeMap::new(),
            clock: 0,
            last: None,
        }
    }

    /// Marks `line` most recent. Returns whether it was resident.
    fn touch(&mut self, line: u64) -> bool {
        if self.last == Some(line) {
            return true;
        }
        self.clock += 1;
        let hit = match self.stamp.insert(line, self.clock) {
            Some(old) => {
                self.order.remove(&old);
                true
            }
            None => false,
        };
        self.order.insert(self.clock, line);
        if self.stamp.len() > self.cap {
            let (_, victim) = self.order.pop_first().expect("non-empty");
            self.stamp.remove(&victim);
        }
        self.last = Some(line);
        hit
    }

    fn contains(&self, line: u64) -> bool {
        self.stamp.contains_key(&line)
    }
}

/// Address expression split into affine terms over loop variables plus
/// non-linear atoms, in elements.
#[derive(Clone, Debug)]
struct Affine {
    konst: i64,
    terms: Vec<(usize, i64)>,
    atoms: Vec<(AccessExpr, i64)>,
}

impl Affine {
    fn of(index: &[AccessExpr], strides: &[i64], base: i64) -> Affine {
        let mut terms: BTreeMap<usize, i64> = BTreeMap::new();
        let mut atoms = Vec::new();
        let mut konst = base;
        for (e, s) in index.iter().zip(strides) {
            let (parts, c) = e.linear_parts();
            konst += c * s;
            for (atom, k) in parts {
                match atom {
                    AccessExpr::Var(v) => *terms.entry(v.index()).or_default() += k * s,
                    other => atoms.push((other, k * s)),
                }
            }
        }
        Affine {
            konst,
            terms: terms.into_iter().filter(|(_, k)| *k != 0).collect(),
            atoms,
        }
    }

    fn eval(&self, env: &[i64]) -> i64 {
        let mut a = self.konst;
        for &(v, k) in &self.terms {
            a += k * env[v];
        }
        for (e, k) in &self.atoms {
            a += k * e.eval(env);
        }
        a
    }
}

struct CBound {
    expr: Affine,
    lo: i64,
    hi: i64,
}

impl CBound {
    fn of(b: &Bound) -> CBound {
        CBound {
            expr: Affine::of(std::slice::from_ref(&b.expr), &[1], 0),
            lo: b.lo,
            hi: b.hi,
        }
    }

    fn holds(&self, env: &[i64]) -> bool {
        let v = self.expr.eval(env);
        self.lo <= v && v < self.hi
    }
}

struct CLoad {
    addr: Affine,
    guard: Vec<CBound>,
}

enum CStmt {
    For {
        var: usize,
        extent: i64,
        ann: Annotation,
        body: Vec<CStmt>,
    },
    Store {
        loads: Vec<CLoad>,
        addr: Affine,
        accumulate: bool,
        ops: u64,
    },
    If {
        conds: Vec<CBound>,
        body: Vec<CStmt>,
    },
}

fn compile(stmts: &[Stmt], bases: &[i64], strides: &[Vec<i64>]) -> Vec<CStmt> {
    stmts
        .iter()
        .map(|s| match s {
            Stmt::For {
                var,
                extent,
                ann,
                body,
            } => CStmt::For {
                var: var.index(),
                extent: *extent as i64,
                ann: *ann,
                body: compile(body, bases, strides),
            },
            Stmt::Store {
                buf,
                index,
                value,
                accumulate,
            } => CStmt::Store {
                loads: compile_loads(value, bases, strides),
                addr: Affine::of(index, &strides[*buf], bases[*buf]),
                accumulate: *accumulate,
                ops: value.op_count() as u64 + u64::from(*accumulate),
            },
            Stmt::If { conds, body } => CStmt::If {
                conds: conds.iter().map(CBound::of).collect(),
                body: compile(body, bases, strides),
            },
        })
        .collect()
}

fn compile_loads(v: &Value, bases: &[i64], strides: &[Vec<i64>]) -> Vec<CLoad> {
    v.loads()
        .into_iter()
        .map(|l| CLoad {
            addr: Affine::of(&l.index, &strides[l.buf], bases[l.buf]),
            guard: l.guard.iter().map(CBound::of).collect(),
        })
        .collect()
}

struct Sim<'a> {
    cfg: &'a CacheConfig,
    lru: Lru,
    c: ProfileCounters,
    env: Vec<i64>,
    line: i64,
}

impl Sim<'_> {
    fn load_line(&mut self, line: i64) {
        self.c.l1_loads += 1;
        let line = line as u64;
        if self.lru.last == Some(line) || self.lru.contains(line) {
            self.lru.touch(line);
            return;
        }
        self.c.l1_misses += 1;
        for p in 1..self.cfg.prefetch_lines as u64 {
            if !self.lru.contains(line + p) {
                self.lru.touch(line + p);
            }
        }
        self.lru.touch(line);
    }

    fn store_line(&mut self, line: i64) {
        self.c.l1_stores += 1;
        self.lru.touch(line as u64);
    }

    fn run(&mut self, stmts: &[CStmt]) {
        for s in stmts {
            match s {
                CStmt::For {
                    var,
                    extent,
                    ann,
                    body,
                } => {
                    if *ann == Annotation::Vectorize {
                        let mut start = 0;
                        while start < *extent {
                            let n = (*extent - start).min(self.line);
                            self.c.insts += 1;
                            let mask = vec![true; n as usize];
                            self.run_vector(body, *var, start, &mask);
                            start += n;
                        }
                    } else {
                        let count = *ann != Annotation::Unroll;
                        for i in 0..*extent {
                            self.env[*var] = i;
                            if count {
                                self.c.insts += 1;
                            }
                            self.run(body);
                        }
                    }
                }
                CStmt::Store {
                    loads,
                    addr,
                    accumulate,
                    ops,
                } => {
                    for l in loads {
                        self.c.insts += l.guard.len() as u64;
                        if l.guard.iter().all(|b| b.holds(&self.env)) {
                            self.c.insts += 1;
                            let a = l.addr.eval(&self.env);
                            self.load_line(a.div_euclid(self.line));
                        }
                    }
                    let line = addr.eval(&self.env).div_euclid(self.line);
                    if *accumulate {
                        self.c.insts += 1;
                        self.load_line(line);
                    }
                    self.c.insts += ops + 1;
                    self.store_line(line);
                }
                CStmt::If { conds, body } => {
                    self.c.insts += conds.len() as u64;
                    if conds.iter().all(|b| b.holds(&self.env)) {
                        self.run(body);
                    }
                }
            }
        }
    }

    /// Distinct lines touched by the active lanes, in first-touch order.
    fn lanes(&mut self, var: usize, start: i64, mask: &[bool], f: impl Fn(&[i64]) -> Option<i64>) -> Vec<i64> {
        let mut lines: Vec<i64> = Vec::new();
        for (l, on) in mask.iter().enumerate() {
            if !on {
                continue;
            }
            self.env[var] = start + l as i64;
            if let Some(a) = f(&self.env) {
                let line = a.div_euclid(self.line);
                if !lines.contains(&line) {
                    lines.push(line);
                }
            }
        }
        lines
    }

    fn run_vector(&mut self, stmts: &[CStmt], var: usize, start: i64, mask: &[bool]) {
        for s in stmts {
            match s {
                CStmt::For { .. } => {
                    // Vectorize is only legal on innermost loops; fall back to
                    // scalar execution of each lane.
                    for (l, on) in mask.iter().enumerate() {
                        if *on {
                            self.env[var] = start + l as i64;
                            self.run(std::slice::from_ref(s));
                        }
                    }
                }
                CStmt::Store {
                    loads,
                    addr,
                    accumulate,
                    ops,
                } => {
                    for l in loads {
                        self.c.insts += l.guard.len() as u64 + 1;
                        let lines = self.lanes(var, start, mask, |env| {
                            l.guard.iter().all(|b| b.holds(env)).then(|| l.addr.eval(env))
                        });
                        for line in lines {
                            self.load_line(line);
                        }
                    }
                    let lines = self.lanes(var, start, mask, |env| Some(addr.eval(env)));
                    if *accumulate {
                        self.c.insts += 1;
                        for &line in &lines {
                            self.load_line(line);
                        }
                    }
                    self.c.insts += ops + 1;
                    for line in lines {
                        self.store_line(line);
                    }
                }
                CStmt::If { conds, body } => {
                    self.c.insts += conds.len() as u64;
                    let sub: Vec<bool> = mask
                        .iter()
                        .enumerate()
                        .map(|(l, on)| {
                            self.env[var] = start + l as i64;
                            *on && conds.iter().all(|b| b.holds(&self.env))
                        })
                        .collect();
                    if sub.iter().any(|b| *b) {
                        self.run_vector(body, var, start, &sub);
                    }
                }
            }
        }
    }
}

/// Replays every memory access of `prog` through a fully associative LRU
/// cache and returns the counters with their weighted cost.
///
/// Buffers are laid out back to back in declaration order, each starting on
/// a fresh line. A load miss brings in `prefetch_lines` consecutive lines;
/// stores allocate without counting misses.
pub fn simulate_cache(prog: &Program, cfg: &CacheConfig) -> Result<ProfileCounters> {
    cfg.validate()?;
    let le = cfg.line_elems as i64;
    let mut bases = Vec::with_capacity(prog.buffers.len());
    let mut next = 0i64;
    for b in &prog.buffers {
        bases.push(next);
        next += (b.len() as i64 + le - 1) / le * le;
    }
    let strides: Vec<Vec<i64>> = prog.buffers.iter().map(|b| b.strides()).collect();
    let code = compile(&prog.body, &bases, &strides);
    let mut sim = Sim {
        cfg,
        lru: Lru::new(cfg.num_lines),
        c: ProfileCounters::default(),
        env: vec![0; prog.var_names.len()],
        line: le,
    };
    sim.run(&code);
    let mut c = sim.c;
    c.finish(&cfg.weights);
    Ok(c)
}
