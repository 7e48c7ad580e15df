//! Loop nests and loop primitives.
//!
//! Each operator gets one spatial loop per dimension of its (physical) output
//! followed by its reduction loops. Loop primitives rewrite the nest; `lower`
//! turns the scheduled nests of a whole graph into a [`Program`].

mod lower;

pub use lower::{lower, LoopPrim, Schedules};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{AccessExpr, VarId, VarRanges};
use crate::ir::Dim;
use crate::layout::RewrittenNode;
use crate::program::{Annotation, Bound, BufferDecl, BufferKind, Load, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopKind {
    Spatial,
    Reduction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Loop {
    pub var: VarId,
    pub name: String,
    pub extent: usize,
    pub kind: LoopKind,
    pub ann: Annotation,
}

/// A staging copy of part of a buffer, made once per iteration of the outer
/// `depth` loops.
#[derive(Clone, Debug, PartialEq)]
pub struct Staging {
    pub depth: usize,
    pub buf: usize,
    pub src: usize,
    pub copy_vars: Vec<(VarId, usize)>,
    pub src_index: Vec<AccessExpr>,
    pub guard: Vec<Bound>,
}

/// A producer nest computed inside this nest under its first `depth` loops.
#[derive(Clone, Debug, PartialEq)]
pub struct Attached {
    pub depth: usize,
    pub nest: LoopNest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopNest {
    pub node: usize,
    pub output: String,
    pub loops: Vec<Loop>,
    pub out_buf: usize,
    pub store_index: Vec<AccessExpr>,
    pub guard: Vec<Bound>,
    pub value: Value,
    /// Zero-initialize, then `+=` over the reduction loops.
    pub accumulate: bool,
    pub attached: Vec<Attached>,
    pub staging: Vec<Staging>,
    /// Name of each variable id in this nest's id space.
    pub var_names: Vec<String>,
}

fn sched_err(nest: &LoopNest, msg: impl Into<String>) -> Error {
    Error::Schedule {
        node: nest.output.clone(),
        msg: msg.into(),
    }
}

fn unique_name(taken: &BTreeSet<String>, base: &str) -> String {
    if !taken.contains(base) {
        return base.to_string();
    }
    (2..)
        .map(|k| format!("{base}{k}"))
        .find(|n| !taken.contains(n))
        .unwrap()
}

/// One loop per output dim, then the reductions.
pub fn build_loop_nest(rn: &RewrittenNode) -> LoopNest {
    let mut taken = BTreeSet::new();
    let mut loops = Vec::new();
    let mut names = Vec::new();
    let dims = rn
        .spatial
        .iter()
        .map(|d| (d, LoopKind::Spatial))
        .chain(rn.reductions.iter().map(|d| (d, LoopKind::Reduction)));
    for (k, (d, kind)) in dims.enumerate() {
        let name = unique_name(&taken, &d.name.to_lowercase());
        taken.insert(name.clone());
        names.push(name.clone());
        loops.push(Loop {
            var: VarId(k as u32),
            name,
            extent: d.extent,
            kind,
            ann: Annotation::None,
        });
    }
    LoopNest {
        node: rn.node,
        output: rn.output.clone(),
        loops,
        out_buf: rn.out_buf,
        store_index: rn.store_index(),
        guard: rn.guard.clone(),
        value: rn.value.clone(),
        accumulate: rn.accumulate,
        attached: Vec::new(),
        staging: Vec::new(),
        var_names: names,
    }
}

impl LoopNest {
    pub fn loop_names(&self) -> Vec<&str> {
        self.loops.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.loops.iter().position(|l| l.name == name)
    }

    fn fresh(&mut self, name: String) -> VarId {
        self.var_names.push(name);
        VarId(self.var_names.len() as u32 - 1)
    }

    /// Position of the first reduction loop, or the loop count.
    pub fn first_reduction(&self) -> usize {
        self.loops
            .iter()
            .position(|l| l.kind == LoopKind::Reduction)
            .unwrap_or(self.loops.len())
    }

    /// Number of spatial loops before the first reduction loop.
    pub fn leading_spatial(&self) -> usize {
        self.first_reduction()
    }

    pub fn ranges(&self) -> VarRanges {
        let mut r = VarRanges::new();
        for l in &self.loops {
            r.insert_extent(l.var, l.extent);
        }
        r
    }

    fn map_exprs(&mut self, f: &impl Fn(&AccessExpr) -> AccessExpr) {
        for e in self.store_index.iter_mut() {
            *e = f(e);
        }
        for b in self.guard.iter_mut() {
            b.expr = f(&b.expr);
        }
        self.value.map_exprs(f);
    }

    fn simplify_all(&mut self) {
        let ranges = self.ranges();
        self.map_exprs(&|e| e.simplify(&ranges));
    }

    /// Renumbers every variable of this nest (and attached nests) with `f`.
    fn remap_vars(&mut self, f: &impl Fn(VarId) -> VarId) {
        for l in self.loops.iter_mut() {
            l.var = f(l.var);
        }
        self.map_exprs(&|e| e.substitute(&|v| Some(AccessExpr::Var(f(v)))));
        for s in self.staging.iter_mut() {
            for (v, _) in s.copy_vars.iter_mut() {
                *v = f(*v);
            }
            for e in s.src_index.iter_mut() {
                *e = e.substitute(&|v| Some(AccessExpr::Var(f(v))));
            }
            for b in s.guard.iter_mut() {
                b.expr = b.expr.substitute(&|v| Some(AccessExpr::Var(f(v))));
            }
        }
        for a in self.attached.iter_mut() {
            a.nest.remap_vars(f);
        }
    }

    fn check_unfused(&self, what: &str) -> Result<()> {
        if !self.attached.is_empty() || !self.staging.is_empty() {
            return Err(sched_err(
                self,
                format!("{what} must come before compute_at and cache_read"),
            ));
        }
        Ok(())
    }

    /// Every load in the nest body (attached nests excluded).
    pub fn loads(&self) -> Vec<&Load> {
        self.value.loads()
    }
}

/// Strip-mines loop `name` into `name o` (outer) and `name i` (inner, extent
/// `factor`).
pub fn loop_split(nest: &LoopNest, name: &str, factor: usize) -> Result<LoopNest> {
    nest.check_unfused("split")?;
    let pos = nest
        .find(name)
        .ok_or_else(|| sched_err(nest, format!("no loop named `{name}`")))?;
    let l = nest.loops[pos].clone();
    if factor == 0 || l.extent % factor != 0 {
        return Err(sched_err(
            nest,
            format!("split factor {factor} does not divide extent {} of `{name}`", l.extent),
        ));
    }
    let mut out = nest.clone();
    let taken: BTreeSet<String> = nest.loops.iter().map(|l| l.name.clone()).collect();
    let on = unique_name(&taken, &format!("{name}o"));
    let mut taken2 = taken.clone();
    taken2.insert(on.clone());
    let inn = unique_name(&taken2, &format!("{name}i"));
    let ov = out.fresh(on.clone());
    let iv = out.fresh(inn.clone());
    out.loops.splice(
        pos..=pos,
        [
            Loop {
                var: ov,
                name: on,
                extent: l.extent / factor,
                kind: l.kind,
                ann: Annotation::None,
            },
            Loop {
                var: iv,
                name: inn,
                extent: factor,
                kind: l.kind,
                ann: Annotation::None,
            },
        ],
    );
    let repl = AccessExpr::Var(ov) * factor as i64 + AccessExpr::Var(iv);
    out.map_exprs(&|e| e.substitute(&|v| (v == l.var).then(|| repl.clone())));
    out.simplify_all();
    Ok(out)
}

/// Interchanges loops into `order`, which must name every loop once.
pub fn loop_reorder(nest: &LoopNest, order: &[String]) -> Result<LoopNest> {
    nest.check_unfused("reorder")?;
    if order.len() != nest.loops.len() {
        return Err(sched_err(
            nest,
            format!("reorder lists {} loops, nest has {}", order.len(), nest.loops.len()),
        ));
    }
    let mut loops = Vec::with_capacity(order.len());
    let mut seen = BTreeSet::new();
    for name in order {
        let pos = nest
            .find(name)
            .ok_or_else(|| sched_err(nest, format!("no loop named `{name}`")))?;
        if !seen.insert(pos) {
            return Err(sched_err(nest, format!("loop `{name}` listed twice")));
        }
        loops.push(nest.loops[pos].clone());
    }
    let mut out = nest.clone();
    out.loops = loops;
    Ok(out)
}

/// Linear coefficient of `v` in `e`, or `None` when `v` sits inside a
/// non-linear term.
fn coefficient(e: &AccessExpr, v: VarId) -> Option<i64> {
    let (terms, _) = e.linear_parts();
    let mut c = 0;
    for (atom, k) in terms {
        if atom == AccessExpr::Var(v) {
            c += k;
        } else if atom.contains_var(v) {
            return None;
        }
    }
    Some(c)
}

/// True when `v` only moves the last index component, by 0 or 1.
fn unit_or_zero_stride(index: &[AccessExpr], v: VarId) -> bool {
    let Some((last, rest)) = index.split_last() else {
        return true;
    };
    rest.iter().all(|e| !e.contains_var(v)) && matches!(coefficient(last, v), Some(0 | 1))
}

pub fn annotate(nest: &LoopNest, name: &str, ann: Annotation) -> Result<LoopNest> {
    let pos = nest
        .find(name)
        .ok_or_else(|| sched_err(nest, format!("no loop named `{name}`")))?;
    if ann == Annotation::Vectorize {
        let l = &nest.loops[pos];
        if pos + 1 != nest.loops.len() {
            return Err(sched_err(nest, format!("cannot vectorize `{name}`: not the innermost loop")));
        }
        if l.kind == LoopKind::Reduction {
            return Err(sched_err(nest, format!("cannot vectorize reduction loop `{name}`")));
        }
        let ok = unit_or_zero_stride(&nest.store_index, l.var)
            && nest.loads().iter().all(|ld| unit_or_zero_stride(&ld.index, l.var));
        if !ok {
            return Err(sched_err(
                nest,
                format!("cannot vectorize `{name}`: an access is not unit- or zero-stride"),
            ));
        }
    }
    let mut out = nest.clone();
    out.loops[pos].ann = ann;
    Ok(out)
}

/// Matches `a` (producer, shared vars already renamed) against `b`
/// (consumer), pairing the remaining producer vars with consumer vars of
/// equal extent.
fn match_expr(
    a: &AccessExpr,
    b: &AccessExpr,
    map: &mut HashMap<VarId, VarId>,
    shared: &BTreeSet<VarId>,
    ext_a: &HashMap<VarId, usize>,
    ext_b: &HashMap<VarId, usize>,
) -> bool {
    use AccessExpr as E;
    match (a, b) {
        (E::Var(x), E::Var(y)) => {
            if shared.contains(x) || shared.contains(y) {
                return x == y;
            }
            if ext_a.get(x) != ext_b.get(y) {
                return false;
            }
            match map.get(x) {
                Some(m) => m == y,
                None => {
                    if map.values().any(|m| m == y) {
                        return false;
                    }
                    map.insert(*x, *y);
                    true
                }
            }
        }
        (E::Const(x), E::Const(y)) => x == y,
        (E::Add(a1, a2), E::Add(b1, b2)) | (E::Mul(a1, a2), E::Mul(b1, b2)) => {
            match_expr(a1, b1, map, shared, ext_a, ext_b) && match_expr(a2, b2, map, shared, ext_a, ext_b)
        }
        (E::FloorDiv(x, d), E::FloorDiv(y, e)) | (E::Mod(x, d), E::Mod(y, e)) | (E::Min(x, d), E::Min(y, e)) => {
            d == e && match_expr(x, y, map, shared, ext_a, ext_b)
        }
        _ => false,
    }
}

/// Computes `producer` inside the first `depth` loops of `consumer`.
///
/// Legal when the outer `depth` loops of both nests are spatial with equal
/// extents and the consumer reads the producer's output with exactly the
/// producer's store index (up to renaming), so each shared iteration only
/// reads what the producer has just written.
pub fn compute_at(producer: &LoopNest, consumer: &LoopNest, depth: usize) -> Result<LoopNest> {
    let conflict = |msg: String| Error::FusionConflict {
        producer: producer.output.clone(),
        consumer: consumer.output.clone(),
        depth,
        msg,
    };
    let reads: Vec<&Load> = consumer
        .loads()
        .into_iter()
        .filter(|l| l.buf == producer.out_buf)
        .collect();
    if reads.is_empty() {
        return Err(conflict("consumer does not read the producer's output".into()));
    }
    if depth > producer.leading_spatial() || depth > consumer.leading_spatial() {
        return Err(conflict(format!(
            "only {} and {} leading spatial loops available",
            producer.leading_spatial(),
            consumer.leading_spatial()
        )));
    }
    if producer.attached.iter().any(|a| a.depth < depth) {
        return Err(conflict("producer has a fused producer above the fusion depth".into()));
    }
    for j in 0..depth {
        let (p, c) = (&producer.loops[j], &consumer.loops[j]);
        if p.extent != c.extent {
            return Err(conflict(format!(
                "loop {j} differs: `{}`({}) vs `{}`({})",
                p.name, p.extent, c.name, c.extent
            )));
        }
    }
    // Producer ids are shifted past the consumer's, shared loops map onto
    // the consumer's loops.
    let offset = consumer.var_names.len() as u32;
    let shared_map: HashMap<VarId, VarId> = (0..depth)
        .map(|j| (producer.loops[j].var, consumer.loops[j].var))
        .collect();
    let rename = |v: VarId| shared_map.get(&v).copied().unwrap_or(VarId(v.0 + offset));
    let mut moved = producer.clone();
    moved.remap_vars(&rename);

    if depth > 0 {
        let shared: BTreeSet<VarId> = (0..depth).map(|j| consumer.loops[j].var).collect();
        let ext_a: HashMap<VarId, usize> = moved.loops.iter().map(|l| (l.var, l.extent)).collect();
        let ext_b: HashMap<VarId, usize> = consumer.loops.iter().map(|l| (l.var, l.extent)).collect();
        // unit-extent loops carry no information; fold them to 0 first
        let fold = |e: &AccessExpr, ext: &HashMap<VarId, usize>| {
            let mut ranges = VarRanges::new();
            for (v, n) in ext {
                ranges.insert_extent(*v, *n);
            }
            e.substitute(&|v| (ext.get(&v) == Some(&1)).then_some(AccessExpr::Const(0)))
                .simplify(&ranges)
        };
        let store: Vec<AccessExpr> = moved.store_index.iter().map(|e| fold(e, &ext_a)).collect();
        for r in &reads {
            let mut map = HashMap::new();
            let same = r.index.len() == store.len()
                && store
                    .iter()
                    .zip(&r.index)
                    .all(|(a, b)| match_expr(a, &fold(b, &ext_b), &mut map, &shared, &ext_a, &ext_b));
            if !same {
                return Err(conflict(format!(
                    "loop structures differ: producer writes [{}], consumer reads [{}]",
                    render_index(&moved.store_index, &|v| name_of(&moved, consumer, offset, v)),
                    render_index(&r.index, &|v| consumer.var_names[v.index()].clone())
                )));
            }
        }
    }

    let mut out = consumer.clone();
    let mut names = producer.var_names.clone();
    for (p, c) in &shared_map {
        names[p.index()] = consumer.var_names[c.index()].clone();
    }
    out.var_names.extend(names);
    out.attached.push(Attached { depth, nest: moved });
    Ok(out)
}

fn name_of(moved: &LoopNest, consumer: &LoopNest, offset: u32, v: VarId) -> String {
    if v.0 < offset {
        consumer.var_names[v.index()].clone()
    } else {
        moved
            .var_names
            .get((v.0 - offset) as usize)
            .cloned()
            .unwrap_or_else(|| v.to_string())
    }
}

fn render_index(idx: &[AccessExpr], name: &dyn Fn(VarId) -> String) -> String {
    idx.iter().map(|e| e.render(name)).collect::<Vec<_>>().join("][")
}

/// Fuses an element-wise consumer with its producer at the deepest legal
/// depth (all shared spatial loops).
pub fn inline(producer: &LoopNest, consumer: &LoopNest) -> Result<LoopNest> {
    let depth = producer.leading_spatial().min(consumer.leading_spatial());
    compute_at(producer, consumer, depth)
}

/// Stages the part of buffer `src` read under the outer `depth` loops into a
/// new buffer appended to `buffers`, and redirects the reads to it.
pub fn cache_read(nest: &LoopNest, buffers: &mut Vec<BufferDecl>, src: usize, depth: usize) -> Result<LoopNest> {
    if depth > nest.loops.len() {
        return Err(sched_err(nest, format!("cache_read depth {depth} exceeds loop count")));
    }
    let outer: BTreeSet<VarId> = nest.loops[..depth].iter().map(|l| l.var).collect();
    let ranges = nest.ranges();
    let mut inner_ranges = VarRanges::new();
    for l in &nest.loops[depth..] {
        inner_ranges.insert_extent(l.var, l.extent);
    }
    for l in &nest.loops[..depth] {
        inner_ranges.insert(l.var, 0, 0);
    }
    let src_decl = buffers
        .get(src)
        .ok_or_else(|| sched_err(nest, "cache_read of an unknown buffer"))?
        .clone();
    let rank = src_decl.dims.len();
    let mut outer_parts: Option<Vec<AccessExpr>> = None;
    let mut lo = vec![i64::MAX; rank];
    let mut hi = vec![i64::MIN; rank];
    let mut found = false;
    let mut fail = None;
    nest.value.clone().loads_mut(&mut |l| {
        if l.buf != src || fail.is_some() {
            return;
        }
        found = true;
        let mut outs = Vec::with_capacity(rank);
        for (q, e) in l.index.iter().enumerate() {
            match e.partition(&|v| outer.contains(&v)) {
                Some((o, i)) => {
                    match i.bounds(&inner_ranges) {
                        Some((a, b)) => {
                            lo[q] = lo[q].min(a);
                            hi[q] = hi[q].max(b);
                        }
                        None => fail = Some("unbounded inner index".to_string()),
                    }
                    outs.push(o.simplify(&ranges));
                }
                None => fail = Some(format!("index `{e}` mixes outer and inner loops")),
            }
        }
        match &outer_parts {
            None => outer_parts = Some(outs),
            Some(prev) if *prev != outs => fail = Some("reads disagree on the staged region".into()),
            _ => {}
        }
    });
    if let Some(msg) = fail {
        return Err(sched_err(nest, format!("cache_read of `{}`: {msg}", src_decl.name)));
    }
    if !found {
        return Err(sched_err(nest, format!("nest does not read `{}`", src_decl.name)));
    }
    let outer_parts = outer_parts.unwrap();
    let mut out = nest.clone();
    let buf = buffers.len();
    let mut dims = Vec::with_capacity(rank);
    let mut copy_vars = Vec::with_capacity(rank);
    let mut src_index = Vec::with_capacity(rank);
    let mut guard = Vec::new();
    let mut copy_ranges = ranges.clone();
    for q in 0..rank {
        let ext = (hi[q] - lo[q] + 1) as usize;
        dims.push(Dim::new(src_decl.dims[q].name.clone(), ext));
        let v = out.fresh(format!("c{}", src_decl.dims[q].name.to_lowercase()));
        copy_ranges.insert_extent(v, ext);
        copy_vars.push((v, ext));
        let e = (outer_parts[q].clone() + AccessExpr::Const(lo[q]) + AccessExpr::Var(v)).simplify(&copy_ranges);
        let ok = matches!(e.bounds(&copy_ranges), Some((a, b)) if a >= 0 && b < src_decl.dims[q].extent as i64);
        if !ok {
            guard.push(Bound::new(e.clone(), 0, src_decl.dims[q].extent as i64));
        }
        src_index.push(e);
    }
    let lo2 = lo.clone();
    let outer2 = outer.clone();
    out.value.loads_mut(&mut |l| {
        if l.buf != src {
            return;
        }
        l.buf = buf;
        for (q, e) in l.index.iter_mut().enumerate() {
            let (_, inner) = e.partition(&|v| outer2.contains(&v)).unwrap();
            *e = (inner + AccessExpr::Const(-lo2[q])).simplify(&ranges);
        }
    });
    buffers.push(BufferDecl {
        name: format!("{}_s{}", src_decl.name, buf),
        dims,
        role: src_decl.role,
        kind: BufferKind::Staging,
    });
    out.staging.push(Staging {
        depth,
        buf,
        src,
        copy_vars,
        src_index,
        guard,
    });
    Ok(out)
}

#[cfg(test)]
mod tests;
