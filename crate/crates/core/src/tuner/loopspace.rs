//! Loop schedule spaces of the complex operators and their element-wise
//! epilogues, for one fixed set of layouts.

use rand::Rng;

use super::space::divisors;
use crate::error::Result;
use crate::layout::RewrittenGraph;
use crate::loops::{annotate, build_loop_nest, loop_reorder, loop_split, LoopKind, LoopNest, LoopPrim, Schedules};
use crate::program::Annotation;

/// Orders of the split pieces, spatial (S) and reduction (R), outer first.
pub const ORDERS: [&str; 3] = ["S R r s", "S s R r", "S R s r"];

const MAX_UNROLL: usize = 16;

/// Index of each parameter's current option.
pub type LoopPoint = Vec<usize>;

/// Tunable loop parameters of one complex operator: an inner split factor
/// per loop, the piece order, vectorize, unroll and epilogue fusion flags.
#[derive(Clone, Debug)]
pub struct LoopSpace {
    pub op: String,
    /// Element-wise consumers that can be fused, nearest first.
    pub chain: Vec<String>,
    nest: LoopNest,
    chain_nests: Vec<LoopNest>,
    divs: Vec<Vec<usize>>,
    options: Vec<usize>,
}

fn vectorized(nest: &LoopNest) -> Option<LoopNest> {
    let last = nest.loops.last()?.name.clone();
    annotate(nest, &last, Annotation::Vectorize).ok()
}

/// Schedule for an operator outside every group: vectorize the innermost
/// loop when legal.
fn default_schedule(nest: &LoopNest) -> Vec<LoopPrim> {
    match vectorized(nest) {
        Some(_) => vec![LoopPrim::Annotate {
            var: nest.loops.last().unwrap().name.clone(),
            ann: Annotation::Vectorize,
        }],
        None => Vec::new(),
    }
}

impl LoopSpace {
    pub fn new(rg: &RewrittenGraph, node: usize) -> LoopSpace {
        let g = &rg.graph;
        let nest = build_loop_nest(&rg.nodes[node]);
        let op = g.nodes[node].output.clone();
        let mut chain = Vec::new();
        let mut chain_nests = Vec::new();
        let mut cur = op.clone();
        loop {
            let cons = g.consumers(&cur);
            if cons.len() != 1 {
                break;
            }
            let c = &g.nodes[cons[0]];
            let same = rg.layouts.get(&cur).map(|l| (&l.physical, &l.seq)) == rg.layouts.get(&c.output).map(|l| (&l.physical, &l.seq));
            if !c.kind.is_elementwise() || !same || c.inputs.iter().filter(|i| **i == cur).count() != 1 {
                break;
            }
            chain.push(c.output.clone());
            chain_nests.push(build_loop_nest(&rg.nodes[cons[0]]));
            cur = c.output.clone();
        }
        let divs: Vec<Vec<usize>> = nest.loops.iter().map(|l| divisors(l.extent)).collect();
        let mut options: Vec<usize> = divs.iter().map(|d| d.len()).collect();
        options.extend([ORDERS.len(), 2, 2, if chain.is_empty() { 1 } else { 2 }]);
        LoopSpace {
            op,
            chain,
            nest,
            chain_nests,
            divs,
            options,
        }
    }

    /// Option count of every parameter.
    pub fn options(&self) -> &[usize] {
        &self.options
    }

    pub fn dims(&self) -> usize {
        self.options.len()
    }

    /// No splits and the plain order, with every flag that applies on.
    pub fn default_point(&self) -> LoopPoint {
        let mut p: LoopPoint = self.divs.iter().map(|d| d.len() - 1).collect();
        p.extend([1, 1, 1, self.options[self.options.len() - 1] - 1]);
        p
    }

    /// Carries a point of `old` over: split factors of loops with the same
    /// name and extent, and every flag; other loops start unsplit.
    pub fn transfer(&self, old: &LoopSpace, p: &LoopPoint) -> LoopPoint {
        let mut out = self.default_point();
        let nl = self.nest.loops.len();
        for (j, l) in self.nest.loops.iter().enumerate() {
            if let Some(k) = old.nest.find(&l.name) {
                if old.nest.loops[k].extent == l.extent {
                    out[j] = p[k];
                }
            }
        }
        let on = old.nest.loops.len();
        for k in 0..4 {
            out[nl + k] = p[on + k].min(self.options[nl + k] - 1);
        }
        out
    }

    pub fn random_point(&self, rng: &mut impl Rng) -> LoopPoint {
        self.options.iter().map(|&n| rng.gen_range(0..n)).collect()
    }

    /// Moves each parameter by `dirs[k]` in {-1, 0, 1}, clamped.
    pub fn step(&self, p: &LoopPoint, dirs: &[usize]) -> LoopPoint {
        p.iter()
            .zip(dirs)
            .zip(&self.options)
            .map(|((&v, &d), &n)| (v as i64 + d as i64 - 1).clamp(0, n as i64 - 1) as usize)
            .collect()
    }

    /// Each parameter scaled to [0, 1].
    pub fn encode(&self, p: &LoopPoint) -> Vec<f64> {
        p.iter()
            .zip(&self.options)
            .map(|(&v, &n)| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 })
            .collect()
    }

    /// Schedules for the operator and its chain. Every annotation is
    /// checked against the nest, so the result always lowers.
    pub fn decode(&self, p: &LoopPoint) -> Result<Schedules> {
        let nl = self.nest.loops.len();
        let order = p[nl];
        let (vec, unroll, fuse) = (p[nl + 1] == 1, p[nl + 2] == 1, p[nl + 3] == 1);
        let mut prims = Vec::new();
        let mut nest = self.nest.clone();
        // (name, split?) per original loop, outer and inner names
        let mut pieces: Vec<(LoopKind, String, Option<String>)> = Vec::new();
        for (j, l) in self.nest.loops.iter().enumerate() {
            let f = self.divs[j][p[j]];
            if f == 1 || f == l.extent {
                pieces.push((l.kind, l.name.clone(), None));
                continue;
            }
            let pos = nest.find(&l.name).unwrap();
            nest = loop_split(&nest, &l.name, f)?;
            prims.push(LoopPrim::Split {
                var: l.name.clone(),
                factor: f,
            });
            pieces.push((l.kind, nest.loops[pos].name.clone(), Some(nest.loops[pos + 1].name.clone())));
        }
        let group = |kind: LoopKind, inner: bool| -> Vec<String> {
            pieces
                .iter()
                .filter(|(k, _, _)| *k == kind)
                .filter_map(|(_, o, i)| if inner { i.clone() } else { Some(o.clone()) })
                .collect()
        };
        let (so, si) = (group(LoopKind::Spatial, false), group(LoopKind::Spatial, true));
        let (ro, ri) = (group(LoopKind::Reduction, false), group(LoopKind::Reduction, true));
        let mut names: Vec<String> = match order {
            0 => [so.clone(), ro, ri, si.clone()].concat(),
            1 => [so.clone(), si.clone(), ro, ri].concat(),
            _ => [so.clone(), ro, si.clone(), ri].concat(),
        };
        let spatial: Vec<String> = [so, si].concat();
        // vectorize: move the innermost legal spatial piece to the end
        let mut vec_ok = false;
        if vec {
            let cands: Vec<String> = names.iter().rev().filter(|n| spatial.contains(n)).cloned().collect();
            for cand in cands {
                let mut trial: Vec<String> = names.iter().filter(|n| **n != cand).cloned().collect();
                trial.push(cand);
                if vectorized(&loop_reorder(&nest, &trial)?).is_some() {
                    names = trial;
                    vec_ok = true;
                    break;
                }
            }
        }
        if names.iter().map(String::as_str).ne(nest.loop_names()) {
            nest = loop_reorder(&nest, &names)?;
            prims.push(LoopPrim::Reorder { order: names.clone() });
        }
        let mut inner_free = nest.loops.len();
        if vec_ok {
            prims.push(LoopPrim::Annotate {
                var: names.last().unwrap().clone(),
                ann: Annotation::Vectorize,
            });
            inner_free -= 1;
        }
        if unroll && inner_free > 0 {
            let l = &nest.loops[inner_free - 1];
            if l.extent <= MAX_UNROLL {
                prims.push(LoopPrim::Annotate {
                    var: l.name.clone(),
                    ann: Annotation::Unroll,
                });
            }
        }
        let mut out = Schedules::new();
        let fuse = fuse && !self.chain.is_empty();
        let depth = names.iter().take_while(|n| spatial.contains(n)).count();
        if fuse {
            prims.push(LoopPrim::ComputeAt {
                consumer: self.chain[0].clone(),
                depth,
            });
        }
        out.insert(self.op.clone(), prims);
        for (k, cn) in self.chain_nests.iter().enumerate() {
            if !fuse {
                out.insert(cn.output.clone(), default_schedule(cn));
                continue;
            }
            // mirror the spatial splits and the producer's spatial order
            let mut cp = Vec::new();
            let mut c = cn.clone();
            let mut rename = std::collections::HashMap::new();
            for (j, (_, o, split)) in pieces.iter().filter(|(k, _, _)| *k == LoopKind::Spatial).enumerate() {
                let name = cn.loops[j].name.clone();
                match split {
                    None => {
                        rename.insert(o.clone(), name);
                    }
                    Some(i) => {
                        let f = self.divs[j][p[j]];
                        let pos = c.find(&name).unwrap();
                        c = loop_split(&c, &name, f)?;
                        cp.push(LoopPrim::Split { var: name, factor: f });
                        rename.insert(o.clone(), c.loops[pos].name.clone());
                        rename.insert(i.clone(), c.loops[pos + 1].name.clone());
                    }
                }
            }
            let cnames: Vec<String> = names.iter().filter_map(|n| rename.get(n).cloned()).collect();
            if cnames.iter().map(String::as_str).ne(c.loop_names()) {
                c = loop_reorder(&c, &cnames)?;
                cp.push(LoopPrim::Reorder { order: cnames });
            }
            if vec && depth < c.loops.len() && vectorized(&c).is_some() {
                cp.push(LoopPrim::Annotate {
                    var: c.loops.last().unwrap().name.clone(),
                    ann: Annotation::Vectorize,
                });
            }
            if let Some(next) = self.chain.get(k + 1) {
                cp.push(LoopPrim::ComputeAt {
                    consumer: next.clone(),
                    depth,
                });
            }
            out.insert(cn.output.clone(), cp);
        }
        Ok(out)
    }
}

/// Loop spaces of every complex operator plus the fixed schedules of the
/// remaining operators.
pub fn build_loop_spaces(rg: &RewrittenGraph) -> Result<(Vec<LoopSpace>, Schedules)> {
    let g = &rg.graph;
    let mut spaces = Vec::new();
    let mut rest = Schedules::new();
    for ni in g.topo_order()? {
        if g.nodes[ni].kind.is_complex() {
            spaces.push(LoopSpace::new(rg, ni));
        }
    }
    for ni in g.topo_order()? {
        let n = &g.nodes[ni];
        if n.kind.is_complex() {
            continue;
        }
        let s = default_schedule(&build_loop_nest(&rg.nodes[ni]));
        if !s.is_empty() {
            rest.insert(n.output.clone(), s);
        }
    }
    Ok((spaces, rest))
}

/// Full schedule map for one point per space.
pub fn assemble(spaces: &[LoopSpace], rest: &Schedules, points: &[LoopPoint]) -> Result<Schedules> {
    let mut out = rest.clone();
    for (s, p) in spaces.iter().zip(points) {
        for (k, v) in s.decode(p)? {
            if v.is_empty() {
                out.remove(&k);
            } else {
                out.insert(k, v);
            }
        }
    }
    Ok(out)
}
