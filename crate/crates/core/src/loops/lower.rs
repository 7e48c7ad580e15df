use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{annotate, build_loop_nest, cache_read, compute_at, inline, loop_reorder, loop_split, LoopKind, LoopNest};
use crate::error::{Error, Result};
use crate::expr::{AccessExpr, VarId};
use crate::layout::RewrittenGraph;
use crate::program::{Annotation, Load, Program, Stmt, Value};

/// One loop primitive of an operator's schedule. Loop names refer to the
/// nest as it stands when the primitive is applied.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "prim", rename_all = "snake_case")]
pub enum LoopPrim {
    Split { var: String, factor: usize },
    Reorder { order: Vec<String> },
    Annotate { var: String, ann: Annotation },
    CacheRead { tensor: String, depth: usize },
    /// Compute this operator inside `consumer` (named by its output tensor)
    /// under its first `depth` loops.
    ComputeAt { consumer: String, depth: usize },
    Inline { consumer: String },
}

impl LoopPrim {
    fn is_fusion(&self) -> bool {
        matches!(self, LoopPrim::ComputeAt { .. } | LoopPrim::Inline { .. })
    }
}

/// Loop schedules keyed by the output tensor of each operator.
pub type Schedules = BTreeMap<String, Vec<LoopPrim>>;

fn apply_local(nest: &LoopNest, p: &LoopPrim, rg: &RewrittenGraph, buffers: &mut Vec<crate::program::BufferDecl>) -> Result<LoopNest> {
    match p {
        LoopPrim::Split { var, factor } => loop_split(nest, var, *factor),
        LoopPrim::Reorder { order } => loop_reorder(nest, order),
        LoopPrim::Annotate { var, ann } => annotate(nest, var, *ann),
        LoopPrim::CacheRead { tensor, depth } => {
            let src = rg.buffer_of(tensor).ok_or_else(|| Error::Schedule {
                node: nest.output.clone(),
                msg: format!("cache_read of unknown tensor `{tensor}`"),
            })?;
            cache_read(nest, buffers, src, *depth)
        }
        LoopPrim::ComputeAt { .. } | LoopPrim::Inline { .. } => unreachable!(),
    }
}

fn aggregate(mut errs: Vec<Error>) -> Error {
    if errs.len() == 1 {
        return errs.pop().unwrap();
    }
    Error::Schedule {
        node: "<several>".into(),
        msg: errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "),
    }
}

/// Builds every operator's nest, applies `schedules` and emits one program
/// with the operators in topological order.
pub fn lower(rg: &RewrittenGraph, schedules: &Schedules) -> Result<Program> {
    let g = &rg.graph;
    let order = g.topo_order()?;
    let mut errs = Vec::new();
    for key in schedules.keys() {
        if g.node_by_output(key).is_none() {
            errs.push(Error::Schedule {
                node: key.clone(),
                msg: "no operator produces this tensor".into(),
            });
        }
    }
    let mut buffers = rg.buffers.clone();
    let mut nests: Vec<Option<LoopNest>> = rg.nodes.iter().map(|n| Some(build_loop_nest(n))).collect();

    for &ni in &order {
        let Some(prims) = schedules.get(&g.nodes[ni].output) else { continue };
        let mut nest = nests[ni].take().unwrap();
        for p in prims.iter().filter(|p| !p.is_fusion()) {
            match apply_local(&nest, p, rg, &mut buffers) {
                Ok(n) => nest = n,
                Err(e) => {
                    errs.push(e);
                    break;
                }
            }
        }
        nests[ni] = Some(nest);
    }

    for &ni in &order {
        let Some(prims) = schedules.get(&g.nodes[ni].output) else { continue };
        let fusions: Vec<&LoopPrim> = prims.iter().filter(|p| p.is_fusion()).collect();
        if fusions.len() > 1 {
            errs.push(Error::Schedule {
                node: g.nodes[ni].output.clone(),
                msg: "at most one compute_at or inline per operator".into(),
            });
            continue;
        }
        let Some(f) = fusions.first() else { continue };
        let (LoopPrim::ComputeAt { consumer, .. } | LoopPrim::Inline { consumer }) = f else {
            unreachable!()
        };
        let Some(ci) = g.node_by_output(consumer) else {
            errs.push(Error::Schedule {
                node: g.nodes[ni].output.clone(),
                msg: format!("fusion target `{consumer}` is not an operator output"),
            });
            continue;
        };
        if nests[ci].is_none() || ci == ni {
            errs.push(Error::Schedule {
                node: g.nodes[ni].output.clone(),
                msg: format!("fusion target `{consumer}` is already fused elsewhere"),
            });
            continue;
        }
        let producer = nests[ni].as_ref().unwrap();
        let cons = nests[ci].as_ref().unwrap();
        let fused = match f {
            LoopPrim::ComputeAt { depth, .. } => compute_at(producer, cons, *depth),
            _ => inline(producer, cons),
        };
        match fused {
            Ok(n) => {
                nests[ci] = Some(n);
                nests[ni] = None;
            }
            Err(e) => errs.push(e),
        }
    }
    if !errs.is_empty() {
        return Err(aggregate(errs));
    }

    let mut body = Vec::new();
    let mut var_names = Vec::new();
    for &ni in &order {
        let Some(nest) = nests[ni].take() else { continue };
        let offset = var_names.len() as u32;
        let mut nest = nest;
        nest.remap_vars(&|v| VarId(v.0 + offset));
        var_names.extend(nest.var_names.iter().cloned());
        body.extend(emit(&nest, 0, false));
    }
    Ok(Program {
        dtype: g.dtype(),
        buffers,
        body,
        var_names,
        layouts: rg.layouts.clone(),
    })
}

fn wrap_loops(loops: &[&super::Loop], inner: Vec<Stmt>) -> Vec<Stmt> {
    loops.iter().rev().fold(inner, |body, l| {
        vec![Stmt::For {
            var: l.var,
            extent: l.extent,
            ann: l.ann,
            body,
        }]
    })
}

fn guarded(guard: &[crate::program::Bound], s: Stmt) -> Stmt {
    if guard.is_empty() {
        s
    } else {
        Stmt::If {
            conds: guard.to_vec(),
            body: vec![s],
        }
    }
}

/// Staging copies and fused producers placed at `level`.
fn prelude(nest: &LoopNest, level: usize) -> Vec<Stmt> {
    let mut out = Vec::new();
    for s in nest.staging.iter().filter(|s| s.depth == level) {
        let store = Stmt::Store {
            buf: s.buf,
            index: s.copy_vars.iter().map(|(v, _)| AccessExpr::Var(*v)).collect(),
            value: Value::Load(Load {
                buf: s.src,
                index: s.src_index.clone(),
                guard: s.guard.clone(),
            }),
            accumulate: false,
        };
        let mut body = vec![store];
        for (v, e) in s.copy_vars.iter().rev() {
            body = vec![Stmt::For {
                var: *v,
                extent: *e,
                ann: Annotation::None,
                body,
            }];
        }
        out.extend(body);
    }
    for a in nest.attached.iter().filter(|a| a.depth == level) {
        out.extend(emit(&a.nest, level, false));
    }
    out
}

fn emit(nest: &LoopNest, level: usize, in_update: bool) -> Vec<Stmt> {
    let mut out = prelude(nest, level);
    out.extend(emit_rest(nest, level, in_update));
    out
}

fn emit_rest(nest: &LoopNest, level: usize, in_update: bool) -> Vec<Stmt> {
    if nest.accumulate && !in_update && level == nest.first_reduction() {
        let spatial: Vec<&super::Loop> = nest.loops[level..]
            .iter()
            .filter(|l| l.kind == LoopKind::Spatial)
            .collect();
        let init = guarded(
            &nest.guard,
            Stmt::Store {
                buf: nest.out_buf,
                index: nest.store_index.clone(),
                value: Value::Const(0.0),
                accumulate: false,
            },
        );
        let mut out = wrap_loops(&spatial, vec![init]);
        out.extend(emit_rest(nest, level, true));
        return out;
    }
    if level == nest.loops.len() {
        return vec![guarded(
            &nest.guard,
            Stmt::Store {
                buf: nest.out_buf,
                index: nest.store_index.clone(),
                value: nest.value.clone(),
                accumulate: nest.accumulate,
            },
        )];
    }
    let l = &nest.loops[level];
    vec![Stmt::For {
        var: l.var,
        extent: l.extent,
        ann: l.ann,
        body: emit(nest, level + 1, in_update),
    }]
}
