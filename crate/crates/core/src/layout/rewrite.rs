//! Access rewriting: derive every tensor's physical layout from its
//! primitive sequence and rewrite each operator over its output layout.
//!
//! An operator iterates over the physical dims `L'` of its output. The
//! logical output index is recovered with the inverse sequence, so every
//! input access `X[f(L)]` becomes `S_X(f(S_Y^-1(L')))`.

use std::collections::BTreeMap;

use crate::compute::{logical_compute, LogicalValue};
use crate::error::{Error, Result};
use crate::expr::{AccessExpr, VarId, VarRanges};
use crate::ir::{Dim, Graph, OpKind, Role};
use crate::program::{Bound, BufferDecl, BufferKind, Load, Value};

use super::{derive_layout, forward_index, forward_map, invert_sequence, Index, PrimitiveSeq, SeqMap};

/// Physical placement of one graph tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorLayout {
    pub id: String,
    pub logical: Vec<Dim>,
    pub seq: PrimitiveSeq,
    /// Tensor whose buffer holds the data: the tensor itself, or the target
    /// of a `store_at`.
    pub buffer: String,
    /// For a `store_at` source: the 0-based dim of the target's base shape and
    /// the position along it.
    pub slot: Option<(usize, usize)>,
    /// Shape the sequence is applied to: the logical shape, grown along the
    /// attach dim when other tensors are stored here.
    pub base: Vec<Dim>,
    pub physical: Vec<Dim>,
}

impl TensorLayout {
    pub fn is_identity(&self) -> bool {
        self.slot.is_none() && self.physical == self.logical
    }
}

/// Computes the layout of every tensor. Tensors without an entry in `seqs`
/// keep their declared shape.
pub fn build_layouts(g: &Graph, seqs: &SeqMap) -> Result<BTreeMap<String, TensorLayout>> {
    for id in seqs.keys() {
        if g.tensor(id).is_none() {
            return Err(Error::Rewrite {
                tensor: id.clone(),
                msg: "layout given for an unknown tensor".into(),
            });
        }
    }
    // Attached sources per target, in declaration order.
    let mut attached: BTreeMap<String, (usize, Vec<String>)> = BTreeMap::new();
    for t in &g.tensors {
        let Some(seq) = seqs.get(&t.id) else { continue };
        let Some((target, dim)) = seq.store_at() else { continue };
        let err = |msg: String| Error::Rewrite {
            tensor: t.id.clone(),
            msg,
        };
        if t.constancy != Role::Constant {
            return Err(err("store_at is performed offline and needs a constant tensor".into()));
        }
        if seq.0.len() != 1 {
            return Err(err("store_at must be the only primitive of its sequence".into()));
        }
        let dst = g
            .tensor(target)
            .ok_or_else(|| err(format!("store_at target `{target}` does not exist")))?;
        if dst.constancy != Role::Constant {
            return Err(err(format!("store_at target `{target}` is not constant")));
        }
        if seqs.get(target).and_then(|s| s.store_at()).is_some() {
            return Err(err(format!("store_at target `{target}` is itself attached")));
        }
        super::apply_store_at(&t.dims, &dst.dims, dim).map_err(|e| err(e.to_string()))?;
        let entry = attached.entry(target.to_string()).or_insert((dim, Vec::new()));
        if entry.0 != dim {
            return Err(err(format!("tensors attached to `{target}` along different dims")));
        }
        entry.1.push(t.id.clone());
    }

    let mut out = BTreeMap::new();
    for t in &g.tensors {
        let seq = seqs.get(&t.id).cloned().unwrap_or_default();
        let layout = if let Some((target, dim)) = seq.store_at() {
            let slot_base = g.tensor(target).unwrap().dims[dim - 1].extent;
            let pos = attached[target].1.iter().position(|s| s == &t.id).unwrap();
            TensorLayout {
                id: t.id.clone(),
                logical: t.dims.clone(),
                seq: seq.clone(),
                buffer: target.to_string(),
                slot: Some((dim - 1, slot_base + pos)),
                base: t.dims.clone(),
                physical: t.dims.clone(),
            }
        } else {
            let mut base = t.dims.clone();
            if let Some((dim, srcs)) = attached.get(&t.id) {
                base[dim - 1].extent += srcs.len();
            }
            let physical = derive_layout(&seq, &base).map_err(|e| Error::Rewrite {
                tensor: t.id.clone(),
                msg: e.to_string(),
            })?;
            TensorLayout {
                id: t.id.clone(),
                logical: t.dims.clone(),
                seq,
                buffer: t.id.clone(),
                slot: None,
                base,
                physical,
            }
        };
        out.insert(t.id.clone(), layout);
    }
    Ok(out)
}

/// Maps a logical access of `tensor` to `(buffer tensor, physical index)`.
pub fn physical_index(
    layouts: &BTreeMap<String, TensorLayout>,
    tensor: &str,
    idx: Vec<Index>,
) -> Result<(String, Vec<AccessExpr>)> {
    let t = layouts.get(tensor).ok_or_else(|| Error::Rewrite {
        tensor: tensor.to_string(),
        msg: "unknown tensor".into(),
    })?;
    let (owner, idx) = match t.slot {
        Some((dim, pos)) => {
            let mut full = idx;
            full.insert(dim, Index::Plain(AccessExpr::Const(pos as i64)));
            (&layouts[&t.buffer], full)
        }
        None => (t, idx),
    };
    let mapped = forward_index(&owner.seq, &owner.base, idx).map_err(|e| Error::Rewrite {
        tensor: tensor.to_string(),
        msg: e.to_string(),
    })?;
    Ok((owner.id.clone(), mapped.into_iter().map(Index::into_expr).collect()))
}

/// Row-major offset of `idx` within `dims`, or `None` when out of range.
fn offset(dims: &[Dim], idx: &[i64]) -> Option<usize> {
    let mut off = 0usize;
    for (d, &i) in dims.iter().zip(idx) {
        if i < 0 || i as usize >= d.extent {
            return None;
        }
        off = off * d.extent + i as usize;
    }
    Some(off)
}

/// Calls `f` with every row-major index of `dims`.
pub(crate) fn for_each_index(dims: &[Dim], mut f: impl FnMut(&[i64])) {
    let n: usize = dims.iter().map(|d| d.extent).product();
    let mut idx = vec![0i64; dims.len()];
    for _ in 0..n {
        f(&idx);
        for k in (0..dims.len()).rev() {
            idx[k] += 1;
            if (idx[k] as usize) < dims[k].extent {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Builds the physical buffer of `owner` from logical row-major data of the
/// owner and of every tensor stored into it. Cells mapping to no logical
/// element (padding, unfold overhang) are zero; every unfold copy is filled.
pub fn materialize<T: Copy + Default>(
    layouts: &BTreeMap<String, TensorLayout>,
    owner: &str,
    data: &BTreeMap<String, Vec<T>>,
) -> Result<Vec<T>> {
    let t = &layouts[owner];
    let inv = invert_sequence(&t.seq, &t.base)?;
    let back = forward_map(&inv, &t.physical)?;
    let sources: Vec<&TensorLayout> = layouts
        .values()
        .filter(|s| s.slot.is_some() && s.buffer == owner)
        .collect();
    let missing = |id: &str| Error::Rewrite {
        tensor: id.to_string(),
        msg: "no data supplied".into(),
    };
    let own = data.get(owner).ok_or_else(|| missing(owner))?;
    let mut out = Vec::with_capacity(t.physical.iter().map(|d| d.extent).product());
    for_each_index(&t.physical, |p| {
        let b = back.eval(p);
        let mut v = T::default();
        if let Some(off) = offset(&t.logical, &b) {
            v = own[off];
        } else if offset(&t.base, &b).is_some() {
            for s in &sources {
                let (dim, pos) = s.slot.unwrap();
                if b[dim] == pos as i64 {
                    let mut rest = b.clone();
                    rest.remove(dim);
                    if let (Some(src), Some(off)) = (data.get(&s.id), offset(&s.logical, &rest)) {
                        v = src[off];
                    }
                }
            }
        }
        out.push(v);
    });
    for s in sources {
        if !data.contains_key(&s.id) {
            return Err(missing(&s.id));
        }
    }
    Ok(out)
}

/// Reads the logical row-major contents of `tensor` out of its buffer.
pub fn extract<T: Copy>(
    layouts: &BTreeMap<String, TensorLayout>,
    tensor: &str,
    buffer: &[T],
) -> Result<Vec<T>> {
    let t = &layouts[tensor];
    let owner = &layouts[&t.buffer];
    let vars: Vec<Index> = (0..t.logical.len() as u32)
        .map(|k| Index::Plain(AccessExpr::Var(VarId(k))))
        .collect();
    let (_, idx) = physical_index(layouts, tensor, vars)?;
    let mut out = Vec::with_capacity(t.logical.iter().map(|d| d.extent).product());
    let mut err = None;
    for_each_index(&t.logical, |l| {
        let p: Vec<i64> = idx.iter().map(|e| e.eval(l)).collect();
        match offset(&owner.physical, &p) {
            Some(off) => out.push(buffer[off]),
            None => {
                err.get_or_insert(Error::OutOfBounds {
                    buffer: owner.id.clone(),
                    indices: p,
                    stmt: format!("extract {tensor}"),
                });
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Iteration space of an operator writing `layout`: one variable per physical
/// dim and the logical output index each point stands for.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputSpace {
    pub dims: Vec<Dim>,
    /// Logical output index over `VarId(0..dims.len())`.
    pub logical: Vec<AccessExpr>,
    /// Bounds selecting the points that map to a logical element; cells
    /// outside stay zero.
    pub guard: Vec<Bound>,
}

pub fn output_loop_space(layout: &TensorLayout) -> Result<OutputSpace> {
    if layout.seq.store_at().is_some() || layout.base != layout.logical {
        return Err(Error::Rewrite {
            tensor: layout.id.clone(),
            msg: "store_at applies to constant tensors only; an operator output cannot be attached".into(),
        });
    }
    let inv = invert_sequence(&layout.seq, &layout.base)?;
    let back = forward_map(&inv, &layout.physical)?;
    let ranges = ranges_of(&layout.physical, 0);
    let logical: Vec<AccessExpr> = back.forward.iter().map(|e| e.simplify(&ranges)).collect();
    let mut guard = Vec::new();
    for (e, d) in logical.iter().zip(&layout.logical) {
        let ok = matches!(e.bounds(&ranges), Some((lo, hi)) if lo >= 0 && hi < d.extent as i64);
        if !ok {
            guard.push(Bound::new(e.clone(), 0, d.extent as i64));
        }
    }
    Ok(OutputSpace {
        dims: layout.physical.clone(),
        logical,
        guard,
    })
}

pub(crate) fn ranges_of(dims: &[Dim], first: u32) -> VarRanges {
    let mut r = VarRanges::new();
    for (k, d) in dims.iter().enumerate() {
        r.insert_extent(VarId(first + k as u32), d.extent);
    }
    r
}

/// One operator over its physical output space. Spatial loop variables are
/// `VarId(0..spatial.len())`, reduction variables follow.
#[derive(Clone, Debug, PartialEq)]
pub struct RewrittenNode {
    pub node: usize,
    pub kind: OpKind,
    pub output: String,
    pub out_buf: usize,
    pub spatial: Vec<Dim>,
    pub reductions: Vec<Dim>,
    pub guard: Vec<Bound>,
    pub value: Value,
    pub accumulate: bool,
}

impl RewrittenNode {
    pub fn store_index(&self) -> Vec<AccessExpr> {
        (0..self.spatial.len() as u32).map(|k| AccessExpr::Var(VarId(k))).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RewrittenGraph {
    pub graph: Graph,
    pub layouts: BTreeMap<String, TensorLayout>,
    pub buffers: Vec<BufferDecl>,
    pub nodes: Vec<RewrittenNode>,
}

impl RewrittenGraph {
    pub fn buffer_of(&self, tensor: &str) -> Option<usize> {
        let owner = &self.layouts.get(tensor)?.buffer;
        self.buffers.iter().position(|b| &b.name == owner)
    }
}

/// Rewrites every operator of `g` for the layouts in `seqs`.
pub fn rewrite_accesses_pass(g: &Graph, seqs: &SeqMap) -> Result<RewrittenGraph> {
    let layouts = build_layouts(g, seqs)?;
    let buffers: Vec<BufferDecl> = g
        .tensors
        .iter()
        .filter(|t| layouts[&t.id].slot.is_none())
        .map(|t| BufferDecl {
            name: t.id.clone(),
            dims: layouts[&t.id].physical.clone(),
            role: t.constancy,
            kind: BufferKind::Tensor,
        })
        .collect();
    let buf_index = |name: &str| buffers.iter().position(|b| b.name == name).unwrap();

    let mut nodes = Vec::with_capacity(g.nodes.len());
    for (ni, node) in g.nodes.iter().enumerate() {
        let lc = logical_compute(g, node)?;
        let space = output_loop_space(&layouts[&node.output])?;
        let n = space.dims.len();
        let rank = lc.out_dims.len();
        let reductions: Vec<Dim> = lc
            .reductions
            .iter()
            .map(|(name, e)| Dim::new(name.clone(), *e))
            .collect();
        let mut ranges = ranges_of(&space.dims, 0);
        for (k, d) in reductions.iter().enumerate() {
            ranges.insert_extent(VarId((n + k) as u32), d.extent);
        }
        let subst = |v: VarId| -> Option<AccessExpr> {
            let k = v.index();
            if k < rank {
                Some(space.logical[k].clone())
            } else {
                Some(AccessExpr::Var(VarId((n + k - rank) as u32)))
            }
        };
        let value = lower_value(&lc.value, &layouts, &subst, &ranges, &buf_index)?;
        nodes.push(RewrittenNode {
            node: ni,
            kind: node.kind,
            output: node.output.clone(),
            out_buf: buf_index(&layouts[&node.output].buffer),
            spatial: space.dims.clone(),
            reductions,
            guard: space.guard.clone(),
            value,
            accumulate: lc.accumulate,
        });
    }
    Ok(RewrittenGraph {
        graph: g.clone(),
        layouts,
        buffers,
        nodes,
    })
}

fn lower_value(
    v: &LogicalValue,
    layouts: &BTreeMap<String, TensorLayout>,
    subst: &impl Fn(VarId) -> Option<AccessExpr>,
    ranges: &VarRanges,
    buf_index: &impl Fn(&str) -> usize,
) -> Result<Value> {
    let rec = |x: &LogicalValue| lower_value(x, layouts, subst, ranges, buf_index);
    Ok(match v {
        LogicalValue::Const(c) => Value::Const(*c),
        LogicalValue::Add(a, b) => Value::add(rec(a)?, rec(b)?),
        LogicalValue::Mul(a, b) => Value::mul(rec(a)?, rec(b)?),
        LogicalValue::Max(a, b) => Value::max(rec(a)?, rec(b)?),
        LogicalValue::Load(l) => {
            let idx: Vec<Index> = l.index.iter().map(|i| i.substitute(subst)).collect();
            let (owner, phys) = physical_index(layouts, &l.tensor, idx)?;
            let mut guard = Vec::new();
            for (e, lo, hi) in &l.guard {
                let e = e.substitute(subst).simplify(ranges);
                let always = matches!(e.bounds(ranges), Some((a, b)) if a >= *lo && b < *hi);
                if !always {
                    guard.push(Bound::new(e, *lo, *hi));
                }
            }
            Value::Load(Load {
                buf: buf_index(&owner),
                index: phys.iter().map(|e| e.simplify(ranges)).collect(),
                guard,
            })
        }
    })
}
