//! Layout primitives.
//!
//! A tensor's physical layout is its declared (logical) shape transformed by
//! an ordered [`PrimitiveSeq`]. Each primitive rewrites the shape and maps an
//! index tuple of the old shape to an index tuple of the new one. Dimension
//! positions in primitives are 1-based, as in the JSON interchange format.
//!
//! * basic primitives `split`, `reorder` and `fuse` are bijections;
//! * `unfold` performs overlapped tiling and duplicates boundary elements;
//! * `pad` appends zeros;
//! * `store_at` attaches a constant tensor to another one.
//!
//! `fold`, `unpad` and `decouple_at` are the inverses of the last three.

mod rewrite;

pub use rewrite::{
    build_layouts, extract, materialize, output_loop_space, physical_index, rewrite_accesses_pass,
    OutputSpace, RewrittenGraph, RewrittenNode, TensorLayout,
};


use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{AccessExpr, VarId};
use crate::ir::Dim;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayoutPrimitive {
    Split { dim: usize, factors: Vec<usize> },
    Reorder { perm: Vec<usize> },
    Fuse { dims: Vec<usize> },
    Unfold { dim: usize, tile: usize, stride: usize },
    Pad { dim: usize, size: usize },
    StoreAt { target: String, dim: usize },
    /// Inverse of `unfold`: merges dims `dim` (tiles) and `dim + 1` (tile body)
    /// back into one dimension of `extent` elements.
    Fold { dim: usize, stride: usize, extent: usize },
    Unpad { dim: usize, size: usize },
    DecoupleAt { target: String, dim: usize },
}

impl LayoutPrimitive {
    pub fn name(&self) -> &'static str {
        match self {
            LayoutPrimitive::Split { .. } => "split",
            LayoutPrimitive::Reorder { .. } => "reorder",
            LayoutPrimitive::Fuse { .. } => "fuse",
            LayoutPrimitive::Unfold { .. } => "unfold",
            LayoutPrimitive::Pad { .. } => "pad",
            LayoutPrimitive::StoreAt { .. } => "store_at",
            LayoutPrimitive::Fold { .. } => "fold",
            LayoutPrimitive::Unpad { .. } => "unpad",
            LayoutPrimitive::DecoupleAt { .. } => "decouple_at",
        }
    }

    pub fn is_basic(&self) -> bool {
        matches!(
            self,
            LayoutPrimitive::Split { .. } | LayoutPrimitive::Reorder { .. } | LayoutPrimitive::Fuse { .. }
        )
    }

    /// Advanced primitives that expand or relocate data. A zero-sized pad is
    /// trivial and does not count.
    pub fn expands_data(&self) -> bool {
        match self {
            LayoutPrimitive::Pad { size, .. } | LayoutPrimitive::Unpad { size, .. } => *size > 0,
            LayoutPrimitive::Unfold { .. }
            | LayoutPrimitive::Fold { .. }
            | LayoutPrimitive::StoreAt { .. }
            | LayoutPrimitive::DecoupleAt { .. } => true,
            _ => false,
        }
    }
}

/// An ordered list of primitives applied left to right to one tensor.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrimitiveSeq(pub Vec<LayoutPrimitive>);

impl PrimitiveSeq {
    pub fn new(prims: Vec<LayoutPrimitive>) -> Self {
        PrimitiveSeq(prims)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LayoutPrimitive> {
        self.0.iter()
    }

    pub fn is_propagable(&self) -> bool {
        !self.0.iter().any(|p| p.expands_data())
    }

    pub fn store_at(&self) -> Option<(&str, usize)> {
        self.0.iter().find_map(|p| match p {
            LayoutPrimitive::StoreAt { target, dim } => Some((target.as_str(), *dim)),
            _ => None,
        })
    }
}

impl From<Vec<LayoutPrimitive>> for PrimitiveSeq {
    fn from(v: Vec<LayoutPrimitive>) -> Self {
        PrimitiveSeq(v)
    }
}

/// One component of a tensor access.
///
/// `Window` keeps the sliding-window structure `stride·window + offset`
/// (with `offset < size`) of convolution inputs so that `unfold` can rewrite
/// it tile-locally.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Index {
    Plain(AccessExpr),
    Window {
        window: AccessExpr,
        stride: i64,
        offset: AccessExpr,
        size: i64,
    },
}

impl Index {
    pub fn to_expr(&self) -> AccessExpr {
        match self {
            Index::Plain(e) => e.clone(),
            Index::Window {
                window,
                stride,
                offset,
                ..
            } => AccessExpr::add(window.clone() * *stride, offset.clone()),
        }
    }

    pub fn into_expr(self) -> AccessExpr {
        match self {
            Index::Plain(e) => e,
            w => w.to_expr(),
        }
    }

    pub fn substitute(&self, f: &impl Fn(VarId) -> Option<AccessExpr>) -> Index {
        match self {
            Index::Plain(e) => Index::Plain(e.substitute(f)),
            Index::Window {
                window,
                stride,
                offset,
                size,
            } => Index::Window {
                window: window.substitute(f),
                stride: *stride,
                offset: offset.substitute(f),
                size: *size,
            },
        }
    }
}

impl From<AccessExpr> for Index {
    fn from(e: AccessExpr) -> Self {
        Index::Plain(e)
    }
}

/// Result of applying one primitive to a shape: the new shape and, for each
/// new dimension, its index as an expression over the old indices
/// (`VarId(k)` is old dimension `k`, 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct Transformed {
    pub dims: Vec<Dim>,
    pub forward: Vec<AccessExpr>,
}

impl Transformed {
    pub fn eval(&self, old_index: &[i64]) -> Vec<i64> {
        self.forward.iter().map(|e| e.eval(old_index)).collect()
    }
}

fn identity_vars(n: usize) -> Vec<Index> {
    (0..n as u32).map(|k| Index::Plain(AccessExpr::Var(VarId(k)))).collect()
}

fn check_dim(dim: usize, rank: usize) -> std::result::Result<usize, String> {
    if dim == 0 || dim > rank {
        Err(format!("dimension {dim} out of range for rank {rank}"))
    } else {
        Ok(dim - 1)
    }
}

fn unfold_tiles(extent: usize, tile: usize, stride: usize) -> usize {
    (extent - tile).div_ceil(stride) + 1
}

impl LayoutPrimitive {
    /// Shape rule of the primitive.
    pub fn apply_shape(&self, dims: &[Dim]) -> std::result::Result<Vec<Dim>, String> {
        let rank = dims.len();
        match self {
            LayoutPrimitive::Split { dim, factors } => {
                let k = check_dim(*dim, rank)?;
                if factors.is_empty() || factors.contains(&0) {
                    return Err("split factors must be positive".into());
                }
                let prod: usize = factors.iter().product();
                if prod != dims[k].extent {
                    return Err(format!(
                        "factors {:?} multiply to {prod}, extent of {} is {}",
                        factors, dims[k].name, dims[k].extent
                    ));
                }
                let base = &dims[k].name;
                let names: Vec<String> = if factors.len() == 2 {
                    vec![format!("{base}o"), format!("{base}i")]
                } else if factors.len() == 1 {
                    vec![base.clone()]
                } else {
                    (0..factors.len()).map(|j| format!("{base}{j}")).collect()
                };
                let mut out = dims[..k].to_vec();
                out.extend(names.into_iter().zip(factors).map(|(n, &f)| Dim::new(n, f)));
                out.extend_from_slice(&dims[k + 1..]);
                Ok(out)
            }
            LayoutPrimitive::Reorder { perm } => {
                check_perm(perm, rank)?;
                Ok(perm.iter().map(|&p| dims[p - 1].clone()).collect())
            }
            LayoutPrimitive::Fuse { dims: fd } => {
                let (k, m) = check_fuse(fd, rank)?;
                let extent = dims[k..=k + m].iter().map(|d| d.extent).product();
                let name: String = dims[k..=k + m].iter().map(|d| d.name.as_str()).collect();
                let mut out = dims[..k].to_vec();
                out.push(Dim::new(name, extent));
                out.extend_from_slice(&dims[k + m + 1..]);
                Ok(out)
            }
            LayoutPrimitive::Unfold { dim, tile, stride } => {
                let k = check_dim(*dim, rank)?;
                let d = dims[k].extent;
                if !(1 <= *stride && stride <= tile && *tile <= d) {
                    return Err(format!(
                        "unfold needs 1 <= stride <= tile <= extent, got stride {stride}, tile {tile}, extent {d}"
                    ));
                }
                let base = &dims[k].name;
                let mut out = dims[..k].to_vec();
                out.push(Dim::new(format!("{base}t"), unfold_tiles(d, *tile, *stride)));
                out.push(Dim::new(format!("{base}b"), *tile));
                out.extend_from_slice(&dims[k + 1..]);
                Ok(out)
            }
            LayoutPrimitive::Pad { dim, size } => {
                let k = check_dim(*dim, rank)?;
                let mut out = dims.to_vec();
                out[k].extent += size;
                Ok(out)
            }
            LayoutPrimitive::Unpad { dim, size } => {
                let k = check_dim(*dim, rank)?;
                if dims[k].extent <= *size {
                    return Err(format!("cannot unpad {size} from extent {}", dims[k].extent));
                }
                let mut out = dims.to_vec();
                out[k].extent -= size;
                Ok(out)
            }
            LayoutPrimitive::Fold { dim, stride, extent } => {
                let k = check_dim(*dim, rank)?;
                if k + 1 >= rank {
                    return Err("fold needs a tile dimension after `dim`".into());
                }
                let (tiles, tile) = (dims[k].extent, dims[k + 1].extent);
                if *stride == 0 || *extent < tile || unfold_tiles(*extent, tile, *stride) != tiles {
                    return Err(format!(
                        "fold({tiles}x{tile}, stride {stride}) cannot restore extent {extent}"
                    ));
                }
                let name = dims[k].name.strip_suffix('t').unwrap_or(&dims[k].name).to_string();
                let mut out = dims[..k].to_vec();
                out.push(Dim::new(name, *extent));
                out.extend_from_slice(&dims[k + 2..]);
                Ok(out)
            }
            LayoutPrimitive::StoreAt { .. } | LayoutPrimitive::DecoupleAt { .. } => {
                // The source tensor keeps its own logical view; its storage moves
                // into the target, see `apply_store_at`.
                Ok(dims.to_vec())
            }
        }
    }

    /// Maps an index of the old shape (`dims`) to the new shape.
    pub fn map_index(&self, dims: &[Dim], idx: Vec<Index>) -> Vec<Index> {
        match self {
            LayoutPrimitive::Split { dim, factors } => {
                let k = dim - 1;
                let i = idx[k].to_expr();
                let m = factors.len();
                let mut out: Vec<Index> = idx[..k].to_vec();
                for j in 0..m {
                    let suffix: usize = factors[j + 1..].iter().product();
                    let q = AccessExpr::floordiv(i.clone(), suffix as i64);
                    let comp = if j == 0 {
                        q
                    } else {
                        AccessExpr::modulo(q, factors[j] as i64)
                    };
                    out.push(Index::Plain(comp));
                }
                out.extend_from_slice(&idx[k + 1..]);
                out
            }
            LayoutPrimitive::Reorder { perm } => perm.iter().map(|&p| idx[p - 1].clone()).collect(),
            LayoutPrimitive::Fuse { dims: fd } => {
                let k = fd[0] - 1;
                let m = fd.len() - 1;
                let mut fused: Option<AccessExpr> = None;
                for j in 0..=m {
                    let suffix: usize = dims[k + j + 1..=k + m].iter().map(|d| d.extent).product();
                    let term = idx[k + j].to_expr() * suffix as i64;
                    fused = Some(match fused {
                        None => term,
                        Some(f) => f + term,
                    });
                }
                let mut out: Vec<Index> = idx[..k].to_vec();
                out.push(Index::Plain(fused.unwrap()));
                out.extend_from_slice(&idx[k + m + 1..]);
                out
            }
            LayoutPrimitive::Unfold { dim, tile, stride } => {
                let k = dim - 1;
                let d = dims[k].extent;
                let (t, o) = unfold_index(&idx[k], d, *tile, *stride);
                let mut out: Vec<Index> = idx[..k].to_vec();
                out.push(Index::Plain(t));
                out.push(Index::Plain(o));
                out.extend_from_slice(&idx[k + 1..]);
                out
            }
            LayoutPrimitive::Fold { dim, stride, .. } => {
                let k = dim - 1;
                let merged = idx[k].to_expr() * *stride as i64 + idx[k + 1].to_expr();
                let mut out: Vec<Index> = idx[..k].to_vec();
                out.push(Index::Plain(merged));
                out.extend_from_slice(&idx[k + 2..]);
                out
            }
            LayoutPrimitive::Pad { .. }
            | LayoutPrimitive::Unpad { .. }
            | LayoutPrimitive::StoreAt { .. }
            | LayoutPrimitive::DecoupleAt { .. } => idx,
        }
    }

    /// Shape plus index-forward map over fresh index variables.
    pub fn transform(&self, dims: &[Dim]) -> std::result::Result<Transformed, String> {
        let new_dims = self.apply_shape(dims)?;
        let forward = self
            .map_index(dims, identity_vars(dims.len()))
            .into_iter()
            .map(Index::into_expr)
            .collect();
        Ok(Transformed {
            dims: new_dims,
            forward,
        })
    }

    /// The primitive undoing `self` when applied to the shape `self` produced
    /// from `dims`.
    pub fn inverse(&self, dims: &[Dim]) -> LayoutPrimitive {
        match self {
            LayoutPrimitive::Split { dim, factors } => LayoutPrimitive::Fuse {
                dims: (*dim..dim + factors.len()).collect(),
            },
            LayoutPrimitive::Reorder { perm } => {
                let mut inv = vec![0; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p - 1] = j + 1;
                }
                LayoutPrimitive::Reorder { perm: inv }
            }
            LayoutPrimitive::Fuse { dims: fd } => LayoutPrimitive::Split {
                dim: fd[0],
                factors: fd.iter().map(|&k| dims[k - 1].extent).collect(),
            },
            LayoutPrimitive::Unfold { dim, stride, .. } => LayoutPrimitive::Fold {
                dim: *dim,
                stride: *stride,
                extent: dims[dim - 1].extent,
            },
            LayoutPrimitive::Fold { dim, stride, .. } => LayoutPrimitive::Unfold {
                dim: *dim,
                tile: dims[*dim].extent,
                stride: *stride,
            },
            LayoutPrimitive::Pad { dim, size } => LayoutPrimitive::Unpad {
                dim: *dim,
                size: *size,
            },
            LayoutPrimitive::Unpad { dim, size } => LayoutPrimitive::Pad {
                dim: *dim,
                size: *size,
            },
            LayoutPrimitive::StoreAt { target, dim } => LayoutPrimitive::DecoupleAt {
                target: target.clone(),
                dim: *dim,
            },
            LayoutPrimitive::DecoupleAt { target, dim } => LayoutPrimitive::StoreAt {
                target: target.clone(),
                dim: *dim,
            },
        }
    }
}

fn check_perm(perm: &[usize], rank: usize) -> std::result::Result<(), String> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(format!("permutation {perm:?} has length {}, rank is {rank}", perm.len()));
    }
    for &p in perm {
        if p == 0 || p > rank || seen[p - 1] {
            return Err(format!("{perm:?} is not a permutation of 1..={rank}"));
        }
        seen[p - 1] = true;
    }
    Ok(())
}

fn check_fuse(fd: &[usize], rank: usize) -> std::result::Result<(usize, usize), String> {
    if fd.is_empty() {
        return Err("fuse needs at least one dimension".into());
    }
    for w in fd.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(format!("fused dims {fd:?} are not contiguous"));
        }
    }
    let k = check_dim(fd[0], rank)?;
    check_dim(*fd.last().unwrap(), rank)?;
    Ok((k, fd.len() - 1))
}

/// Windows of `size` elements placed `stride` apart that fit inside one tile
/// of `tile` elements.
pub fn windows_per_tile(tile: usize, size: usize, stride: usize) -> usize {
    (tile - size) / stride + 1
}

fn unfold_index(idx: &Index, extent: usize, tile: usize, stride: usize) -> (AccessExpr, AccessExpr) {
    if let Index::Window {
        window,
        stride: v,
        offset,
        size,
    } = idx
    {
        let (v, m) = (*v as usize, *size as usize);
        if m <= tile && v >= 1 {
            let per_tile = windows_per_tile(tile, m, v);
            // Whole windows per tile: every window lands inside one tile.
            if stride == v * per_tile {
                let t = AccessExpr::floordiv(window.clone(), per_tile as i64);
                let o = window.clone() * v as i64 + offset.clone() - t.clone() * stride as i64;
                return (t, o);
            }
        }
    }
    let x = idx.to_expr();
    let tiles = unfold_tiles(extent, tile, stride);
    if tiles == 1 {
        return (AccessExpr::Const(0), x);
    }
    let t = AccessExpr::min(AccessExpr::floordiv(x.clone(), stride as i64), tiles as i64 - 1);
    let o = x - t.clone() * stride as i64;
    (t, o)
}

fn prim_err(index: usize, prim: &LayoutPrimitive, msg: String) -> Error {
    Error::Primitive {
        index,
        prim: prim.name().to_string(),
        msg,
    }
}

/// Final dims after applying `seq` left to right.
pub fn derive_layout(seq: &PrimitiveSeq, dims: &[Dim]) -> Result<Vec<Dim>> {
    let mut cur = dims.to_vec();
    for (i, p) in seq.iter().enumerate() {
        cur = p.apply_shape(&cur).map_err(|m| prim_err(i, p, m))?;
    }
    Ok(cur)
}

/// Every intermediate shape, starting with `dims` and ending with the final
/// layout.
pub fn layout_trace(seq: &PrimitiveSeq, dims: &[Dim]) -> Result<Vec<Vec<Dim>>> {
    let mut out = vec![dims.to_vec()];
    for (i, p) in seq.iter().enumerate() {
        let next = p.apply_shape(out.last().unwrap()).map_err(|m| prim_err(i, p, m))?;
        out.push(next);
    }
    Ok(out)
}

/// Inverse sequence: applying `seq` then the result restores `dims`.
pub fn invert_sequence(seq: &PrimitiveSeq, dims: &[Dim]) -> Result<PrimitiveSeq> {
    let trace = layout_trace(seq, dims)?;
    Ok(PrimitiveSeq(
        seq.iter()
            .enumerate()
            .rev()
            .map(|(i, p)| p.inverse(&trace[i]))
            .collect(),
    ))
}

/// Maps an access of the logical shape through the whole sequence.
pub fn forward_index(seq: &PrimitiveSeq, dims: &[Dim], idx: Vec<Index>) -> Result<Vec<Index>> {
    let mut cur_dims = dims.to_vec();
    let mut cur = idx;
    for (i, p) in seq.iter().enumerate() {
        let next_dims = p.apply_shape(&cur_dims).map_err(|m| prim_err(i, p, m))?;
        cur = p.map_index(&cur_dims, cur);
        cur_dims = next_dims;
    }
    Ok(cur)
}

/// Index-forward map of the whole sequence over fresh index variables.
pub fn forward_map(seq: &PrimitiveSeq, dims: &[Dim]) -> Result<Transformed> {
    let out = forward_index(seq, dims, identity_vars(dims.len()))?;
    Ok(Transformed {
        dims: derive_layout(seq, dims)?,
        forward: out.into_iter().map(Index::into_expr).collect(),
    })
}

pub fn apply_split(dims: &[Dim], dim: usize, factors: &[usize]) -> Result<Transformed> {
    let p = LayoutPrimitive::Split {
        dim,
        factors: factors.to_vec(),
    };
    p.transform(dims).map_err(|m| prim_err(0, &p, m))
}

pub fn apply_reorder(dims: &[Dim], perm: &[usize]) -> Result<Transformed> {
    let p = LayoutPrimitive::Reorder {
        perm: perm.to_vec(),
    };
    p.transform(dims).map_err(|m| prim_err(0, &p, m))
}

pub fn apply_fuse(dims: &[Dim], fused: &[usize]) -> Result<Transformed> {
    let p = LayoutPrimitive::Fuse {
        dims: fused.to_vec(),
    };
    p.transform(dims).map_err(|m| prim_err(0, &p, m))
}

pub fn apply_unfold(dims: &[Dim], dim: usize, tile: usize, stride: usize) -> Result<Transformed> {
    let p = LayoutPrimitive::Unfold { dim, tile, stride };
    p.transform(dims).map_err(|m| prim_err(0, &p, m))
}

pub fn apply_pad(dims: &[Dim], dim: usize, size: usize) -> Result<Transformed> {
    let p = LayoutPrimitive::Pad { dim, size };
    p.transform(dims).map_err(|m| prim_err(0, &p, m))
}

/// Rewrites the sliding-window access `T[stride·window + offset]` (window of
/// `size` elements) of a dimension unfolded with `tile`/`tile_stride`.
/// Returns `(tile index, offset inside the tile)`.
pub fn unfold_window_access(
    window: AccessExpr,
    stride: i64,
    offset: AccessExpr,
    size: i64,
    extent: usize,
    tile: usize,
    tile_stride: usize,
) -> Result<(AccessExpr, AccessExpr)> {
    if size as usize > tile {
        return Err(Error::Primitive {
            index: 0,
            prim: "unfold".into(),
            msg: format!("window of {size} elements does not fit a tile of {tile}"),
        });
    }
    let idx = Index::Window {
        window,
        stride,
        offset,
        size,
    };
    Ok(unfold_index(&idx, extent, tile, tile_stride))
}

/// Fused declaration produced by attaching `src` to `dst` along `dim`
/// (1-based, a dimension of `dst`).
#[derive(Clone, Debug, PartialEq)]
pub struct StoreAtResult {
    pub dims: Vec<Dim>,
    /// Index in the fused tensor for each `src` index (`VarId(k)` = src dim k).
    pub src_forward: Vec<AccessExpr>,
    /// Index in the fused tensor for each `dst` index.
    pub dst_forward: Vec<AccessExpr>,
}

pub fn apply_store_at(src: &[Dim], dst: &[Dim], dim: usize) -> Result<StoreAtResult> {
    let err = |msg: String| Error::Primitive {
        index: 0,
        prim: "store_at".into(),
        msg,
    };
    let k = check_dim(dim, dst.len()).map_err(err)?;
    let rest: Vec<usize> = dst
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k)
        .map(|(_, d)| d.extent)
        .collect();
    let src_ext: Vec<usize> = src.iter().map(|d| d.extent).collect();
    if rest != src_ext {
        return Err(err(format!(
            "source shape {src_ext:?} must equal target shape without dim {dim} ({rest:?})"
        )));
    }
    let mut dims = dst.to_vec();
    dims[k].extent += 1;
    let mut src_forward = Vec::with_capacity(dst.len());
    let mut s = 0u32;
    for i in 0..dst.len() {
        if i == k {
            src_forward.push(AccessExpr::Const(dst[k].extent as i64));
        } else {
            src_forward.push(AccessExpr::Var(VarId(s)));
            s += 1;
        }
    }
    let dst_forward = (0..dst.len() as u32).map(|i| AccessExpr::Var(VarId(i))).collect();
    Ok(StoreAtResult {
        dims,
        src_forward,
        dst_forward,
    })
}

/// Inverse of [`apply_store_at`]: splits the fused tensor back into the
/// target and the attached source. Returns `(dst dims, src dims)`.
pub fn apply_decouple_at(fused: &[Dim], dim: usize) -> Result<(Vec<Dim>, Vec<Dim>)> {
    let k = check_dim(dim, fused.len()).map_err(|msg| Error::Primitive {
        index: 0,
        prim: "decouple_at".into(),
        msg,
    })?;
    let mut dst = fused.to_vec();
    dst[k].extent -= 1;
    let src = fused
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k)
        .map(|(_, d)| d.clone())
        .collect();
    Ok((dst, src))
}

/// Layout assignments keyed by tensor id.
pub type SeqMap = BTreeMap<String, PrimitiveSeq>;
