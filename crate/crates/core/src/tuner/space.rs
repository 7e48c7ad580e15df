//! Layout templates of the complex operators and their decoding into
//! primitive sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{conv_window, Graph, OpKind};
use crate::layout::{LayoutPrimitive, PrimitiveSeq, SeqMap};

/// Width of the layout state vector fed to the agents.
pub const LAYOUT_STATE_WIDTH: usize = 24;

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Maps an action in (0, 1) to the divisor of `d` nearest to `d * a`,
/// preferring the smaller divisor on ties.
pub fn action_to_factor(a: f64, d: usize) -> usize {
    let target = d as f64 * a.clamp(0.0, 1.0);
    let mut best = 1;
    let mut best_dist = f64::INFINITY;
    for f in divisors(d) {
        let dist = (f as f64 - target).abs();
        if dist < best_dist {
            best = f;
            best_dist = dist;
        }
    }
    best
}

/// One split parameter of a template. `parent` names the first-level
/// tunable whose quotient a second-level tunable divides.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tunable {
    pub name: String,
    pub extent: usize,
    pub parent: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvShape {
    kh: usize,
    kw: usize,
    v: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    in_c: usize,
    /// Weight `I` extent (1 for depthwise).
    w_i: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Shape {
    Conv(ConvShape),
    Gmm { m: usize, k: usize, n: usize },
}

/// Tunable layout space of one complex operator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutTemplate {
    /// Output tensor of the operator.
    pub op: String,
    pub kind: OpKind,
    /// Input, weight and output tensor ids.
    pub tensors: Vec<String>,
    pub tunables: Vec<Tunable>,
    pub levels: usize,
    shape: Shape,
}

/// Input tiling for `t` output rows per tile at conv stride `v`:
/// `(tile count, tile, stride)`, or `None` when one tile covers the dim.
/// The last tile also keeps trailing rows no window reaches; tiles are at
/// least one stride wide so the unfold stays valid when windows skip rows.
fn unfold_tile(t: usize, out_ext: usize, in_ext: usize, v: usize) -> Option<(usize, usize, usize)> {
    if t == out_ext {
        return None;
    }
    let stride = t * v;
    let n = out_ext / t;
    let tile = (in_ext - (n - 1) * stride).max(stride);
    Some(((in_ext - tile).div_ceil(stride) + 1, tile, stride))
}

fn tun(name: &str, extent: usize) -> Tunable {
    Tunable {
        name: name.into(),
        extent,
        parent: None,
    }
}

impl LayoutTemplate {
    fn new(g: &Graph, node_idx: usize, levels: usize) -> Result<Self> {
        let node = &g.nodes[node_idx];
        let out = g.expect_tensor(&node.output)?;
        let x = g.expect_tensor(&node.inputs[0])?;
        let w = g.expect_tensor(&node.inputs[1])?;
        let mut tensors = node.inputs.clone();
        tensors.push(node.output.clone());
        let (shape, mut tunables, outer) = match node.kind {
            OpKind::C2D | OpKind::DEP => {
                let (kh, kw, v) = conv_window(g, node)?;
                let s = ConvShape {
                    kh,
                    kw,
                    v,
                    in_h: x.dims[2].extent,
                    in_w: x.dims[3].extent,
                    out_h: out.dims[2].extent,
                    out_w: out.dims[3].extent,
                    out_c: out.dims[1].extent,
                    in_c: x.dims[1].extent,
                    w_i: w.dims[1].extent,
                };
                let t = vec![
                    tun("h_t", s.out_h),
                    tun("w_t", s.out_w),
                    tun("o_t", s.out_c),
                    tun("i_t", s.in_c),
                    tun("wi_t", s.w_i),
                    tun("wo_t", s.out_c),
                ];
                (Shape::Conv(s), t, vec![0, 1, 2])
            }
            OpKind::GMM => {
                let (m, k, n) = (x.dims[0].extent, x.dims[1].extent, w.dims[1].extent);
                (
                    Shape::Gmm { m, k, n },
                    vec![tun("m_t", m), tun("k_t", k), tun("n_t", n)],
                    vec![0, 2],
                )
            }
            _ => {
                return Err(Error::Validation(format!(
                    "`{}` is not a complex operator",
                    node.output
                )))
            }
        };
        if levels == 2 {
            for p in outer {
                let name = format!("{}2", tunables[p].name);
                tunables.push(Tunable {
                    name,
                    extent: tunables[p].extent,
                    parent: Some(p),
                });
            }
        } else if levels != 1 {
            return Err(Error::Config(format!("tiling levels must be 1 or 2, got {levels}")));
        }
        Ok(LayoutTemplate {
            op: node.output.clone(),
            kind: node.kind,
            tensors,
            tunables,
            levels,
            shape,
        })
    }

    /// Extent a tunable's factor must divide, given the factors chosen so
    /// far (parents come first).
    pub fn domain(&self, k: usize, factors: &[usize]) -> usize {
        let t = &self.tunables[k];
        match t.parent {
            Some(p) => t.extent / factors[p],
            None => t.extent,
        }
    }

    /// Factors that leave every tensor untransformed.
    pub fn default_point(&self) -> Vec<usize> {
        self.tunables
            .iter()
            .map(|t| if t.parent.is_some() { 1 } else { t.extent })
            .collect()
    }

    /// Number of points, counting every divisor combination.
    pub fn space_size(&self) -> usize {
        fn count(t: &LayoutTemplate, k: usize, f: &mut Vec<usize>) -> usize {
            if k == t.tunables.len() {
                return 1;
            }
            let mut total = 0;
            for d in divisors(t.domain(k, f)) {
                f.push(d);
                total += count(t, k + 1, f);
                f.pop();
            }
            total
        }
        count(self, 0, &mut Vec::new())
    }

    /// Every point of the space, in lexicographic divisor order.
    pub fn enumerate(&self) -> Vec<Vec<usize>> {
        fn go(t: &LayoutTemplate, f: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if f.len() == t.tunables.len() {
                out.push(f.clone());
                return;
            }
            for d in divisors(t.domain(f.len(), f)) {
                f.push(d);
                go(t, f, out);
                f.pop();
            }
        }
        let mut out = Vec::new();
        go(self, &mut Vec::new(), &mut out);
        out
    }

    /// Factors from actions in (0, 1), one per tunable.
    pub fn factors_from_actions(&self, actions: &[f64]) -> Vec<usize> {
        let mut f = Vec::with_capacity(self.tunables.len());
        for k in 0..self.tunables.len() {
            let d = self.domain(k, &f);
            f.push(action_to_factor(actions[k], d));
        }
        f
    }

    fn check(&self, factors: &[usize]) -> Result<()> {
        if factors.len() != self.tunables.len() {
            return Err(Error::Decode(format!(
                "`{}` takes {} factors, got {}",
                self.op,
                self.tunables.len(),
                factors.len()
            )));
        }
        for k in 0..factors.len() {
            let d = self.domain(k, factors);
            if factors[k] == 0 || d % factors[k] != 0 {
                return Err(Error::Decode(format!(
                    "{} = {} does not divide {d}",
                    self.tunables[k].name, factors[k]
                )));
            }
        }
        Ok(())
    }

    fn second(&self, parent: usize, factors: &[usize]) -> usize {
        self.tunables
            .iter()
            .position(|t| t.parent == Some(parent))
            .map(|k| factors[k])
            .unwrap_or(1)
    }

    /// Primitive sequences of the operator's tensors for `factors`.
    pub fn decode(&self, factors: &[usize]) -> Result<SeqMap> {
        self.check(factors)?;
        let mut out = SeqMap::new();
        let (x, w, y) = (&self.tensors[0], &self.tensors[1], &self.tensors[2]);
        let tile = |t: usize, ext: usize, two: usize| -> Tile {
            if t == ext {
                Tile::Whole
            } else if two > 1 {
                Tile::Split(vec![ext / (t * two), two, t])
            } else {
                Tile::Split(vec![ext / t, t])
            }
        };
        match self.shape {
            Shape::Conv(s) => {
                let (ht, wt, ot, it, wit, wot) = (factors[0], factors[1], factors[2], factors[3], factors[4], factors[5]);
                let out_seq = build(
                    4,
                    &[0],
                    &[
                        (2, tile(ht, s.out_h, self.second(0, factors))),
                        (3, tile(wt, s.out_w, self.second(1, factors))),
                        (1, tile(ot, s.out_c, self.second(2, factors))),
                    ],
                    &[2, 3, 1],
                );
                let unfold = |t: usize, out_ext: usize, in_ext: usize, k: usize| -> Tile {
                    match unfold_tile(t, out_ext, in_ext, s.v) {
                        None => Tile::Whole,
                        Some((_, tile, stride)) => {
                            debug_assert!(tile >= (t - 1) * s.v + k);
                            Tile::Unfold { tile, stride }
                        }
                    }
                };
                let in_seq = build(
                    4,
                    &[0],
                    &[
                        (2, unfold(ht, s.out_h, s.in_h, s.kh)),
                        (3, unfold(wt, s.out_w, s.in_w, s.kw)),
                        (1, tile(it, s.in_c, 1)),
                    ],
                    &[2, 3, 1],
                );
                let w_seq = build(
                    4,
                    &[],
                    &[(0, tile(wot, s.out_c, 1)), (1, tile(wit, s.w_i, 1))],
                    &[1, 0],
                );
                out.insert(y.clone(), out_seq);
                out.insert(x.clone(), in_seq);
                out.insert(w.clone(), w_seq);
            }
            Shape::Gmm { m, k, n } => {
                let (mt, kt, nt) = (factors[0], factors[1], factors[2]);
                out.insert(
                    y.clone(),
                    build(
                        2,
                        &[],
                        &[(0, tile(mt, m, self.second(0, factors))), (1, tile(nt, n, self.second(2, factors)))],
                        &[0, 1],
                    ),
                );
                out.insert(x.clone(), build(2, &[], &[(0, tile(mt, m, 1)), (1, tile(kt, k, 1))], &[0, 1]));
                out.insert(w.clone(), build(2, &[], &[(0, tile(kt, k, 1)), (1, tile(nt, n, 1))], &[0, 1]));
            }
        }
        out.retain(|_, s| !s.is_empty());
        Ok(out)
    }

    /// Per-primitive `(count, size)` sub-states, zero-padded to
    /// [`LAYOUT_STATE_WIDTH`]. Untiled dims read `[1, extent]`.
    pub fn encode_state(&self, factors: &[usize]) -> Vec<f64> {
        let mut st: Vec<f64> = Vec::with_capacity(LAYOUT_STATE_WIDTH);
        let mut pair = |count: usize, size: usize| {
            st.push(count as f64);
            st.push(size as f64);
        };
        match self.shape {
            Shape::Conv(s) => {
                let f = factors;
                pair(s.out_h / f[0], f[0]);
                pair(s.out_w / f[1], f[1]);
                pair(s.out_c / f[2], f[2]);
                for (t, out_ext, in_ext) in [(f[0], s.out_h, s.in_h), (f[1], s.out_w, s.in_w)] {
                    match unfold_tile(t, out_ext, in_ext, s.v) {
                        None => pair(1, in_ext),
                        Some((n, tile, _)) => pair(n, tile),
                    }
                }
                pair(s.in_c / f[3], f[3]);
                pair(s.w_i / f[4], f[4]);
                pair(s.out_c / f[5], f[5]);
            }
            Shape::Gmm { m, k, n } => {
                pair(m / factors[0], factors[0]);
                pair(k / factors[1], factors[1]);
                pair(n / factors[2], factors[2]);
            }
        }
        for (k, t) in self.tunables.iter().enumerate() {
            if let Some(p) = t.parent {
                pair(self.domain(k, factors) / factors[k], factors[k]);
                let _ = p;
            }
        }
        st.resize(LAYOUT_STATE_WIDTH, 0.0);
        st
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tile {
    Whole,
    /// Factors outermost first: two or three parts.
    Split(Vec<usize>),
    Unfold { tile: usize, stride: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Whole(usize),
    Piece(usize, usize),
}

/// Applies the tilings, then orders the dims as: `prefix`, first pieces of
/// the tiled dims (template order), middle pieces, untiled dims (logical
/// order), last pieces in `inner_order`.
fn build(rank: usize, prefix: &[usize], tiles: &[(usize, Tile)], inner_order: &[usize]) -> PrimitiveSeq {
    let mut labels: Vec<Part> = (0..rank).map(Part::Whole).collect();
    let mut prims = Vec::new();
    let mut pieces = vec![0usize; rank];
    for (d, t) in tiles {
        let pos = labels.iter().position(|p| *p == Part::Whole(*d)).unwrap();
        let n = match t {
            Tile::Whole => continue,
            Tile::Split(f) => {
                prims.push(LayoutPrimitive::Split {
                    dim: pos + 1,
                    factors: f.clone(),
                });
                f.len()
            }
            Tile::Unfold { tile, stride } => {
                prims.push(LayoutPrimitive::Unfold {
                    dim: pos + 1,
                    tile: *tile,
                    stride: *stride,
                });
                2
            }
        };
        pieces[*d] = n;
        labels.splice(pos..=pos, (0..n).map(|j| Part::Piece(*d, j)));
    }
    let tiled: Vec<usize> = tiles.iter().map(|(d, _)| *d).filter(|d| pieces[*d] > 0).collect();
    let mut order: Vec<Part> = prefix.iter().map(|d| Part::Whole(*d)).collect();
    order.extend(tiled.iter().map(|d| Part::Piece(*d, 0)));
    order.extend(tiled.iter().filter(|d| pieces[**d] == 3).map(|d| Part::Piece(*d, 1)));
    order.extend(
        (0..rank)
            .filter(|d| !prefix.contains(d) && pieces[*d] == 0)
            .map(Part::Whole),
    );
    order.extend(
        inner_order
            .iter()
            .filter(|d| pieces[**d] > 0)
            .map(|d| Part::Piece(*d, pieces[*d] - 1)),
    );
    let perm: Vec<usize> = order
        .iter()
        .map(|p| labels.iter().position(|l| l == p).unwrap() + 1)
        .collect();
    if perm.iter().enumerate().any(|(k, p)| *p != k + 1) {
        prims.push(LayoutPrimitive::Reorder { perm });
    }
    PrimitiveSeq(prims)
}

/// One template per complex operator, in topological order.
pub fn build_layout_space(g: &Graph, levels: usize) -> Result<Vec<LayoutTemplate>> {
    let mut out = Vec::new();
    for ni in g.topo_order()? {
        if g.nodes[ni].kind.is_complex() {
            out.push(LayoutTemplate::new(g, ni, levels)?);
        }
    }
    Ok(out)
}
