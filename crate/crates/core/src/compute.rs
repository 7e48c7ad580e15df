//! Logical definition of each operator as a loop body over its declared
//! (untransformed) output shape.
//!
//! Variables `VarId(0..rank)` index the output; reduction variables follow
//! from `VarId(rank)`.

use crate::error::{Error, Result};
use crate::expr::{AccessExpr, VarId};
use crate::ir::{bias_axis, conv_window, Dim, Graph, OpKind, OperatorNode};
use crate::layout::Index;

/// Load of a tensor at a logical index, optionally guarded by logical bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct LogicalLoad {
    pub tensor: String,
    pub index: Vec<Index>,
    /// `(expr, lo, hi)` meaning `lo <= expr < hi`; the read is zero otherwise.
    pub guard: Vec<(AccessExpr, i64, i64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LogicalValue {
    Const(f64),
    Load(LogicalLoad),
    Add(Box<LogicalValue>, Box<LogicalValue>),
    Mul(Box<LogicalValue>, Box<LogicalValue>),
    Max(Box<LogicalValue>, Box<LogicalValue>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogicalCompute {
    pub out_dims: Vec<Dim>,
    /// Reduction loops `(name, extent)`, outermost first.
    pub reductions: Vec<(String, usize)>,
    pub value: LogicalValue,
    /// `out += value` over the reductions after zero-initialization.
    pub accumulate: bool,
}

fn var(k: usize) -> AccessExpr {
    AccessExpr::Var(VarId(k as u32))
}

fn plain(k: usize) -> Index {
    Index::Plain(var(k))
}

fn load(tensor: &str, index: Vec<Index>) -> LogicalValue {
    LogicalValue::Load(LogicalLoad {
        tensor: tensor.to_string(),
        index,
        guard: Vec::new(),
    })
}

fn bx(v: LogicalValue) -> Box<LogicalValue> {
    Box::new(v)
}

pub fn logical_compute(g: &Graph, node: &OperatorNode) -> Result<LogicalCompute> {
    let out = g.expect_tensor(&node.output)?;
    let rank = out.rank();
    let identity: Vec<Index> = (0..rank).map(plain).collect();
    let (reductions, value, accumulate) = match node.kind {
        OpKind::C2D | OpKind::DEP => {
            let (kh, kw, v) = conv_window(g, node)?;
            let x = g.expect_tensor(&node.inputs[0])?;
            let window = |spatial: usize, red: usize, size: usize| Index::Window {
                window: var(spatial),
                stride: v as i64,
                offset: var(red),
                size: size as i64,
            };
            if node.kind == OpKind::C2D {
                let (ri, rh, rw) = (rank, rank + 1, rank + 2);
                let inp = load(
                    &node.inputs[0],
                    vec![plain(0), plain(ri), window(2, rh, kh), window(3, rw, kw)],
                );
                let ker = load(&node.inputs[1], vec![plain(1), plain(ri), plain(rh), plain(rw)]);
                (
                    vec![
                        ("ri".to_string(), x.dims[1].extent),
                        ("rh".to_string(), kh),
                        ("rw".to_string(), kw),
                    ],
                    LogicalValue::Mul(bx(inp), bx(ker)),
                    true,
                )
            } else {
                let (rh, rw) = (rank, rank + 1);
                let inp = load(
                    &node.inputs[0],
                    vec![plain(0), plain(1), window(2, rh, kh), window(3, rw, kw)],
                );
                let ker = load(
                    &node.inputs[1],
                    vec![plain(1), Index::Plain(AccessExpr::Const(0)), plain(rh), plain(rw)],
                );
                (
                    vec![("rh".to_string(), kh), ("rw".to_string(), kw)],
                    LogicalValue::Mul(bx(inp), bx(ker)),
                    true,
                )
            }
        }
        OpKind::GMM => {
            let a = g.expect_tensor(&node.inputs[0])?;
            let rk = rank;
            let lhs = load(&node.inputs[0], vec![plain(0), plain(rk)]);
            let rhs = load(&node.inputs[1], vec![plain(rk), plain(1)]);
            (
                vec![("rk".to_string(), a.dims[1].extent)],
                LogicalValue::Mul(bx(lhs), bx(rhs)),
                true,
            )
        }
        OpKind::Padding => {
            let x = g.expect_tensor(&node.inputs[0])?;
            let pads = node.attrs.pads.clone().unwrap_or_default();
            if pads.len() != rank {
                return Err(Error::ShapeMismatch {
                    node: node.output.clone(),
                    msg: "pads must list one [before, after] per dim".into(),
                });
            }
            let mut index = Vec::with_capacity(rank);
            let mut guard = Vec::new();
            for (k, [before, after]) in pads.iter().enumerate() {
                let e = var(k) + AccessExpr::Const(-(*before as i64));
                if before + after > 0 {
                    guard.push((e.clone(), 0, x.dims[k].extent as i64));
                }
                index.push(Index::Plain(e));
            }
            let v = LogicalValue::Load(LogicalLoad {
                tensor: node.inputs[0].clone(),
                index,
                guard,
            });
            (vec![], v, false)
        }
        OpKind::ReLU => (
            vec![],
            LogicalValue::Max(bx(load(&node.inputs[0], identity)), bx(LogicalValue::Const(0.0))),
            false,
        ),
        OpKind::BiasAdd => {
            let axis = bias_axis(g, node);
            (
                vec![],
                LogicalValue::Add(
                    bx(load(&node.inputs[0], identity)),
                    bx(load(&node.inputs[1], vec![plain(axis)])),
                ),
                false,
            )
        }
        OpKind::EwAdd => (
            vec![],
            LogicalValue::Add(
                bx(load(&node.inputs[0], identity.clone())),
                bx(load(&node.inputs[1], identity)),
            ),
            false,
        ),
        OpKind::LayoutConvert => (vec![], load(&node.inputs[0], identity), false),
    };
    Ok(LogicalCompute {
        out_dims: out.dims.clone(),
        reductions,
        value,
        accumulate,
    })
}
