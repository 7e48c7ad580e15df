use std::collections::BTreeMap;

use super::Element;
use crate::error::{Error, Result};
use crate::ir::{bias_axis, conv_window, Graph, OpKind};

fn get<'a, T>(vals: &'a BTreeMap<String, Vec<T>>, id: &str) -> Result<&'a Vec<T>> {
    vals.get(id)
        .ok_or_else(|| Error::Validation(format!("no data for tensor `{id}`")))
}

/// Direct evaluation of the graph on logical row-major tensors, one textbook
/// loop nest per operator. Independent of layouts and lowering.
pub fn reference_eval<T: Element>(
    g: &Graph,
    inputs: &BTreeMap<String, Vec<T>>,
) -> Result<BTreeMap<String, Vec<T>>> {
    let mut vals: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for t in &g.tensors {
        if t.is_source() {
            let data = get(inputs, &t.id)?;
            if data.len() != t.numel() {
                return Err(Error::Validation(format!(
                    "tensor `{}` needs {} elements, got {}",
                    t.id,
                    t.numel(),
                    data.len()
                )));
            }
            vals.insert(t.id.clone(), data.clone());
        }
    }
    for ni in g.topo_order()? {
        let node = &g.nodes[ni];
        let out_t = g.expect_tensor(&node.output)?;
        let oe = out_t.extents();
        let mut out = vec![T::default(); out_t.numel()];
        let x = get(&vals, &node.inputs[0])?;
        let xe = g.expect_tensor(&node.inputs[0])?.extents();
        match node.kind {
            OpKind::C2D | OpKind::DEP => {
                let (kh, kw, v) = conv_window(g, node)?;
                let w = get(&vals, &node.inputs[1])?;
                let (nn, oc, ho, wo) = (oe[0], oe[1], oe[2], oe[3]);
                let (ic, ih, iw) = (xe[1], xe[2], xe[3]);
                let dep = node.kind == OpKind::DEP;
                for n in 0..nn {
                    for o in 0..oc {
                        for h in 0..ho {
                            for ww in 0..wo {
                                let mut acc = T::default();
                                let chans: Vec<usize> = if dep { vec![o] } else { (0..ic).collect() };
                                for (ci, &c) in chans.iter().enumerate() {
                                    let wc = if dep { 0 } else { ci };
                                    let wic = if dep { 1 } else { ic };
                                    for r in 0..kh {
                                        for s in 0..kw {
                                            let xi = ((n * ic + c) * ih + h * v + r) * iw + ww * v + s;
                                            let wi = ((o * wic + wc) * kh + r) * kw + s;
                                            acc = acc.add(x[xi].mul(w[wi]));
                                        }
                                    }
                                }
                                out[((n * oc + o) * ho + h) * wo + ww] = acc;
                            }
                        }
                    }
                }
            }
            OpKind::GMM => {
                let b = get(&vals, &node.inputs[1])?;
                let (m, k, n) = (xe[0], xe[1], oe[1]);
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = T::default();
                        for r in 0..k {
                            acc = acc.add(x[i * k + r].mul(b[r * n + j]));
                        }
                        out[i * n + j] = acc;
                    }
                }
            }
            OpKind::Padding => {
                let pads = node.attrs.pads.clone().unwrap_or_default();
                for (flat, cell) in out.iter_mut().enumerate() {
                    let mut rem = flat;
                    let mut src = 0usize;
                    let mut inside = true;
                    let mut scale = 1usize;
                    for k in (0..oe.len()).rev() {
                        let c = rem % oe[k];
                        rem /= oe[k];
                        let before = pads.get(k).map(|p| p[0]).unwrap_or(0);
                        if c < before || c - before >= xe[k] {
                            inside = false;
                            break;
                        }
                        src += (c - before) * scale;
                        scale *= xe[k];
                    }
                    if inside {
                        *cell = x[src];
                    }
                }
            }
            OpKind::ReLU => {
                for (o, a) in out.iter_mut().zip(x) {
                    *o = a.max(T::default());
                }
            }
            OpKind::BiasAdd => {
                let b = get(&vals, &node.inputs[1])?;
                let axis = bias_axis(g, node);
                let inner: usize = oe[axis + 1..].iter().product();
                for (flat, o) in out.iter_mut().enumerate() {
                    *o = x[flat].add(b[(flat / inner) % oe[axis]]);
                }
            }
            OpKind::EwAdd => {
                let y = get(&vals, &node.inputs[1])?;
                for (flat, o) in out.iter_mut().enumerate() {
                    *o = x[flat].add(y[flat]);
                }
            }
            OpKind::LayoutConvert => out.copy_from_slice(x),
        }
        vals.insert(node.output.clone(), out);
    }
    Ok(vals)
}
