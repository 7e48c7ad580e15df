//! Layout propagation along element-wise paths and conversion insertion.
//!
//! Complex operators claim layouts for the tensors they access. Claims
//! spread to same-shape neighbours through element-wise operators unless
//! the sequence expands data. Where two claims meet, a `LayoutConvert` node
//! copies the tensor into the consumer's layout.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{Graph, OpKind, OperatorNode, Role, TensorDecl};
use crate::layout::{PrimitiveSeq, SeqMap};

/// A `LayoutConvert` to splice in: `edge` is `[tensor, consumer]` where the
/// consumer is named by its output tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversion {
    pub edge: [String; 2],
    pub seq: PrimitiveSeq,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationPlan {
    #[serde(default)]
    pub assignments: SeqMap,
    #[serde(default)]
    pub conversions: Vec<Conversion>,
}

impl PropagationPlan {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Checks every referenced tensor and edge exists in `g`.
    pub fn validate(&self, g: &Graph) -> Result<()> {
        for id in self.assignments.keys() {
            g.expect_tensor(id)?;
        }
        for c in &self.conversions {
            let [t, consumer] = &c.edge;
            let ni = g
                .node_by_output(consumer)
                .ok_or_else(|| Error::Validation(format!("conversion target `{consumer}` is not an operator output")))?;
            if !g.nodes[ni].inputs.contains(t) {
                return Err(Error::Validation(format!("`{consumer}` does not read `{t}`")));
            }
        }
        Ok(())
    }
}

/// Outcome of [`can_propagate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub ok: bool,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// From producers to consumers.
    Forward,
    /// From consumers to producers.
    Backward,
    Both,
}

/// Element-wise hops from `t`: `(neighbour, path input index)`.
fn hops(g: &Graph, t: &str, dir: Direction) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    if dir != Direction::Backward {
        for ci in g.consumers(t) {
            let n = &g.nodes[ci];
            if !n.kind.is_elementwise() {
                continue;
            }
            for &k in n.kind.elementwise_inputs() {
                if n.inputs.get(k).map(String::as_str) == Some(t) {
                    out.push((n.output.clone(), k));
                }
            }
        }
    }
    if dir != Direction::Forward {
        if let Some(pi) = g.producer(t) {
            let n = &g.nodes[pi];
            if n.kind.is_elementwise() {
                for &k in n.kind.elementwise_inputs() {
                    if let Some(x) = n.inputs.get(k) {
                        out.push((x.clone(), k));
                    }
                }
            }
        }
    }
    out.retain(|(x, _)| same_shape(g, t, x));
    out
}

fn same_shape(g: &Graph, a: &str, b: &str) -> bool {
    match (g.tensor(a), g.tensor(b)) {
        (Some(a), Some(b)) => a.extents() == b.extents(),
        _ => false,
    }
}

/// Whether `seq` may be copied from `src` to `dst`.
pub fn can_propagate(g: &Graph, src: &str, dst: &str, seq: &PrimitiveSeq) -> Verdict {
    let no = |reason: String| Verdict { ok: false, reason };
    if g.tensor(src).is_none() || g.tensor(dst).is_none() {
        return no("unknown tensor".into());
    }
    if !seq.is_propagable() {
        return no("advanced primitive causes data expansion".into());
    }
    let mut seen = BTreeSet::from([src.to_string()]);
    let mut queue = VecDeque::from([src.to_string()]);
    while let Some(t) = queue.pop_front() {
        if t == dst {
            return Verdict {
                ok: true,
                reason: "element-wise path".into(),
            };
        }
        for (x, _) in hops(g, &t, Direction::Both) {
            if seen.insert(x.clone()) {
                queue.push_back(x);
            }
        }
    }
    // Explain the failure: is there any path at all, and what blocks it?
    let mut seen = BTreeSet::from([src.to_string()]);
    let mut queue = VecDeque::from([src.to_string()]);
    while let Some(t) = queue.pop_front() {
        let mut next: Vec<(String, &OperatorNode)> = Vec::new();
        for ci in g.consumers(&t) {
            next.push((g.nodes[ci].output.clone(), &g.nodes[ci]));
        }
        if let Some(pi) = g.producer(&t) {
            for x in &g.nodes[pi].inputs {
                next.push((x.clone(), &g.nodes[pi]));
            }
        }
        for (x, n) in next {
            if x == dst {
                return no(if n.kind.is_complex() {
                    format!("path crosses complex operator `{}`", n.output)
                } else {
                    format!("`{}` ({}) is not a same-shape element-wise operator", n.output, n.kind)
                });
            }
            if seen.insert(x.clone()) {
                queue.push_back(x);
            }
        }
    }
    no("tensors are not connected".into())
}

/// Copies `seq` onto every tensor reachable from `src` through element-wise
/// operators in `dir`, starting from `assignments`.
pub fn propagate(g: &Graph, assignments: &SeqMap, src: &str, seq: &PrimitiveSeq, dir: Direction) -> Result<SeqMap> {
    let mut out = assignments.clone();
    if seq.is_empty() {
        return Ok(out);
    }
    g.expect_tensor(src)?;
    if !seq.is_propagable() {
        return Err(Error::Validation(format!(
            "sequence of `{src}` expands data and cannot propagate"
        )));
    }
    let mut seen = BTreeSet::from([src.to_string()]);
    let mut queue = VecDeque::from([src.to_string()]);
    while let Some(t) = queue.pop_front() {
        match out.get(&t) {
            Some(prev) if prev != seq && !prev.is_empty() => {
                return Err(Error::PropagationConflict {
                    tensor: t.clone(),
                    first: t,
                    second: src.to_string(),
                })
            }
            _ => {
                out.insert(t.clone(), seq.clone());
            }
        }
        for (x, _) in hops(g, &t, dir) {
            if seen.insert(x.clone()) {
                queue.push_back(x);
            }
        }
    }
    Ok(out)
}

/// Layouts each complex operator wants, keyed by the operator's output.
pub type OpLayouts = BTreeMap<String, SeqMap>;

/// Combines per-operator layout claims into a plan.
///
/// Operators are visited in topological order; the first claim on a tensor
/// stands and a later differing claim gets a conversion. Claims then spread
/// outward through element-wise operators, nearest claim first (ties: lower
/// input position, then earlier claim). An element-wise operator whose data
/// input ends up in another layout than its output reads through a
/// conversion, except when the output layout expands data: the operator
/// then writes that layout itself.
pub fn build_plan(g: &Graph, claims: &OpLayouts) -> Result<PropagationPlan> {
    let order = g.topo_order()?;
    let mut plan = PropagationPlan::default();
    // tensor -> (seq, claim order)
    let mut hard: BTreeMap<String, (PrimitiveSeq, usize)> = BTreeMap::new();
    let mut claim_order = 0usize;

    for key in claims.keys() {
        let ni = g
            .node_by_output(key)
            .ok_or_else(|| Error::Validation(format!("layout claim for unknown operator `{key}`")))?;
        if !g.nodes[ni].kind.is_complex() {
            return Err(Error::Validation(format!("`{key}` is not a complex operator")));
        }
    }
    for &ni in &order {
        let node = &g.nodes[ni];
        let Some(want) = claims.get(&node.output) else { continue };
        for id in want.keys() {
            if !node.inputs.contains(id) && *id != node.output {
                return Err(Error::Validation(format!(
                    "`{}` claims a layout for `{id}`, which it does not access",
                    node.output
                )));
            }
        }
        let mut touched: Vec<&String> = node.inputs.iter().collect();
        touched.push(&node.output);
        for id in touched {
            let Some(seq) = want.get(id) else { continue };
            match hard.get(id) {
                None => {
                    hard.insert(id.clone(), (seq.clone(), claim_order));
                    claim_order += 1;
                }
                Some((prev, _)) if prev == seq => {}
                Some(_) => plan.conversions.push(Conversion {
                    edge: [id.clone(), node.output.clone()],
                    seq: seq.clone(),
                }),
            }
        }
    }

    // Nearest-claim flood through element-wise operators.
    let mut frontier: BTreeSet<(usize, usize, usize, String)> = BTreeSet::new();
    let mut origin_seq: Vec<PrimitiveSeq> = vec![PrimitiveSeq::empty(); claim_order];
    for (id, (seq, o)) in &hard {
        origin_seq[*o] = seq.clone();
        if seq.is_propagable() {
            frontier.insert((0, 0, *o, id.clone()));
        }
    }
    let mut assigned: BTreeMap<String, usize> = BTreeMap::new();
    while let Some((depth, _, o, t)) = frontier.pop_first() {
        if assigned.contains_key(&t) {
            continue;
        }
        if depth > 0 && hard.contains_key(&t) {
            continue;
        }
        assigned.insert(t.clone(), o);
        for (x, k) in hops(g, &t, Direction::Both) {
            if !assigned.contains_key(&x) && !hard.contains_key(&x) {
                frontier.insert((depth + 1, k, o, x));
            }
        }
    }
    for (id, (seq, _)) in &hard {
        plan.assignments.insert(id.clone(), seq.clone());
    }
    for (id, o) in &assigned {
        plan.assignments.entry(id.clone()).or_insert_with(|| origin_seq[*o].clone());
    }
    plan.assignments.retain(|_, s| !s.is_empty());

    let seq_of = |t: &str| plan.assignments.get(t).cloned().unwrap_or_default();
    let mut extra = Vec::new();
    for &ni in &order {
        let node = &g.nodes[ni];
        if !node.kind.is_elementwise() {
            continue;
        }
        let out = seq_of(&node.output);
        if !out.is_propagable() {
            continue;
        }
        for &k in node.kind.elementwise_inputs() {
            let x = &node.inputs[k];
            if seq_of(x) != out {
                extra.push(Conversion {
                    edge: [x.clone(), node.output.clone()],
                    seq: out.clone(),
                });
            }
        }
    }
    plan.conversions.extend(extra);
    Ok(plan)
}

/// Name of the tensor a conversion produces.
pub fn converted_name(tensor: &str, consumer: &str) -> String {
    format!("{tensor}_to_{consumer}")
}

/// Splices a `LayoutConvert` node into every conversion edge and returns the
/// new graph with the layout of every tensor.
pub fn insert_conversions(g: &Graph, plan: &PropagationPlan) -> Result<(Graph, SeqMap)> {
    plan.validate(g)?;
    let mut out = g.clone();
    let mut seqs = plan.assignments.clone();
    for c in &plan.conversions {
        let [t, consumer] = &c.edge;
        let id = converted_name(t, consumer);
        if out.tensor(&id).is_some() {
            return Err(Error::Validation(format!("duplicate conversion on edge `{t}` -> `{consumer}`")));
        }
        let src = out.expect_tensor(t)?.clone();
        out.tensors.push(TensorDecl::new(&id, src.dims.clone(), src.element_type, Role::Intermediate));
        let ci = out.node_by_output(consumer).expect("validated");
        for inp in out.nodes[ci].inputs.iter_mut() {
            if inp == t {
                *inp = id.clone();
            }
        }
        out.nodes
            .insert(ci, OperatorNode::new(OpKind::LayoutConvert, &[t.as_str()], &id));
        if !c.seq.is_empty() {
            seqs.insert(id, c.seq.clone());
        }
    }
    out.validated()?;
    Ok((out, seqs))
}
