//! Tensors, operators and the computational graph.
//!
//! Operator semantics are positional: convolution tensors are always
//! declared batch/channel/height/width (`NCHW` for data, `OIHW` for weights)
//! and matrices row/column. Dimension names are labels only; a different
//! physical order is expressed with layout primitives, never by reordering
//! the declaration.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub extent: usize,
}

impl Dim {
    pub fn new(name: impl Into<String>, extent: usize) -> Self {
        Dim {
            name: name.into(),
            extent,
        }
    }
}

pub fn extents(dims: &[Dim]) -> Vec<usize> {
    dims.iter().map(|d| d.extent).collect()
}

/// Renders dims as `N·O·H·W`-style text with extents, e.g. `N1·O8·H16`.
pub fn dims_label(dims: &[Dim]) -> String {
    dims.iter()
        .map(|d| format!("{}{}", d.name, d.extent))
        .collect::<Vec<_>>()
        .join("·")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Int32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Constant,
    Intermediate,
    Input,
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub id: String,
    #[serde(default)]
    pub dims: Vec<Dim>,
    #[serde(rename = "dtype")]
    pub element_type: DType,
    #[serde(rename = "role")]
    pub constancy: Role,
}

impl TensorDecl {
    pub fn new(id: impl Into<String>, dims: Vec<Dim>, dtype: DType, role: Role) -> Self {
        TensorDecl {
            id: id.into(),
            dims,
            element_type: dtype,
            constancy: role,
        }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn extents(&self) -> Vec<usize> {
        extents(&self.dims)
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|d| d.extent).product()
    }

    /// Graph inputs and constants have no producer node.
    pub fn is_source(&self) -> bool {
        matches!(self.constancy, Role::Input | Role::Constant)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    C2D,
    DEP,
    GMM,
    Padding,
    ReLU,
    BiasAdd,
    EwAdd,
    LayoutConvert,
}

impl OpKind {
    /// Operators that receive a layout template of their own.
    pub fn is_complex(self) -> bool {
        matches!(self, OpKind::C2D | OpKind::DEP | OpKind::GMM)
    }

    /// Same-shape element-wise operators layouts can propagate through.
    pub fn is_elementwise(self) -> bool {
        matches!(self, OpKind::ReLU | OpKind::BiasAdd | OpKind::EwAdd)
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::C2D | OpKind::DEP | OpKind::GMM | OpKind::BiasAdd | OpKind::EwAdd => 2,
            OpKind::Padding | OpKind::ReLU | OpKind::LayoutConvert => 1,
        }
    }

    /// Input positions on the element-wise data path (the bias of a
    /// `BiasAdd` is broadcast and is not on it).
    pub fn elementwise_inputs(self) -> &'static [usize] {
        match self {
            OpKind::ReLU => &[0],
            OpKind::BiasAdd => &[0],
            OpKind::EwAdd => &[0, 1],
            _ => &[],
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attrs {
    /// Convolution stride `V`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Convolution window `[KH, KW]`; inferred from the weight when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    /// Per-dimension `[before, after]` zero padding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pads: Option<Vec<[usize; 2]>>,
    /// Broadcast axis of a bias.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
}

impl Attrs {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub kind: OpKind,
    #[serde(default)]
    pub attrs: Attrs,
    pub inputs: Vec<String>,
    pub output: String,
}

impl OperatorNode {
    pub fn new(kind: OpKind, inputs: &[&str], output: &str) -> Self {
        OperatorNode {
            kind,
            attrs: Attrs::default(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.to_string(),
        }
    }

    pub fn with_attrs(mut self, attrs: Attrs) -> Self {
        self.attrs = attrs;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub tensors: Vec<TensorDecl>,
    pub nodes: Vec<OperatorNode>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    DuplicateTensor,
    Dangling,
    Arity,
    CycleOrOrder,
    MultipleProducers,
    EmptyShape,
    Stride,
    DType,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub node: Option<usize>,
    pub msg: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            ViolationKind::DuplicateTensor => "duplicate",
            ViolationKind::Dangling => "dangling",
            ViolationKind::Arity => "arity",
            ViolationKind::CycleOrOrder => "cycle/order",
            ViolationKind::MultipleProducers => "producers",
            ViolationKind::EmptyShape => "shape",
            ViolationKind::Stride => "stride",
            ViolationKind::DType => "dtype",
        };
        match self.node {
            Some(n) => write!(f, "[{tag}] node {n}: {}", self.msg),
            None => write!(f, "[{tag}] {}", self.msg),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn add_tensor(&mut self, t: TensorDecl) -> &mut Self {
        self.tensors.push(t);
        self
    }

    pub fn add_node(&mut self, n: OperatorNode) -> &mut Self {
        self.nodes.push(n);
        self
    }

    pub fn tensor(&self, id: &str) -> Option<&TensorDecl> {
        self.tensors.iter().find(|t| t.id == id)
    }

    pub fn tensor_mut(&mut self, id: &str) -> Option<&mut TensorDecl> {
        self.tensors.iter_mut().find(|t| t.id == id)
    }

    pub fn expect_tensor(&self, id: &str) -> Result<&TensorDecl> {
        self.tensor(id)
            .ok_or_else(|| Error::Validation(format!("unknown tensor `{id}`")))
    }

    pub fn producer(&self, tensor: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.output == tensor)
    }

    pub fn consumers(&self, tensor: &str) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.iter().any(|i| i == tensor))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn node_by_output(&self, output: &str) -> Option<usize> {
        self.producer(output)
    }

    /// The graph-wide element type. Validation enforces that there is one.
    pub fn dtype(&self) -> DType {
        self.tensors
            .first()
            .map(|t| t.element_type)
            .unwrap_or(DType::Float32)
    }

    /// Returns every invariant violation; an empty list means the graph is
    /// well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.id.as_str()) {
                out.push(Violation {
                    kind: ViolationKind::DuplicateTensor,
                    node: None,
                    msg: format!("tensor `{}` declared twice", t.id),
                });
            }
            if t.is_source() && (t.dims.is_empty() || t.dims.iter().any(|d| d.extent == 0)) {
                out.push(Violation {
                    kind: ViolationKind::EmptyShape,
                    node: None,
                    msg: format!("source tensor `{}` needs concrete non-zero extents", t.id),
                });
            }
        }
        if let Some(first) = self.tensors.first() {
            for t in &self.tensors {
                if t.element_type != first.element_type {
                    out.push(Violation {
                        kind: ViolationKind::DType,
                        node: None,
                        msg: format!("tensor `{}` mixes element types", t.id),
                    });
                }
            }
        }

        let mut produced: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(prev) = produced.insert(n.output.as_str(), i) {
                out.push(Violation {
                    kind: ViolationKind::MultipleProducers,
                    node: Some(i),
                    msg: format!("`{}` already produced by node {prev}", n.output),
                });
            }
        }

        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.len() != n.kind.arity() {
                out.push(Violation {
                    kind: ViolationKind::Arity,
                    node: Some(i),
                    msg: format!(
                        "{} expects {} inputs, got {}",
                        n.kind,
                        n.kind.arity(),
                        n.inputs.len()
                    ),
                });
            }
            if matches!(n.kind, OpKind::C2D | OpKind::DEP) && n.attrs.stride == Some(0) {
                out.push(Violation {
                    kind: ViolationKind::Stride,
                    node: Some(i),
                    msg: "convolution stride must be >= 1".into(),
                });
            }
            match self.tensor(&n.output) {
                None => out.push(Violation {
                    kind: ViolationKind::Dangling,
                    node: Some(i),
                    msg: format!("output `{}` is not declared", n.output),
                }),
                Some(t) if t.is_source() => out.push(Violation {
                    kind: ViolationKind::MultipleProducers,
                    node: Some(i),
                    msg: format!("`{}` is a graph input/constant but is produced", n.output),
                }),
                _ => {}
            }
            for inp in &n.inputs {
                match self.tensor(inp) {
                    None => out.push(Violation {
                        kind: ViolationKind::Dangling,
                        node: Some(i),
                        msg: format!("input `{inp}` is not declared"),
                    }),
                    Some(t) if t.is_source() => {}
                    Some(_) => match produced.get(inp.as_str()) {
                        Some(&p) if p < i => {}
                        Some(&p) => out.push(Violation {
                            kind: ViolationKind::CycleOrOrder,
                            node: Some(i),
                            msg: format!("input `{inp}` is produced later by node {p}"),
                        }),
                        None => out.push(Violation {
                            kind: ViolationKind::Dangling,
                            node: Some(i),
                            msg: format!("input `{inp}` is never produced"),
                        }),
                    },
                }
            }
        }
        out
    }

    pub fn validated(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "),
            ))
        }
    }

    /// Topological order of node indices, ties broken by insertion order.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        let producers: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| (node.output.as_str(), i))
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                if let Some(&p) = producers.get(inp.as_str()) {
                    succ[p].push(i);
                    indegree[i] += 1;
                }
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &s in &succ[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|i| !order.contains(i)).unwrap();
            return Err(Error::Cycle(self.nodes[stuck].output.clone()));
        }
        Ok(order)
    }

    /// Resolves every tensor's extents. Undeclared intermediate shapes are
    /// filled in; declared ones are checked.
    pub fn infer_shapes(&self) -> Result<Graph> {
        let mut g = self.clone();
        let order = g.topo_order()?;
        for idx in order {
            let node = g.nodes[idx].clone();
            let inferred = infer_node(&g, &node)?;
            let out = g
                .tensor_mut(&node.output)
                .ok_or_else(|| Error::Validation(format!("undeclared `{}`", node.output)))?;
            if out.dims.is_empty() {
                out.dims = inferred;
            } else {
                if out.dims.len() != inferred.len()
                    || out
                        .dims
                        .iter()
                        .zip(&inferred)
                        .any(|(a, b)| a.extent != b.extent)
                {
                    return Err(Error::ShapeMismatch {
                        node: node.output.clone(),
                        msg: format!(
                            "declared {} but operator yields {}",
                            dims_label(&out.dims),
                            dims_label(&inferred)
                        ),
                    });
                }
            }
        }
        Ok(g)
    }

    /// Element counts of each tensor.
    pub fn footprint(&self) -> BTreeMap<String, usize> {
        self.tensors.iter().map(|t| (t.id.clone(), t.numel())).collect()
    }
}

/// Window parameters of a convolution node: `(KH, KW, V)`.
pub fn conv_window(g: &Graph, node: &OperatorNode) -> Result<(usize, usize, usize)> {
    let w = g.expect_tensor(&node.inputs[1])?;
    if w.rank() != 4 {
        return Err(Error::ShapeMismatch {
            node: node.output.clone(),
            msg: format!("weight must be rank 4, got {}", w.rank()),
        });
    }
    let (kh, kw) = (w.dims[2].extent, w.dims[3].extent);
    if let Some([ah, aw]) = node.attrs.kernel {
        if ah != kh || aw != kw {
            return Err(Error::ShapeMismatch {
                node: node.output.clone(),
                msg: format!("kernel attr {ah}x{aw} disagrees with weight {kh}x{kw}"),
            });
        }
    }
    Ok((kh, kw, node.attrs.stride()))
}

fn mismatch(node: &OperatorNode, msg: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        node: node.output.clone(),
        msg: msg.into(),
    }
}

fn infer_node(g: &Graph, node: &OperatorNode) -> Result<Vec<Dim>> {
    let input = |k: usize| -> Result<&TensorDecl> {
        let t = g.expect_tensor(&node.inputs[k])?;
        if t.dims.is_empty() {
            return Err(mismatch(node, format!("input `{}` has no shape", t.id)));
        }
        Ok(t)
    };
    match node.kind {
        OpKind::C2D | OpKind::DEP => {
            let x = input(0)?;
            let w = input(1)?;
            if x.rank() != 4 {
                return Err(mismatch(node, "convolution input must be rank 4 (NCHW)"));
            }
            let (kh, kw, v) = conv_window(g, node)?;
            let (_, c, h, wd) = (
                x.dims[0].extent,
                x.dims[1].extent,
                x.dims[2].extent,
                x.dims[3].extent,
            );
            let o = if node.kind == OpKind::C2D {
                if w.dims[1].extent != c {
                    return Err(mismatch(
                        node,
                        format!("weight expects {} input channels, input has {c}", w.dims[1].extent),
                    ));
                }
                w.dims[0].extent
            } else {
                if w.dims[0].extent != c || w.dims[1].extent != 1 {
                    return Err(mismatch(node, "depthwise weight must be C x 1 x KH x KW"));
                }
                c
            };
            if h < kh || wd < kw {
                return Err(mismatch(node, "window larger than input"));
            }
            let oh = (h - kh) / v + 1;
            let ow = (wd - kw) / v + 1;
            let ch_name = if node.kind == OpKind::C2D {
                w.dims[0].name.clone()
            } else {
                x.dims[1].name.clone()
            };
            Ok(vec![
                x.dims[0].clone(),
                Dim::new(ch_name, o),
                Dim::new(x.dims[2].name.clone(), oh),
                Dim::new(x.dims[3].name.clone(), ow),
            ])
        }
        OpKind::GMM => {
            let a = input(0)?;
            let b = input(1)?;
            if a.rank() != 2 || b.rank() != 2 {
                return Err(mismatch(node, "GMM operands must be matrices"));
            }
            if a.dims[1].extent != b.dims[0].extent {
                return Err(mismatch(
                    node,
                    format!("inner extents {} and {} differ", a.dims[1].extent, b.dims[0].extent),
                ));
            }
            Ok(vec![a.dims[0].clone(), b.dims[1].clone()])
        }
        OpKind::Padding => {
            let x = input(0)?;
            let pads = node.attrs.pads.clone().unwrap_or_default();
            if pads.len() != x.rank() {
                return Err(mismatch(node, "pads must list one [before, after] per dim"));
            }
            Ok(x.dims
                .iter()
                .zip(&pads)
                .map(|(d, [b, a])| Dim::new(d.name.clone(), d.extent + b + a))
                .collect())
        }
        OpKind::ReLU | OpKind::LayoutConvert => Ok(input(0)?.dims.clone()),
        OpKind::BiasAdd => {
            let x = input(0)?;
            let b = input(1)?;
            let axis = node.attrs.axis.unwrap_or(1).min(x.rank() - 1);
            if b.rank() != 1 || b.dims[0].extent != x.dims[axis].extent {
                return Err(mismatch(node, "bias must be a vector matching the bias axis"));
            }
            Ok(x.dims.clone())
        }
        OpKind::EwAdd => {
            let a = input(0)?;
            let b = input(1)?;
            if a.extents() != b.extents() {
                return Err(mismatch(node, "element-wise operands differ in shape"));
            }
            Ok(a.dims.clone())
        }
    }
}

/// Bias axis after defaulting.
pub fn bias_axis(g: &Graph, node: &OperatorNode) -> usize {
    let rank = g.tensor(&node.inputs[0]).map(|t| t.rank()).unwrap_or(1);
    node.attrs.axis.unwrap_or(1).min(rank.saturating_sub(1))
}
