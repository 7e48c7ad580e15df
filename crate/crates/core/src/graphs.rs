//! Ready-made graphs: the convolution examples and the tuning micrographs.
//!
//! Convolutions take `N×I×H×W` inputs and `O×I×KH×KW` weights. Padding is an
//! explicit operator.

use crate::ir::{Attrs, DType, Dim, Graph, OpKind, OperatorNode, Role, TensorDecl};

fn dims(list: &[(&str, usize)]) -> Vec<Dim> {
    list.iter().map(|(n, e)| Dim::new(*n, *e)).collect()
}

struct Builder {
    g: Graph,
    dtype: DType,
}

impl Builder {
    fn new(dtype: DType) -> Self {
        Builder { g: Graph::new(), dtype }
    }

    fn source(&mut self, id: &str, role: Role, list: &[(&str, usize)]) -> &mut Self {
        self.g.add_tensor(TensorDecl::new(id, dims(list), self.dtype, role));
        self
    }

    fn op(&mut self, kind: OpKind, inputs: &[&str], out: &str, attrs: Attrs) -> &mut Self {
        self.g
            .add_tensor(TensorDecl::new(out, Vec::new(), self.dtype, Role::Intermediate));
        self.g.add_node(OperatorNode::new(kind, inputs, out).with_attrs(attrs));
        self
    }

    fn finish(&mut self) -> Graph {
        let last = self.g.nodes.last().map(|n| n.output.clone());
        if let Some(t) = last.and_then(|id| self.g.tensor_mut(&id)) {
            t.constancy = Role::Output;
        }
        self.g.infer_shapes().expect("built-in graph is well formed")
    }
}

fn stride(v: usize) -> Attrs {
    Attrs {
        stride: Some(v),
        ..Attrs::default()
    }
}

fn pad_hw(p: usize) -> Attrs {
    Attrs {
        pads: Some(vec![[0, 0], [0, 0], [p, p], [p, p]]),
        ..Attrs::default()
    }
}

/// `Conv = C2D(Inp, Ker)` on an `n×i×h×w` input with `o` filters of `kh×kw`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(dtype: DType, n: usize, i: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize, v: usize) -> Graph {
    Builder::new(dtype)
        .source("Inp", Role::Input, &[("N", n), ("I", i), ("H", h), ("W", w)])
        .source("Ker", Role::Constant, &[("O", o), ("I", i), ("KH", kh), ("KW", kw)])
        .op(OpKind::C2D, &["Inp", "Ker"], "Conv", stride(v))
        .finish()
}

/// `ReLU(C2D(Inp, Ker))`, the running example of layout propagation.
#[allow(clippy::too_many_arguments)]
pub fn conv_relu(dtype: DType, n: usize, i: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize) -> Graph {
    Builder::new(dtype)
        .source("Inp", Role::Input, &[("N", n), ("I", i), ("H", h), ("W", w)])
        .source("Ker", Role::Constant, &[("O", o), ("I", i), ("KH", kh), ("KW", kw)])
        .op(OpKind::C2D, &["Inp", "Ker"], "Conv", Attrs::default())
        .op(OpKind::ReLU, &["Conv"], "ReLU", Attrs::default())
        .finish()
}

/// Padding, 3×3 convolution, bias and ReLU over `c` channels of `h×w`.
pub fn c2d_chain(dtype: DType, h: usize, w: usize, c: usize) -> Graph {
    Builder::new(dtype)
        .source("X", Role::Input, &[("N", 1), ("I", c), ("H", h), ("W", w)])
        .source("K", Role::Constant, &[("O", c), ("I", c), ("KH", 3), ("KW", 3)])
        .source("B", Role::Constant, &[("O", c)])
        .op(OpKind::Padding, &["X"], "Xp", pad_hw(1))
        .op(OpKind::C2D, &["Xp", "K"], "Conv", Attrs::default())
        .op(OpKind::BiasAdd, &["Conv", "B"], "Bias", Attrs::default())
        .op(OpKind::ReLU, &["Bias"], "Y", Attrs::default())
        .finish()
}

/// The depthwise counterpart of [`c2d_chain`].
pub fn dep_chain(dtype: DType, h: usize, w: usize, c: usize) -> Graph {
    Builder::new(dtype)
        .source("X", Role::Input, &[("N", 1), ("I", c), ("H", h), ("W", w)])
        .source("K", Role::Constant, &[("O", c), ("I", 1), ("KH", 3), ("KW", 3)])
        .source("B", Role::Constant, &[("O", c)])
        .op(OpKind::Padding, &["X"], "Xp", pad_hw(1))
        .op(OpKind::DEP, &["Xp", "K"], "Conv", Attrs::default())
        .op(OpKind::BiasAdd, &["Conv", "B"], "Bias", Attrs::default())
        .op(OpKind::ReLU, &["Bias"], "Y", Attrs::default())
        .finish()
}

/// `C = A·B + bias` with the bias broadcast along rows.
pub fn gmm_bias(dtype: DType, m: usize, k: usize, n: usize) -> Graph {
    Builder::new(dtype)
        .source("A", Role::Input, &[("M", m), ("K", k)])
        .source("Bm", Role::Constant, &[("K", k), ("N", n)])
        .source("Bias", Role::Constant, &[("N", n)])
        .op(OpKind::GMM, &["A", "Bm"], "C", Attrs::default())
        .op(
            OpKind::BiasAdd,
            &["C", "Bias"],
            "Y",
            Attrs {
                axis: Some(1),
                ..Attrs::default()
            },
        )
        .finish()
}

/// An image-classifier stem: padding by 3, 7×7 stride-2 convolution with 64
/// filters over 3 channels, bias, ReLU. `h`/`w` are the unpadded extents.
pub fn stem(dtype: DType, h: usize, w: usize) -> Graph {
    Builder::new(dtype)
        .source("X", Role::Input, &[("N", 1), ("I", 3), ("H", h), ("W", w)])
        .source("K", Role::Constant, &[("O", 64), ("I", 3), ("KH", 7), ("KW", 7)])
        .source("B", Role::Constant, &[("O", 64)])
        .op(OpKind::Padding, &["X"], "Xp", pad_hw(3))
        .op(OpKind::C2D, &["Xp", "K"], "Conv", stride(2))
        .op(OpKind::BiasAdd, &["Conv", "B"], "Bias", Attrs::default())
        .op(OpKind::ReLU, &["Bias"], "Y", Attrs::default())
        .finish()
}

/// Looks a micrograph up by name at its tuning size.
pub fn by_name(name: &str, dtype: DType) -> Option<Graph> {
    Some(match name {
        "c2d" => c2d_chain(dtype, 16, 16, 8),
        "dep" => dep_chain(dtype, 16, 16, 8),
        "gmm" => gmm_bias(dtype, 32, 32, 32),
        "stem" => stem(dtype, 30, 30),
        _ => return None,
    })
}
