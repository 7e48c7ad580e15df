//! Lowered statement IR shared by the interpreter, the cache simulator and
//! the feature extractor.

use std::collections::BTreeMap;
use std::fmt::{self, Write};

use serde::{Deserialize, Serialize};

use crate::expr::{AccessExpr, VarId};
use crate::ir::{DType, Dim, Role};
use crate::layout::TensorLayout;

/// `lo <= expr < hi`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bound {
    pub expr: AccessExpr,
    pub lo: i64,
    pub hi: i64,
}

impl Bound {
    pub fn new(expr: AccessExpr, lo: i64, hi: i64) -> Self {
        Bound { expr, lo, hi }
    }

    pub fn holds(&self, env: &[i64]) -> bool {
        let v = self.expr.eval(env);
        self.lo <= v && v < self.hi
    }

    pub fn substitute(&self, f: &impl Fn(VarId) -> Option<AccessExpr>) -> Bound {
        Bound {
            expr: self.expr.substitute(f),
            lo: self.lo,
            hi: self.hi,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Load {
    pub buf: usize,
    pub index: Vec<AccessExpr>,
    /// Reads yield zero without touching memory when any bound fails.
    pub guard: Vec<Bound>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Const(f64),
    Load(Load),
    Add(Box<Value>, Box<Value>),
    Mul(Box<Value>, Box<Value>),
    Max(Box<Value>, Box<Value>),
}

impl Value {
    pub fn add(a: Value, b: Value) -> Value {
        Value::Add(Box::new(a), Box::new(b))
    }

    pub fn mul(a: Value, b: Value) -> Value {
        Value::Mul(Box::new(a), Box::new(b))
    }

    pub fn max(a: Value, b: Value) -> Value {
        Value::Max(Box::new(a), Box::new(b))
    }

    pub fn loads(&self) -> Vec<&Load> {
        let mut out = Vec::new();
        self.collect_loads(&mut out);
        out
    }

    fn collect_loads<'a>(&'a self, out: &mut Vec<&'a Load>) {
        match self {
            Value::Const(_) => {}
            Value::Load(l) => out.push(l),
            Value::Add(a, b) | Value::Mul(a, b) | Value::Max(a, b) => {
                a.collect_loads(out);
                b.collect_loads(out);
            }
        }
    }

    pub fn loads_mut(&mut self, f: &mut impl FnMut(&mut Load)) {
        match self {
            Value::Const(_) => {}
            Value::Load(l) => f(l),
            Value::Add(a, b) | Value::Mul(a, b) | Value::Max(a, b) => {
                a.loads_mut(f);
                b.loads_mut(f);
            }
        }
    }

    /// Arithmetic operations, loads excluded.
    pub fn op_count(&self) -> usize {
        match self {
            Value::Const(_) | Value::Load(_) => 0,
            Value::Add(a, b) | Value::Mul(a, b) | Value::Max(a, b) => 1 + a.op_count() + b.op_count(),
        }
    }

    /// Applies `f` to every index expression and guard.
    pub fn map_exprs(&mut self, f: &impl Fn(&AccessExpr) -> AccessExpr) {
        self.loads_mut(&mut |l| {
            for e in l.index.iter_mut() {
                *e = f(e);
            }
            for b in l.guard.iter_mut() {
                b.expr = f(&b.expr);
            }
        });
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotation {
    #[default]
    None,
    Unroll,
    Parallel,
    Vectorize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stmt {
    For {
        var: VarId,
        extent: usize,
        ann: Annotation,
        body: Vec<Stmt>,
    },
    Store {
        buf: usize,
        index: Vec<AccessExpr>,
        value: Value,
        accumulate: bool,
    },
    If {
        conds: Vec<Bound>,
        body: Vec<Stmt>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferKind {
    Tensor,
    Staging,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferDecl {
    pub name: String,
    pub dims: Vec<Dim>,
    pub role: Role,
    pub kind: BufferKind,
}

impl BufferDecl {
    pub fn len(&self) -> usize {
        self.dims.iter().map(|d| d.extent).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<i64> {
        let mut s = vec![1i64; self.dims.len()];
        for k in (0..self.dims.len().saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.dims[k + 1].extent as i64;
        }
        s
    }
}

/// A whole lowered graph. Buffers are zero-initialized before execution.
#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub dtype: DType,
    pub buffers: Vec<BufferDecl>,
    pub body: Vec<Stmt>,
    pub var_names: Vec<String>,
    /// Physical layout of every graph tensor, for moving logical data in and
    /// out of buffers.
    pub layouts: BTreeMap<String, TensorLayout>,
}

impl Program {
    pub fn buffer_index(&self, name: &str) -> Option<usize> {
        self.buffers.iter().position(|b| b.name == name)
    }

    pub fn var_name(&self, v: VarId) -> String {
        self.var_names
            .get(v.index())
            .cloned()
            .unwrap_or_else(|| v.to_string())
    }

    /// Number of statements of every kind.
    pub fn stmt_count(&self) -> usize {
        fn count(s: &[Stmt]) -> usize {
            s.iter()
                .map(|s| match s {
                    Stmt::For { body, .. } | Stmt::If { body, .. } => 1 + count(body),
                    Stmt::Store { .. } => 1,
                })
                .sum()
        }
        count(&self.body)
    }

    /// Human-readable pseudocode. The format is stable: two-space indent,
    /// `for v in range(E):` headers, `=` or `+=` stores.
    pub fn pseudocode(&self) -> String {
        let mut out = String::new();
        for s in &self.body {
            self.write_stmt(&mut out, s, 0);
        }
        out
    }

    fn write_stmt(&self, out: &mut String, s: &Stmt, depth: usize) {
        let pad = "  ".repeat(depth);
        match s {
            Stmt::For {
                var,
                extent,
                ann,
                body,
            } => {
                let _ = write!(out, "{pad}for {} in range({extent}):", self.var_name(*var));
                if *ann != Annotation::None {
                    let _ = write!(out, "  # {}", annotation_name(*ann));
                }
                out.push('\n');
                for b in body {
                    self.write_stmt(out, b, depth + 1);
                }
            }
            Stmt::Store {
                buf,
                index,
                value,
                accumulate,
            } => {
                let op = if *accumulate { "+=" } else { "=" };
                let _ = writeln!(
                    out,
                    "{pad}{} {op} {}",
                    self.access(*buf, index),
                    self.value(value, 0)
                );
            }
            Stmt::If { conds, body } => {
                let _ = writeln!(out, "{pad}if {}:", self.conds(conds));
                for b in body {
                    self.write_stmt(out, b, depth + 1);
                }
            }
        }
    }

    fn expr(&self, e: &AccessExpr) -> String {
        e.render(&|v| self.var_name(v))
    }

    pub fn access(&self, buf: usize, index: &[AccessExpr]) -> String {
        let mut s = self.buffers[buf].name.clone();
        for e in index {
            let _ = write!(s, "[{}]", self.expr(e));
        }
        s
    }

    fn conds(&self, conds: &[Bound]) -> String {
        conds
            .iter()
            .map(|b| format!("{} <= {} < {}", b.lo, self.expr(&b.expr), b.hi))
            .collect::<Vec<_>>()
            .join(" and ")
    }

    // prec: 0 sum, 1 product
    fn value(&self, v: &Value, prec: u8) -> String {
        match v {
            Value::Const(c) => fmt_const(*c),
            Value::Load(l) if l.guard.is_empty() => self.access(l.buf, &l.index),
            Value::Load(l) => format!(
                "({} if {} else 0)",
                self.access(l.buf, &l.index),
                self.conds(&l.guard)
            ),
            Value::Add(a, b) => {
                let s = format!("{} + {}", self.value(a, 0), self.value(b, 0));
                if prec > 0 {
                    format!("({s})")
                } else {
                    s
                }
            }
            Value::Mul(a, b) => format!("{} * {}", self.value(a, 1), self.value(b, 1)),
            Value::Max(a, b) => format!("max({}, {})", self.value(a, 0), self.value(b, 0)),
        }
    }
}

fn fmt_const(c: f64) -> String {
    if c.fract() == 0.0 && c.abs() < 1e15 {
        format!("{}", c as i64)
    } else {
        format!("{c}")
    }
}

pub fn annotation_name(a: Annotation) -> &'static str {
    match a {
        Annotation::None => "none",
        Annotation::Unroll => "unroll",
        Annotation::Parallel => "parallel",
        Annotation::Vectorize => "vectorize",
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pseudocode())
    }
}
