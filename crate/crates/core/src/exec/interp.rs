use std::collections::BTreeMap;

use super::Element;
use crate::error::{Error, Result};
use crate::ir::Role;
use crate::layout::{extract, materialize};
use crate::program::{Bound, BufferKind, Program, Stmt, Value};

/// Dynamic counts gathered while interpreting.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExecStats {
    /// `+=` stores executed, per buffer.
    pub accumulations: Vec<u64>,
    pub loads: u64,
    pub stores: u64,
}

struct Machine<'a, T> {
    prog: &'a Program,
    bufs: &'a mut [Vec<T>],
    strides: Vec<Vec<i64>>,
    env: Vec<i64>,
    stats: ExecStats,
}

impl<T: Element> Machine<'_, T> {
    fn offset(&self, buf: usize, index: &[crate::expr::AccessExpr]) -> Result<usize> {
        let decl = &self.prog.buffers[buf];
        let mut off = 0i64;
        let mut vals = Vec::with_capacity(index.len());
        let mut ok = index.len() == decl.dims.len();
        for (q, e) in index.iter().enumerate() {
            let v = e.eval(&self.env);
            vals.push(v);
            if ok && (v < 0 || v >= decl.dims[q].extent as i64) {
                ok = false;
            }
            off += v * self.strides[buf].get(q).copied().unwrap_or(0);
        }
        if !ok {
            return Err(Error::OutOfBounds {
                buffer: decl.name.clone(),
                indices: vals,
                stmt: self.prog.access(buf, index),
            });
        }
        Ok(off as usize)
    }

    fn holds(&self, conds: &[Bound]) -> bool {
        conds.iter().all(|b| b.holds(&self.env))
    }

    fn eval(&mut self, v: &Value) -> Result<T> {
        Ok(match v {
            Value::Const(c) => T::from_f64(*c),
            Value::Load(l) => {
                if !self.holds(&l.guard) {
                    return Ok(T::default());
                }
                let off = self.offset(l.buf, &l.index)?;
                self.stats.loads += 1;
                self.bufs[l.buf][off]
            }
            Value::Add(a, b) => {
                let x = self.eval(a)?;
                x.add(self.eval(b)?)
            }
            Value::Mul(a, b) => {
                let x = self.eval(a)?;
                x.mul(self.eval(b)?)
            }
            Value::Max(a, b) => {
                let x = self.eval(a)?;
                x.max(self.eval(b)?)
            }
        })
    }

    fn exec(&mut self, stmts: &[Stmt]) -> Result<()> {
        for s in stmts {
            match s {
                Stmt::For { var, extent, body, .. } => {
                    for i in 0..*extent as i64 {
                        self.env[var.index()] = i;
                        self.exec(body)?;
                    }
                }
                Stmt::Store {
                    buf,
                    index,
                    value,
                    accumulate,
                } => {
                    let v = self.eval(value)?;
                    let off = self.offset(*buf, index)?;
                    self.stats.stores += 1;
                    let cell = &mut self.bufs[*buf][off];
                    if *accumulate {
                        *cell = cell.add(v);
                        self.stats.accumulations[*buf] += 1;
                    } else {
                        *cell = v;
                    }
                }
                Stmt::If { conds, body } => {
                    if self.holds(conds) {
                        self.exec(body)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs `prog` over physical buffers (one per program buffer, zero-filled
/// where not an input). Aborts on the first out-of-range access.
pub fn interpret<T: Element>(prog: &Program, bufs: &mut [Vec<T>]) -> Result<ExecStats> {
    for (b, decl) in prog.buffers.iter().enumerate() {
        if bufs.get(b).map(|v| v.len()) != Some(decl.len()) {
            return Err(Error::Validation(format!(
                "buffer `{}` needs {} elements",
                decl.name,
                decl.len()
            )));
        }
    }
    let mut m = Machine {
        prog,
        strides: prog.buffers.iter().map(|b| b.strides()).collect(),
        bufs,
        env: vec![0; prog.var_names.len()],
        stats: ExecStats {
            accumulations: vec![0; prog.buffers.len()],
            ..Default::default()
        },
    };
    m.exec(&prog.body)?;
    Ok(m.stats)
}

/// Runs `prog` on logical row-major data of every input and constant tensor
/// and returns the logical contents of every tensor afterwards.
pub fn run_program<T: Element>(
    prog: &Program,
    inputs: &BTreeMap<String, Vec<T>>,
) -> Result<(BTreeMap<String, Vec<T>>, ExecStats)> {
    let mut bufs = Vec::with_capacity(prog.buffers.len());
    for decl in &prog.buffers {
        let fed = decl.kind == BufferKind::Tensor && matches!(decl.role, Role::Input | Role::Constant);
        if fed {
            bufs.push(materialize(&prog.layouts, &decl.name, inputs)?);
        } else {
            bufs.push(vec![T::default(); decl.len()]);
        }
    }
    let stats = interpret(prog, &mut bufs)?;
    let mut out = BTreeMap::new();
    for (id, layout) in &prog.layouts {
        let b = prog
            .buffer_index(&layout.buffer)
            .expect("every layout owner has a buffer");
        out.insert(id.clone(), extract(&prog.layouts, id, &bufs[b])?);
    }
    Ok((out, stats))
}
