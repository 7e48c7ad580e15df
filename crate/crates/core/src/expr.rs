//! Integer index expressions.
//!
//! Every tensor access in the compiler is a list of [`AccessExpr`], one per
//! physical dimension. The smart constructors keep expressions in a light
//! normal form (constants folded, `x * 1`, `x + 0`, `x // 1` and `x % 1`
//! elided) so that structural equality is meaningful. [`AccessExpr::simplify`]
//! goes further: it flattens sums into a linear form and uses loop-variable
//! ranges to discharge floor divisions and moduli.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(pub u32);

impl VarId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Index expression tree. Divisors, moduli and clamp bounds are constants;
/// divisors and moduli are always positive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessExpr {
    Var(VarId),
    Const(i64),
    Add(Box<AccessExpr>, Box<AccessExpr>),
    Mul(Box<AccessExpr>, Box<AccessExpr>),
    FloorDiv(Box<AccessExpr>, i64),
    Mod(Box<AccessExpr>, i64),
    /// `min(e, c)`; only produced by the plain unfold rewrite, which clamps a
    /// tile index into the last tile.
    Min(Box<AccessExpr>, i64),
}

/// Inclusive value ranges for variables, used by [`AccessExpr::simplify`] and
/// [`AccessExpr::bounds`].
#[derive(Clone, Debug, Default)]
pub struct VarRanges(HashMap<VarId, (i64, i64)>);

impl VarRanges {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a loop variable iterating over `0..extent`.
    pub fn with_extent(mut self, var: VarId, extent: usize) -> Self {
        self.insert_extent(var, extent);
        self
    }

    pub fn insert_extent(&mut self, var: VarId, extent: usize) {
        self.0.insert(var, (0, extent as i64 - 1));
    }

    pub fn insert(&mut self, var: VarId, lo: i64, hi: i64) {
        self.0.insert(var, (lo, hi));
    }

    pub fn get(&self, var: VarId) -> Option<(i64, i64)> {
        self.0.get(&var).copied()
    }
}

impl AccessExpr {
    pub fn var(v: VarId) -> Self {
        AccessExpr::Var(v)
    }

    pub fn cst(c: i64) -> Self {
        AccessExpr::Const(c)
    }

    pub fn as_const(&self) -> Option<i64> {
        match self {
            AccessExpr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn add(a: AccessExpr, b: AccessExpr) -> Self {
        match (&a, &b) {
            (AccessExpr::Const(x), AccessExpr::Const(y)) => AccessExpr::Const(x + y),
            (AccessExpr::Const(0), _) => b,
            (_, AccessExpr::Const(0)) => a,
            _ => AccessExpr::Add(Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: AccessExpr, b: AccessExpr) -> Self {
        match (&a, &b) {
            (AccessExpr::Const(x), AccessExpr::Const(y)) => AccessExpr::Const(x * y),
            (AccessExpr::Const(0), _) | (_, AccessExpr::Const(0)) => AccessExpr::Const(0),
            (AccessExpr::Const(1), _) => b,
            (_, AccessExpr::Const(1)) => a,
            // Keep the constant on the right: `h*4`, not `4*h`.
            (AccessExpr::Const(_), _) => AccessExpr::Mul(Box::new(b), Box::new(a)),
            _ => AccessExpr::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub fn floordiv(a: AccessExpr, d: i64) -> Self {
        assert!(d > 0, "floordiv by non-positive constant {d}");
        match a {
            _ if d == 1 => a,
            AccessExpr::Const(x) => AccessExpr::Const(x.div_euclid(d)),
            _ => AccessExpr::FloorDiv(Box::new(a), d),
        }
    }

    pub fn modulo(a: AccessExpr, d: i64) -> Self {
        assert!(d > 0, "mod by non-positive constant {d}");
        match a {
            _ if d == 1 => AccessExpr::Const(0),
            AccessExpr::Const(x) => AccessExpr::Const(x.rem_euclid(d)),
            _ => AccessExpr::Mod(Box::new(a), d),
        }
    }

    pub fn min(a: AccessExpr, c: i64) -> Self {
        match a {
            AccessExpr::Const(x) => AccessExpr::Const(x.min(c)),
            _ => AccessExpr::Min(Box::new(a), c),
        }
    }

    /// Evaluates with `env[v]` as the value of variable `v`.
    pub fn eval(&self, env: &[i64]) -> i64 {
        match self {
            AccessExpr::Var(v) => env[v.index()],
            AccessExpr::Const(c) => *c,
            AccessExpr::Add(a, b) => a.eval(env) + b.eval(env),
            AccessExpr::Mul(a, b) => a.eval(env) * b.eval(env),
            AccessExpr::FloorDiv(a, d) => a.eval(env).div_euclid(*d),
            AccessExpr::Mod(a, d) => a.eval(env).rem_euclid(*d),
            AccessExpr::Min(a, c) => a.eval(env).min(*c),
        }
    }

    pub fn eval_with(&self, env: &impl Fn(VarId) -> i64) -> i64 {
        match self {
            AccessExpr::Var(v) => env(*v),
            AccessExpr::Const(c) => *c,
            AccessExpr::Add(a, b) => a.eval_with(env) + b.eval_with(env),
            AccessExpr::Mul(a, b) => a.eval_with(env) * b.eval_with(env),
            AccessExpr::FloorDiv(a, d) => a.eval_with(env).div_euclid(*d),
            AccessExpr::Mod(a, d) => a.eval_with(env).rem_euclid(*d),
            AccessExpr::Min(a, c) => a.eval_with(env).min(*c),
        }
    }

    /// Replaces variables for which `f` returns `Some`, rebuilding through the
    /// smart constructors.
    pub fn substitute(&self, f: &impl Fn(VarId) -> Option<AccessExpr>) -> AccessExpr {
        match self {
            AccessExpr::Var(v) => f(*v).unwrap_or(AccessExpr::Var(*v)),
            AccessExpr::Const(c) => AccessExpr::Const(*c),
            AccessExpr::Add(a, b) => AccessExpr::add(a.substitute(f), b.substitute(f)),
            AccessExpr::Mul(a, b) => AccessExpr::mul(a.substitute(f), b.substitute(f)),
            AccessExpr::FloorDiv(a, d) => AccessExpr::floordiv(a.substitute(f), *d),
            AccessExpr::Mod(a, d) => AccessExpr::modulo(a.substitute(f), *d),
            AccessExpr::Min(a, c) => AccessExpr::min(a.substitute(f), *c),
        }
    }

    pub fn substitute_map(&self, map: &HashMap<VarId, AccessExpr>) -> AccessExpr {
        self.substitute(&|v| map.get(&v).cloned())
    }

    pub fn vars(&self) -> BTreeSet<VarId> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<VarId>) {
        match self {
            AccessExpr::Var(v) => {
                out.insert(*v);
            }
            AccessExpr::Const(_) => {}
            AccessExpr::Add(a, b) | AccessExpr::Mul(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            AccessExpr::FloorDiv(a, _) | AccessExpr::Mod(a, _) | AccessExpr::Min(a, _) => {
                a.collect_vars(out)
            }
        }
    }

    pub fn contains_var(&self, var: VarId) -> bool {
        match self {
            AccessExpr::Var(v) => *v == var,
            AccessExpr::Const(_) => false,
            AccessExpr::Add(a, b) | AccessExpr::Mul(a, b) => {
                a.contains_var(var) || b.contains_var(var)
            }
            AccessExpr::FloorDiv(a, _) | AccessExpr::Mod(a, _) | AccessExpr::Min(a, _) => {
                a.contains_var(var)
            }
        }
    }

    /// Number of arithmetic operators in the tree.
    pub fn op_count(&self) -> usize {
        match self {
            AccessExpr::Var(_) | AccessExpr::Const(_) => 0,
            AccessExpr::Add(a, b) | AccessExpr::Mul(a, b) => 1 + a.op_count() + b.op_count(),
            AccessExpr::FloorDiv(a, _) | AccessExpr::Mod(a, _) | AccessExpr::Min(a, _) => {
                1 + a.op_count()
            }
        }
    }

    /// Inclusive interval containing every value of the expression, if all
    /// variables involved have known ranges.
    pub fn bounds(&self, ranges: &VarRanges) -> Option<(i64, i64)> {
        match self {
            AccessExpr::Var(v) => ranges.get(*v),
            AccessExpr::Const(c) => Some((*c, *c)),
            AccessExpr::Add(a, b) => {
                let (al, ah) = a.bounds(ranges)?;
                let (bl, bh) = b.bounds(ranges)?;
                Some((al + bl, ah + bh))
            }
            AccessExpr::Mul(a, b) => {
                let (al, ah) = a.bounds(ranges)?;
                let (bl, bh) = b.bounds(ranges)?;
                let c = [al * bl, al * bh, ah * bl, ah * bh];
                Some((*c.iter().min().unwrap(), *c.iter().max().unwrap()))
            }
            AccessExpr::FloorDiv(a, d) => {
                let (l, h) = a.bounds(ranges)?;
                Some((l.div_euclid(*d), h.div_euclid(*d)))
            }
            AccessExpr::Mod(a, d) => match a.bounds(ranges) {
                Some((l, h)) if l.div_euclid(*d) == h.div_euclid(*d) => {
                    Some((l.rem_euclid(*d), h.rem_euclid(*d)))
                }
                _ => Some((0, d - 1)),
            },
            AccessExpr::Min(a, c) => {
                let (l, h) = a.bounds(ranges)?;
                Some((l.min(*c), h.min(*c)))
            }
        }
    }

    /// `self` as `Σ coeff·atom + constant`; atoms are variables or non-linear
    /// sub-expressions.
    pub fn linear_parts(&self) -> (Vec<(AccessExpr, i64)>, i64) {
        let lin = Linear::of(self, &VarRanges::new());
        (lin.terms.into_iter().collect(), lin.constant)
    }

    /// Splits `self` into `(outer, inner)` with `self = outer + inner`, where
    /// `outer` only uses variables accepted by `is_outer` and `inner` none of
    /// them. The constant goes to `outer`. `None` if an atom mixes both kinds.
    pub fn partition(&self, is_outer: &impl Fn(VarId) -> bool) -> Option<(AccessExpr, AccessExpr)> {
        let (terms, c) = self.linear_parts();
        let mut outer = AccessExpr::Const(c);
        let mut inner = AccessExpr::Const(0);
        for (atom, k) in terms {
            let vars = atom.vars();
            let n_outer = vars.iter().filter(|v| is_outer(**v)).count();
            let term = atom * k;
            if n_outer == vars.len() {
                outer = outer + term;
            } else if n_outer == 0 {
                inner = inner + term;
            } else {
                return None;
            }
        }
        Some((outer, inner))
    }

    /// Range-aware simplification. The result evaluates identically to `self`
    /// for every assignment inside `ranges`.
    pub fn simplify(&self, ranges: &VarRanges) -> AccessExpr {
        match self {
            AccessExpr::Var(_) | AccessExpr::Const(_) => self.clone(),
            AccessExpr::Add(..) | AccessExpr::Mul(..) => Linear::of(self, ranges).to_expr(),
            AccessExpr::FloorDiv(a, d) => simplify_floordiv(a.simplify(ranges), *d, ranges),
            AccessExpr::Mod(a, d) => simplify_mod(a.simplify(ranges), *d, ranges),
            AccessExpr::Min(a, c) => {
                let a = a.simplify(ranges);
                match a.bounds(ranges) {
                    Some((_, h)) if h <= *c => a,
                    Some((l, _)) if l >= *c => AccessExpr::Const(*c),
                    _ => AccessExpr::min(a, *c),
                }
            }
        }
    }

    /// Renders the expression using `name` for variables.
    pub fn render(&self, name: &dyn Fn(VarId) -> String) -> String {
        let mut s = String::new();
        self.render_into(&mut s, name, 0);
        s
    }

    // Precedence: 0 = sum context, 1 = product context, 2 = atom required.
    fn render_into(&self, out: &mut String, name: &dyn Fn(VarId) -> String, prec: u8) {
        use std::fmt::Write;
        match self {
            AccessExpr::Var(v) => out.push_str(&name(*v)),
            AccessExpr::Const(c) => {
                if *c < 0 && prec > 0 {
                    let _ = write!(out, "({c})");
                } else {
                    let _ = write!(out, "{c}");
                }
            }
            AccessExpr::Add(a, b) => {
                if prec > 0 {
                    out.push('(');
                }
                a.render_into(out, name, 0);
                match b.as_ref() {
                    AccessExpr::Const(c) if *c < 0 => {
                        let _ = write!(out, " - {}", -c);
                    }
                    _ => {
                        out.push_str(" + ");
                        b.render_into(out, name, 0);
                    }
                }
                if prec > 0 {
                    out.push(')');
                }
            }
            AccessExpr::Mul(a, b) => {
                if prec > 1 {
                    out.push('(');
                }
                a.render_into(out, name, 1);
                out.push('*');
                b.render_into(out, name, 2);
                if prec > 1 {
                    out.push(')');
                }
            }
            AccessExpr::FloorDiv(a, d) => {
                if prec > 1 {
                    out.push('(');
                }
                a.render_into(out, name, 1);
                let _ = write!(out, "//{d}");
                if prec > 1 {
                    out.push(')');
                }
            }
            AccessExpr::Mod(a, d) => {
                if prec > 1 {
                    out.push('(');
                }
                a.render_into(out, name, 1);
                let _ = write!(out, "%{d}");
                if prec > 1 {
                    out.push(')');
                }
            }
            AccessExpr::Min(a, c) => {
                out.push_str("min(");
                a.render_into(out, name, 0);
                let _ = write!(out, ", {c})");
            }
        }
    }
}

impl fmt::Display for AccessExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(&|v| v.to_string()))
    }
}

impl From<VarId> for AccessExpr {
    fn from(v: VarId) -> Self {
        AccessExpr::Var(v)
    }
}

impl From<i64> for AccessExpr {
    fn from(c: i64) -> Self {
        AccessExpr::Const(c)
    }
}

impl ops::Add for AccessExpr {
    type Output = AccessExpr;
    fn add(self, rhs: AccessExpr) -> AccessExpr {
        AccessExpr::add(self, rhs)
    }
}

impl ops::Add<i64> for AccessExpr {
    type Output = AccessExpr;
    fn add(self, rhs: i64) -> AccessExpr {
        AccessExpr::add(self, AccessExpr::Const(rhs))
    }
}

impl ops::Sub<AccessExpr> for AccessExpr {
    type Output = AccessExpr;
    fn sub(self, rhs: AccessExpr) -> AccessExpr {
        AccessExpr::add(self, AccessExpr::mul(rhs, AccessExpr::Const(-1)))
    }
}

impl ops::Mul for AccessExpr {
    type Output = AccessExpr;
    fn mul(self, rhs: AccessExpr) -> AccessExpr {
        AccessExpr::mul(self, rhs)
    }
}

impl ops::Mul<i64> for AccessExpr {
    type Output = AccessExpr;
    fn mul(self, rhs: i64) -> AccessExpr {
        AccessExpr::mul(self, AccessExpr::Const(rhs))
    }
}

/// `Σ coeff·atom + constant`, where atoms are variables or non-linear
/// sub-expressions.
#[derive(Clone, Debug, Default)]
struct Linear {
    terms: BTreeMap<AccessExpr, i64>,
    constant: i64,
}

impl Linear {
    fn of(e: &AccessExpr, ranges: &VarRanges) -> Linear {
        let mut lin = Linear::default();
        lin.accumulate(e, 1, ranges);
        lin.terms.retain(|_, c| *c != 0);
        lin.merge_div_mod(ranges);
        lin
    }

    /// Folds `k·c·(x // c) + k·(x % c)` back into `k·x`, and
    /// `k·c·(x // c % m) + k·(x % c)` into `k·(x % (c·m))`.
    fn merge_div_mod(&mut self, ranges: &VarRanges) {
        loop {
            let found = self.terms.iter().find_map(|(atom, &kc)| {
                let (x, c, whole) = match atom {
                    AccessExpr::FloorDiv(x, c) => ((**x).clone(), *c, None),
                    AccessExpr::Mod(inner, m) => match &**inner {
                        AccessExpr::FloorDiv(x, c) => ((**x).clone(), *c, Some(c * m)),
                        _ => return None,
                    },
                    _ => return None,
                };
                if kc % c != 0 {
                    return None;
                }
                let low = simplify_mod(x.clone(), c, ranges);
                if self.terms.get(&low) != Some(&(kc / c)) {
                    return None;
                }
                let merged = match whole {
                    None => x,
                    Some(cm) => simplify_mod(x, cm, ranges),
                };
                Some((atom.clone(), low, merged, kc / c))
            });
            let Some((high, low, merged, k)) = found else { return };
            self.terms.remove(&high);
            self.terms.remove(&low);
            self.accumulate(&merged, k, ranges);
            self.terms.retain(|_, c| *c != 0);
        }
    }

    fn accumulate(&mut self, e: &AccessExpr, scale: i64, ranges: &VarRanges) {
        match e {
            AccessExpr::Const(c) => self.constant += scale * c,
            AccessExpr::Var(_) => *self.terms.entry(e.clone()).or_insert(0) += scale,
            AccessExpr::Add(a, b) => {
                self.accumulate(a, scale, ranges);
                self.accumulate(b, scale, ranges);
            }
            AccessExpr::Mul(a, b) => {
                let la = Linear::of(a, ranges);
                let lb = Linear::of(b, ranges);
                if la.terms.is_empty() {
                    let s = scale * la.constant;
                    for (t, c) in lb.terms {
                        *self.terms.entry(t).or_insert(0) += s * c;
                    }
                    self.constant += s * lb.constant;
                } else if lb.terms.is_empty() {
                    let s = scale * lb.constant;
                    for (t, c) in la.terms {
                        *self.terms.entry(t).or_insert(0) += s * c;
                    }
                    self.constant += s * la.constant;
                } else {
                    let atom = AccessExpr::Mul(Box::new(la.to_expr()), Box::new(lb.to_expr()));
                    *self.terms.entry(atom).or_insert(0) += scale;
                }
            }
            _ => {
                let s = e.simplify(ranges);
                match s {
                    AccessExpr::FloorDiv(..) | AccessExpr::Mod(..) | AccessExpr::Min(..) => {
                        *self.terms.entry(s).or_insert(0) += scale
                    }
                    other => self.accumulate(&other, scale, ranges),
                }
            }
        }
    }

    fn to_expr(&self) -> AccessExpr {
        let mut acc: Option<AccessExpr> = None;
        for (atom, &c) in &self.terms {
            if c == 0 {
                continue;
            }
            let term = AccessExpr::mul(atom.clone(), AccessExpr::Const(c));
            acc = Some(match acc {
                None => term,
                Some(prev) => AccessExpr::add(prev, term),
            });
        }
        match acc {
            None => AccessExpr::Const(self.constant),
            Some(e) => AccessExpr::add(e, AccessExpr::Const(self.constant)),
        }
    }

    /// Splits into `(quotient, remainder)` with `self = quotient·d + remainder`,
    /// the quotient collecting every term whose coefficient `d` divides.
    fn split_by(&self, d: i64) -> (Linear, Linear) {
        let mut q = Linear::default();
        let mut r = Linear::default();
        for (atom, &c) in &self.terms {
            if c % d == 0 {
                q.terms.insert(atom.clone(), c / d);
            } else {
                r.terms.insert(atom.clone(), c);
            }
        }
        q.constant = self.constant.div_euclid(d);
        r.constant = self.constant.rem_euclid(d);
        (q, r)
    }
}

fn simplify_floordiv(a: AccessExpr, d: i64, ranges: &VarRanges) -> AccessExpr {
    if d == 1 {
        return a;
    }
    if let AccessExpr::FloorDiv(inner, d0) = &a {
        return simplify_floordiv((**inner).clone(), d0 * d, ranges);
    }
    let lin = Linear::of(&a, ranges);
    let (q, r) = lin.split_by(d);
    let r_expr = r.to_expr();
    let q_expr = q.to_expr();
    match r_expr.bounds(ranges) {
        Some((lo, hi)) if lo.div_euclid(d) == hi.div_euclid(d) => {
            Linear::of(&(q_expr + AccessExpr::Const(lo.div_euclid(d))), ranges).to_expr()
        }
        _ => {
            let fd = AccessExpr::floordiv(r_expr, d);
            if q.terms.is_empty() && q.constant == 0 {
                fd
            } else {
                Linear::of(&(q_expr + fd), ranges).to_expr()
            }
        }
    }
}

fn simplify_mod(a: AccessExpr, d: i64, ranges: &VarRanges) -> AccessExpr {
    if d == 1 {
        return AccessExpr::Const(0);
    }
    if let AccessExpr::Mod(inner, d0) = &a {
        if d0 % d == 0 {
            return simplify_mod((**inner).clone(), d, ranges);
        }
    }
    let lin = Linear::of(&a, ranges);
    let (_, r) = lin.split_by(d);
    let r_expr = r.to_expr();
    match r_expr.bounds(ranges) {
        Some((lo, hi)) if lo.div_euclid(d) == hi.div_euclid(d) => {
            let k = lo.div_euclid(d);
            Linear::of(&(r_expr + AccessExpr::Const(-k * d)), ranges).to_expr()
        }
        _ => AccessExpr::modulo(r_expr, d),
    }
}
