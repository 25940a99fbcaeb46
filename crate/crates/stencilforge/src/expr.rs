//! Symbolic expression trees, canonicalization, and equation clusters.
//!
//! Every expression the pipeline works with is held in *canonical form*:
//!
//! * products are distributed over sums and sums inside division numerators
//!   are split, so a sum's terms are plain products, divisions, or leaves;
//! * a product carries at most one literal factor, stored first; divisions
//!   never nest and never sit inside a product;
//! * syntactically equal factors shared by a division's numerator and
//!   denominator cancel, and like terms of a sum are collected exactly
//!   (rational coefficient arithmetic), dropping true zeros;
//! * children are ordered by a total order on nodes. Products compare by
//!   their non-literal factor list first and the literal coefficient last;
//!   indexed accesses compare their space offsets with the innermost
//!   (fastest-varying) dimension most significant.
//!
//! Canonical forms make structural equality coincide with the equality the
//! optimization passes need (CSE keys, denominator identity, golden output
//! stability) without a general computer-algebra system.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::grid::{ConstantSymbol, DiscreteFunction, Grid};
use crate::rational::Rational;

/// One per-dimension index expression of an array access. `Shift(k)` is the
/// affine form `var + k`; `Stride(m)` is the non-affine form `var * m` that
/// the lowering refuses to offload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IndexExpr {
    Shift(i64),
    Stride(i64),
}

impl IndexExpr {
    pub fn shift(&self) -> Option<i64> {
        match self {
            IndexExpr::Shift(k) => Some(*k),
            IndexExpr::Stride(_) => None,
        }
    }
}

/// An access into a discrete function: optional time shift (`t + k`) and one
/// index expression per space dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexedAccess {
    pub func: String,
    pub time: Option<i64>,
    pub space: Vec<IndexExpr>,
}

impl IndexedAccess {
    pub fn shifts(&self) -> Option<Vec<i64>> {
        self.space.iter().map(|i| i.shift()).collect()
    }

    pub fn is_affine(&self) -> bool {
        self.space.iter().all(|i| matches!(i, IndexExpr::Shift(_)))
    }
}

/// An OPS kernel access: dataset name, positional accessor index and pure
/// space offsets. Produced by the OPS lowering, never by the DSL layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AccessorRef {
    pub dataset: String,
    pub index: usize,
    pub offsets: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Literal(Rational),
    /// Reference to a registered constant scalar.
    Symbol(String),
    /// Reference to an optimization temporary.
    Temp(String),
    Indexed(IndexedAccess),
    /// Dereferenced scalar kernel parameter (`*dt`). OPS lowering only.
    Deref(String),
    /// Accessor-macro array read/write (`ut0[OPS_ACC0(0,-1)]`). OPS lowering only.
    Accessor(AccessorRef),
    Power(Box<Expr>, u32),
    Div(Box<Expr>, Box<Expr>),
    Product(Vec<Expr>),
    Sum(Vec<Expr>),
}

impl Expr {
    pub fn int(n: i64) -> Expr {
        Expr::Literal(Rational::integer(n as i128))
    }

    pub fn rat(num: i128, den: i128) -> Expr {
        Expr::Literal(Rational::new(num, den))
    }

    pub fn sym(name: &str) -> Expr {
        Expr::Symbol(name.to_string())
    }

    pub fn access(func: &str, time: Option<i64>, offsets: &[i64]) -> Expr {
        Expr::Indexed(IndexedAccess {
            func: func.to_string(),
            time,
            space: offsets.iter().map(|&k| IndexExpr::Shift(k)).collect(),
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Literal(r) if r.is_zero())
    }

    fn rank(&self) -> u8 {
        match self {
            Expr::Literal(_) => 0,
            Expr::Symbol(_) | Expr::Deref(_) => 1,
            Expr::Indexed(_) | Expr::Accessor(_) => 2,
            Expr::Temp(_) => 3,
            Expr::Power(..) => 4,
            Expr::Div(..) => 5,
            Expr::Product(_) => 6,
            Expr::Sum(_) => 7,
        }
    }
}

/// Compare space index lists with the innermost dimension most significant.
fn cmp_space(a: &[IndexExpr], b: &[IndexExpr]) -> Ordering {
    a.len()
        .cmp(&b.len())
        .then_with(|| a.iter().rev().cmp(b.iter().rev()))
}

fn cmp_offsets(a: &[i64], b: &[i64]) -> Ordering {
    a.len()
        .cmp(&b.len())
        .then_with(|| a.iter().rev().cmp(b.iter().rev()))
}

fn cmp_slices(a: &[Expr], b: &[Expr]) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        let ord = cmp_expr(x, y);
        if ord != Ordering::Equal {
            return ord;
        }
    }
    a.len().cmp(&b.len())
}

/// Split a canonical product into (literal coefficient, non-literal factors).
fn split_coeff(factors: &[Expr]) -> (Rational, &[Expr]) {
    match factors.first() {
        Some(Expr::Literal(c)) => (*c, &factors[1..]),
        _ => (Rational::one(), factors),
    }
}

pub fn cmp_expr(a: &Expr, b: &Expr) -> Ordering {
    let ord = a.rank().cmp(&b.rank());
    if ord != Ordering::Equal {
        return ord;
    }
    match (a, b) {
        (Expr::Literal(x), Expr::Literal(y)) => x.cmp(y),
        (Expr::Symbol(x), Expr::Symbol(y)) => x.cmp(y),
        (Expr::Deref(x), Expr::Deref(y)) => x.cmp(y),
        (Expr::Symbol(x), Expr::Deref(y)) => x.cmp(y).then(Ordering::Less),
        (Expr::Deref(x), Expr::Symbol(y)) => x.cmp(y).then(Ordering::Greater),
        (Expr::Temp(x), Expr::Temp(y)) => x.cmp(y),
        (Expr::Indexed(x), Expr::Indexed(y)) => x
            .func
            .cmp(&y.func)
            .then_with(|| x.time.cmp(&y.time))
            .then_with(|| cmp_space(&x.space, &y.space)),
        (Expr::Accessor(x), Expr::Accessor(y)) => x
            .dataset
            .cmp(&y.dataset)
            .then_with(|| cmp_offsets(&x.offsets, &y.offsets))
            .then_with(|| x.index.cmp(&y.index)),
        (Expr::Indexed(_), Expr::Accessor(_)) => Ordering::Less,
        (Expr::Accessor(_), Expr::Indexed(_)) => Ordering::Greater,
        (Expr::Power(xb, xe), Expr::Power(yb, ye)) => {
            cmp_expr(xb, yb).then_with(|| xe.cmp(ye))
        }
        (Expr::Div(xn, xd), Expr::Div(yn, yd)) => {
            cmp_expr(xn, yn).then_with(|| cmp_expr(xd, yd))
        }
        (Expr::Product(xs), Expr::Product(ys)) => {
            let (xc, xf) = split_coeff(xs);
            let (yc, yf) = split_coeff(ys);
            cmp_slices(xf, yf).then_with(|| xc.cmp(&yc))
        }
        (Expr::Sum(xs), Expr::Sum(ys)) => cmp_slices(xs, ys),
        _ => unreachable!("rank already distinguished the variants"),
    }
}

impl PartialOrd for Expr {
    fn partial_cmp(&self, other: &Expr) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Expr {
    fn cmp(&self, other: &Expr) -> Ordering {
        cmp_expr(self, other)
    }
}

// ---------------------------------------------------------------------------
// Canonicalization
// ---------------------------------------------------------------------------

pub fn canon(e: &Expr) -> Expr {
    match e {
        Expr::Literal(_)
        | Expr::Symbol(_)
        | Expr::Temp(_)
        | Expr::Indexed(_)
        | Expr::Deref(_)
        | Expr::Accessor(_) => e.clone(),
        Expr::Power(base, exp) => {
            let b = canon(base);
            match (b, exp) {
                (_, 0) => Expr::Literal(Rational::one()),
                (b, 1) => b,
                (Expr::Literal(c), e) => Expr::Literal(c.pow(*e)),
                (b, e) => Expr::Power(Box::new(b), *e),
            }
        }
        Expr::Sum(terms) => add_canon(terms.iter().map(canon).collect()),
        Expr::Product(factors) => mul_canon(factors.iter().map(canon).collect()),
        Expr::Div(num, den) => div_canon(canon(num), canon(den)),
    }
}

pub fn mul(factors: Vec<Expr>) -> Expr {
    canon(&Expr::Product(factors))
}

pub fn add(terms: Vec<Expr>) -> Expr {
    canon(&Expr::Sum(terms))
}

pub fn div(num: Expr, den: Expr) -> Expr {
    canon(&Expr::Div(Box::new(num), Box::new(den)))
}

pub fn neg(e: Expr) -> Expr {
    mul(vec![Expr::int(-1), e])
}

/// Canonical product of already-canonical factors.
fn mul_canon(factors: Vec<Expr>) -> Expr {
    // Flatten nested products.
    let mut flat: Vec<Expr> = Vec::with_capacity(factors.len());
    for f in factors {
        match f {
            Expr::Product(inner) => flat.extend(inner),
            other => flat.push(other),
        }
    }
    // Distribute over the first sum factor, if any.
    if let Some(pos) = flat.iter().position(|f| matches!(f, Expr::Sum(_))) {
        let sum = flat.remove(pos);
        let Expr::Sum(terms) = sum else { unreachable!() };
        let products = terms
            .into_iter()
            .map(|t| {
                let mut fs = flat.clone();
                fs.push(t);
                mul_canon(fs)
            })
            .collect();
        return add_canon(products);
    }
    // Pull divisions out: (a/b)*(c/d)*e => (a*c*e)/(b*d).
    if flat.iter().any(|f| matches!(f, Expr::Div(..))) {
        let mut nums = Vec::new();
        let mut dens = Vec::new();
        for f in flat {
            match f {
                Expr::Div(n, d) => {
                    nums.push(*n);
                    dens.push(*d);
                }
                other => nums.push(other),
            }
        }
        return div_canon(mul_canon(nums), mul_canon(dens));
    }
    // Fold literals, sort the rest.
    let mut coeff = Rational::one();
    let mut rest: Vec<Expr> = Vec::new();
    for f in flat {
        match f {
            Expr::Literal(c) => coeff = coeff * c,
            other => rest.push(other),
        }
    }
    if coeff.is_zero() {
        return Expr::Literal(Rational::zero());
    }
    rest.sort_by(cmp_expr);
    if rest.is_empty() {
        return Expr::Literal(coeff);
    }
    if coeff.is_one() {
        if rest.len() == 1 {
            return rest.pop().unwrap();
        }
        return Expr::Product(rest);
    }
    let mut out = Vec::with_capacity(rest.len() + 1);
    out.push(Expr::Literal(coeff));
    out.extend(rest);
    Expr::Product(out)
}

/// Decompose a canonical term into (rational coefficient, symbolic part).
/// `None` marks a pure literal term.
fn decompose(term: &Expr) -> (Rational, Option<Expr>) {
    match term {
        Expr::Literal(c) => (*c, None),
        Expr::Product(fs) => {
            let (c, rest) = split_coeff(fs);
            let part = match rest.len() {
                0 => None,
                1 => Some(rest[0].clone()),
                _ => Some(Expr::Product(rest.to_vec())),
            };
            (c, part)
        }
        Expr::Div(n, d) => {
            let (c, p) = decompose(n);
            let num = p.unwrap_or_else(|| Expr::Literal(Rational::one()));
            (c, Some(Expr::Div(Box::new(num), d.clone())))
        }
        other => (Rational::one(), Some(other.clone())),
    }
}

fn rebuild(coeff: Rational, part: Option<Expr>) -> Option<Expr> {
    if coeff.is_zero() {
        return None;
    }
    let part = match part {
        None => return Some(Expr::Literal(coeff)),
        Some(p) => p,
    };
    if coeff.is_one() {
        return Some(part);
    }
    Some(match part {
        Expr::Div(n, d) => div_canon(mul_canon(vec![Expr::Literal(coeff), *n]), *d),
        Expr::Product(fs) => {
            let mut v = vec![Expr::Literal(coeff)];
            v.extend(fs);
            mul_canon(v)
        }
        other => mul_canon(vec![Expr::Literal(coeff), other]),
    })
}

/// Canonical sum of already-canonical terms: flatten, collect like terms
/// exactly, drop zeros, sort.
fn add_canon(terms: Vec<Expr>) -> Expr {
    let mut flat: Vec<Expr> = Vec::with_capacity(terms.len());
    for t in terms {
        match t {
            Expr::Sum(inner) => flat.extend(inner),
            other => flat.push(other),
        }
    }
    let mut literal = Rational::zero();
    let mut groups: Vec<(Expr, Rational)> = Vec::new();
    for t in flat {
        let (c, part) = decompose(&t);
        match part {
            None => literal = literal + c,
            Some(p) => {
                if let Some(slot) = groups.iter_mut().find(|(q, _)| *q == p) {
                    slot.1 = slot.1 + c;
                } else {
                    groups.push((p, c));
                }
            }
        }
    }
    let mut out: Vec<Expr> = Vec::new();
    if !literal.is_zero() {
        out.push(Expr::Literal(literal));
    }
    for (part, coeff) in groups {
        if let Some(term) = rebuild(coeff, Some(part)) {
            out.push(term);
        }
    }
    out.sort_by(cmp_expr);
    match out.len() {
        0 => Expr::Literal(Rational::zero()),
        1 => out.pop().unwrap(),
        _ => Expr::Sum(out),
    }
}

/// Canonical division of canonical operands.
fn div_canon(num: Expr, den: Expr) -> Expr {
    // Nested divisions merge into one.
    match (num, den) {
        (Expr::Div(an, ad), Expr::Div(bn, bd)) => {
            return div_canon(mul_canon(vec![*an, *bd]), mul_canon(vec![*ad, *bn]))
        }
        (Expr::Div(an, ad), d) => return div_canon(*an, mul_canon(vec![*ad, d])),
        (n, Expr::Div(bn, bd)) => return div_canon(mul_canon(vec![n, *bd]), *bn),
        (n, d) => {
            // Split sums in the numerator into per-term divisions.
            if let Expr::Sum(terms) = n {
                return add_canon(
                    terms
                        .into_iter()
                        .map(|t| div_canon(t, d.clone()))
                        .collect(),
                );
            }
            if n.is_zero() {
                return Expr::Literal(Rational::zero());
            }
            if let Expr::Literal(c) = d {
                assert!(!c.is_zero(), "division by literal zero");
                return mul_canon(vec![Expr::Literal(c.recip()), n]);
            }
            // Cancel syntactically equal factors between the two sides.
            let mut num_factors = match n {
                Expr::Product(fs) => fs,
                other => vec![other],
            };
            let mut den_factors = match d {
                Expr::Product(fs) => fs,
                other => vec![other],
            };
            let mut i = 0;
            while i < den_factors.len() {
                if matches!(den_factors[i], Expr::Literal(_)) {
                    i += 1;
                    continue;
                }
                if let Some(j) = num_factors
                    .iter()
                    .position(|f| !matches!(f, Expr::Literal(_)) && *f == den_factors[i])
                {
                    num_factors.remove(j);
                    den_factors.remove(i);
                } else {
                    i += 1;
                }
            }
            let n = mul_canon(num_factors);
            let d = mul_canon(den_factors);
            match d {
                Expr::Literal(c) => {
                    assert!(!c.is_zero(), "division by literal zero");
                    mul_canon(vec![Expr::Literal(c.recip()), n])
                }
                d => Expr::Div(Box::new(n), Box::new(d)),
            }
        }
    }
}

/// Replace every occurrence of `from` (by structural equality) with `to`,
/// then re-canonicalize.
pub fn substitute(e: &Expr, from: &Expr, to: &Expr) -> Expr {
    fn walk(e: &Expr, from: &Expr, to: &Expr) -> Expr {
        if e == from {
            return to.clone();
        }
        match e {
            Expr::Power(b, n) => Expr::Power(Box::new(walk(b, from, to)), *n),
            Expr::Div(n, d) => Expr::Div(
                Box::new(walk(n, from, to)),
                Box::new(walk(d, from, to)),
            ),
            Expr::Product(fs) => Expr::Product(fs.iter().map(|f| walk(f, from, to)).collect()),
            Expr::Sum(ts) => Expr::Sum(ts.iter().map(|t| walk(t, from, to)).collect()),
            other => other.clone(),
        }
    }
    canon(&walk(e, from, to))
}

// ---------------------------------------------------------------------------
// Queries
// ---------------------------------------------------------------------------

/// All indexed accesses in left-to-right depth-first order, duplicates kept.
pub fn retrieve_indexed(e: &Expr) -> Vec<IndexedAccess> {
    let mut out = Vec::new();
    fn walk(e: &Expr, out: &mut Vec<IndexedAccess>) {
        match e {
            Expr::Indexed(a) => out.push(a.clone()),
            Expr::Power(b, _) => walk(b, out),
            Expr::Div(n, d) => {
                walk(n, out);
                walk(d, out);
            }
            Expr::Product(fs) => fs.iter().for_each(|f| walk(f, out)),
            Expr::Sum(ts) => ts.iter().for_each(|t| walk(t, out)),
            _ => {}
        }
    }
    walk(e, &mut out);
    out
}

/// Names of every constant and function the expression references.
pub fn free_symbols(e: &Expr) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    fn walk(e: &Expr, out: &mut BTreeSet<String>) {
        match e {
            Expr::Symbol(s) | Expr::Deref(s) => {
                out.insert(s.clone());
            }
            Expr::Indexed(a) => {
                out.insert(a.func.clone());
            }
            Expr::Accessor(a) => {
                out.insert(a.dataset.clone());
            }
            Expr::Temp(_) | Expr::Literal(_) => {}
            Expr::Power(b, _) => walk(b, out),
            Expr::Div(n, d) => {
                walk(n, out);
                walk(d, out);
            }
            Expr::Product(fs) => fs.iter().for_each(|f| walk(f, out)),
            Expr::Sum(ts) => ts.iter().for_each(|t| walk(t, out)),
        }
    }
    walk(e, &mut out);
    out
}

/// Temp names referenced by an expression.
pub fn referenced_temps(e: &Expr) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    fn walk(e: &Expr, out: &mut BTreeSet<String>) {
        match e {
            Expr::Temp(t) => {
                out.insert(t.clone());
            }
            Expr::Power(b, _) => walk(b, out),
            Expr::Div(n, d) => {
                walk(n, out);
                walk(d, out);
            }
            Expr::Product(fs) => fs.iter().for_each(|f| walk(f, out)),
            Expr::Sum(ts) => ts.iter().for_each(|t| walk(t, out)),
            _ => {}
        }
    }
    walk(e, &mut out);
    out
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Literal(r) => write!(f, "{r}"),
            Expr::Symbol(s) => write!(f, "{s}"),
            Expr::Temp(t) => write!(f, "{t}"),
            Expr::Deref(s) => write!(f, "*{s}"),
            Expr::Indexed(a) => {
                write!(f, "{}", a.func)?;
                if let Some(k) = a.time {
                    write!(f, "[t{}{}]", if k >= 0 { "+" } else { "" }, k)?;
                }
                for ix in &a.space {
                    match ix {
                        IndexExpr::Shift(k) => write!(f, "[{k:+}]")?,
                        IndexExpr::Stride(m) => write!(f, "[*{m}]")?,
                    }
                }
                Ok(())
            }
            Expr::Accessor(a) => {
                write!(f, "{}[ACC{}(", a.dataset, a.index)?;
                for (i, o) in a.offsets.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{o}")?;
                }
                write!(f, ")]")
            }
            Expr::Power(b, n) => write!(f, "({b})^{n}"),
            Expr::Div(n, d) => write!(f, "({n})/({d})"),
            Expr::Product(fs) => {
                for (i, x) in fs.iter().enumerate() {
                    if i > 0 {
                        write!(f, "*")?;
                    }
                    write!(f, "({x})")?;
                }
                Ok(())
            }
            Expr::Sum(ts) => {
                for (i, x) in ts.iter().enumerate() {
                    if i > 0 {
                        write!(f, " + ")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Equations and clusters
// ---------------------------------------------------------------------------

/// An assignment: the left-hand side is a single write target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Eq {
    pub lhs: Expr,
    pub rhs: Expr,
}

impl Eq {
    pub fn new(lhs: Expr, rhs: Expr) -> Result<Eq> {
        match &lhs {
            Expr::Indexed(_) | Expr::Temp(_) => Ok(Eq {
                lhs,
                rhs: canon(&rhs),
            }),
            other => Err(Error::InvalidFunction(format!(
                "equation LHS must be an indexed access or temp, got {other}"
            ))),
        }
    }

    pub fn written_function(&self) -> Option<&IndexedAccess> {
        match &self.lhs {
            Expr::Indexed(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subdomain {
    Full,
    Interior,
}

/// A group of equations sharing one grid and iteration space, plus the
/// registries that make its symbols meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub equations: Vec<Eq>,
    pub grid: Grid,
    pub subdomain: Subdomain,
    pub functions: BTreeMap<String, DiscreteFunction>,
    pub constants: BTreeMap<String, ConstantSymbol>,
}

impl Cluster {
    pub fn new(
        equations: Vec<Eq>,
        grid: Grid,
        subdomain: Subdomain,
        functions: Vec<DiscreteFunction>,
        constants: Vec<ConstantSymbol>,
    ) -> Result<Cluster> {
        if equations.is_empty() {
            return Err(Error::EmptyCluster);
        }
        let functions: BTreeMap<String, DiscreteFunction> =
            functions.into_iter().map(|f| (f.name.clone(), f)).collect();
        let constants: BTreeMap<String, ConstantSymbol> =
            constants.into_iter().map(|c| (c.name.clone(), c)).collect();
        let mut written = BTreeSet::new();
        for eq in &equations {
            for name in free_symbols(&eq.lhs).union(&free_symbols(&eq.rhs)) {
                if !functions.contains_key(name) && !constants.contains_key(name) {
                    return Err(Error::UnboundSymbol(name.clone()));
                }
            }
            for f in functions.values() {
                if f.grid != grid {
                    return Err(Error::InvalidGrid(format!(
                        "function `{}` lives on a different grid",
                        f.name
                    )));
                }
            }
            if let Some(acc) = eq.written_function() {
                if functions
                    .get(&acc.func)
                    .map(|f| f.is_time_function())
                    .unwrap_or(false)
                {
                    written.insert(acc.func.clone());
                }
            }
        }
        if written.len() > 1 {
            return Err(Error::MultipleWrittenFunctions(written.into_iter().collect()));
        }
        Ok(Cluster {
            equations,
            grid,
            subdomain,
            functions,
            constants,
        })
    }

    /// The single written time function, when present.
    pub fn written_time_function(&self) -> Option<&DiscreteFunction> {
        self.equations.iter().find_map(|eq| {
            eq.written_function()
                .and_then(|a| self.functions.get(&a.func))
                .filter(|f| f.is_time_function())
        })
    }

    /// Iteration bounds per space dimension, in domain coordinates, as
    /// half-open [lo, hi) pairs.
    pub fn space_bounds(&self) -> Vec<(i64, i64)> {
        self.grid
            .shape
            .iter()
            .map(|&s| match self.subdomain {
                Subdomain::Full => (0, s as i64),
                Subdomain::Interior => (1, s as i64 - 1),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u_at(offs: &[i64]) -> Expr {
        Expr::access("u", Some(0), offs)
    }

    #[test]
    fn canonical_sorting_is_deterministic() {
        let a = add(vec![Expr::sym("b"), Expr::sym("a")]);
        let b = add(vec![Expr::sym("a"), Expr::sym("b")]);
        assert_eq!(a, b);
    }

    #[test]
    fn like_terms_collect_exactly() {
        // a + a => 2*a; a - a => 0
        let e = add(vec![Expr::sym("a"), Expr::sym("a")]);
        assert_eq!(e, mul(vec![Expr::int(2), Expr::sym("a")]));
        let z = add(vec![Expr::sym("a"), neg(Expr::sym("a"))]);
        assert!(z.is_zero());
    }

    #[test]
    fn products_distribute_over_sums() {
        // 2*(a + b) => 2*a + 2*b
        let e = mul(vec![
            Expr::int(2),
            Expr::Sum(vec![Expr::sym("a"), Expr::sym("b")]),
        ]);
        let expected = add(vec![
            mul(vec![Expr::int(2), Expr::sym("a")]),
            mul(vec![Expr::int(2), Expr::sym("b")]),
        ]);
        assert_eq!(e, expected);
    }

    #[test]
    fn division_cancels_common_factors() {
        // (dt*a)/dt => a
        let e = div(
            Expr::Product(vec![Expr::sym("dt"), Expr::sym("a")]),
            Expr::sym("dt"),
        );
        assert_eq!(e, Expr::sym("a"));
        // division by a literal becomes multiplication
        let e = div(Expr::sym("a"), Expr::int(2));
        assert_eq!(e, mul(vec![Expr::rat(1, 2), Expr::sym("a")]));
    }

    #[test]
    fn div_numerator_sums_split() {
        let e = div(
            Expr::Sum(vec![Expr::sym("a"), Expr::sym("b")]),
            Expr::sym("h"),
        );
        match &e {
            Expr::Sum(ts) => {
                assert_eq!(ts.len(), 2);
                assert!(ts.iter().all(|t| matches!(t, Expr::Div(..))));
            }
            other => panic!("expected a sum, got {other}"),
        }
    }

    #[test]
    fn innermost_dim_offsets_sort_first() {
        // u[0,-1] sorts before u[-1,0]: innermost dimension is most
        // significant in the canonical order.
        let e = add(vec![u_at(&[-1, 0]), u_at(&[0, -1])]);
        match &e {
            Expr::Sum(ts) => {
                assert_eq!(ts[0], u_at(&[0, -1]));
                assert_eq!(ts[1], u_at(&[-1, 0]));
            }
            other => panic!("expected a sum, got {other}"),
        }
    }

    #[test]
    fn canon_is_idempotent() {
        let e = div(
            Expr::Product(vec![
                Expr::rat(1, 2),
                Expr::sym("dt"),
                Expr::Sum(vec![u_at(&[-1, 0]), neg(u_at(&[0, 0]))]),
            ]),
            Expr::Product(vec![Expr::sym("h_x"), Expr::sym("h_x")]),
        );
        assert_eq!(canon(&e), e);
        let e2 = canon(&Expr::Sum(vec![e.clone(), e]));
        assert_eq!(canon(&e2), e2);
    }

    #[test]
    fn power_canonicalization() {
        assert_eq!(canon(&Expr::Power(Box::new(Expr::sym("a")), 1)), Expr::sym("a"));
        assert_eq!(
            canon(&Expr::Power(Box::new(Expr::sym("a")), 0)),
            Expr::Literal(Rational::one())
        );
        assert_eq!(
            canon(&Expr::Power(Box::new(Expr::int(3)), 2)),
            Expr::int(9)
        );
    }

    #[test]
    fn retrieve_indexed_order_and_duplicates() {
        // u[t+1][0][0] = u[t][0][0] + u[t][-1][0] has three accesses in
        // traversal order.
        let rhs = add(vec![u_at(&[0, 0]), u_at(&[-1, 0])]);
        let eq = Eq::new(Expr::access("u", Some(1), &[0, 0]), rhs).unwrap();
        let mut found = retrieve_indexed(&eq.lhs);
        found.extend(retrieve_indexed(&eq.rhs));
        assert_eq!(found.len(), 3);

        assert!(retrieve_indexed(&Expr::int(5)).is_empty());
    }

    #[test]
    fn retrieve_indexed_matches_recursive_walk_oracle() {
        // Independent oracle: a second, hand-written recursive walk.
        fn oracle(e: &Expr, out: &mut Vec<IndexedAccess>) {
            match e {
                Expr::Indexed(a) => out.push(a.clone()),
                Expr::Sum(xs) | Expr::Product(xs) => {
                    for x in xs {
                        oracle(x, out);
                    }
                }
                Expr::Div(a, b) => {
                    oracle(a, out);
                    oracle(b, out);
                }
                Expr::Power(b, _) => oracle(b, out),
                _ => {}
            }
        }
        let e = add(vec![
            mul(vec![u_at(&[1, 0]), u_at(&[0, 1])]),
            div(u_at(&[-1, 0]), u_at(&[0, -1])),
        ]);
        let mut expected = Vec::new();
        oracle(&e, &mut expected);
        assert_eq!(retrieve_indexed(&e), expected);
        assert_eq!(expected.len(), 4);
    }

    #[test]
    fn free_symbols_examples() {
        let e = div(
            Expr::Product(vec![Expr::sym("dt"), u_at(&[0, 0])]),
            Expr::Product(vec![Expr::sym("h_x"), Expr::sym("h_x")]),
        );
        let syms = free_symbols(&e);
        assert_eq!(
            syms.into_iter().collect::<Vec<_>>(),
            vec!["dt".to_string(), "h_x".to_string(), "u".to_string()]
        );
        assert!(free_symbols(&Expr::int(0)).is_empty());
    }

    #[test]
    fn cluster_validation() {
        let grid = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let u = DiscreteFunction::time("u", grid.clone(), 2, 1).unwrap();
        let eq = Eq::new(
            Expr::access("u", Some(1), &[0, 0]),
            Expr::access("u", Some(0), &[0, 0]),
        )
        .unwrap();
        let ok = Cluster::new(
            vec![eq.clone()],
            grid.clone(),
            Subdomain::Full,
            vec![u.clone()],
            vec![],
        );
        assert!(ok.is_ok());

        // unregistered symbol
        let bad = Eq::new(Expr::access("u", Some(1), &[0, 0]), Expr::sym("mystery")).unwrap();
        let err = Cluster::new(vec![bad], grid.clone(), Subdomain::Full, vec![u.clone()], vec![]);
        assert!(matches!(err, Err(Error::UnboundSymbol(_))));

        // two written time functions
        let v = DiscreteFunction::time("v", grid.clone(), 2, 1).unwrap();
        let eq2 = Eq::new(
            Expr::access("v", Some(1), &[0, 0]),
            Expr::access("v", Some(0), &[0, 0]),
        )
        .unwrap();
        let err = Cluster::new(
            vec![eq, eq2],
            grid.clone(),
            Subdomain::Full,
            vec![u, v],
            vec![],
        );
        assert!(matches!(err, Err(Error::MultipleWrittenFunctions(_))));

        let err = Cluster::new(vec![], grid, Subdomain::Full, vec![], vec![]);
        assert!(matches!(err, Err(Error::EmptyCluster)));
    }

    #[test]
    fn eq_lhs_must_be_write_target() {
        assert!(Eq::new(Expr::sym("a"), Expr::int(0)).is_err());
        assert!(Eq::new(Expr::Temp("tmp0".into()), Expr::int(0)).is_ok());
    }
}
