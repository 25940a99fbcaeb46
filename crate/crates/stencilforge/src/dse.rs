//! Symbolic-engine optimization passes over clusters.
//!
//! Three passes are implemented: common subexpression elimination (repeated
//! composite subtrees become temps, bound in first-use order, inner before
//! outer), reciprocal hoisting (each distinct division denominator becomes a
//! temp `r{i} = 1/D` and division sites turn into multiplications), and the
//! operation tally that feeds the benchmark harness. Denominator identity is
//! syntactic equality on canonical forms; no algebraic equivalences are
//! chased.

use std::collections::BTreeMap;

use crate::expr::{canon, mul, Cluster, Eq, Expr, Subdomain};
use crate::grid::{ConstantSymbol, DiscreteFunction, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DseMode {
    Noop,
    Advanced,
    Aggressive,
}

impl DseMode {
    pub fn parse(s: &str) -> Option<DseMode> {
        match s {
            "noop" => Some(DseMode::Noop),
            "advanced" => Some(DseMode::Advanced),
            "aggressive" => Some(DseMode::Aggressive),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DseMode::Noop => "noop",
            DseMode::Advanced => "advanced",
            DseMode::Aggressive => "aggressive",
        }
    }
}

/// A cluster after optimization: temp definitions in evaluation order plus
/// rewritten equations, carrying the original registries along.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedCluster {
    pub grid: Grid,
    pub subdomain: Subdomain,
    pub functions: BTreeMap<String, DiscreteFunction>,
    pub constants: BTreeMap<String, ConstantSymbol>,
    pub temps: Vec<(String, Expr)>,
    pub equations: Vec<Eq>,
}

impl OptimizedCluster {
    fn from_cluster(c: &Cluster, temps: Vec<(String, Expr)>, equations: Vec<Eq>) -> OptimizedCluster {
        OptimizedCluster {
            grid: c.grid.clone(),
            subdomain: c.subdomain,
            functions: c.functions.clone(),
            constants: c.constants.clone(),
            temps,
            equations,
        }
    }

    pub fn written_time_function(&self) -> Option<&DiscreteFunction> {
        self.equations.iter().find_map(|eq| {
            eq.written_function()
                .and_then(|a| self.functions.get(&a.func))
                .filter(|f| f.is_time_function())
        })
    }

    /// Every expression in evaluation order: temp definitions, then per
    /// equation LHS and RHS.
    pub fn all_exprs(&self) -> Vec<&Expr> {
        let mut out: Vec<&Expr> = self.temps.iter().map(|(_, e)| e).collect();
        for eq in &self.equations {
            out.push(&eq.lhs);
            out.push(&eq.rhs);
        }
        out
    }
}

/// Subtrees eligible for CSE binding: composite nodes only, so bare symbols,
/// literals and single array accesses are never bound. Division denominators
/// are left alone entirely: they belong to the reciprocal-hoisting pass, and
/// binding them would make the plain-CSE kernels cheaper than the hoisted
/// ones.
fn cse_eligible(e: &Expr) -> bool {
    matches!(
        e,
        Expr::Sum(_) | Expr::Product(_) | Expr::Div(..) | Expr::Power(..)
    )
}

fn count_subtrees(e: &Expr, counts: &mut BTreeMap<Expr, usize>) {
    match e {
        Expr::Power(b, _) => count_subtrees(b, counts),
        Expr::Div(n, _) => count_subtrees(n, counts),
        Expr::Product(fs) => fs.iter().for_each(|f| count_subtrees(f, counts)),
        Expr::Sum(ts) => ts.iter().for_each(|t| count_subtrees(t, counts)),
        _ => {}
    }
    if cse_eligible(e) {
        *counts.entry(e.clone()).or_insert(0) += 1;
    }
}

struct CseState {
    counts: BTreeMap<Expr, usize>,
    bound: BTreeMap<Expr, String>,
    temps: Vec<(String, Expr)>,
    next: usize,
}

impl CseState {
    /// Bottom-up rewrite: children first, so outer bindings reference inner
    /// temps. A node is bound the first time its original form is seen.
    fn rewrite(&mut self, e: &Expr) -> Expr {
        let rebuilt = match e {
            Expr::Power(b, n) => Expr::Power(Box::new(self.rewrite(b)), *n),
            Expr::Div(n, d) => Expr::Div(Box::new(self.rewrite(n)), d.clone()),
            Expr::Product(fs) => Expr::Product(fs.iter().map(|f| self.rewrite(f)).collect()),
            Expr::Sum(ts) => Expr::Sum(ts.iter().map(|t| self.rewrite(t)).collect()),
            other => other.clone(),
        };
        if cse_eligible(e) && self.counts.get(e).copied().unwrap_or(0) >= 2 {
            if let Some(name) = self.bound.get(e) {
                return Expr::Temp(name.clone());
            }
            let name = format!("tmp{}", self.next);
            self.next += 1;
            self.bound.insert(e.clone(), name.clone());
            self.temps.push((name.clone(), rebuilt));
            return Expr::Temp(name);
        }
        rebuilt
    }
}

/// Common subexpression elimination over a set of equations (and any temp
/// definitions already present, which keeps the aggressive pipeline honest).
pub fn cse(temps: &[(String, Expr)], eqs: &[Eq]) -> (Vec<(String, Expr)>, Vec<Eq>) {
    let mut counts = BTreeMap::new();
    for (_, e) in temps {
        count_subtrees(e, &mut counts);
    }
    for eq in eqs {
        count_subtrees(&eq.lhs, &mut counts);
        count_subtrees(&eq.rhs, &mut counts);
    }
    let mut state = CseState {
        counts,
        bound: BTreeMap::new(),
        temps: Vec::new(),
        next: 0,
    };
    let mut out_temps = Vec::new();
    for (name, e) in temps {
        let rewritten = state.rewrite(e);
        // New CSE temps must be defined before the definition that uses them.
        out_temps.append(&mut state.temps);
        out_temps.push((name.clone(), rewritten));
    }
    let mut out_eqs = Vec::with_capacity(eqs.len());
    for eq in eqs {
        let rhs = state.rewrite(&eq.rhs);
        out_temps.append(&mut state.temps);
        out_eqs.push(Eq {
            lhs: eq.lhs.clone(),
            rhs,
        });
    }
    (out_temps, out_eqs)
}

fn collect_denominators(e: &Expr, order: &mut Vec<Expr>) {
    match e {
        Expr::Div(n, d) => {
            collect_denominators(n, order);
            if !order.contains(d) {
                order.push((**d).clone());
            }
            collect_denominators(d, order);
        }
        Expr::Power(b, _) => collect_denominators(b, order),
        Expr::Product(fs) => fs.iter().for_each(|f| collect_denominators(f, order)),
        Expr::Sum(ts) => ts.iter().for_each(|t| collect_denominators(t, order)),
        _ => {}
    }
}

fn replace_divisions(e: &Expr, recips: &BTreeMap<Expr, String>) -> Expr {
    match e {
        Expr::Div(n, d) => {
            let n = replace_divisions(n, recips);
            match recips.get(&**d) {
                Some(name) => mul(vec![n, Expr::Temp(name.clone())]),
                None => Expr::Div(Box::new(n), Box::new(replace_divisions(d, recips))),
            }
        }
        Expr::Power(b, k) => Expr::Power(Box::new(replace_divisions(b, recips)), *k),
        Expr::Product(fs) => canon(&Expr::Product(
            fs.iter().map(|f| replace_divisions(f, recips)).collect(),
        )),
        Expr::Sum(ts) => canon(&Expr::Sum(
            ts.iter().map(|t| replace_divisions(t, recips)).collect(),
        )),
        other => other.clone(),
    }
}

/// Replace every division by a distinct denominator D with a multiplication
/// by a hoisted reciprocal `r{i} = 1/D`, numbered in first-occurrence order.
/// Afterwards the only divisions left are the reciprocal definitions.
pub fn hoist_reciprocals(eqs: &[Eq]) -> (Vec<(String, Expr)>, Vec<Eq>) {
    let mut order = Vec::new();
    for eq in eqs {
        collect_denominators(&eq.lhs, &mut order);
        collect_denominators(&eq.rhs, &mut order);
    }
    let mut temps = Vec::new();
    let mut recips = BTreeMap::new();
    for (i, den) in order.into_iter().enumerate() {
        let name = format!("r{i}");
        temps.push((
            name.clone(),
            Expr::Div(
                Box::new(Expr::Literal(crate::rational::Rational::one())),
                Box::new(den.clone()),
            ),
        ));
        recips.insert(den, name);
    }
    let out = eqs
        .iter()
        .map(|eq| Eq {
            lhs: eq.lhs.clone(),
            rhs: replace_divisions(&eq.rhs, &recips),
        })
        .collect();
    (temps, out)
}

/// Apply the selected optimization level to a cluster.
pub fn apply_dse(mode: DseMode, c: &Cluster) -> OptimizedCluster {
    match mode {
        DseMode::Noop => OptimizedCluster::from_cluster(c, Vec::new(), c.equations.clone()),
        DseMode::Advanced => {
            let (temps, eqs) = cse(&[], &c.equations);
            OptimizedCluster::from_cluster(c, temps, eqs)
        }
        DseMode::Aggressive => {
            let (recips, eqs) = hoist_reciprocals(&c.equations);
            let (temps, eqs) = cse(&recips, &eqs);
            OptimizedCluster::from_cluster(c, temps, eqs)
        }
    }
}

/// Arithmetic-operation tally. Power(b, n) counts as n-1 multiplications.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub add: usize,
    pub mul: usize,
    pub div: usize,
    pub pow: usize,
}

impl OpCounts {
    pub fn total(&self) -> usize {
        self.add + self.mul + self.div + self.pow
    }
}

impl std::ops::Add for OpCounts {
    type Output = OpCounts;
    fn add(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            add: self.add + rhs.add,
            mul: self.mul + rhs.mul,
            div: self.div + rhs.div,
            pow: self.pow + rhs.pow,
        }
    }
}

pub fn count_ops_expr(e: &Expr) -> OpCounts {
    let mut counts = OpCounts::default();
    fn walk(e: &Expr, counts: &mut OpCounts) {
        match e {
            Expr::Sum(ts) => {
                counts.add += ts.len().saturating_sub(1);
                ts.iter().for_each(|t| walk(t, counts));
            }
            Expr::Product(fs) => {
                counts.mul += fs.len().saturating_sub(1);
                fs.iter().for_each(|f| walk(f, counts));
            }
            Expr::Div(n, d) => {
                counts.div += 1;
                walk(n, counts);
                walk(d, counts);
            }
            Expr::Power(b, n) => {
                counts.mul += (*n as usize).saturating_sub(1);
                walk(b, counts);
            }
            _ => {}
        }
    }
    walk(e, &mut counts);
    counts
}

/// Tally over an optimized cluster, temp definitions included.
pub fn count_ops(c: &OptimizedCluster) -> OpCounts {
    c.all_exprs()
        .into_iter()
        .map(count_ops_expr)
        .fold(OpCounts::default(), |a, b| a + b)
}
