//! Iteration/Expression Tree: the loop-level IR between optimized clusters
//! and emitted source.
//!
//! `lower_cluster` builds the canonical program shape: one outer time loop
//! whose body defines the rotating time indices (`int t0 = (time) % n;`) and
//! then a section wrapping the space loop nest, with temp definitions and
//! update assignments at the innermost level. Visitors on the tree find
//! symbols (the three classic modes), substitute nodes, and detect affine
//! space-loop nests suitable for offload.

use std::collections::BTreeSet;

use crate::dse::OptimizedCluster;
use crate::error::{Error, Result};
use crate::expr::{free_symbols, referenced_temps, Eq, Expr};

/// Loop bound: an integer resolved at lowering time or a named symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Bound {
    Int(i64),
    Sym(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IterKind {
    Time,
    Space,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iteration {
    pub dim: String,
    pub kind: IterKind,
    pub lower: Bound,
    pub upper: Bound,
    pub body: Vec<IetNode>,
    /// Emit a parallel-for annotation on this loop.
    pub parallel: bool,
}

/// Statement-level payload of an ExpressionNode.
#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    /// `u[t1][x][y] = ...;`
    Assign(Eq),
    /// `float r0 = <expr>;`
    DefineScalar { name: String, rhs: Expr },
    /// `int t0 = (time + k) % n;`
    TimeIndexDef {
        name: String,
        loop_var: String,
        offset: usize,
        modulus: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Callable {
    pub name: String,
    /// Rendered C parameter declarations, in order.
    pub params: Vec<String>,
    pub body: Vec<IetNode>,
}

/// Argument of a call node. String-ish values mirror what the C emission
/// needs; nested calls are first-class.
#[derive(Debug, Clone, PartialEq)]
pub enum CallArg {
    Int(i64),
    Str(String),
    Sym(String),
    /// `u_dat[t0]` or `u_dat[1]`
    SymIndexed(String, Box<CallArg>),
    /// `&dt`
    AddrOf(String),
    /// `&u[0]`: pointer to one time slot of a function buffer.
    TimeAccess(FunctionTimeAccess),
    /// `(int *)u_dim`
    IntPtrCast(String),
    /// Function pointer, printed bare: `Kernel0`
    FnPtr(String),
    /// Identifier supplied by the target environment (API macros, stdout,
    /// main's argc/argv); never a program symbol.
    Extern(String),
    Nested(Box<Call>),
}

/// Pointer to the array of a time function at a fixed buffer slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionTimeAccess {
    pub function: String,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub callee: String,
    pub args: Vec<CallArg>,
    /// True when the call stands alone as a statement (trailing semicolon).
    pub is_statement: bool,
}

impl Call {
    pub fn statement(callee: &str, args: Vec<CallArg>) -> Call {
        Call {
            callee: callee.to_string(),
            args,
            is_statement: true,
        }
    }

    pub fn nested(callee: &str, args: Vec<CallArg>) -> Call {
        Call {
            callee: callee.to_string(),
            args,
            is_statement: false,
        }
    }
}

/// Initialization / declaration statement. Covers `int u_dim[2] = {..};`,
/// `ops_dat u_dat[2];`, `u_dat[0] = ops_decl_dat(..);` and
/// `ops_stencil S = ops_decl_stencil(..);`.
#[derive(Debug, Clone, PartialEq)]
pub struct Initializer {
    /// Declared C type; `None` for plain assignments to existing symbols.
    pub c_type: Option<String>,
    pub name: String,
    pub array_len: Option<usize>,
    /// Assignment target index (`u_dat[0] = ...`).
    pub index: Option<CallArg>,
    pub init: Option<InitValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitValue {
    Ints(Vec<i64>),
    Call(Call),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub body: Vec<IetNode>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IetNode {
    Expression(Stmt),
    Iteration(Iteration),
    Callable(Callable),
    Call(Call),
    Initializer(Initializer),
    List(Vec<IetNode>),
    Section(Section),
}

/// The rotating time indices t0..t(n-1) with formulas t_k = (time + k) mod n.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeIndexSet {
    pub loop_var: String,
    pub modulus: usize,
}

impl TimeIndexSet {
    pub fn new(loop_var: &str, modulus: usize) -> TimeIndexSet {
        TimeIndexSet {
            loop_var: loop_var.to_string(),
            modulus,
        }
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.modulus).map(|k| format!("t{k}")).collect()
    }

    pub fn name(&self, k: usize) -> String {
        format!("t{k}")
    }

    /// The buffer slot t_k takes at a given step.
    pub fn slot(&self, time: usize, k: usize) -> usize {
        (time + k) % self.modulus
    }

    pub fn defs(&self) -> Vec<Stmt> {
        (0..self.modulus)
            .map(|k| Stmt::TimeIndexDef {
                name: self.name(k),
                loop_var: self.loop_var.clone(),
                offset: k,
                modulus: self.modulus,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Lowering
// ---------------------------------------------------------------------------

/// Lower an optimized cluster to the canonical IET: time loop, rotating
/// index definitions, then a section holding the space nest with temps and
/// updates innermost.
pub fn lower_cluster(opt: &OptimizedCluster, nt_symbol: &str) -> Result<IetNode> {
    if opt.equations.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let written: BTreeSet<String> = opt
        .equations
        .iter()
        .filter_map(|eq| eq.written_function())
        .filter(|a| {
            opt.functions
                .get(&a.func)
                .map(|f| f.is_time_function())
                .unwrap_or(false)
        })
        .map(|a| a.func.clone())
        .collect();
    if written.len() != 1 {
        return Err(Error::MultipleWrittenFunctions(written.into_iter().collect()));
    }
    let func = opt
        .written_time_function()
        .expect("written function present");
    let rotation = TimeIndexSet::new("time", func.num_buffers());

    let mut innermost: Vec<IetNode> = opt
        .temps
        .iter()
        .map(|(name, rhs)| {
            IetNode::Expression(Stmt::DefineScalar {
                name: name.clone(),
                rhs: rhs.clone(),
            })
        })
        .collect();
    innermost.extend(
        opt.equations
            .iter()
            .map(|eq| IetNode::Expression(Stmt::Assign(eq.clone()))),
    );

    let bounds = {
        let shape = &opt.grid.shape;
        shape
            .iter()
            .map(|&s| match opt.subdomain {
                crate::expr::Subdomain::Full => (0i64, s as i64),
                crate::expr::Subdomain::Interior => (1i64, s as i64 - 1),
            })
            .collect::<Vec<_>>()
    };
    let mut nest = innermost;
    for (d, (lo, hi)) in bounds.iter().enumerate().rev() {
        nest = vec![IetNode::Iteration(Iteration {
            dim: opt.grid.dims[d].clone(),
            kind: IterKind::Space,
            lower: Bound::Int(*lo),
            upper: Bound::Int(*hi),
            body: nest,
            parallel: false,
        })];
    }

    let mut time_body: Vec<IetNode> = rotation.defs().into_iter().map(IetNode::Expression).collect();
    time_body.push(IetNode::Section(Section {
        name: "section_0".to_string(),
        body: nest,
    }));

    Ok(IetNode::Iteration(Iteration {
        dim: "time".to_string(),
        kind: IterKind::Time,
        lower: Bound::Int(0),
        upper: Bound::Sym(nt_symbol.to_string()),
        body: time_body,
        parallel: false,
    }))
}

// ---------------------------------------------------------------------------
// Affine tree detection
// ---------------------------------------------------------------------------

/// One loop of an affine nest, with constant bounds in domain coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopSpec {
    pub dim: String,
    pub lower: i64,
    pub upper: i64,
}

/// A maximal affine space-loop nest: the loops outside-in, the statements of
/// the innermost body, and the section that hosts it (substitution target).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTree {
    pub section: Option<Section>,
    pub loops: Vec<LoopSpec>,
    pub stmts: Vec<Stmt>,
}

fn stmt_exprs(stmt: &Stmt) -> Vec<&Expr> {
    match stmt {
        Stmt::Assign(eq) => vec![&eq.lhs, &eq.rhs],
        Stmt::DefineScalar { rhs, .. } => vec![rhs],
        Stmt::TimeIndexDef { .. } => vec![],
    }
}

fn expr_is_affine(e: &Expr) -> bool {
    crate::expr::retrieve_indexed(e).iter().all(|a| a.is_affine())
        && match e {
            Expr::Power(b, _) => expr_is_affine(b),
            Expr::Div(n, d) => expr_is_affine(n) && expr_is_affine(d),
            Expr::Product(fs) => fs.iter().all(expr_is_affine),
            Expr::Sum(ts) => ts.iter().all(expr_is_affine),
            _ => true,
        }
}

/// Try to read a space-loop nest rooted at `iter` as an affine tree.
fn extract_affine(iter: &Iteration) -> Option<(Vec<LoopSpec>, Vec<Stmt>)> {
    if iter.kind != IterKind::Space {
        return None;
    }
    let (Bound::Int(lo), Bound::Int(hi)) = (&iter.lower, &iter.upper) else {
        return None;
    };
    let mut loops = vec![LoopSpec {
        dim: iter.dim.clone(),
        lower: *lo,
        upper: *hi,
    }];
    let mut body = &iter.body;
    loop {
        if body.len() == 1 {
            if let IetNode::Iteration(inner) = &body[0] {
                if inner.kind != IterKind::Space {
                    return None;
                }
                let (Bound::Int(lo), Bound::Int(hi)) = (&inner.lower, &inner.upper) else {
                    return None;
                };
                loops.push(LoopSpec {
                    dim: inner.dim.clone(),
                    lower: *lo,
                    upper: *hi,
                });
                body = &inner.body;
                continue;
            }
        }
        break;
    }
    let mut stmts = Vec::new();
    for node in body {
        match node {
            IetNode::Expression(stmt) => {
                if !stmt_exprs(stmt).into_iter().all(expr_is_affine) {
                    return None;
                }
                stmts.push(stmt.clone());
            }
            _ => return None,
        }
    }
    if stmts.is_empty() {
        return None;
    }
    Some((loops, stmts))
}

/// Find maximal affine space-loop nests. The time loop is never part of a
/// tree; returned trees are node-disjoint by construction.
pub fn find_affine_trees(root: &IetNode) -> Vec<IterationTree> {
    let mut out = Vec::new();
    fn walk(node: &IetNode, enclosing: Option<&Section>, out: &mut Vec<IterationTree>) {
        match node {
            IetNode::Iteration(iter) => {
                if let Some((loops, stmts)) = extract_affine(iter) {
                    out.push(IterationTree {
                        section: enclosing.cloned(),
                        loops,
                        stmts,
                    });
                } else {
                    for child in &iter.body {
                        walk(child, None, out);
                    }
                }
            }
            IetNode::Section(section) => {
                // A section wrapping exactly one affine nest is the
                // substitution unit.
                for child in &section.body {
                    walk(child, Some(section), out);
                }
            }
            IetNode::List(children) => {
                for child in children {
                    walk(child, None, out);
                }
            }
            IetNode::Callable(c) => {
                for child in &c.body {
                    walk(child, None, out);
                }
            }
            _ => {}
        }
    }
    walk(root, None, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Symbol finding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolMode {
    /// Data symbols: functions and constants referenced anywhere.
    Symbolics,
    /// Every referenced name, loop variables and temps included.
    Free,
    /// Names bound inside the tree.
    Defines,
}

fn call_arg_symbols(arg: &CallArg, free: &mut BTreeSet<String>, data: &mut BTreeSet<String>) {
    match arg {
        CallArg::Sym(s) => {
            free.insert(s.clone());
        }
        CallArg::SymIndexed(s, idx) => {
            free.insert(s.clone());
            call_arg_symbols(idx, free, data);
        }
        CallArg::AddrOf(s) => {
            free.insert(s.clone());
            data.insert(s.clone());
        }
        CallArg::TimeAccess(t) => {
            free.insert(t.function.clone());
            data.insert(t.function.clone());
        }
        CallArg::IntPtrCast(s) => {
            free.insert(s.clone());
        }
        CallArg::FnPtr(_) | CallArg::Extern(_) => {}
        CallArg::Nested(call) => {
            for a in &call.args {
                call_arg_symbols(a, free, data);
            }
        }
        CallArg::Int(_) | CallArg::Str(_) => {}
    }
}

fn collect_symbols(
    node: &IetNode,
    free: &mut BTreeSet<String>,
    data: &mut BTreeSet<String>,
    defines: &mut BTreeSet<String>,
) {
    match node {
        IetNode::Expression(stmt) => match stmt {
            Stmt::Assign(eq) => {
                for e in [&eq.lhs, &eq.rhs] {
                    let syms = free_symbols(e);
                    free.extend(syms.iter().cloned());
                    data.extend(syms);
                    free.extend(referenced_temps(e));
                }
                if let Expr::Temp(name) = &eq.lhs {
                    defines.insert(name.clone());
                }
            }
            Stmt::DefineScalar { name, rhs } => {
                defines.insert(name.clone());
                let syms = free_symbols(rhs);
                free.extend(syms.iter().cloned());
                data.extend(syms);
                free.extend(referenced_temps(rhs));
            }
            Stmt::TimeIndexDef { name, loop_var, .. } => {
                defines.insert(name.clone());
                free.insert(loop_var.clone());
            }
        },
        IetNode::Iteration(iter) => {
            defines.insert(iter.dim.clone());
            for b in [&iter.lower, &iter.upper] {
                if let Bound::Sym(s) = b {
                    free.insert(s.clone());
                }
            }
            for child in &iter.body {
                collect_symbols(child, free, data, defines);
            }
        }
        IetNode::Callable(c) => {
            for child in &c.body {
                collect_symbols(child, free, data, defines);
            }
        }
        IetNode::Call(call) => {
            for arg in &call.args {
                call_arg_symbols(arg, free, data);
            }
        }
        IetNode::Initializer(init) => {
            defines.insert(init.name.clone());
            if let Some(CallArg::Sym(s)) = &init.index {
                free.insert(s.clone());
            }
            if let Some(InitValue::Call(call)) = &init.init {
                for arg in &call.args {
                    call_arg_symbols(arg, free, data);
                }
            }
        }
        IetNode::List(children) => {
            for child in children {
                collect_symbols(child, free, data, defines);
            }
        }
        IetNode::Section(section) => {
            for child in &section.body {
                collect_symbols(child, free, data, defines);
            }
        }
    }
}

pub fn find_symbols(root: &IetNode, mode: SymbolMode) -> BTreeSet<String> {
    let mut free = BTreeSet::new();
    let mut data = BTreeSet::new();
    let mut defines = BTreeSet::new();
    collect_symbols(root, &mut free, &mut data, &mut defines);
    match mode {
        SymbolMode::Free => free,
        SymbolMode::Symbolics => data,
        SymbolMode::Defines => defines,
    }
}

// ---------------------------------------------------------------------------
// Substitution
// ---------------------------------------------------------------------------

/// Rebuild the tree with every occurrence of a mapping key replaced by its
/// image. Keys that never matched are reported back by index.
pub fn transform_substitute(root: &IetNode, mapping: &[(IetNode, IetNode)]) -> (IetNode, Vec<usize>) {
    fn walk(node: &IetNode, mapping: &[(IetNode, IetNode)], hit: &mut Vec<bool>) -> IetNode {
        for (i, (key, image)) in mapping.iter().enumerate() {
            if node == key {
                hit[i] = true;
                return image.clone();
            }
        }
        match node {
            IetNode::Iteration(iter) => IetNode::Iteration(Iteration {
                body: iter.body.iter().map(|c| walk(c, mapping, hit)).collect(),
                ..iter.clone()
            }),
            IetNode::Callable(c) => IetNode::Callable(Callable {
                name: c.name.clone(),
                params: c.params.clone(),
                body: c.body.iter().map(|x| walk(x, mapping, hit)).collect(),
            }),
            IetNode::List(children) => {
                IetNode::List(children.iter().map(|c| walk(c, mapping, hit)).collect())
            }
            IetNode::Section(section) => IetNode::Section(Section {
                name: section.name.clone(),
                body: section.body.iter().map(|c| walk(c, mapping, hit)).collect(),
            }),
            other => other.clone(),
        }
    }
    let mut hit = vec![false; mapping.len()];
    let out = walk(root, mapping, &mut hit);
    let missed = hit
        .iter()
        .enumerate()
        .filter(|(_, h)| !**h)
        .map(|(i, _)| i)
        .collect();
    (out, missed)
}

// ---------------------------------------------------------------------------
// Parameter derivation
// ---------------------------------------------------------------------------

/// Symbol registries needed to classify derived parameters.
pub struct SymbolClasses<'a> {
    pub functions: &'a std::collections::BTreeMap<String, crate::grid::DiscreteFunction>,
    pub constants: &'a std::collections::BTreeMap<String, crate::grid::ConstantSymbol>,
}

/// Parameters of a lowered program: (symbolics ∪ free) − defines, ordered
/// functions first, then scalars, then dimension extents, each alphabetical.
pub fn derive_parameters(root: &IetNode, classes: &SymbolClasses) -> Vec<String> {
    let mut free = BTreeSet::new();
    let mut data = BTreeSet::new();
    let mut defines = BTreeSet::new();
    collect_symbols(root, &mut free, &mut data, &mut defines);
    let all: BTreeSet<String> = free.union(&data).cloned().collect();
    let params: Vec<String> = all.difference(&defines).cloned().collect();
    let mut functions = Vec::new();
    let mut scalars = Vec::new();
    let mut extents = Vec::new();
    for p in params {
        if classes.functions.contains_key(&p) {
            functions.push(p);
        } else if classes.constants.contains_key(&p) {
            scalars.push(p);
        } else {
            extents.push(p);
        }
    }
    functions.sort();
    scalars.sort();
    extents.sort();
    functions.into_iter().chain(scalars).chain(extents).collect()
}

/// Total node count, for substitution census checks.
pub fn node_census(root: &IetNode) -> usize {
    let mut n = 1;
    match root {
        IetNode::Iteration(iter) => {
            n += iter.body.iter().map(node_census).sum::<usize>();
        }
        IetNode::Callable(c) => {
            n += c.body.iter().map(node_census).sum::<usize>();
        }
        IetNode::List(children) => {
            n += children.iter().map(node_census).sum::<usize>();
        }
        IetNode::Section(section) => {
            n += section.body.iter().map(node_census).sum::<usize>();
        }
        _ => {}
    }
    n
}
