//! Lowering of affine loop nests to an OPS-level program description:
//! kernels using accessor macros, dataset/stencil/range declarations, and
//! parallel-loop invocations, assembled into the final program tree.
//!
//! Kernel parameters are sorted arrays-then-scalars, each group alphabetical,
//! and accessor indices equal parameter positions. Datasets take their names
//! from the function plus the time accessor (`u[t0]` becomes `ut0`); scalars
//! are passed by pointer and dereferenced inside the kernel body.

use std::collections::{BTreeMap, BTreeSet};

use crate::dse::OptimizedCluster;
use crate::error::{Error, Result};
use crate::expr::{AccessorRef, Eq, Expr};
use crate::grid::{DiscreteFunction, ElementKind};
use crate::iet::{
    find_affine_trees, transform_substitute, Call, CallArg, FunctionTimeAccess, IetNode,
    Initializer, InitValue, IterationTree, Section, Stmt, TimeIndexSet,
};

pub const BLOCK_NAME: &str = "block_0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessMode {
    Read,
    Write,
    ReadWrite,
}

impl AccessMode {
    pub fn c_name(&self) -> &'static str {
        match self {
            AccessMode::Read => "OPS_READ",
            AccessMode::Write => "OPS_WRITE",
            AccessMode::ReadWrite => "OPS_RW",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamKind {
    Array { read_only: bool },
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelParam {
    pub name: String,
    pub kind: ParamKind,
}

/// A generated OPS kernel: numbered name, sorted parameters, and a body of
/// scalar definitions plus accessor-rewritten assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct OpsKernel {
    pub name: String,
    pub params: Vec<KernelParam>,
    pub body: Vec<Stmt>,
}

impl OpsKernel {
    pub fn array_params(&self) -> impl Iterator<Item = &KernelParam> {
        self.params
            .iter()
            .filter(|p| matches!(p.kind, ParamKind::Array { .. }))
    }
}

/// Declaration data for one ops_dat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpsDat {
    pub func: String,
    /// Buffer slot wrapped by this dat; `None` for space functions.
    pub slot: Option<usize>,
    pub dims: Vec<i64>,
    pub base: Vec<i64>,
    pub d_m: Vec<i64>,
    pub d_p: Vec<i64>,
    pub type_name: String,
    /// Dataset label, e.g. "ut0".
    pub name: String,
}

/// The set of relative offsets a kernel touches on one dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpsStencil {
    pub dims: usize,
    pub dataset: String,
    pub points: BTreeSet<Vec<i64>>,
}

impl OpsStencil {
    pub fn npoints(&self) -> usize {
        self.points.len()
    }

    /// Lowercase data-array name: s{dims}d_{dataset}_{points}pt.
    pub fn name(&self) -> String {
        format!("s{}d_{}_{}pt", self.dims, self.dataset, self.npoints())
    }

    /// Uppercase declared ops_stencil symbol.
    pub fn decl_name(&self) -> String {
        self.name().to_uppercase()
    }

    /// Points flattened in lexicographic order.
    pub fn flat_points(&self) -> Vec<i64> {
        let mut sorted: Vec<&Vec<i64>> = self.points.iter().collect();
        sorted.sort();
        sorted.into_iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParLoopArg {
    Dat {
        func: String,
        /// Time accessor index k (the dat array is indexed by t_k); `None`
        /// for space functions.
        shift: Option<usize>,
        dataset: String,
        stencil: String,
        mode: AccessMode,
    },
    Gbl {
        name: String,
    },
}

/// Descriptor of one ops_par_loop invocation, args in kernel-parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParLoop {
    pub kernel: usize,
    pub block: String,
    pub dims: usize,
    pub range_name: String,
    pub range: Vec<i64>,
    pub args: Vec<ParLoopArg>,
}

/// The specialized program: the assembled tree for emission plus structured
/// descriptors for the virtual runtime and the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct OpsProgram {
    pub tree: IetNode,
    pub kernels: Vec<OpsKernel>,
    pub dats: Vec<OpsDat>,
    pub stencils: Vec<OpsStencil>,
    pub par_loops: Vec<ParLoop>,
    pub ranges: Vec<(String, Vec<i64>)>,
    pub rotation: Option<TimeIndexSet>,
    /// False when no affine trees were found and the tree is untouched.
    pub offloaded: bool,
}

// ---------------------------------------------------------------------------
// Dataset naming
// ---------------------------------------------------------------------------

/// Dataset name for every (function, time shift) pair used by the equations:
/// `u[t0]` becomes `ut0`; space functions keep their own name.
pub fn name_time_accesses(
    exprs: &[&Expr],
    functions: &BTreeMap<String, DiscreteFunction>,
) -> Result<BTreeMap<(String, Option<i64>), String>> {
    let mut map = BTreeMap::new();
    for e in exprs {
        for acc in crate::expr::retrieve_indexed(e) {
            let f = functions
                .get(&acc.func)
                .ok_or_else(|| Error::UnboundSymbol(acc.func.clone()))?;
            let name = match (f.time_order, acc.time) {
                (Some(order), Some(k)) => {
                    if k < 0 || k > order as i64 {
                        return Err(Error::ShiftOutOfRange {
                            function: acc.func.clone(),
                            shift: k,
                        });
                    }
                    format!("{}t{}", acc.func, k)
                }
                (None, None) => acc.func.clone(),
                (None, Some(k)) => {
                    return Err(Error::ShiftOutOfRange {
                        function: acc.func.clone(),
                        shift: k,
                    })
                }
                (Some(_), None) => {
                    return Err(Error::ShiftOutOfRange {
                        function: acc.func.clone(),
                        shift: i64::MIN,
                    })
                }
            };
            map.insert((acc.func.clone(), acc.time), name);
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Expression translation
// ---------------------------------------------------------------------------

struct TranslateCtx<'a> {
    naming: &'a BTreeMap<(String, Option<i64>), String>,
    indices: &'a BTreeMap<String, usize>,
    constants: &'a BTreeSet<String>,
}

fn translate_expr(e: &Expr, ctx: &TranslateCtx) -> Result<Expr> {
    Ok(match e {
        Expr::Indexed(acc) => {
            let offsets = acc
                .shifts()
                .ok_or_else(|| Error::NonAffineAccess(acc.func.clone()))?;
            let dataset = ctx.naming[&(acc.func.clone(), acc.time)].clone();
            let index = ctx.indices[&dataset];
            Expr::Accessor(AccessorRef {
                dataset,
                index,
                offsets,
            })
        }
        Expr::Symbol(s) if ctx.constants.contains(s) => Expr::Deref(s.clone()),
        Expr::Power(b, n) => Expr::Power(Box::new(translate_expr(b, ctx)?), *n),
        Expr::Div(n, d) => Expr::Div(
            Box::new(translate_expr(n, ctx)?),
            Box::new(translate_expr(d, ctx)?),
        ),
        Expr::Product(fs) => Expr::Product(
            fs.iter()
                .map(|f| translate_expr(f, ctx))
                .collect::<Result<_>>()?,
        ),
        Expr::Sum(ts) => Expr::Sum(
            ts.iter()
                .map(|t| translate_expr(t, ctx))
                .collect::<Result<_>>()?,
        ),
        other => other.clone(),
    })
}

/// Rewrite kernel statements to accessor form and derive the parameter list.
/// LHS accesses mark their dataset written; datasets only read stay const.
pub fn translate_expressions(
    temps: &[(String, Expr)],
    eqs: &[Eq],
    functions: &BTreeMap<String, DiscreteFunction>,
    constants: &BTreeSet<String>,
) -> Result<(Vec<Stmt>, Vec<KernelParam>)> {
    let mut exprs: Vec<&Expr> = temps.iter().map(|(_, e)| e).collect();
    for eq in eqs {
        exprs.push(&eq.lhs);
        exprs.push(&eq.rhs);
    }
    let naming = name_time_accesses(&exprs, functions)?;

    let mut written: BTreeSet<String> = BTreeSet::new();
    for eq in eqs {
        match &eq.lhs {
            Expr::Indexed(acc) => {
                if !acc.is_affine() {
                    return Err(Error::NonAffineAccess(acc.func.clone()));
                }
                written.insert(naming[&(acc.func.clone(), acc.time)].clone());
            }
            other => {
                return Err(Error::WriteToScalar(other.to_string()));
            }
        }
    }

    let mut scalars: BTreeSet<String> = BTreeSet::new();
    for e in &exprs {
        for s in crate::expr::free_symbols(e) {
            if constants.contains(&s) {
                scalars.insert(s);
            }
        }
    }

    // Arrays first, then scalars, each alphabetical; accessor index equals
    // parameter position.
    let arrays: Vec<String> = naming.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut params: Vec<KernelParam> = Vec::new();
    let mut indices = BTreeMap::new();
    for (i, a) in arrays.iter().enumerate() {
        indices.insert(a.clone(), i);
        params.push(KernelParam {
            name: a.clone(),
            kind: ParamKind::Array {
                read_only: !written.contains(a),
            },
        });
    }
    for s in &scalars {
        params.push(KernelParam {
            name: s.clone(),
            kind: ParamKind::Scalar,
        });
    }

    let ctx = TranslateCtx {
        naming: &naming,
        indices: &indices,
        constants,
    };
    let mut body = Vec::new();
    for (name, rhs) in temps {
        body.push(Stmt::DefineScalar {
            name: name.clone(),
            rhs: translate_expr(rhs, &ctx)?,
        });
    }
    for eq in eqs {
        body.push(Stmt::Assign(Eq {
            lhs: translate_expr(&eq.lhs, &ctx)?,
            rhs: translate_expr(&eq.rhs, &ctx)?,
        }));
    }
    Ok((body, params))
}

// ---------------------------------------------------------------------------
// Stencil extraction
// ---------------------------------------------------------------------------

/// Per-dataset space-offset sets, the union over every equation (and temp
/// definition), grouped by the time accessor for time functions.
pub fn extract_stencils(
    temps: &[(String, Expr)],
    eqs: &[Eq],
    functions: &BTreeMap<String, DiscreteFunction>,
) -> Result<BTreeMap<String, OpsStencil>> {
    let mut exprs: Vec<&Expr> = temps.iter().map(|(_, e)| e).collect();
    for eq in eqs {
        exprs.push(&eq.lhs);
        exprs.push(&eq.rhs);
    }
    let naming = name_time_accesses(&exprs, functions)?;
    let mut out: BTreeMap<String, OpsStencil> = BTreeMap::new();
    for e in &exprs {
        for acc in crate::expr::retrieve_indexed(e) {
            let offsets = acc
                .shifts()
                .ok_or_else(|| Error::NonAffineAccess(acc.func.clone()))?;
            let dataset = naming[&(acc.func.clone(), acc.time)].clone();
            let dims = offsets.len();
            out.entry(dataset.clone())
                .or_insert_with(|| OpsStencil {
                    dims,
                    dataset,
                    points: BTreeSet::new(),
                })
                .points
                .insert(offsets);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset declarations
// ---------------------------------------------------------------------------

fn int_array_init(name: &str, values: Vec<i64>) -> IetNode {
    IetNode::Initializer(Initializer {
        c_type: Some("int".to_string()),
        name: name.to_string(),
        array_len: Some(values.len()),
        index: None,
        init: Some(InitValue::Ints(values)),
    })
}

fn decl_dat_call(f: &DiscreteFunction, slot: Option<usize>, kind: ElementKind, label: &str) -> Call {
    let data_ptr = match slot {
        Some(k) => CallArg::TimeAccess(FunctionTimeAccess {
            function: f.name.clone(),
            slot: k,
        }),
        None => CallArg::Sym(f.name.clone()),
    };
    Call::nested(
        "ops_decl_dat",
        vec![
            CallArg::Sym(BLOCK_NAME.to_string()),
            CallArg::Int(1),
            CallArg::IntPtrCast(format!("{}_dim", f.name)),
            CallArg::IntPtrCast(format!("{}_base", f.name)),
            CallArg::IntPtrCast(format!("{}_d_m", f.name)),
            CallArg::IntPtrCast(format!("{}_d_p", f.name)),
            data_ptr,
            CallArg::Str(kind.c_name().to_string()),
            CallArg::Str(label.to_string()),
        ],
    )
}

/// Integer metadata arrays plus one ops_dat per used slot. The negative
/// padding flips sign; base indexes are always zeros.
pub fn build_dat_decls(
    f: &DiscreteFunction,
    used_slots: &[usize],
    kind: ElementKind,
) -> (Vec<IetNode>, Vec<OpsDat>) {
    let padded: Vec<i64> = f.padded_shape().iter().map(|&s| s as i64).collect();
    let ndim = padded.len();
    let halo = f.halo() as i64;
    let mut nodes = vec![
        int_array_init(&format!("{}_dim", f.name), padded.clone()),
        int_array_init(&format!("{}_base", f.name), vec![0; ndim]),
        int_array_init(&format!("{}_d_p", f.name), vec![halo; ndim]),
        int_array_init(&format!("{}_d_m", f.name), vec![-halo; ndim]),
    ];
    let mut dats = Vec::new();
    let meta = |slot: Option<usize>, label: &str| OpsDat {
        func: f.name.clone(),
        slot,
        dims: padded.clone(),
        base: vec![0; ndim],
        d_m: vec![-halo; ndim],
        d_p: vec![halo; ndim],
        type_name: kind.c_name().to_string(),
        name: label.to_string(),
    };
    if f.is_time_function() {
        let len = used_slots.iter().max().map(|&m| m + 1).unwrap_or(0);
        nodes.push(IetNode::Initializer(Initializer {
            c_type: Some("ops_dat".to_string()),
            name: format!("{}_dat", f.name),
            array_len: Some(len),
            index: None,
            init: None,
        }));
        for &k in used_slots {
            let label = format!("{}t{}", f.name, k);
            nodes.push(IetNode::Initializer(Initializer {
                c_type: None,
                name: format!("{}_dat", f.name),
                array_len: None,
                index: Some(CallArg::Int(k as i64)),
                init: Some(InitValue::Call(decl_dat_call(f, Some(k), kind, &label))),
            }));
            dats.push(meta(Some(k), &label));
        }
    } else {
        nodes.push(IetNode::Initializer(Initializer {
            c_type: Some("ops_dat".to_string()),
            name: format!("{}_dat", f.name),
            array_len: None,
            index: None,
            init: Some(InitValue::Call(decl_dat_call(f, None, kind, &f.name))),
        }));
        dats.push(meta(None, &f.name));
    }
    (nodes, dats)
}

// ---------------------------------------------------------------------------
// Range and par-loop construction
// ---------------------------------------------------------------------------

/// Iteration range of an affine tree: per dimension (start, end),
/// start-inclusive end-exclusive, in domain coordinates.
pub fn build_range(tree: &IterationTree) -> Vec<i64> {
    tree.loops
        .iter()
        .flat_map(|l| [l.lower, l.upper])
        .collect()
}

/// The nested ops_par_loop call for one kernel, args in parameter order.
pub fn build_par_loop(
    kernel: &OpsKernel,
    kernel_index: usize,
    range_name: &str,
    range: &[i64],
    stencils: &BTreeMap<String, OpsStencil>,
    dataset_sources: &BTreeMap<String, (String, Option<usize>)>,
    kind: ElementKind,
    rotation: Option<&TimeIndexSet>,
) -> Result<(Call, ParLoop)> {
    let dims = range.len() / 2;
    let mut args = Vec::new();
    let mut descr_args = Vec::new();
    for param in &kernel.params {
        match &param.kind {
            ParamKind::Array { read_only } => {
                let (func, slot) = dataset_sources
                    .get(&param.name)
                    .ok_or_else(|| Error::UnboundSymbol(param.name.clone()))?;
                let stencil = stencils
                    .get(&param.name)
                    .ok_or_else(|| Error::UnboundSymbol(param.name.clone()))?;
                let mode = if *read_only {
                    AccessMode::Read
                } else if kernel.body.iter().any(|stmt| {
                    let exprs: Vec<&Expr> = match stmt {
                        Stmt::Assign(eq) => vec![&eq.rhs],
                        Stmt::DefineScalar { rhs, .. } => vec![rhs],
                        Stmt::TimeIndexDef { .. } => vec![],
                    };
                    exprs.into_iter().any(|e| reads_dataset(e, &param.name))
                }) {
                    AccessMode::ReadWrite
                } else {
                    AccessMode::Write
                };
                let dat_ref = match slot {
                    Some(k) => {
                        let rot = rotation.ok_or_else(|| {
                            Error::InvalidFunction("rotating dat without a time loop".into())
                        })?;
                        CallArg::SymIndexed(
                            format!("{func}_dat"),
                            Box::new(CallArg::Sym(rot.name(*k))),
                        )
                    }
                    None => CallArg::Sym(format!("{func}_dat")),
                };
                args.push(CallArg::Nested(Box::new(Call::nested(
                    "ops_arg_dat",
                    vec![
                        dat_ref,
                        CallArg::Int(1),
                        CallArg::Sym(stencil.decl_name()),
                        CallArg::Str(kind.c_name().to_string()),
                        CallArg::Extern(mode.c_name().to_string()),
                    ],
                ))));
                descr_args.push(ParLoopArg::Dat {
                    func: func.clone(),
                    shift: *slot,
                    dataset: param.name.clone(),
                    stencil: stencil.decl_name(),
                    mode,
                });
            }
            ParamKind::Scalar => {
                args.push(CallArg::Nested(Box::new(Call::nested(
                    "ops_arg_gbl",
                    vec![
                        CallArg::AddrOf(param.name.clone()),
                        CallArg::Int(1),
                        CallArg::Str(kind.c_name().to_string()),
                        CallArg::Extern(AccessMode::Read.c_name().to_string()),
                    ],
                ))));
                descr_args.push(ParLoopArg::Gbl {
                    name: param.name.clone(),
                });
            }
        }
    }
    let mut call_args = vec![
        CallArg::FnPtr(kernel.name.clone()),
        CallArg::Str(kernel.name.clone()),
        CallArg::Sym(BLOCK_NAME.to_string()),
        CallArg::Int(dims as i64),
        CallArg::Sym(range_name.to_string()),
    ];
    call_args.extend(args);
    let call = Call::statement("ops_par_loop", call_args);
    let descriptor = ParLoop {
        kernel: kernel_index,
        block: BLOCK_NAME.to_string(),
        dims,
        range_name: range_name.to_string(),
        range: range.to_vec(),
        args: descr_args,
    };
    Ok((call, descriptor))
}

fn reads_dataset(e: &Expr, dataset: &str) -> bool {
    match e {
        Expr::Accessor(a) => a.dataset == dataset,
        Expr::Power(b, _) => reads_dataset(b, dataset),
        Expr::Div(n, d) => reads_dataset(n, dataset) || reads_dataset(d, dataset),
        Expr::Product(fs) => fs.iter().any(|f| reads_dataset(f, dataset)),
        Expr::Sum(ts) => ts.iter().any(|t| reads_dataset(t, dataset)),
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Whole-program specialization
// ---------------------------------------------------------------------------

/// Transform a lowered IET into the OPS program: affine space nests become
/// kernels invoked through ops_par_loop, wrapped with initialization,
/// declarations, timing output and shutdown in the documented order.
pub fn specialize_program(
    root: &IetNode,
    opt: &OptimizedCluster,
    kind: ElementKind,
) -> Result<OpsProgram> {
    let trees = find_affine_trees(root);
    if trees.is_empty() {
        return Ok(OpsProgram {
            tree: root.clone(),
            kernels: Vec::new(),
            dats: Vec::new(),
            stencils: Vec::new(),
            par_loops: Vec::new(),
            ranges: Vec::new(),
            rotation: None,
            offloaded: false,
        });
    }
    let rotation = opt
        .written_time_function()
        .map(|f| TimeIndexSet::new("time", f.num_buffers()));
    let constant_names: BTreeSet<String> = opt.constants.keys().cloned().collect();

    let mut kernels = Vec::new();
    let mut stencils_by_name: BTreeMap<String, OpsStencil> = BTreeMap::new();
    let mut stencil_order: Vec<String> = Vec::new();
    let mut used_slots: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let mut ranges = Vec::new();
    let mut par_loops = Vec::new();
    let mut substitutions = Vec::new();
    let mut decl_nodes_stencils: Vec<IetNode> = Vec::new();

    for (i, tree) in trees.iter().enumerate() {
        let mut temps: Vec<(String, Expr)> = Vec::new();
        let mut eqs: Vec<Eq> = Vec::new();
        for stmt in &tree.stmts {
            match stmt {
                Stmt::DefineScalar { name, rhs } => temps.push((name.clone(), rhs.clone())),
                Stmt::Assign(eq) => eqs.push(eq.clone()),
                Stmt::TimeIndexDef { .. } => {}
            }
        }
        let (body, params) = translate_expressions(&temps, &eqs, &opt.functions, &constant_names)?;
        let per_dataset = extract_stencils(&temps, &eqs, &opt.functions)?;

        // Dataset -> (function, slot) mapping for arg construction.
        let mut exprs: Vec<&Expr> = temps.iter().map(|(_, e)| e).collect();
        for eq in &eqs {
            exprs.push(&eq.lhs);
            exprs.push(&eq.rhs);
        }
        let naming = name_time_accesses(&exprs, &opt.functions)?;
        let mut sources: BTreeMap<String, (String, Option<usize>)> = BTreeMap::new();
        for ((func, shift), dataset) in &naming {
            let slot = shift.map(|k| k as usize);
            sources.insert(dataset.clone(), (func.clone(), slot));
            if let Some(k) = slot {
                used_slots.entry(func.clone()).or_default().insert(k);
            } else {
                used_slots.entry(func.clone()).or_default();
            }
        }

        for stencil in per_dataset.values() {
            let decl = stencil.name();
            match stencils_by_name.get(&decl) {
                Some(existing) if existing.points != stencil.points => {
                    return Err(Error::StencilNameClash(decl));
                }
                Some(_) => {}
                None => {
                    stencils_by_name.insert(decl.clone(), stencil.clone());
                    stencil_order.push(decl.clone());
                    decl_nodes_stencils.push(int_array_init(
                        &stencil.name(),
                        stencil.flat_points(),
                    ));
                    decl_nodes_stencils.push(IetNode::Initializer(Initializer {
                        c_type: Some("ops_stencil".to_string()),
                        name: stencil.decl_name(),
                        array_len: None,
                        index: None,
                        init: Some(InitValue::Call(Call::nested(
                            "ops_decl_stencil",
                            vec![
                                CallArg::Int(stencil.dims as i64),
                                CallArg::Int(stencil.npoints() as i64),
                                CallArg::IntPtrCast(stencil.name()),
                                CallArg::Str(stencil.decl_name()),
                            ],
                        ))),
                    }));
                }
            }
        }

        let kernel = OpsKernel {
            name: format!("Kernel{i}"),
            params,
            body,
        };
        let range = build_range(tree);
        let range_name = format!("range_{i}");
        decl_nodes_stencils.push(int_array_init(&range_name, range.clone()));
        ranges.push((range_name.clone(), range.clone()));

        let (call, descriptor) = build_par_loop(
            &kernel,
            i,
            &range_name,
            &range,
            &per_dataset,
            &sources,
            kind,
            rotation.as_ref(),
        )?;
        kernels.push(kernel);
        par_loops.push(descriptor);
        if let Some(section) = &tree.section {
            substitutions.push((
                IetNode::Section(section.clone()),
                IetNode::Call(call),
            ));
        } else {
            // An affine nest outside a section: wrap in a synthetic section
            // key so the substitution still has a unique target.
            substitutions.push((
                IetNode::Section(Section {
                    name: format!("anonymous_{i}"),
                    body: Vec::new(),
                }),
                IetNode::Call(call),
            ));
        }
    }

    let (transformed, _missed) = transform_substitute(root, &substitutions);

    let mut dat_nodes = Vec::new();
    let mut dats = Vec::new();
    for (func, slots) in &used_slots {
        let f = &opt.functions[func];
        let slots: Vec<usize> = slots.iter().copied().collect();
        let (nodes, descriptors) = build_dat_decls(f, &slots, kind);
        dat_nodes.extend(nodes);
        dats.extend(descriptors);
    }

    let ndim = opt.grid.ndim();
    let init = IetNode::List(vec![
        IetNode::Call(Call::statement(
            "ops_init",
            vec![
                CallArg::Extern("argc".to_string()),
                CallArg::Extern("argv".to_string()),
                CallArg::Int(1),
            ],
        )),
        IetNode::Initializer(Initializer {
            c_type: Some("ops_block".to_string()),
            name: BLOCK_NAME.to_string(),
            array_len: None,
            index: None,
            init: Some(InitValue::Call(Call::nested(
                "ops_decl_block",
                vec![
                    CallArg::Int(ndim as i64),
                    CallArg::Str(BLOCK_NAME.to_string()),
                ],
            ))),
        }),
    ]);

    let tree = IetNode::List(vec![
        init,
        IetNode::List(dat_nodes),
        IetNode::List(decl_nodes_stencils),
        transformed,
        IetNode::Call(Call::statement(
            "ops_timing_output",
            vec![CallArg::Extern("stdout".to_string())],
        )),
        IetNode::Call(Call::statement("ops_exit", vec![])),
    ]);

    let stencils = stencil_order
        .into_iter()
        .map(|name| stencils_by_name[&name].clone())
        .collect();

    Ok(OpsProgram {
        tree,
        kernels,
        dats,
        stencils,
        par_loops,
        ranges,
        rotation,
        offloaded: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::IndexedAccess;
    use crate::grid::Grid;

    fn grid2() -> Grid {
        Grid::new(&[8, 8], &[1.0, 1.0]).unwrap()
    }

    fn funcs(fs: Vec<DiscreteFunction>) -> BTreeMap<String, DiscreteFunction> {
        fs.into_iter().map(|f| (f.name.clone(), f)).collect()
    }

    #[test]
    fn naming_time_accesses() {
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let e0 = Expr::access("u", Some(0), &[0, 0]);
        let e1 = Expr::access("u", Some(1), &[0, 0]);
        let map = name_time_accesses(&[&e0, &e1], &funcs(vec![u])).unwrap();
        assert_eq!(map[&("u".to_string(), Some(0))], "ut0");
        assert_eq!(map[&("u".to_string(), Some(1))], "ut1");

        let m = DiscreteFunction::space("m", grid2(), 2).unwrap();
        let e = Expr::access("m", None, &[0, 0]);
        let map = name_time_accesses(&[&e], &funcs(vec![m])).unwrap();
        assert_eq!(map[&("m".to_string(), None)], "m");

        let w = DiscreteFunction::time("w", grid2(), 2, 2).unwrap();
        let accs: Vec<Expr> = (0..3).map(|k| Expr::access("w", Some(k), &[0, 0])).collect();
        let refs: Vec<&Expr> = accs.iter().collect();
        let map = name_time_accesses(&refs, &funcs(vec![w])).unwrap();
        assert_eq!(
            map.values().cloned().collect::<Vec<_>>(),
            vec!["wt0", "wt1", "wt2"]
        );

        // shift outside the buffer range
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let bad = Expr::access("u", Some(-1), &[0, 0]);
        assert!(matches!(
            name_time_accesses(&[&bad], &funcs(vec![u])),
            Err(Error::ShiftOutOfRange { .. })
        ));
    }

    #[test]
    fn translate_copy_equation() {
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let eq = Eq::new(
            Expr::access("u", Some(1), &[0, 0]),
            Expr::access("u", Some(0), &[0, 0]),
        )
        .unwrap();
        let (body, params) =
            translate_expressions(&[], &[eq], &funcs(vec![u]), &BTreeSet::new()).unwrap();
        assert_eq!(params.len(), 2);
        assert_eq!(params[0].name, "ut0");
        assert_eq!(params[0].kind, ParamKind::Array { read_only: true });
        assert_eq!(params[1].name, "ut1");
        assert_eq!(params[1].kind, ParamKind::Array { read_only: false });
        let Stmt::Assign(eq) = &body[0] else { panic!() };
        assert_eq!(
            eq.lhs,
            Expr::Accessor(AccessorRef {
                dataset: "ut1".into(),
                index: 1,
                offsets: vec![0, 0]
            })
        );
        assert_eq!(
            eq.rhs,
            Expr::Accessor(AccessorRef {
                dataset: "ut0".into(),
                index: 0,
                offsets: vec![0, 0]
            })
        );
    }

    #[test]
    fn translate_constant_rhs() {
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let eq = Eq::new(Expr::access("u", Some(1), &[0, 0]), Expr::sym("c")).unwrap();
        let constants: BTreeSet<String> = ["c".to_string()].into();
        let (body, params) =
            translate_expressions(&[], &[eq], &funcs(vec![u]), &constants).unwrap();
        assert_eq!(params.len(), 2);
        assert_eq!(params[0].name, "ut1");
        assert_eq!(params[0].kind, ParamKind::Array { read_only: false });
        assert_eq!(params[1].name, "c");
        assert_eq!(params[1].kind, ParamKind::Scalar);
        let Stmt::Assign(eq) = &body[0] else { panic!() };
        assert_eq!(eq.rhs, Expr::Deref("c".into()));
    }

    #[test]
    fn translate_rejects_bad_writes() {
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let eq = Eq {
            lhs: Expr::Temp("s".into()),
            rhs: Expr::int(0),
        };
        assert!(matches!(
            translate_expressions(&[], &[eq], &funcs(vec![u.clone()]), &BTreeSet::new()),
            Err(Error::WriteToScalar(_))
        ));

        let strided = Expr::Indexed(IndexedAccess {
            func: "u".into(),
            time: Some(0),
            space: vec![
                crate::expr::IndexExpr::Stride(2),
                crate::expr::IndexExpr::Shift(0),
            ],
        });
        let eq = Eq::new(Expr::access("u", Some(1), &[0, 0]), strided).unwrap();
        assert!(matches!(
            translate_expressions(&[], &[eq], &funcs(vec![u]), &BTreeSet::new()),
            Err(Error::NonAffineAccess(_))
        ));
    }

    #[test]
    fn stencils_worked_example() {
        // u[t1] = u[t0] + u[t0][x-1]
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let eq = Eq::new(
            Expr::access("u", Some(1), &[0, 0]),
            crate::expr::add(vec![
                Expr::access("u", Some(0), &[0, 0]),
                Expr::access("u", Some(0), &[-1, 0]),
            ]),
        )
        .unwrap();
        let map = extract_stencils(&[], &[eq], &funcs(vec![u])).unwrap();
        let ut1: Vec<Vec<i64>> = map["ut1"].points.iter().cloned().collect();
        assert_eq!(ut1, vec![vec![0, 0]]);
        let ut0: BTreeSet<Vec<i64>> = map["ut0"].points.clone();
        assert_eq!(
            ut0,
            BTreeSet::from([vec![0, 0], vec![-1, 0]])
        );
        assert_eq!(map["ut0"].name(), "s2d_ut0_2pt");
    }

    #[test]
    fn stencil_counts_match_independent_access_scan() {
        // Independent route: group retrieve_indexed output by
        // (function, time shift) and count distinct offset tuples.
        let setup =
            crate::problems::diffusion(&[8, 8], 4, 10, ElementKind::F32, true).unwrap();
        let opt = crate::dse::apply_dse(crate::dse::DseMode::Advanced, &setup.cluster);
        let map = extract_stencils(&opt.temps, &opt.equations, &opt.functions).unwrap();
        let mut scan: BTreeMap<(String, Option<i64>), BTreeSet<Vec<i64>>> = BTreeMap::new();
        for e in opt.all_exprs() {
            for acc in crate::expr::retrieve_indexed(e) {
                scan.entry((acc.func.clone(), acc.time))
                    .or_default()
                    .insert(acc.shifts().unwrap());
            }
        }
        assert_eq!(scan.len(), map.len());
        for ((func, shift), offsets) in scan {
            let dataset = format!("{}t{}", func, shift.unwrap());
            assert_eq!(map[&dataset].npoints(), offsets.len());
            assert_eq!(map[&dataset].points, offsets);
        }
        // so=4 star stencil: 4 points per dimension plus the center.
        assert_eq!(map["ut0"].npoints(), 9);
        assert_eq!(map["ut0"].name(), "s2d_ut0_9pt");
    }

    #[test]
    fn build_range_examples() {
        let full = IterationTree {
            section: None,
            loops: vec![
                crate::iet::LoopSpec {
                    dim: "x".into(),
                    lower: 0,
                    upper: 8,
                },
                crate::iet::LoopSpec {
                    dim: "y".into(),
                    lower: 0,
                    upper: 8,
                },
            ],
            stmts: vec![],
        };
        assert_eq!(build_range(&full), vec![0, 8, 0, 8]);

        let interior = IterationTree {
            section: None,
            loops: vec![
                crate::iet::LoopSpec {
                    dim: "x".into(),
                    lower: 1,
                    upper: 7,
                },
                crate::iet::LoopSpec {
                    dim: "y".into(),
                    lower: 1,
                    upper: 7,
                },
            ],
            stmts: vec![],
        };
        assert_eq!(build_range(&interior), vec![1, 7, 1, 7]);

        let one_d = IterationTree {
            section: None,
            loops: vec![crate::iet::LoopSpec {
                dim: "x".into(),
                lower: 0,
                upper: 5,
            }],
            stmts: vec![],
        };
        assert_eq!(build_range(&one_d), vec![0, 5]);
    }

    #[test]
    fn dat_decls_large_grid_numbers() {
        // 3333^2, so=2, slots {0,1}: dims {3337,3337}, d_p {2,2}, d_m {-2,-2}.
        let grid = Grid::new(&[3333, 3333], &[1.0, 1.0]).unwrap();
        let u = DiscreteFunction::time("u", grid, 2, 1).unwrap();
        let (nodes, dats) = build_dat_decls(&u, &[0, 1], ElementKind::F32);
        assert_eq!(dats.len(), 2);
        assert_eq!(dats[0].dims, vec![3337, 3337]);
        assert_eq!(dats[0].base, vec![0, 0]);
        assert_eq!(dats[0].d_p, vec![2, 2]);
        assert_eq!(dats[0].d_m, vec![-2, -2]);
        assert_eq!(dats[0].name, "ut0");
        assert_eq!(dats[1].name, "ut1");
        // dim, base, d_p, d_m arrays + ops_dat decl + two assignments
        assert_eq!(nodes.len(), 7);
        let IetNode::Initializer(first) = &nodes[0] else {
            panic!()
        };
        assert_eq!(first.name, "u_dim");
        assert_eq!(first.init, Some(InitValue::Ints(vec![3337, 3337])));
    }

    #[test]
    fn dat_decls_space_function_and_single_slot() {
        let m = DiscreteFunction::space("m", grid2(), 2).unwrap();
        let (nodes, dats) = build_dat_decls(&m, &[], ElementKind::F32);
        assert_eq!(dats.len(), 1);
        assert_eq!(dats[0].name, "m");
        assert_eq!(dats[0].dims, vec![12, 12]);
        assert_eq!(nodes.len(), 5);

        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let (nodes, dats) = build_dat_decls(&u, &[0], ElementKind::F32);
        assert_eq!(dats.len(), 1);
        let IetNode::Initializer(arr) = &nodes[4] else {
            panic!()
        };
        assert_eq!(arr.array_len, Some(1));
    }
}

#[cfg(test)]
mod par_loop_tests {
    use super::*;
    use crate::dse::{apply_dse, DseMode};
    use crate::expr::Subdomain;
    use crate::grid::Grid;
    use crate::iet::{lower_cluster, IetNode};

    fn diffusion_program(mode: DseMode) -> (crate::dse::OptimizedCluster, OpsProgram) {
        let setup =
            crate::problems::diffusion(&[8, 8], 2, 10, ElementKind::F32, true).unwrap();
        let opt = apply_dse(mode, &setup.cluster);
        let root = lower_cluster(&opt, "nt").unwrap();
        let program = specialize_program(&root, &opt, ElementKind::F32).unwrap();
        (opt, program)
    }

    #[test]
    fn par_loop_args_follow_kernel_params() {
        let (_, program) = diffusion_program(DseMode::Aggressive);
        let kernel = &program.kernels[0];
        let pl = &program.par_loops[0];
        assert_eq!(pl.args.len(), kernel.params.len());
        for (arg, param) in pl.args.iter().zip(&kernel.params) {
            match (arg, &param.kind) {
                (ParLoopArg::Dat { dataset, .. }, ParamKind::Array { .. }) => {
                    assert_eq!(dataset, &param.name)
                }
                (ParLoopArg::Gbl { name }, ParamKind::Scalar) => assert_eq!(name, &param.name),
                other => panic!("arg/param mismatch: {other:?}"),
            }
        }
        // diffusion: dat(ut0, READ), dat(ut1, WRITE), then three gbl scalars
        match &pl.args[0] {
            ParLoopArg::Dat { mode, shift, .. } => {
                assert_eq!(*mode, AccessMode::Read);
                assert_eq!(*shift, Some(0));
            }
            other => panic!("{other:?}"),
        }
        match &pl.args[1] {
            ParLoopArg::Dat { mode, shift, .. } => {
                assert_eq!(*mode, AccessMode::Write);
                assert_eq!(*shift, Some(1));
            }
            other => panic!("{other:?}"),
        }
        let gbls: Vec<&str> = pl.args[2..]
            .iter()
            .map(|a| match a {
                ParLoopArg::Gbl { name } => name.as_str(),
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(gbls, vec!["dt", "h_x", "h_y"]);
    }

    #[test]
    fn copy_kernel_has_two_dat_args_and_no_gbls() {
        let grid = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let u = crate::grid::DiscreteFunction::time("u", grid.clone(), 2, 1).unwrap();
        let eq = Eq::new(
            Expr::access("u", Some(1), &[0, 0]),
            Expr::access("u", Some(0), &[0, 0]),
        )
        .unwrap();
        let cluster =
            crate::expr::Cluster::new(vec![eq], grid, Subdomain::Full, vec![u], vec![]).unwrap();
        let opt = apply_dse(DseMode::Noop, &cluster);
        let root = lower_cluster(&opt, "nt").unwrap();
        let program = specialize_program(&root, &opt, ElementKind::F32).unwrap();
        let pl = &program.par_loops[0];
        assert_eq!(pl.args.len(), 2);
        assert!(pl
            .args
            .iter()
            .all(|a| matches!(a, ParLoopArg::Dat { .. })));
    }

    #[test]
    fn accessor_indices_match_param_positions() {
        let (_, program) = diffusion_program(DseMode::Aggressive);
        let kernel = &program.kernels[0];
        let positions: std::collections::BTreeMap<&str, usize> = kernel
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect();
        fn walk(e: &Expr, positions: &std::collections::BTreeMap<&str, usize>) {
            match e {
                Expr::Accessor(a) => {
                    assert_eq!(a.index, positions[a.dataset.as_str()]);
                }
                Expr::Sum(xs) | Expr::Product(xs) => {
                    xs.iter().for_each(|x| walk(x, positions))
                }
                Expr::Div(a, b) => {
                    walk(a, positions);
                    walk(b, positions);
                }
                Expr::Power(b, _) => walk(b, positions),
                _ => {}
            }
        }
        for stmt in &kernel.body {
            match stmt {
                Stmt::Assign(eq) => {
                    walk(&eq.lhs, &positions);
                    walk(&eq.rhs, &positions);
                }
                Stmt::DefineScalar { rhs, .. } => walk(rhs, &positions),
                Stmt::TimeIndexDef { .. } => {}
            }
        }
    }

    #[test]
    fn specialized_tree_has_six_elements_in_order() {
        let (_, program) = diffusion_program(DseMode::Aggressive);
        let IetNode::List(children) = &program.tree else {
            panic!("expected the assembled list");
        };
        assert_eq!(children.len(), 6);
        // 1: init + block decl
        let IetNode::List(init) = &children[0] else { panic!() };
        assert!(matches!(&init[0], IetNode::Call(c) if c.callee == "ops_init"));
        assert!(
            matches!(&init[1], IetNode::Initializer(i) if i.name == BLOCK_NAME && i.c_type.as_deref() == Some("ops_block"))
        );
        // 2: dat decls
        let IetNode::List(dats) = &children[1] else { panic!() };
        assert!(dats
            .iter()
            .any(|n| matches!(n, IetNode::Initializer(i) if i.name == "u_dim")));
        // 3: stencil decls + range arrays
        let IetNode::List(stencils) = &children[2] else { panic!() };
        assert!(stencils
            .iter()
            .any(|n| matches!(n, IetNode::Initializer(i) if i.name == "range_0")));
        // 4: the transformed IET (time loop with the par loop inside)
        assert!(matches!(&children[3], IetNode::Iteration(i) if i.dim == "time"));
        // 5 and 6: timing output, shutdown
        assert!(matches!(&children[4], IetNode::Call(c) if c.callee == "ops_timing_output"));
        assert!(matches!(&children[5], IetNode::Call(c) if c.callee == "ops_exit"));
    }

    #[test]
    fn specialized_tree_parameters_stay_resolvable() {
        // Everything consumed by the emitted declarations is reachable by
        // the symbol finder: deriving parameters over the full assembled
        // program still yields exactly the data symbols plus the time extent.
        let (opt, program) = diffusion_program(DseMode::Aggressive);
        let params = crate::iet::derive_parameters(
            &program.tree,
            &crate::iet::SymbolClasses {
                functions: &opt.functions,
                constants: &opt.constants,
            },
        );
        let names: Vec<&str> = params.iter().map(|s| s.as_str()).collect();
        assert_eq!(names, vec!["u", "dt", "h_x", "h_y", "nt"]);
    }

    #[test]
    fn mixed_read_write_dataset_gets_rw_mode() {
        // In-place update: u[t1] written and read in the same kernel.
        let grid = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let u = crate::grid::DiscreteFunction::time("u", grid.clone(), 2, 1).unwrap();
        let eq = Eq::new(
            Expr::access("u", Some(1), &[0, 0]),
            crate::expr::add(vec![
                Expr::access("u", Some(1), &[0, 0]),
                Expr::access("u", Some(0), &[0, 0]),
            ]),
        )
        .unwrap();
        let cluster =
            crate::expr::Cluster::new(vec![eq], grid, Subdomain::Full, vec![u], vec![]).unwrap();
        let opt = apply_dse(DseMode::Noop, &cluster);
        let root = lower_cluster(&opt, "nt").unwrap();
        let program = specialize_program(&root, &opt, ElementKind::F32).unwrap();
        let modes: Vec<AccessMode> = program.par_loops[0]
            .args
            .iter()
            .filter_map(|a| match a {
                ParLoopArg::Dat { mode, dataset, .. } if dataset == "ut1" => Some(*mode),
                _ => None,
            })
            .collect();
        assert_eq!(modes, vec![AccessMode::ReadWrite]);
    }
}
