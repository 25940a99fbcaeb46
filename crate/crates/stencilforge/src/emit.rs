//! Deterministic C source emission.
//!
//! Expressions print from their canonical form, so identical trees always
//! produce byte-identical text. Floats use a scientific literal style
//! ("1.0F", "5.0e-1F"); accessor reads print as
//! `name[OPS_ACC{i}(o1,o2)]`; core-target reads fold the halo offset into the
//! subscripts (`u[t1][x + 1][y + 2]`).

use std::collections::BTreeMap;

use crate::dse::OptimizedCluster;
use crate::exec::Initializer as FieldInit;
use crate::expr::Expr;
use crate::grid::{DiscreteFunction, ElementKind};
use crate::iet::{Bound, Call, CallArg, IetNode, InitValue, IterKind, Stmt};
use crate::ops::{KernelParam, OpsKernel, OpsProgram, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitTarget {
    CoreSerial,
    CoreParallel,
    Ops,
}

impl EmitTarget {
    pub fn parse(s: &str) -> Option<EmitTarget> {
        match s {
            "core-serial" => Some(EmitTarget::CoreSerial),
            "core-parallel" => Some(EmitTarget::CoreParallel),
            "ops" => Some(EmitTarget::Ops),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EmitTarget::CoreSerial => "core-serial",
            EmitTarget::CoreParallel => "core-parallel",
            EmitTarget::Ops => "ops",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactRole {
    Main,
    KernelsHeader,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceArtifact {
    pub role: ArtifactRole,
    pub filename: String,
    pub text: String,
}

// ---------------------------------------------------------------------------
// Literals
// ---------------------------------------------------------------------------

/// Scientific-style float literal: 0.5 -> "5.0e-1F", 1.0 -> "1.0F". The f64
/// flavor drops the suffix. Shortest round-trip digits keep values exact.
pub fn format_float(v: f64, kind: ElementKind) -> String {
    let suffix = match kind {
        ElementKind::F32 => "F",
        ElementKind::F64 => "",
    };
    let sci = format!("{v:e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponential format");
    let mantissa = if mantissa.contains('.') {
        mantissa.to_string()
    } else {
        format!("{mantissa}.0")
    };
    if exp == "0" {
        format!("{mantissa}{suffix}")
    } else {
        format!("{mantissa}e{exp}{suffix}")
    }
}

// ---------------------------------------------------------------------------
// Expressions
// ---------------------------------------------------------------------------

/// How array accesses and scalars print.
pub enum AccessStyle<'a> {
    /// OPS kernel body: accessor macros and dereferenced scalars.
    Kernel,
    /// Core loop nest: direct subscripts with the halo folded in and rotated
    /// time index names.
    Core {
        functions: &'a BTreeMap<String, DiscreteFunction>,
        dims: &'a [String],
    },
}

pub struct ExprCtx<'a> {
    pub kind: ElementKind,
    pub style: AccessStyle<'a>,
}

fn is_negative_term(e: &Expr) -> bool {
    match e {
        Expr::Literal(r) => r.is_negative(),
        Expr::Product(fs) => matches!(fs.first(), Some(Expr::Literal(r)) if r.is_negative()),
        Expr::Div(n, _) => is_negative_term(n),
        _ => false,
    }
}

fn render_factor(e: &Expr, ctx: &ExprCtx) -> String {
    match e {
        Expr::Sum(_) | Expr::Div(..) => format!("({})", emit_expr(e, ctx)),
        _ => emit_expr(e, ctx),
    }
}

pub fn emit_expr(e: &Expr, ctx: &ExprCtx) -> String {
    match e {
        Expr::Literal(r) => format_float(r.to_f64(), ctx.kind),
        Expr::Symbol(s) | Expr::Temp(s) => s.clone(),
        Expr::Deref(s) => format!("*{s}"),
        Expr::Accessor(a) => {
            let offsets: Vec<String> = a.offsets.iter().map(|o| o.to_string()).collect();
            format!("{}[OPS_ACC{}({})]", a.dataset, a.index, offsets.join(","))
        }
        Expr::Indexed(acc) => match &ctx.style {
            AccessStyle::Kernel => {
                // Kernel bodies are translated before emission; reaching here
                // means an untranslated access slipped through.
                format!("/* untranslated */{}", acc.func)
            }
            AccessStyle::Core { functions, dims } => {
                let halo = functions
                    .get(&acc.func)
                    .map(|f| f.halo() as i64)
                    .unwrap_or(0);
                let mut out = acc.func.clone();
                if let Some(k) = acc.time {
                    out.push_str(&format!("[t{k}]"));
                }
                for (d, ix) in acc.space.iter().enumerate() {
                    let var = dims.get(d).cloned().unwrap_or_else(|| format!("d{d}"));
                    let text = match ix {
                        crate::expr::IndexExpr::Shift(k) => {
                            let total = halo + k;
                            match total.cmp(&0) {
                                std::cmp::Ordering::Equal => var,
                                std::cmp::Ordering::Greater => format!("{var} + {total}"),
                                std::cmp::Ordering::Less => format!("{var} - {}", -total),
                            }
                        }
                        crate::expr::IndexExpr::Stride(m) => {
                            if halo == 0 {
                                format!("{m}*{var}")
                            } else {
                                format!("{m}*{var} + {halo}")
                            }
                        }
                    };
                    out.push_str(&format!("[{text}]"));
                }
                out
            }
        },
        Expr::Power(b, n) => {
            let base = render_factor(b, ctx);
            vec![base; *n as usize].join("*")
        }
        Expr::Div(num, den) => {
            let n = render_factor(num, ctx);
            let d = match &**den {
                Expr::Product(_) | Expr::Sum(_) | Expr::Div(..) | Expr::Power(..) => {
                    format!("({})", emit_expr(den, ctx))
                }
                _ => emit_expr(den, ctx),
            };
            format!("{n}/{d}")
        }
        Expr::Product(fs) => {
            // A leading unit coefficient never survives canonicalization, and
            // a leading -1 is stripped by the sum renderer; a bare product
            // keeps its literal.
            fs.iter()
                .map(|f| render_factor(f, ctx))
                .collect::<Vec<_>>()
                .join("*")
        }
        Expr::Sum(ts) => {
            let mut out = String::new();
            for (i, term) in ts.iter().enumerate() {
                let negative = is_negative_term(term);
                let rendered = if negative {
                    emit_expr(&crate::expr::neg(term.clone()), ctx)
                } else {
                    emit_expr(term, ctx)
                };
                if i == 0 {
                    if negative {
                        out.push('-');
                    }
                } else if negative {
                    out.push_str(" - ");
                } else {
                    out.push_str(" + ");
                }
                out.push_str(&rendered);
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Statements and trees
// ---------------------------------------------------------------------------

fn render_call_arg(arg: &CallArg) -> String {
    match arg {
        CallArg::Int(v) => v.to_string(),
        CallArg::Str(s) => format!("\"{s}\""),
        CallArg::Sym(s) => s.clone(),
        CallArg::SymIndexed(s, idx) => format!("{s}[{}]", render_call_arg(idx)),
        CallArg::AddrOf(s) => format!("&{s}"),
        CallArg::TimeAccess(t) => format!("&{}[{}]", t.function, t.slot),
        CallArg::IntPtrCast(s) => format!("(int *){s}"),
        CallArg::FnPtr(s) | CallArg::Extern(s) => s.clone(),
        CallArg::Nested(call) => render_call(call),
    }
}

fn render_call(call: &Call) -> String {
    let args: Vec<String> = call.args.iter().map(render_call_arg).collect();
    format!("{}({})", call.callee, args.join(", "))
}

fn emit_stmt(stmt: &Stmt, ctx: &ExprCtx) -> String {
    match stmt {
        Stmt::Assign(eq) => format!("{} = {};", emit_expr(&eq.lhs, ctx), emit_expr(&eq.rhs, ctx)),
        Stmt::DefineScalar { name, rhs } => format!(
            "{} {} = {};",
            ctx.kind.c_name(),
            name,
            emit_expr(rhs, ctx)
        ),
        Stmt::TimeIndexDef {
            name,
            loop_var,
            offset,
            modulus,
        } => {
            if *offset == 0 {
                format!("int {name} = ({loop_var}) % {modulus};")
            } else {
                format!("int {name} = ({loop_var} + {offset}) % {modulus};")
            }
        }
    }
}

fn bound_text(b: &Bound) -> String {
    match b {
        Bound::Int(v) => v.to_string(),
        Bound::Sym(s) => s.clone(),
    }
}

fn push_indented(out: &mut String, indent: usize, line: &str) {
    for l in line.lines() {
        out.push_str(&"  ".repeat(indent));
        out.push_str(l);
        out.push('\n');
    }
}

/// Render an IET node as C statements at the given indent level.
pub fn emit_iet(node: &IetNode, ctx: &ExprCtx, indent: usize) -> String {
    let mut out = String::new();
    match node {
        IetNode::Expression(stmt) => push_indented(&mut out, indent, &emit_stmt(stmt, ctx)),
        IetNode::Iteration(iter) => {
            if iter.parallel {
                push_indented(&mut out, indent, "#pragma omp parallel for");
            }
            push_indented(
                &mut out,
                indent,
                &format!(
                    "for (int {dim} = {lo}; {dim} < {hi}; {dim} += 1)",
                    dim = iter.dim,
                    lo = bound_text(&iter.lower),
                    hi = bound_text(&iter.upper)
                ),
            );
            push_indented(&mut out, indent, "{");
            for child in &iter.body {
                out.push_str(&emit_iet(child, ctx, indent + 1));
            }
            push_indented(&mut out, indent, "}");
        }
        IetNode::Callable(c) => {
            push_indented(
                &mut out,
                indent,
                &format!("void {}({})", c.name, c.params.join(", ")),
            );
            push_indented(&mut out, indent, "{");
            for child in &c.body {
                out.push_str(&emit_iet(child, ctx, indent + 1));
            }
            push_indented(&mut out, indent, "}");
        }
        IetNode::Call(call) => {
            let text = render_call(call);
            if call.is_statement {
                push_indented(&mut out, indent, &format!("{text};"));
            } else {
                push_indented(&mut out, indent, &text);
            }
        }
        IetNode::Initializer(init) => {
            let mut line = String::new();
            if let Some(t) = &init.c_type {
                line.push_str(t);
                line.push(' ');
            }
            line.push_str(&init.name);
            if let Some(len) = init.array_len {
                line.push_str(&format!("[{len}]"));
            }
            if let Some(idx) = &init.index {
                line.push_str(&format!("[{}]", render_call_arg(idx)));
            }
            match &init.init {
                Some(InitValue::Ints(values)) => {
                    let items: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                    line.push_str(&format!(" = {{{}}}", items.join(", ")));
                }
                Some(InitValue::Call(call)) => {
                    line.push_str(&format!(" = {}", render_call(call)));
                }
                None => {}
            }
            line.push(';');
            push_indented(&mut out, indent, &line);
        }
        IetNode::List(children) => {
            for child in children {
                out.push_str(&emit_iet(child, ctx, indent));
            }
        }
        IetNode::Section(section) => {
            for child in &section.body {
                out.push_str(&emit_iet(child, ctx, indent));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

fn param_decl(p: &KernelParam, kind: ElementKind) -> String {
    let t = kind.c_name();
    match &p.kind {
        ParamKind::Array { read_only: true } => format!("const {t} * {}", p.name),
        ParamKind::Array { read_only: false } => format!("{t} * {}", p.name),
        ParamKind::Scalar => format!("const {t} *{}", p.name),
    }
}

pub fn kernel_signature(k: &OpsKernel, kind: ElementKind) -> String {
    let params: Vec<String> = k.params.iter().map(|p| param_decl(p, kind)).collect();
    format!("void {}({})", k.name, params.join(", "))
}

pub fn emit_kernel(k: &OpsKernel, kind: ElementKind) -> String {
    let ctx = ExprCtx {
        kind,
        style: AccessStyle::Kernel,
    };
    let mut out = format!("{}\n{{\n", kernel_signature(k, kind));
    for stmt in &k.body {
        out.push_str("  ");
        out.push_str(&emit_stmt(stmt, &ctx));
        out.push('\n');
    }
    out.push_str("}\n");
    out
}

// ---------------------------------------------------------------------------
// Program mains
// ---------------------------------------------------------------------------

/// Everything the self-contained mains need besides the lowered tree.
pub struct MainConfig<'a> {
    pub problem: &'a str,
    pub nt: usize,
    pub constants: &'a BTreeMap<String, f64>,
    pub initializer: &'a FieldInit,
    pub kind: ElementKind,
}

fn buffer_decl(f: &DiscreteFunction, kind: ElementKind) -> String {
    let t = kind.c_name();
    let padded = f.padded_shape();
    let dims: String = padded.iter().map(|d| format!("[{d}]")).collect();
    let count: usize = f.num_buffers() * padded.iter().product::<usize>();
    format!(
        "{t} (*{name}){dims} = ({t} (*){dims})calloc({count}, sizeof({t}));",
        name = f.name
    )
}

fn field_init_lines(f: &DiscreteFunction, init: &FieldInit, kind: ElementKind) -> String {
    let halo = f.halo();
    let spacing = f.grid.spacing();
    let dims = &f.grid.dims;
    let slot = if f.is_time_function() { "[0]" } else { "" };
    let one = format_float(1.0, kind);
    let two = format_float(2.0, kind);
    match init {
        FieldInit::Zeros => String::new(),
        FieldInit::PointSource { position, amplitude } => {
            let subs: String = position
                .iter()
                .map(|&p| format!("[{}]", p as usize + halo))
                .collect();
            format!(
                "{}{}{} = {};\n",
                f.name,
                slot,
                subs,
                format_float(*amplitude, kind)
            )
        }
        FieldInit::Hat => {
            let mut out = String::new();
            let mut indent = 0usize;
            for (d, dim) in dims.iter().enumerate() {
                out.push_str(&format!(
                    "{pad}for (int {dim} = 0; {dim} < {n}; {dim} += 1)\n{pad}{{\n",
                    pad = "  ".repeat(indent),
                    n = f.grid.shape[d]
                ));
                indent += 1;
            }
            let pad = "  ".repeat(indent);
            let mut cond = Vec::new();
            for (d, dim) in dims.iter().enumerate() {
                out.push_str(&format!(
                    "{pad}double {dim}_c = {dim} * {h};\n",
                    h = format_float(spacing[d], ElementKind::F64)
                ));
                cond.push(format!(
                    "{dim}_c >= {half} && {dim}_c <= {one}",
                    half = format_float(0.5, ElementKind::F64),
                    one = format_float(1.0, ElementKind::F64)
                ));
            }
            let subs: String = dims
                .iter()
                .map(|dim| format!("[{dim} + {halo}]"))
                .collect();
            out.push_str(&format!(
                "{pad}{name}{slot}{subs} = ({cond}) ? {two} : {one};\n",
                name = f.name,
                cond = cond.join(" && ")
            ));
            for d in (0..dims.len()).rev() {
                out.push_str(&format!("{}}}\n", "  ".repeat(d)));
            }
            out
        }
    }
}

fn constant_decls(constants: &BTreeMap<String, f64>, kind: ElementKind) -> String {
    let mut out = String::new();
    for (name, value) in constants {
        out.push_str(&format!(
            "  {} {} = {};\n",
            kind.c_name(),
            name,
            format_float(*value, kind)
        ));
    }
    out
}

/// Which buffer slot holds the final result after nt steps.
fn final_slot_expr(write_shift: usize, modulus: usize, nt_sym: &str) -> String {
    format!("({nt_sym} - 1 + {write_shift}) % {modulus}")
}

fn checksum_lines(f: &DiscreteFunction, write_shift: usize) -> String {
    let halo = f.halo();
    let dims = &f.grid.dims;
    let mut out = String::new();
    if f.is_time_function() {
        out.push_str(&format!(
            "  int t_final = {};\n",
            final_slot_expr(write_shift, f.num_buffers(), "nt")
        ));
    }
    out.push_str("  double checksum = 0.0;\n  double sumsq = 0.0;\n");
    let mut indent = 1usize;
    for (d, dim) in dims.iter().enumerate() {
        out.push_str(&format!(
            "{pad}for (int {dim} = 0; {dim} < {n}; {dim} += 1)\n{pad}{{\n",
            pad = "  ".repeat(indent),
            n = f.grid.shape[d]
        ));
        indent += 1;
    }
    let slot = if f.is_time_function() { "[t_final]" } else { "" };
    let subs: String = dims.iter().map(|dim| format!("[{dim} + {halo}]")).collect();
    let pad = "  ".repeat(indent);
    out.push_str(&format!(
        "{pad}double v = (double){}{slot}{subs};\n{pad}checksum += v;\n{pad}sumsq += v*v;\n",
        f.name
    ));
    for d in (1..=dims.len()).rev() {
        out.push_str(&format!("{}}}\n", "  ".repeat(d)));
    }
    out
}

fn written_shift(opt: &OptimizedCluster) -> usize {
    opt.equations
        .iter()
        .filter_map(|eq| eq.written_function())
        .filter_map(|a| a.time)
        .max()
        .unwrap_or(0)
        .max(0) as usize
}

/// Emit the standalone core-target program: allocate, initialize, run the
/// time loop, print the RESULT report line.
pub fn emit_core_program(
    root: &IetNode,
    target: EmitTarget,
    opt: &OptimizedCluster,
    cfg: &MainConfig,
) -> SourceArtifact {
    let mut root = root.clone();
    if target == EmitTarget::CoreParallel {
        mark_outer_space_parallel(&mut root);
    }
    let ctx = ExprCtx {
        kind: cfg.kind,
        style: AccessStyle::Core {
            functions: &opt.functions,
            dims: &opt.grid.dims,
        },
    };
    let func = opt
        .written_time_function()
        .expect("core programs update one time function");
    let mut text = String::new();
    text.push_str("#include <stdio.h>\n#include <stdlib.h>\n#include <math.h>\n#include <time.h>\n\n");
    text.push_str("int main(void)\n{\n");
    text.push_str(&format!("  const int nt = {};\n", cfg.nt));
    text.push_str(&constant_decls(cfg.constants, cfg.kind));
    for f in opt.functions.values() {
        text.push_str(&format!("  {}\n", buffer_decl(f, cfg.kind)));
    }
    for line in field_init_lines(func, cfg.initializer, cfg.kind).lines() {
        text.push_str(&format!("  {line}\n"));
    }
    text.push_str("  struct timespec ts_start;\n");
    text.push_str("  clock_gettime(CLOCK_MONOTONIC, &ts_start);\n");
    text.push_str(&emit_iet(&root, &ctx, 1));
    text.push_str("  struct timespec ts_end;\n");
    text.push_str("  clock_gettime(CLOCK_MONOTONIC, &ts_end);\n");
    text.push_str(
        "  double elapsed = (ts_end.tv_sec - ts_start.tv_sec) + 1.0e-9*(ts_end.tv_nsec - ts_start.tv_nsec);\n",
    );
    text.push_str(&checksum_lines(func, written_shift(opt)));
    text.push_str(
        "  printf(\"RESULT checksum=%.17g l2=%.17g steps=%d elapsed_s=%.6f\\n\", checksum, sqrt(sumsq), nt, elapsed);\n",
    );
    for f in opt.functions.values() {
        text.push_str(&format!("  free({});\n", f.name));
    }
    text.push_str("  return 0;\n}\n");
    SourceArtifact {
        role: ArtifactRole::Main,
        filename: format!("{}_core.c", cfg.problem),
        text,
    }
}

fn mark_outer_space_parallel(node: &mut IetNode) {
    match node {
        IetNode::Iteration(iter) => {
            if iter.kind == IterKind::Space {
                iter.parallel = true;
                return;
            }
            for child in &mut iter.body {
                mark_outer_space_parallel(child);
            }
        }
        IetNode::List(children) => children.iter_mut().for_each(mark_outer_space_parallel),
        IetNode::Section(s) => s.body.iter_mut().for_each(mark_outer_space_parallel),
        IetNode::Callable(c) => c.body.iter_mut().for_each(mark_outer_space_parallel),
        _ => {}
    }
}

/// Emit the OPS-target pair: the main using the OPS API plus the kernels
/// header it includes.
pub fn emit_ops_program(
    program: &OpsProgram,
    opt: &OptimizedCluster,
    cfg: &MainConfig,
) -> (SourceArtifact, SourceArtifact) {
    let func = opt.written_time_function();
    let so = func.map(|f| f.space_order).unwrap_or(0);
    let stem = format!("{}_so{}", cfg.problem, so);
    let header_name = format!("{stem}.h");

    let mut header = String::new();
    for k in &program.kernels {
        header.push_str(&emit_kernel(k, cfg.kind));
        header.push('\n');
    }

    let ctx = ExprCtx {
        kind: cfg.kind,
        style: AccessStyle::Core {
            functions: &opt.functions,
            dims: &opt.grid.dims,
        },
    };
    let mut text = String::new();
    text.push_str("#include <stdlib.h>\n#include <stdio.h>\n#include <math.h>\n");
    text.push_str(&format!("#define OPS_{}D\n", opt.grid.ndim()));
    text.push_str("#include \"ops_seq.h\"\n");
    text.push_str(&format!("#include \"{header_name}\"\n\n"));
    text.push_str("int main(int argc, char **argv)\n{\n");
    text.push_str(&format!("  const int nt = {};\n", cfg.nt));
    text.push_str(&constant_decls(cfg.constants, cfg.kind));
    for f in opt.functions.values() {
        text.push_str(&format!("  {}\n", buffer_decl(f, cfg.kind)));
    }
    if let Some(f) = func {
        for line in field_init_lines(f, cfg.initializer, cfg.kind).lines() {
            text.push_str(&format!("  {line}\n"));
        }
    }
    text.push_str(&emit_iet(&program.tree, &ctx, 1));
    text.push_str("  return 0;\n}\n");

    (
        SourceArtifact {
            role: ArtifactRole::Main,
            filename: format!("{stem}.c"),
            text,
        },
        SourceArtifact {
            role: ArtifactRole::KernelsHeader,
            filename: header_name,
            text: header,
        },
    )
}

/// Collapse whitespace runs so golden comparisons ignore layout.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{AccessorRef, Expr};
    use crate::iet::Iteration;

    fn kernel_ctx() -> ExprCtx<'static> {
        ExprCtx {
            kind: ElementKind::F32,
            style: AccessStyle::Kernel,
        }
    }

    #[test]
    fn float_literal_style() {
        assert_eq!(format_float(0.5, ElementKind::F32), "5.0e-1F");
        assert_eq!(format_float(1.0, ElementKind::F32), "1.0F");
        assert_eq!(format_float(-1.0, ElementKind::F32), "-1.0F");
        assert_eq!(format_float(2.0, ElementKind::F32), "2.0F");
        assert_eq!(format_float(0.5, ElementKind::F64), "5.0e-1");
        assert_eq!(format_float(0.25, ElementKind::F32), "2.5e-1F");
    }

    #[test]
    fn accessor_emission() {
        let e = Expr::Accessor(AccessorRef {
            dataset: "ut0".into(),
            index: 0,
            offsets: vec![0, -1],
        });
        assert_eq!(emit_expr(&e, &kernel_ctx()), "ut0[OPS_ACC0(0,-1)]");
    }

    #[test]
    fn literal_and_deref_product() {
        let e = crate::expr::mul(vec![
            Expr::rat(1, 2),
            Expr::Deref("dt".into()),
            Expr::Accessor(AccessorRef {
                dataset: "ut0".into(),
                index: 0,
                offsets: vec![0, 0],
            }),
        ]);
        assert_eq!(
            emit_expr(&e, &kernel_ctx()),
            "5.0e-1F**dt*ut0[OPS_ACC0(0,0)]"
        );
    }

    #[test]
    fn deref_times_access() {
        let e = crate::expr::mul(vec![
            Expr::Deref("dt".into()),
            Expr::Accessor(AccessorRef {
                dataset: "ut0".into(),
                index: 0,
                offsets: vec![0, 0],
            }),
        ]);
        assert_eq!(emit_expr(&e, &kernel_ctx()), "*dt*ut0[OPS_ACC0(0,0)]");
    }

    #[test]
    fn negative_terms_render_as_subtraction() {
        let e = crate::expr::add(vec![
            Expr::sym("a"),
            crate::expr::neg(Expr::sym("b")),
        ]);
        assert_eq!(emit_expr(&e, &kernel_ctx()), "a - b");
        let e = crate::expr::add(vec![
            crate::expr::neg(Expr::sym("a")),
            crate::expr::mul(vec![Expr::int(-2), Expr::sym("b")]),
        ]);
        assert_eq!(emit_expr(&e, &kernel_ctx()), "-a - 2.0F*b");
    }

    #[test]
    fn initializer_single_semicolon() {
        let node = IetNode::Initializer(crate::iet::Initializer {
            c_type: Some("ops_stencil".into()),
            name: "S2D_UT1_1PT".into(),
            array_len: None,
            index: None,
            init: Some(InitValue::Call(Call::nested(
                "ops_decl_stencil",
                vec![
                    CallArg::Int(2),
                    CallArg::Int(1),
                    CallArg::IntPtrCast("s2d_ut1_1pt".into()),
                    CallArg::Str("S2D_UT1_1PT".into()),
                ],
            ))),
        });
        let text = emit_iet(&node, &kernel_ctx(), 0);
        assert_eq!(
            text.trim(),
            "ops_stencil S2D_UT1_1PT = ops_decl_stencil(2, 1, (int *)s2d_ut1_1pt, \"S2D_UT1_1PT\");"
        );
        assert!(!text.contains(";;"));
    }

    #[test]
    fn nested_call_emission() {
        let node = IetNode::Call(Call::statement(
            "f",
            vec![CallArg::Nested(Box::new(Call::nested(
                "g",
                vec![CallArg::Sym("x".into())],
            )))],
        ));
        assert_eq!(emit_iet(&node, &kernel_ctx(), 0).trim(), "f(g(x));");
    }

    #[test]
    fn for_loop_head_style() {
        let node = IetNode::Iteration(Iteration {
            dim: "time".into(),
            kind: IterKind::Time,
            lower: Bound::Int(0),
            upper: Bound::Sym("nt".into()),
            body: vec![],
            parallel: false,
        });
        let text = emit_iet(&node, &kernel_ctx(), 0);
        assert!(text.starts_with("for (int time = 0; time < nt; time += 1)\n{\n"));
    }

    #[test]
    fn time_index_def_style() {
        let s0 = Stmt::TimeIndexDef {
            name: "t0".into(),
            loop_var: "time".into(),
            offset: 0,
            modulus: 2,
        };
        let s1 = Stmt::TimeIndexDef {
            name: "t1".into(),
            loop_var: "time".into(),
            offset: 1,
            modulus: 2,
        };
        assert_eq!(emit_stmt(&s0, &kernel_ctx()), "int t0 = (time) % 2;");
        assert_eq!(emit_stmt(&s1, &kernel_ctx()), "int t1 = (time + 1) % 2;");
    }

    #[test]
    fn core_access_folds_halo() {
        let grid = crate::grid::Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let u = crate::grid::DiscreteFunction::time("u", grid.clone(), 2, 1).unwrap();
        let functions: BTreeMap<String, DiscreteFunction> =
            [("u".to_string(), u)].into_iter().collect();
        let dims = vec!["x".to_string(), "y".to_string()];
        let ctx = ExprCtx {
            kind: ElementKind::F32,
            style: AccessStyle::Core {
                functions: &functions,
                dims: &dims,
            },
        };
        let e = Expr::access("u", Some(1), &[-1, 0]);
        assert_eq!(emit_expr(&e, &ctx), "u[t1][x + 1][y + 2]");
        let e = Expr::access("u", Some(0), &[-2, 2]);
        assert_eq!(emit_expr(&e, &ctx), "u[t0][x][y + 4]");
    }
}
