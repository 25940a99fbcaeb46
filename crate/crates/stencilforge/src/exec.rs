//! Ground-truth execution and cross-validation.
//!
//! Three ways to run a problem live here: the reference interpreter (direct
//! evaluation of the optimized cluster with rotating buffers), the virtual
//! OPS runtime (executes ParLoop/dat/stencil descriptors exactly as the
//! lowered program describes them, with stencil-violation checking), and the
//! system-toolchain runner that compiles an emitted core program and parses
//! its RESULT line. `verify_equivalence` compares any of them pairwise.
//!
//! Expressions are compiled once into flat postfix programs evaluated
//! left-to-right, which pins the floating-point operation order to match the
//! emitted C exactly in both f32 and f64.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use crate::dse::{apply_dse, DseMode, OptimizedCluster};
use crate::emit::{emit_core_program, EmitTarget, MainConfig, SourceArtifact};
use crate::error::{Error, Result};
use crate::expr::{Cluster, Expr};
use crate::grid::{DataBuffer, ElementKind};
use crate::ops::{AccessMode, OpsProgram, ParLoopArg};

// ---------------------------------------------------------------------------
// Problem setup
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Initializer {
    Zeros,
    /// 2.0 where every physical coordinate lies in [0.5, 1.0], else 1.0.
    Hat,
    PointSource {
        position: Vec<i64>,
        amplitude: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSetup {
    pub name: String,
    pub cluster: Cluster,
    pub nt: usize,
    pub initializer: Initializer,
    pub precision: ElementKind,
}

impl ProblemSetup {
    pub fn new(
        name: &str,
        cluster: Cluster,
        nt: usize,
        initializer: Initializer,
        precision: ElementKind,
    ) -> Result<ProblemSetup> {
        if nt < 1 {
            return Err(Error::Config("nt must be >= 1".into()));
        }
        Ok(ProblemSetup {
            name: name.to_string(),
            cluster,
            nt,
            initializer,
            precision,
        })
    }

    pub fn constants(&self) -> BTreeMap<String, f64> {
        self.cluster
            .constants
            .values()
            .map(|c| (c.name.clone(), c.value))
            .collect()
    }

    pub fn dt(&self) -> Option<f64> {
        self.cluster.constants.get("dt").map(|c| c.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub backend: String,
    pub checksum: f64,
    pub l2: f64,
    pub steps: usize,
    pub elapsed_s: f64,
}

// ---------------------------------------------------------------------------
// Scalar abstraction
// ---------------------------------------------------------------------------

pub trait Scalar:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
{
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn read(buf: &DataBuffer, idx: usize) -> Self;
    fn write(buf: &mut DataBuffer, idx: usize, v: Self);
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn read(buf: &DataBuffer, idx: usize) -> f32 {
        buf.as_f32().expect("f32 buffer")[idx]
    }
    fn write(buf: &mut DataBuffer, idx: usize, v: f32) {
        buf.as_f32_mut().expect("f32 buffer")[idx] = v;
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn read(buf: &DataBuffer, idx: usize) -> f64 {
        buf.as_f64().expect("f64 buffer")[idx]
    }
    fn write(buf: &mut DataBuffer, idx: usize, v: f64) {
        buf.as_f64_mut().expect("f64 buffer")[idx] = v;
    }
}

// ---------------------------------------------------------------------------
// Compiled expressions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Instr {
    Lit(f64),
    Const(usize),
    Temp(usize),
    /// Read buffer `buf` at the current point plus a precomputed linear
    /// delta; `shift` picks the rotating slot, `None` reads a slotless
    /// buffer.
    Read {
        buf: usize,
        shift: Option<i64>,
        delta: i64,
    },
    Add,
    Mul,
    Div,
}

#[derive(Debug, Clone, Default)]
struct Program {
    instrs: Vec<Instr>,
}

struct CompileCtx<'a> {
    buf_index: &'a BTreeMap<String, usize>,
    strides: &'a [Vec<usize>],
    const_index: &'a BTreeMap<String, usize>,
    temp_index: &'a BTreeMap<String, usize>,
    /// Accessor index -> (buffer, shift) for kernel bodies.
    accessor_args: Option<&'a [(usize, Option<i64>)]>,
}

fn offsets_delta(offsets: &[i64], strides: &[usize]) -> i64 {
    offsets
        .iter()
        .zip(strides)
        .map(|(&o, &s)| o * s as i64)
        .sum()
}

fn compile_into(e: &Expr, ctx: &CompileCtx, out: &mut Vec<Instr>) -> Result<()> {
    match e {
        Expr::Literal(r) => out.push(Instr::Lit(r.to_f64())),
        Expr::Symbol(s) | Expr::Deref(s) => {
            let idx = ctx
                .const_index
                .get(s)
                .ok_or_else(|| Error::UnboundSymbol(s.clone()))?;
            out.push(Instr::Const(*idx));
        }
        Expr::Temp(t) => {
            let idx = ctx
                .temp_index
                .get(t)
                .ok_or_else(|| Error::UnboundSymbol(t.clone()))?;
            out.push(Instr::Temp(*idx));
        }
        Expr::Indexed(acc) => {
            let buf = *ctx
                .buf_index
                .get(&acc.func)
                .ok_or_else(|| Error::UnboundSymbol(acc.func.clone()))?;
            let offsets = acc
                .shifts()
                .ok_or_else(|| Error::NonAffineAccess(acc.func.clone()))?;
            out.push(Instr::Read {
                buf,
                shift: acc.time,
                delta: offsets_delta(&offsets, &ctx.strides[buf]),
            });
        }
        Expr::Accessor(a) => {
            let args = ctx
                .accessor_args
                .ok_or_else(|| Error::UnboundSymbol(a.dataset.clone()))?;
            let (buf, shift) = args
                .get(a.index)
                .copied()
                .ok_or_else(|| Error::UnboundSymbol(a.dataset.clone()))?;
            out.push(Instr::Read {
                buf,
                shift,
                delta: offsets_delta(&a.offsets, &ctx.strides[buf]),
            });
        }
        Expr::Power(b, n) => {
            compile_into(b, ctx, out)?;
            for _ in 1..*n {
                compile_into(b, ctx, out)?;
                out.push(Instr::Mul);
            }
        }
        Expr::Div(n, d) => {
            compile_into(n, ctx, out)?;
            compile_into(d, ctx, out)?;
            out.push(Instr::Div);
        }
        Expr::Product(fs) => {
            for (i, f) in fs.iter().enumerate() {
                compile_into(f, ctx, out)?;
                if i > 0 {
                    out.push(Instr::Mul);
                }
            }
        }
        Expr::Sum(ts) => {
            for (i, t) in ts.iter().enumerate() {
                compile_into(t, ctx, out)?;
                if i > 0 {
                    out.push(Instr::Add);
                }
            }
        }
    }
    Ok(())
}

fn compile(e: &Expr, ctx: &CompileCtx) -> Result<Program> {
    let mut instrs = Vec::new();
    compile_into(e, ctx, &mut instrs)?;
    Ok(Program { instrs })
}

struct WriteTarget {
    buf: usize,
    shift: Option<i64>,
    delta: i64,
}

/// Shared stepping machinery: buffers, compiled temps and equations, and the
/// iteration range.
struct Engine {
    buffers: Vec<DataBuffer>,
    names: Vec<String>,
    consts: Vec<f64>,
    temps: Vec<Program>,
    eqs: Vec<(WriteTarget, Program)>,
    bounds: Vec<(i64, i64)>,
    written: usize,
    write_shift: i64,
}

impl Engine {
    fn final_slot(&self, nt: usize) -> usize {
        let n = self.buffers[self.written].num_buffers;
        ((nt as i64 - 1 + self.write_shift).rem_euclid(n as i64)) as usize
    }
}

fn eval<T: Scalar>(
    prog: &Program,
    buffers: &[DataBuffer],
    consts: &[f64],
    temps: &[T],
    resolve: &dyn Fn(usize, Option<i64>, i64) -> usize,
    stack: &mut Vec<T>,
) -> T {
    stack.clear();
    for instr in &prog.instrs {
        match instr {
            Instr::Lit(v) => stack.push(T::from_f64(*v)),
            Instr::Const(i) => stack.push(T::from_f64(consts[*i])),
            Instr::Temp(i) => stack.push(temps[*i]),
            Instr::Read { buf, shift, delta } => {
                let idx = resolve(*buf, *shift, *delta);
                stack.push(T::read(&buffers[*buf], idx));
            }
            Instr::Add => {
                let b = stack.pop().unwrap();
                let a = stack.pop().unwrap();
                stack.push(a + b);
            }
            Instr::Mul => {
                let b = stack.pop().unwrap();
                let a = stack.pop().unwrap();
                stack.push(a * b);
            }
            Instr::Div => {
                let b = stack.pop().unwrap();
                let a = stack.pop().unwrap();
                stack.push(a / b);
            }
        }
    }
    debug_assert_eq!(stack.len(), 1);
    stack.pop().unwrap()
}

// ---------------------------------------------------------------------------
// Field initialization
// ---------------------------------------------------------------------------

fn apply_initializer(buf: &mut DataBuffer, grid: &crate::grid::Grid, init: &Initializer) {
    let slot = if buf.num_buffers > 1 { Some(0) } else { None };
    match init {
        Initializer::Zeros => {}
        Initializer::PointSource { position, amplitude } => {
            let idx = buf
                .linear_index(slot, position)
                .expect("point source inside the domain");
            buf.set(idx, *amplitude);
        }
        Initializer::Hat => {
            let spacing = grid.spacing();
            for point in crate::grid::domain_points(&grid.shape) {
                let inside = point.iter().zip(&spacing).all(|(&p, &h)| {
                    let coord = p as f64 * h;
                    (0.5..=1.0).contains(&coord)
                });
                let idx = buf.linear_index(slot, &point).expect("domain point");
                buf.set(idx, if inside { 2.0 } else { 1.0 });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Interpreter
// ---------------------------------------------------------------------------

fn build_engine(
    opt: &OptimizedCluster,
    setup: &ProblemSetup,
    slots_override: Option<usize>,
) -> Result<Engine> {
    let mut buffers = Vec::new();
    let mut names = Vec::new();
    let mut buf_index = BTreeMap::new();
    for (name, f) in &opt.functions {
        let buf = match slots_override {
            Some(n) if f.is_time_function() => DataBuffer::allocate_slots(f, setup.precision, n)?,
            _ => DataBuffer::allocate(f, setup.precision)?,
        };
        buf_index.insert(name.clone(), buffers.len());
        names.push(name.clone());
        buffers.push(buf);
    }
    let written_func = opt
        .written_time_function()
        .ok_or_else(|| Error::InvalidFunction("no written time function".into()))?;
    let written = buf_index[&written_func.name];
    apply_initializer(&mut buffers[written], &opt.grid, &setup.initializer);

    let const_list: Vec<(String, f64)> = setup.constants().into_iter().collect();
    let const_index: BTreeMap<String, usize> = const_list
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (n.clone(), i))
        .collect();
    let consts: Vec<f64> = const_list.into_iter().map(|(_, v)| v).collect();

    let temp_index: BTreeMap<String, usize> = opt
        .temps
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (n.clone(), i))
        .collect();
    let strides: Vec<Vec<usize>> = buffers.iter().map(|b| b.strides()).collect();
    let ctx = CompileCtx {
        buf_index: &buf_index,
        strides: &strides,
        const_index: &const_index,
        temp_index: &temp_index,
        accessor_args: None,
    };
    let temps = opt
        .temps
        .iter()
        .map(|(_, e)| compile(e, &ctx))
        .collect::<Result<Vec<_>>>()?;
    let mut eqs = Vec::new();
    for eq in &opt.equations {
        let Expr::Indexed(acc) = &eq.lhs else {
            return Err(Error::WriteToScalar(eq.lhs.to_string()));
        };
        let buf = buf_index[&acc.func];
        let offsets = acc
            .shifts()
            .ok_or_else(|| Error::NonAffineAccess(acc.func.clone()))?;
        let target = WriteTarget {
            buf,
            shift: acc.time,
            delta: offsets_delta(&offsets, &strides[buf]),
        };
        eqs.push((target, compile(&eq.rhs, &ctx)?));
    }
    let write_shift = opt
        .equations
        .iter()
        .filter_map(|eq| eq.written_function())
        .filter_map(|a| a.time)
        .max()
        .unwrap_or(0);
    Ok(Engine {
        buffers,
        names,
        consts,
        temps,
        eqs,
        bounds: {
            let shape = &opt.grid.shape;
            shape
                .iter()
                .map(|&s| match opt.subdomain {
                    crate::expr::Subdomain::Full => (0i64, s as i64),
                    crate::expr::Subdomain::Interior => (1i64, s as i64 - 1),
                })
                .collect()
        },
        written,
        write_shift,
    })
}

/// The run result plus the final buffer and the slot holding the answer.
#[derive(Debug)]
pub struct ExecOutcome {
    pub report: RunReport,
    pub buffer: DataBuffer,
    pub final_slot: usize,
}

/// Direct point-by-point evaluation of the optimized cluster with rotating
/// time buffers: the ground-truth backend.
pub fn interpret(setup: &ProblemSetup, mode: DseMode) -> Result<ExecOutcome> {
    let opt = apply_dse(mode, &setup.cluster);
    interpret_optimized(&opt, setup)
}

pub fn interpret_optimized(opt: &OptimizedCluster, setup: &ProblemSetup) -> Result<ExecOutcome> {
    interpret_with_observer(opt, setup, None, |_, _, _| {})
}

/// Interpreter entry point with an optional per-step observer (used by the
/// stability checks) and an optional slot-count override (used by the
/// full-history unrolled reference).
pub fn interpret_with_observer<F>(
    opt: &OptimizedCluster,
    setup: &ProblemSetup,
    slots_override: Option<usize>,
    mut observer: F,
) -> Result<ExecOutcome>
where
    F: FnMut(usize, &DataBuffer, usize),
{
    let mut engine = build_engine(opt, setup, slots_override)?;
    let start = Instant::now();
    match setup.precision {
        ElementKind::F32 => run_observed::<f32, F>(&mut engine, setup.nt, &mut observer)?,
        ElementKind::F64 => run_observed::<f64, F>(&mut engine, setup.nt, &mut observer)?,
    }
    let elapsed = start.elapsed().as_secs_f64();
    let final_slot = engine.final_slot(setup.nt);
    let buffer = engine.buffers.swap_remove(engine.written);
    let (sum, l2) = checksum(&buffer, final_slot);
    Ok(ExecOutcome {
        report: RunReport {
            backend: "interpret".to_string(),
            checksum: sum,
            l2,
            steps: setup.nt,
            elapsed_s: elapsed,
        },
        buffer,
        final_slot,
    })
}

fn run_observed<T: Scalar, F>(engine: &mut Engine, nt: usize, observer: &mut F) -> Result<()>
where
    F: FnMut(usize, &DataBuffer, usize),
{
    for step in 0..nt {
        engine_step::<T>(engine, step)?;
        let slot = {
            let n = engine.buffers[engine.written].num_buffers;
            ((step as i64 + engine.write_shift).rem_euclid(n as i64)) as usize
        };
        observer(step, &engine.buffers[engine.written], slot);
    }
    Ok(())
}

fn engine_step<T: Scalar>(engine: &mut Engine, time: usize) -> Result<()> {
    kernel_sweep::<T>(
        &mut engine.buffers,
        &engine.names,
        &engine.consts,
        &engine.bounds,
        &engine.temps,
        &engine.eqs,
        time,
    )
}

/// Apply one kernel over its iteration range at one time step: per point,
/// evaluate the temps in order, then each write.
fn kernel_sweep<T: Scalar>(
    buffers: &mut [DataBuffer],
    names: &[String],
    consts: &[f64],
    bounds: &[(i64, i64)],
    temps: &[Program],
    writes: &[(WriteTarget, Program)],
    time: usize,
) -> Result<()> {
    let ndim = bounds.len();
    let halos: Vec<i64> = buffers.iter().map(|b| b.halo as i64).collect();
    let stride_tabs: Vec<Vec<usize>> = buffers.iter().map(|b| b.strides()).collect();
    let slot_lens: Vec<usize> = buffers.iter().map(|b| b.slot_len()).collect();
    let modulus: Vec<usize> = buffers.iter().map(|b| b.num_buffers).collect();
    let mut stack: Vec<T> = Vec::with_capacity(16);
    let mut temp_vals: Vec<T> = vec![T::ZERO; temps.len()];
    let mut point = vec![0i64; ndim];
    let mut done = false;
    for d in 0..ndim {
        point[d] = bounds[d].0;
        if bounds[d].0 >= bounds[d].1 {
            done = true;
        }
    }
    while !done {
        let mut bases: Vec<i64> = Vec::with_capacity(buffers.len());
        for (b, strides) in stride_tabs.iter().enumerate() {
            let mut base = 0i64;
            for d in 0..ndim {
                base += (point[d] + halos[b]) * strides[d] as i64;
            }
            bases.push(base);
        }
        let resolve = |buf: usize, shift: Option<i64>, delta: i64| -> usize {
            let slot = match shift {
                Some(k) => ((time as i64 + k).rem_euclid(modulus[buf] as i64)) as usize,
                None => 0,
            };
            slot * slot_lens[buf] + (bases[buf] + delta) as usize
        };
        for (ti, prog) in temps.iter().enumerate() {
            let v = eval::<T>(prog, buffers, consts, &temp_vals, &resolve, &mut stack);
            temp_vals[ti] = v;
        }
        for (target, prog) in writes {
            let v = eval::<T>(prog, buffers, consts, &temp_vals, &resolve, &mut stack);
            if !v.to_f64().is_finite() {
                return Err(Error::NanDetected {
                    step: time,
                    function: names[target.buf].clone(),
                });
            }
            let idx = resolve(target.buf, target.shift, target.delta);
            T::write(&mut buffers[target.buf], idx, v);
        }
        let mut d = ndim;
        loop {
            if d == 0 {
                done = true;
                break;
            }
            d -= 1;
            point[d] += 1;
            if point[d] < bounds[d].1 {
                break;
            }
            point[d] = bounds[d].0;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checksum
// ---------------------------------------------------------------------------

/// 64-bit accumulated (sum, l2) over the interior points of one slot,
/// row-major order.
pub fn checksum(buf: &DataBuffer, slot: usize) -> (f64, f64) {
    let slot_arg = if buf.num_buffers > 1 { Some(slot) } else { None };
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for point in crate::grid::domain_points(&buf.shape) {
        let idx = buf.linear_index(slot_arg, &point).expect("domain point");
        let v = buf.get(idx);
        sum += v;
        sumsq += v * v;
    }
    (sum, sumsq.sqrt())
}

// ---------------------------------------------------------------------------
// Virtual OPS runtime
// ---------------------------------------------------------------------------

/// Execute the lowered OPS program descriptors directly: per step, resolve
/// the rotating indices, bind dats to par-loop args, and apply each kernel
/// over its range. Accesses outside a declared stencil are hard errors.
pub fn run_virtual_ops(program: &OpsProgram, setup: &ProblemSetup) -> Result<ExecOutcome> {
    if !program.offloaded {
        return Err(Error::Config(
            "program has no offloaded loops to execute".into(),
        ));
    }
    let opt_functions = &setup.cluster.functions;
    let mut buffers = Vec::new();
    let mut names = Vec::new();
    let mut buf_index = BTreeMap::new();
    for (name, f) in opt_functions {
        let buf = DataBuffer::allocate(f, setup.precision)?;
        buf_index.insert(name.clone(), buffers.len());
        names.push(name.clone());
        buffers.push(buf);
    }

    // Stencil declarations by uppercase symbol.
    let stencil_points: BTreeMap<String, &crate::ops::OpsStencil> = program
        .stencils
        .iter()
        .map(|s| (s.decl_name(), s))
        .collect();

    let const_list: Vec<(String, f64)> = setup.constants().into_iter().collect();
    let const_index: BTreeMap<String, usize> = const_list
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (n.clone(), i))
        .collect();
    let consts: Vec<f64> = const_list.into_iter().map(|(_, v)| v).collect();
    let strides: Vec<Vec<usize>> = buffers.iter().map(|b| b.strides()).collect();

    // Compile each par loop's kernel against its argument binding.
    struct CompiledLoop {
        bounds: Vec<(i64, i64)>,
        temps: Vec<Program>,
        writes: Vec<(WriteTarget, Program)>,
        write_info: (usize, Option<i64>),
    }
    let mut compiled = Vec::new();
    for pl in &program.par_loops {
        let kernel = &program.kernels[pl.kernel];
        // Positional binding: accessor index i resolves through arg i.
        let mut accessor_args: Vec<(usize, Option<i64>)> = Vec::new();
        let mut write_info = None;
        for arg in &pl.args {
            if let ParLoopArg::Dat {
                func, shift, mode, ..
            } = arg
            {
                let buf = buf_index[func];
                let shift = shift.map(|k| k as i64);
                accessor_args.push((buf, shift));
                if matches!(mode, AccessMode::Write | AccessMode::ReadWrite) {
                    write_info = Some((buf, shift));
                }
            }
        }
        // Validate every body access against the declared stencil, then
        // compile.
        for (pi, param) in kernel.array_params().enumerate() {
            let declared = pl.args.iter().find_map(|a| match a {
                ParLoopArg::Dat {
                    dataset, stencil, ..
                } if dataset == &param.name => stencil_points.get(stencil),
                _ => None,
            });
            let Some(declared) = declared else {
                return Err(Error::UnboundSymbol(param.name.clone()));
            };
            for stmt in &kernel.body {
                let exprs: Vec<&Expr> = match stmt {
                    crate::iet::Stmt::Assign(eq) => vec![&eq.lhs, &eq.rhs],
                    crate::iet::Stmt::DefineScalar { rhs, .. } => vec![rhs],
                    crate::iet::Stmt::TimeIndexDef { .. } => vec![],
                };
                for e in exprs {
                    check_stencil(e, pi, &param.name, &declared.points)?;
                }
            }
        }

        let temp_names: Vec<String> = kernel
            .body
            .iter()
            .filter_map(|s| match s {
                crate::iet::Stmt::DefineScalar { name, .. } => Some(name.clone()),
                _ => None,
            })
            .collect();
        let temp_index: BTreeMap<String, usize> = temp_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let ctx = CompileCtx {
            buf_index: &buf_index,
            strides: &strides,
            const_index: &const_index,
            temp_index: &temp_index,
            accessor_args: Some(&accessor_args),
        };
        let mut temps = Vec::new();
        let mut writes = Vec::new();
        for stmt in &kernel.body {
            match stmt {
                crate::iet::Stmt::DefineScalar { rhs, .. } => temps.push(compile(rhs, &ctx)?),
                crate::iet::Stmt::Assign(eq) => {
                    let Expr::Accessor(acc) = &eq.lhs else {
                        return Err(Error::WriteToScalar(eq.lhs.to_string()));
                    };
                    let (buf, shift) = accessor_args[acc.index];
                    writes.push((
                        WriteTarget {
                            buf,
                            shift,
                            delta: offsets_delta(&acc.offsets, &strides[buf]),
                        },
                        compile(&eq.rhs, &ctx)?,
                    ));
                }
                crate::iet::Stmt::TimeIndexDef { .. } => {}
            }
        }
        let bounds: Vec<(i64, i64)> = pl
            .range
            .chunks(2)
            .map(|pair| (pair[0], pair[1]))
            .collect();
        compiled.push(CompiledLoop {
            bounds,
            temps,
            writes,
            write_info: write_info
                .ok_or_else(|| Error::Config("par loop writes no dataset".into()))?,
        });
    }

    // Initialize the written function.
    let written_func = setup
        .cluster
        .written_time_function()
        .ok_or_else(|| Error::InvalidFunction("no written time function".into()))?;
    let written = buf_index[&written_func.name];
    apply_initializer(&mut buffers[written], &setup.cluster.grid, &setup.initializer);

    let start = Instant::now();
    let mut last_write = (written, Some(1i64));
    for time in 0..setup.nt {
        for cl in &compiled {
            match setup.precision {
                ElementKind::F32 => kernel_sweep::<f32>(
                    &mut buffers,
                    &names,
                    &consts,
                    &cl.bounds,
                    &cl.temps,
                    &cl.writes,
                    time,
                )?,
                ElementKind::F64 => kernel_sweep::<f64>(
                    &mut buffers,
                    &names,
                    &consts,
                    &cl.bounds,
                    &cl.temps,
                    &cl.writes,
                    time,
                )?,
            }
            last_write = cl.write_info;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let n = buffers[last_write.0].num_buffers;
    let final_slot =
        ((setup.nt as i64 - 1 + last_write.1.unwrap_or(0)).rem_euclid(n as i64)) as usize;
    let buffer = buffers.swap_remove(last_write.0);
    let (sum, l2) = checksum(&buffer, final_slot);
    Ok(ExecOutcome {
        report: RunReport {
            backend: "virtual-ops".to_string(),
            checksum: sum,
            l2,
            steps: setup.nt,
            elapsed_s: elapsed,
        },
        buffer,
        final_slot,
    })
}

fn check_stencil(
    e: &Expr,
    param_index: usize,
    dataset: &str,
    declared: &std::collections::BTreeSet<Vec<i64>>,
) -> Result<()> {
    match e {
        Expr::Accessor(a) if a.index == param_index => {
            if !declared.contains(&a.offsets) {
                return Err(Error::StencilViolation {
                    dataset: dataset.to_string(),
                    offsets: a.offsets.clone(),
                });
            }
            Ok(())
        }
        Expr::Power(b, _) => check_stencil(b, param_index, dataset, declared),
        Expr::Div(n, d) => {
            check_stencil(n, param_index, dataset, declared)?;
            check_stencil(d, param_index, dataset, declared)
        }
        Expr::Product(fs) => fs
            .iter()
            .try_for_each(|f| check_stencil(f, param_index, dataset, declared)),
        Expr::Sum(ts) => ts
            .iter()
            .try_for_each(|t| check_stencil(t, param_index, dataset, declared)),
        _ => Ok(()),
    }
}

/// Test hook: nudge the first literal in the first kernel body so
/// verification visibly fails with a located difference.
pub fn inject_fault(program: &mut OpsProgram) {
    fn nudge(e: &mut Expr) -> bool {
        match e {
            Expr::Literal(r) => {
                let v = r.to_f64() + 1.0e-3;
                if let Some(nr) = crate::rational::Rational::from_f64_exact(v) {
                    *r = nr;
                    return true;
                }
                false
            }
            Expr::Power(b, _) => nudge(b),
            Expr::Div(n, d) => nudge(n) || nudge(d),
            Expr::Product(fs) => fs.iter_mut().any(nudge),
            Expr::Sum(ts) => ts.iter_mut().any(nudge),
            _ => false,
        }
    }
    for kernel in &mut program.kernels {
        for stmt in &mut kernel.body {
            let changed = match stmt {
                crate::iet::Stmt::Assign(eq) => nudge(&mut eq.rhs),
                crate::iet::Stmt::DefineScalar { rhs, .. } => nudge(rhs),
                crate::iet::Stmt::TimeIndexDef { .. } => false,
            };
            if changed {
                return;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Toolchain runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ToolchainConfig {
    pub compiler: String,
    pub flags: Vec<String>,
    pub workdir: Option<PathBuf>,
}

impl ToolchainConfig {
    /// Default toolchain; STENCILFORGE_CC overrides the compiler command.
    pub fn from_env() -> ToolchainConfig {
        ToolchainConfig {
            compiler: std::env::var("STENCILFORGE_CC").unwrap_or_else(|_| "cc".to_string()),
            flags: vec!["-O2".to_string()],
            workdir: None,
        }
    }

    pub fn available(&self) -> bool {
        std::process::Command::new(&self.compiler)
            .arg("--version")
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .is_ok()
    }
}

/// Parse the emitted program's report line:
/// `RESULT checksum=<%.17g> l2=<%.17g> steps=<int> elapsed_s=<%.6f>`.
pub fn parse_result_line(output: &str) -> Result<RunReport> {
    for line in output.lines() {
        let Some(rest) = line.strip_prefix("RESULT ") else {
            continue;
        };
        let mut fields = BTreeMap::new();
        for part in rest.split_whitespace() {
            if let Some((k, v)) = part.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::ResultParse(format!("missing or bad field `{k}`")))
        };
        return Ok(RunReport {
            backend: "compiled".to_string(),
            checksum: get("checksum")?,
            l2: get("l2")?,
            steps: get("steps")? as usize,
            elapsed_s: get("elapsed_s")?,
        });
    }
    Err(Error::ResultParse("no RESULT line in output".into()))
}

/// Write the artifact, compile it with the system toolchain, run it, and
/// parse its RESULT line. A missing compiler is a distinct error so callers
/// can skip instead of fail.
pub fn compile_and_run(artifact: &SourceArtifact, cfg: &ToolchainConfig) -> Result<RunReport> {
    let dir = match &cfg.workdir {
        Some(d) => d.clone(),
        None => {
            let d = std::env::temp_dir().join(format!(
                "stencilforge-{}-{}",
                std::process::id(),
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_nanos())
                    .unwrap_or(0)
            ));
            d
        }
    };
    std::fs::create_dir_all(&dir)?;
    let src = dir.join(&artifact.filename);
    std::fs::write(&src, &artifact.text)?;
    let exe = dir.join("program");
    let mut cmd = std::process::Command::new(&cfg.compiler);
    cmd.arg(&src).args(&cfg.flags).arg("-o").arg(&exe).arg("-lm");
    let compile_out = match cmd.output() {
        Ok(o) => o,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::CompilerMissing(cfg.compiler.clone()))
        }
        Err(e) => return Err(Error::Io(e)),
    };
    if !compile_out.status.success() {
        return Err(Error::CompileFailure {
            output: format!(
                "{}{}",
                String::from_utf8_lossy(&compile_out.stdout),
                String::from_utf8_lossy(&compile_out.stderr)
            ),
        });
    }
    let run_out = std::process::Command::new(&exe)
        .output()
        .map_err(|e| Error::RunFailure(e.to_string()))?;
    if !run_out.status.success() {
        return Err(Error::RunFailure(format!(
            "exit status {:?}",
            run_out.status.code()
        )));
    }
    parse_result_line(&String::from_utf8_lossy(&run_out.stdout))
}

// ---------------------------------------------------------------------------
// Equivalence verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Interpreter,
    VirtualOps,
    CompiledCore,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Interpreter => "interpret",
            Backend::VirtualOps => "virtual-ops",
            Backend::CompiledCore => "compiled-core",
        }
    }
}

/// Comparison tolerances. Same-mode pairs compare full fields; cross-mode
/// pairs tolerate reassociation differences; compiled runs compare checksums.
#[derive(Debug, Clone, Copy)]
pub struct TolerancePolicy {
    pub same_mode_f32: f64,
    pub same_mode_f64: f64,
    pub cross_mode_f32: f64,
    pub cross_mode_f64: f64,
    pub compiled_checksum_rel: f64,
}

impl Default for TolerancePolicy {
    fn default() -> TolerancePolicy {
        TolerancePolicy {
            same_mode_f32: 1.0e-6,
            same_mode_f64: 1.0e-12,
            // Not pinned by any listing; reassociation noise in f32 stays
            // well below this for the problem sizes verified here.
            cross_mode_f32: 1.0e-4,
            cross_mode_f64: 1.0e-10,
            compiled_checksum_rel: 1.0e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairReport {
    pub a: String,
    pub b: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub at: Vec<i64>,
    pub tolerance: f64,
    pub pass: bool,
    pub checksum_only: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ComparisonReport {
    pub pairs: Vec<PairReport>,
    pub skipped: Vec<String>,
}

impl ComparisonReport {
    pub fn all_pass(&self) -> bool {
        self.pairs.iter().all(|p| p.pass)
    }
}

/// Pointwise interior comparison of two run outputs.
pub fn compare_buffers(
    a: &DataBuffer,
    slot_a: usize,
    b: &DataBuffer,
    slot_b: usize,
) -> Result<(f64, f64, Vec<i64>)> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch);
    }
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut at = vec![0i64; a.shape.len()];
    for point in crate::grid::domain_points(&a.shape) {
        let sa = if a.num_buffers > 1 { Some(slot_a) } else { None };
        let sb = if b.num_buffers > 1 { Some(slot_b) } else { None };
        let va = a.get(a.linear_index(sa, &point)?);
        let vb = b.get(b.linear_index(sb, &point)?);
        let abs = (va - vb).abs();
        let denom = va.abs().max(vb.abs());
        let rel = if denom > 0.0 { abs / denom } else { 0.0 };
        if rel > max_rel {
            max_rel = rel;
            at = point.clone();
        }
        max_abs = max_abs.max(abs);
    }
    Ok((max_abs, max_rel, at))
}

struct NamedRun {
    label: String,
    mode: DseMode,
    outcome: Option<ExecOutcome>,
    report: RunReport,
}

/// Run the requested backend/mode combinations and compare them pairwise.
/// A missing toolchain records a skip for the compiled backend.
pub fn verify_equivalence(
    setup: &ProblemSetup,
    backends: &[Backend],
    modes: &[DseMode],
    policy: &TolerancePolicy,
) -> Result<ComparisonReport> {
    let mut report = ComparisonReport::default();
    let mut runs: Vec<NamedRun> = Vec::new();
    for &mode in modes {
        for &backend in backends {
            let label = format!("{}/{}", backend.name(), mode.name());
            match backend {
                Backend::Interpreter => {
                    let out = interpret(setup, mode)?;
                    runs.push(NamedRun {
                        label,
                        mode,
                        report: out.report.clone(),
                        outcome: Some(out),
                    });
                }
                Backend::VirtualOps => {
                    let opt = apply_dse(mode, &setup.cluster);
                    let root = crate::iet::lower_cluster(&opt, "nt")?;
                    let mut program =
                        crate::ops::specialize_program(&root, &opt, setup.precision)?;
                    if std::env::var("STENCILFORGE_INJECT_FAULT").is_ok() {
                        inject_fault(&mut program);
                    }
                    let out = run_virtual_ops(&program, setup)?;
                    runs.push(NamedRun {
                        label,
                        mode,
                        report: out.report.clone(),
                        outcome: Some(out),
                    });
                }
                Backend::CompiledCore => {
                    let cfg = ToolchainConfig::from_env();
                    if !cfg.available() {
                        report.skipped.push(label);
                        continue;
                    }
                    let opt = apply_dse(mode, &setup.cluster);
                    let root = crate::iet::lower_cluster(&opt, "nt")?;
                    let artifact = emit_core_program(
                        &root,
                        EmitTarget::CoreSerial,
                        &opt,
                        &MainConfig {
                            problem: &setup.name,
                            nt: setup.nt,
                            constants: &setup.constants(),
                            initializer: &setup.initializer,
                            kind: setup.precision,
                        },
                    );
                    match compile_and_run(&artifact, &cfg) {
                        Ok(r) => runs.push(NamedRun {
                            label,
                            mode,
                            report: r,
                            outcome: None,
                        }),
                        Err(Error::CompilerMissing(_)) => report.skipped.push(label),
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }
    if runs.len() < 2 && report.skipped.is_empty() {
        return Err(Error::Config("verification needs at least two runs".into()));
    }
    for i in 0..runs.len() {
        for j in (i + 1)..runs.len() {
            let (ra, rb) = (&runs[i], &runs[j]);
            let same_mode = ra.mode == rb.mode;
            let tolerance = match (same_mode, setup.precision) {
                (true, ElementKind::F32) => policy.same_mode_f32,
                (true, ElementKind::F64) => policy.same_mode_f64,
                (false, ElementKind::F32) => policy.cross_mode_f32,
                (false, ElementKind::F64) => policy.cross_mode_f64,
            };
            match (&ra.outcome, &rb.outcome) {
                (Some(oa), Some(ob)) => {
                    let (max_abs, max_rel, at) =
                        compare_buffers(&oa.buffer, oa.final_slot, &ob.buffer, ob.final_slot)?;
                    report.pairs.push(PairReport {
                        a: ra.label.clone(),
                        b: rb.label.clone(),
                        max_abs,
                        max_rel,
                        at,
                        tolerance,
                        pass: max_rel <= tolerance,
                        checksum_only: false,
                    });
                }
                _ => {
                    let ca = ra.report.checksum;
                    let cb = rb.report.checksum;
                    let abs = (ca - cb).abs();
                    let denom = ca.abs().max(cb.abs());
                    let rel = if denom > 0.0 { abs / denom } else { 0.0 };
                    let tolerance = policy.compiled_checksum_rel.max(tolerance);
                    report.pairs.push(PairReport {
                        a: ra.label.clone(),
                        b: rb.label.clone(),
                        max_abs: abs,
                        max_rel: rel,
                        at: Vec::new(),
                        tolerance,
                        pass: rel <= tolerance,
                        checksum_only: true,
                    });
                }
            }
        }
    }
    Ok(report)
}
