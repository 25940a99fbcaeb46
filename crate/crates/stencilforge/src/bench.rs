//! FLOP/traffic accounting, roofline bounds, and the benchmark harness.
//!
//! Traffic uses the perfect-cache streaming model: every distinct dataset a
//! step touches moves once through memory, interior points times element
//! size. Attainable performance is the classic roofline bound
//! min(peak, bandwidth * OI). Timing is best-of-3 with a discarded warm-up,
//! cells strictly sequential.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::dse::{apply_dse, count_ops, DseMode, OptimizedCluster};
use crate::error::{Error, Result};
use crate::exec::interpret_optimized;
use crate::grid::ElementKind;
use crate::problems::{self, ProblemKind};

/// Machine description for roofline bounds, loadable from a key=value file.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineSpec {
    pub name: String,
    pub peak_gflops: f64,
    pub measured_peak_gflops: Option<f64>,
    pub bandwidth_gbs: f64,
}

impl MachineSpec {
    pub fn new(
        name: &str,
        peak_gflops: f64,
        measured_peak_gflops: Option<f64>,
        bandwidth_gbs: f64,
    ) -> Result<MachineSpec> {
        if !(peak_gflops > 0.0) || !(bandwidth_gbs > 0.0) {
            return Err(Error::Config("machine peak and bandwidth must be positive".into()));
        }
        if let Some(m) = measured_peak_gflops {
            if !(m > 0.0) || m > peak_gflops {
                return Err(Error::Config(
                    "measured peak must be positive and at most the ideal peak".into(),
                ));
            }
        }
        Ok(MachineSpec {
            name: name.to_string(),
            peak_gflops,
            measured_peak_gflops,
            bandwidth_gbs,
        })
    }

    /// Parse the simple `key=value` spec format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<MachineSpec> {
        let mut name = None;
        let mut peak = None;
        let mut measured = None;
        let mut bandwidth = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "spec line {} is not key=value: `{line}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            match key {
                "name" => name = Some(value.to_string()),
                "peak_gflops" => peak = value.parse::<f64>().ok(),
                "measured_peak_gflops" => measured = value.parse::<f64>().ok(),
                "bandwidth_gbs" => bandwidth = value.parse::<f64>().ok(),
                other => {
                    return Err(Error::Config(format!("unknown spec key `{other}`")));
                }
            }
        }
        MachineSpec::new(
            &name.ok_or_else(|| Error::Config("spec missing `name`".into()))?,
            peak.ok_or_else(|| Error::Config("spec missing `peak_gflops`".into()))?,
            measured,
            bandwidth.ok_or_else(|| Error::Config("spec missing `bandwidth_gbs`".into()))?,
        )
    }

    pub fn load(path: &std::path::Path) -> Result<MachineSpec> {
        MachineSpec::parse(&std::fs::read_to_string(path)?)
    }
}

/// Roofline bound: min(compute peak, bandwidth * operational intensity).
pub fn attainable(spec: &MachineSpec, oi: f64) -> f64 {
    spec.peak_gflops.min(spec.bandwidth_gbs * oi)
}

/// Arithmetic operations per grid point and step, temps included.
pub fn flops_per_point(opt: &OptimizedCluster) -> usize {
    count_ops(opt).total()
}

/// Bytes per step under the perfect-cache model: distinct datasets touched
/// times points times element size.
pub fn traffic_per_step(opt: &OptimizedCluster, kind: ElementKind) -> usize {
    let mut datasets: BTreeSet<(String, Option<i64>)> = BTreeSet::new();
    for e in opt.all_exprs() {
        for acc in crate::expr::retrieve_indexed(e) {
            datasets.insert((acc.func, acc.time));
        }
    }
    datasets.len() * iteration_points(opt) * kind.size_bytes()
}

/// Points one step updates (the iteration range, not the padded extent).
pub fn iteration_points(opt: &OptimizedCluster) -> usize {
    opt.grid
        .shape
        .iter()
        .map(|&s| match opt.subdomain {
            crate::expr::Subdomain::Full => s,
            crate::expr::Subdomain::Interior => s.saturating_sub(2),
        })
        .product()
}

/// One benchmark measurement with its derived roofline quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub backend: String,
    pub dse: DseMode,
    pub so: usize,
    pub shape: Vec<usize>,
    pub nt: usize,
    pub flops_total: f64,
    pub bytes_total: f64,
    pub oi: f64,
    pub runtime_s: f64,
    pub gflops_achieved: f64,
    pub attainable_gflops: f64,
    pub peak_pct: f64,
}

impl RunMetrics {
    fn derive(
        backend: &str,
        dse: DseMode,
        so: usize,
        shape: &[usize],
        nt: usize,
        flops_total: f64,
        bytes_total: f64,
        runtime_s: f64,
        spec: &MachineSpec,
    ) -> RunMetrics {
        let oi = flops_total / bytes_total;
        let gflops_achieved = flops_total / runtime_s / 1.0e9;
        let attainable_gflops = attainable(spec, oi);
        RunMetrics {
            backend: backend.to_string(),
            dse,
            so,
            shape: shape.to_vec(),
            nt,
            flops_total,
            bytes_total,
            oi,
            runtime_s,
            gflops_achieved,
            attainable_gflops,
            peak_pct: 100.0 * gflops_achieved / attainable_gflops,
        }
    }

    pub fn nx(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn ny(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }
}

/// The benchmark matrix: every combination of space order, shape and DSE
/// mode runs `nt` steps on the interpreter backend.
#[derive(Debug, Clone)]
pub struct BenchMatrix {
    pub problem: ProblemKind,
    pub shapes: Vec<Vec<usize>>,
    pub space_orders: Vec<usize>,
    pub modes: Vec<DseMode>,
    pub nt: usize,
    pub precision: ElementKind,
    pub repetitions: usize,
}

impl Default for BenchMatrix {
    fn default() -> BenchMatrix {
        BenchMatrix {
            problem: ProblemKind::Diffusion,
            shapes: vec![vec![64, 64]],
            space_orders: vec![2],
            modes: vec![DseMode::Advanced],
            nt: 1000,
            precision: ElementKind::F32,
            repetitions: 3,
        }
    }
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub metrics: Vec<RunMetrics>,
    /// Cells that failed, with their error text; the matrix keeps going.
    pub failures: Vec<(String, String)>,
}

fn bench_cell(
    matrix: &BenchMatrix,
    shape: &[usize],
    so: usize,
    mode: DseMode,
    spec: &MachineSpec,
) -> Result<RunMetrics> {
    let setup = problems::build(matrix.problem, shape, so, matrix.nt, matrix.precision)?;
    let opt = apply_dse(mode, &setup.cluster);
    // Warm-up run, then best-of-N on the monotone clock.
    interpret_optimized(&opt, &setup)?;
    let mut best = f64::INFINITY;
    for _ in 0..matrix.repetitions.max(1) {
        let outcome = interpret_optimized(&opt, &setup)?;
        best = best.min(outcome.report.elapsed_s);
    }
    let points = iteration_points(&opt) as f64;
    let flops_total = flops_per_point(&opt) as f64 * points * matrix.nt as f64;
    let bytes_total = traffic_per_step(&opt, matrix.precision) as f64 * matrix.nt as f64;
    Ok(RunMetrics::derive(
        "interpret",
        mode,
        so,
        shape,
        matrix.nt,
        flops_total,
        bytes_total,
        best,
        spec,
    ))
}

/// Run the whole matrix sequentially; individual cell failures are recorded
/// and the remaining cells still run.
pub fn run_benchmark(matrix: &BenchMatrix, spec: &MachineSpec) -> BenchOutcome {
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    for shape in &matrix.shapes {
        for &so in &matrix.space_orders {
            for &mode in &matrix.modes {
                let label = format!(
                    "{}/{:?}/so{}/{}",
                    matrix.problem.name(),
                    shape,
                    so,
                    mode.name()
                );
                match bench_cell(matrix, shape, so, mode, spec) {
                    Ok(m) => metrics.push(m),
                    Err(e) => failures.push((label, e.to_string())),
                }
            }
        }
    }
    BenchOutcome { metrics, failures }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const CSV_HEADER: &str =
    "backend,dse,so,nx,ny,nt,flops,bytes,oi,runtime_s,gflops,attainable_gflops,peak_pct";

/// Render metrics as CSV (fixed column set) or JSON (fields plus the machine
/// spec block).
pub fn emit_report(metrics: &[RunMetrics], spec: &MachineSpec, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for m in metrics {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    m.backend,
                    m.dse.name(),
                    m.so,
                    m.nx(),
                    m.ny(),
                    m.nt,
                    m.flops_total,
                    m.bytes_total,
                    m.oi,
                    m.runtime_s,
                    m.gflops_achieved,
                    m.attainable_gflops,
                    m.peak_pct
                )
                .expect("write to string");
            }
            out
        }
        ReportFormat::Json => {
            let runs: Vec<serde_json::Value> = metrics
                .iter()
                .map(|m| {
                    serde_json::json!({
                        "backend": m.backend,
                        "dse": m.dse.name(),
                        "so": m.so,
                        "nx": m.nx(),
                        "ny": m.ny(),
                        "nt": m.nt,
                        "flops": m.flops_total,
                        "bytes": m.bytes_total,
                        "oi": m.oi,
                        "runtime_s": m.runtime_s,
                        "gflops": m.gflops_achieved,
                        "attainable_gflops": m.attainable_gflops,
                        "peak_pct": m.peak_pct,
                    })
                })
                .collect();
            let doc = serde_json::json!({
                "spec": {
                    "name": spec.name,
                    "peak_gflops": spec.peak_gflops,
                    "measured_peak_gflops": spec.measured_peak_gflops,
                    "bandwidth_gbs": spec.bandwidth_gbs,
                },
                "runs": runs,
            });
            serde_json::to_string_pretty(&doc).expect("serialize report")
        }
    }
}

/// Consistency used by the validation suite: every derived field recomputes
/// from its inputs.
pub fn metrics_consistent(m: &RunMetrics) -> bool {
    let oi_ok = (m.oi - m.flops_total / m.bytes_total).abs() <= 1e-12 * m.oi.abs();
    let gflops_ok = (m.gflops_achieved - m.flops_total / m.runtime_s / 1.0e9).abs()
        <= 1e-12 * m.gflops_achieved.abs();
    let pct_ok = (m.peak_pct - 100.0 * m.gflops_achieved / m.attainable_gflops).abs()
        <= 1e-9 * m.peak_pct.abs().max(1.0);
    oi_ok && gflops_ok && pct_ok
}
