//! Command-line entry point: codegen, verify and bench subcommands wiring
//! the built-in problems through the pipeline.
//!
//! Exit codes are a stable contract: 0 success, 1 verification failure,
//! 2 configuration error, 3 internal pipeline error.
//!
//! Environment variables always lose to explicit flags: STENCILFORGE_CC
//! picks the C compiler unless a toolchain config names one, and
//! STENCILFORGE_OUT supplies the output directory unless --out is given.

use std::collections::BTreeSet;
use std::path::PathBuf;

use crate::bench::{emit_report, run_benchmark, BenchMatrix, MachineSpec, ReportFormat};
use crate::dse::{apply_dse, DseMode};
use crate::emit::{emit_core_program, emit_ops_program, EmitTarget, MainConfig};
use crate::error::{Error, Result};
use crate::exec::{verify_equivalence, Backend, TolerancePolicy};
use crate::grid::ElementKind;
use crate::iet::lower_cluster;
use crate::ops::specialize_program;
use crate::problems::{self, ProblemKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Codegen,
    Verify,
    Bench,
}

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub command: Command,
    pub problem: ProblemKind,
    pub shape: Vec<usize>,
    pub space_orders: Vec<usize>,
    pub nt: Option<usize>,
    pub modes: Vec<DseMode>,
    pub targets: Vec<EmitTarget>,
    pub precision: ElementKind,
    pub out_dir: PathBuf,
    pub spec_file: Option<PathBuf>,
}

impl CliConfig {
    fn defaults(command: Command) -> CliConfig {
        CliConfig {
            command,
            problem: ProblemKind::Diffusion,
            shape: vec![64, 64],
            space_orders: vec![2],
            nt: None,
            modes: vec![DseMode::Advanced],
            targets: vec![EmitTarget::Ops],
            precision: ElementKind::F32,
            out_dir: std::env::var("STENCILFORGE_OUT")
                .map(PathBuf::from)
                .unwrap_or_else(|_| PathBuf::from(".")),
            spec_file: None,
        }
    }

    /// Effective step count: benchmarks default to 1000 steps, everything
    /// else to 100.
    pub fn nt(&self) -> usize {
        self.nt.unwrap_or(match self.command {
            Command::Bench => 1000,
            _ => 100,
        })
    }

    fn single_so(&self) -> Result<usize> {
        if self.space_orders.len() != 1 {
            return Err(Error::Config(
                "this command takes a single --so value".into(),
            ));
        }
        Ok(self.space_orders[0])
    }

    fn single_mode(&self) -> Result<DseMode> {
        if self.modes.len() != 1 {
            return Err(Error::Config(
                "this command takes a single --dse value".into(),
            ));
        }
        Ok(self.modes[0])
    }
}

pub const USAGE: &str = "usage: stencilforge <codegen|verify|bench> [options]

options:
  --problem {diffusion,convection}    problem to build (default diffusion)
  --shape NX[,NY[,NZ]]                grid points per dimension (default 64,64)
  --so N[,N...]                       space order(s); lists for bench only (default 2)
  --nt N                              timesteps (default 100; bench 1000)
  --dse {noop,advanced,aggressive}[,..]  DSE mode(s); lists for bench only
  --target {core-serial,core-parallel,ops}[,..]  codegen targets (default ops)
  --precision {f32,f64}               element type (default f32)
  --out DIR                           output directory (default .)
  --spec FILE                         machine spec file (bench)
";

fn parse_usize_list(value: &str, flag: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad {flag} entry `{p}`")))
        })
        .collect()
}

/// Parse command-line arguments (program name already stripped).
pub fn parse_args(args: &[String]) -> Result<CliConfig> {
    let mut iter = args.iter();
    let command = match iter.next().map(|s| s.as_str()) {
        Some("codegen") => Command::Codegen,
        Some("verify") => Command::Verify,
        Some("bench") => Command::Bench,
        Some(other) => {
            return Err(Error::Config(format!("unknown command `{other}`")));
        }
        None => return Err(Error::Config("missing command".into())),
    };
    let mut cfg = CliConfig::defaults(command);
    while let Some(flag) = iter.next() {
        let mut value = || {
            iter.next()
                .cloned()
                .ok_or_else(|| Error::Config(format!("{flag} needs a value")))
        };
        match flag.as_str() {
            "--problem" => {
                let v = value()?;
                cfg.problem = ProblemKind::parse(&v)
                    .ok_or_else(|| Error::Config(format!("unknown problem `{v}`")))?;
            }
            "--shape" => {
                cfg.shape = parse_usize_list(&value()?, "--shape")?;
            }
            "--so" => {
                cfg.space_orders = parse_usize_list(&value()?, "--so")?;
            }
            "--nt" => {
                let v = value()?;
                cfg.nt = Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad --nt `{v}`")))?,
                );
            }
            "--dse" => {
                let v = value()?;
                cfg.modes = v
                    .split(',')
                    .map(|p| {
                        DseMode::parse(p.trim())
                            .ok_or_else(|| Error::Config(format!("unknown dse mode `{p}`")))
                    })
                    .collect::<Result<_>>()?;
            }
            "--target" => {
                let v = value()?;
                cfg.targets = v
                    .split(',')
                    .map(|p| {
                        EmitTarget::parse(p.trim())
                            .ok_or_else(|| Error::Config(format!("unknown target `{p}`")))
                    })
                    .collect::<Result<_>>()?;
            }
            "--precision" => {
                let v = value()?;
                cfg.precision = match v.as_str() {
                    "f32" => ElementKind::F32,
                    "f64" => ElementKind::F64,
                    other => {
                        return Err(Error::Config(format!("unknown precision `{other}`")));
                    }
                };
            }
            "--out" => {
                cfg.out_dir = PathBuf::from(value()?);
            }
            "--spec" => {
                cfg.spec_file = Some(PathBuf::from(value()?));
            }
            other => {
                return Err(Error::Config(format!("unknown flag `{other}`")));
            }
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &CliConfig) -> Result<()> {
    for &so in &cfg.space_orders {
        if so < 2 || so % 2 != 0 {
            return Err(Error::Config(format!(
                "space order {so} must be even and >= 2"
            )));
        }
    }
    if cfg.shape.is_empty() || cfg.shape.len() > crate::grid::MAX_DIMS {
        return Err(Error::Config("shape takes 1 to 3 dimensions".into()));
    }
    if let Some(nt) = cfg.nt {
        if nt == 0 {
            return Err(Error::Config("nt must be >= 1".into()));
        }
    }
    if cfg.targets.is_empty() {
        return Err(Error::Config("at least one --target required".into()));
    }
    let core_targets = cfg
        .targets
        .iter()
        .filter(|t| matches!(t, EmitTarget::CoreSerial | EmitTarget::CoreParallel))
        .count();
    if core_targets > 1 {
        return Err(Error::Config(
            "core-serial and core-parallel share one output filename; pick one per run".into(),
        ));
    }
    let distinct: BTreeSet<&str> = cfg.targets.iter().map(|t| t.name()).collect();
    if distinct.len() != cfg.targets.len() {
        return Err(Error::Config("duplicate --target entries".into()));
    }
    Ok(())
}

/// Written files plus manifest data.
#[derive(Debug)]
pub struct CodegenOutcome {
    pub files: Vec<PathBuf>,
    pub manifest_path: PathBuf,
}

/// Emit the requested targets plus a JSON manifest describing kernels,
/// stencils and iteration ranges.
pub fn cmd_codegen(cfg: &CliConfig) -> Result<CodegenOutcome> {
    let so = cfg.single_so()?;
    let mode = cfg.single_mode()?;
    let setup = problems::build(cfg.problem, &cfg.shape, so, cfg.nt(), cfg.precision)?;
    let opt = apply_dse(mode, &setup.cluster);
    let root = lower_cluster(&opt, "nt")?;
    let program = specialize_program(&root, &opt, cfg.precision)?;
    if !program.offloaded {
        eprintln!("warning: no affine loop nests found; program left untouched");
    }
    let main_cfg = MainConfig {
        problem: setup.name.as_str(),
        nt: setup.nt,
        constants: &setup.constants(),
        initializer: &setup.initializer,
        kind: cfg.precision,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut artifacts = Vec::new();
    for target in &cfg.targets {
        match target {
            EmitTarget::Ops => {
                let (main_src, header) = emit_ops_program(&program, &opt, &main_cfg);
                artifacts.push(main_src);
                artifacts.push(header);
            }
            t => {
                artifacts.push(emit_core_program(&root, *t, &opt, &main_cfg));
            }
        }
    }
    let mut files = Vec::new();
    for artifact in &artifacts {
        let path = cfg.out_dir.join(&artifact.filename);
        std::fs::write(&path, &artifact.text)?;
        files.push(path);
    }

    let kernels: Vec<serde_json::Value> = program
        .kernels
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let stencil_names: Vec<String> = program.par_loops[i]
                .args
                .iter()
                .filter_map(|a| match a {
                    crate::ops::ParLoopArg::Dat { stencil, .. } => Some(stencil.clone()),
                    _ => None,
                })
                .collect();
            serde_json::json!({
                "name": k.name,
                "params": k.params.iter().map(|p| p.name.clone()).collect::<Vec<_>>(),
                "stencils": stencil_names,
            })
        })
        .collect();
    let manifest = serde_json::json!({
        "files": artifacts.iter().map(|a| a.filename.clone()).collect::<Vec<_>>(),
        "kernels": kernels,
        "ranges": program.ranges.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>(),
    });
    let manifest_path = cfg.out_dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("serialize manifest"),
    )?;
    Ok(CodegenOutcome {
        files,
        manifest_path,
    })
}

/// Run interpreter vs virtual-OPS (plus the compiled core program when a
/// toolchain is present) and print a pass/fail table. Returns overall pass.
pub fn cmd_verify(cfg: &CliConfig) -> Result<bool> {
    let so = cfg.single_so()?;
    let mode = cfg.single_mode()?;
    let setup = problems::build(cfg.problem, &cfg.shape, so, cfg.nt(), cfg.precision)?;
    let report = verify_equivalence(
        &setup,
        &[Backend::Interpreter, Backend::VirtualOps, Backend::CompiledCore],
        &[mode],
        &TolerancePolicy::default(),
    )?;
    println!(
        "{:<44} {:>12} {:>10} {:>8}  {}",
        "pair", "max_rel", "tol", "status", "max at"
    );
    for pair in &report.pairs {
        println!(
            "{:<44} {:>12.3e} {:>10.1e} {:>8}  {:?}",
            format!("{} vs {}", pair.a, pair.b),
            pair.max_rel,
            pair.tolerance,
            if pair.pass { "PASS" } else { "FAIL" },
            pair.at
        );
    }
    for label in &report.skipped {
        println!("{label:<44} {:>12} {:>10} {:>8}", "-", "-", "SKIPPED");
    }
    Ok(report.all_pass())
}

/// Run the benchmark matrix and write bench.csv / bench.json.
pub fn cmd_bench(cfg: &CliConfig) -> Result<()> {
    let spec_path = cfg
        .spec_file
        .as_ref()
        .ok_or_else(|| Error::Config("bench requires --spec FILE".into()))?;
    if !spec_path.exists() {
        return Err(Error::Config(format!(
            "spec file {} not found",
            spec_path.display()
        )));
    }
    let spec = MachineSpec::load(spec_path)?;
    let matrix = BenchMatrix {
        problem: cfg.problem,
        shapes: vec![cfg.shape.clone()],
        space_orders: cfg.space_orders.clone(),
        modes: cfg.modes.clone(),
        nt: cfg.nt(),
        precision: cfg.precision,
        repetitions: 3,
    };
    let outcome = run_benchmark(&matrix, &spec);
    for (cell, error) in &outcome.failures {
        eprintln!("bench cell {cell} failed: {error}");
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("bench.csv"),
        emit_report(&outcome.metrics, &spec, ReportFormat::Csv),
    )?;
    std::fs::write(
        cfg.out_dir.join("bench.json"),
        emit_report(&outcome.metrics, &spec, ReportFormat::Json),
    )?;
    println!(
        "bench: {} rows written to {}",
        outcome.metrics.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

/// Dispatch a parsed config; returns the process exit code.
pub fn run(cfg: &CliConfig) -> i32 {
    let result: Result<i32> = match cfg.command {
        Command::Codegen => cmd_codegen(cfg).map(|out| {
            for f in &out.files {
                println!("wrote {}", f.display());
            }
            println!("wrote {}", out.manifest_path.display());
            EXIT_OK
        }),
        Command::Verify => cmd_verify(cfg).map(|pass| if pass { EXIT_OK } else { EXIT_VERIFY_FAILED }),
        Command::Bench => cmd_bench(cfg).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_PIPELINE
        }
    }
}
