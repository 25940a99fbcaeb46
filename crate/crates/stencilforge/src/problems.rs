//! The two built-in problems: 2-D diffusion (full domain, centered second
//! derivatives) and 2-D linear convection (interior subdomain, backward
//! first derivatives). Both write the forward time level of a single
//! time function named `u` after a restricted linear solve.

use crate::error::Result;
use crate::exec::{Initializer, ProblemSetup};
use crate::expr::{add, mul, Cluster, Eq, Expr, Subdomain};
use crate::fd::{expand_derivative, forward, solve_forward, time_derivative, DerivFlavor};
use crate::grid::{ConstantRole, ConstantSymbol, DiscreteFunction, ElementKind, Grid};
use crate::rational::Rational;

pub const DIFFUSION_NU: f64 = 0.5;
pub const CONVECTION_C: f64 = 1.0;

/// Diffusion: du/dt = nu * sum_d d2u/dx_d2 on a unit-extent grid, forward
/// Euler, dt at 90% of the explicit stability limit of the chosen stencil.
/// At space order 2 that limit is the classic h^2/(4 nu).
///
/// With `fold_nu` the diffusion coefficient multiplies into the stencil
/// weights exactly (nu = 1/2), which reproduces the generated kernels whose
/// only scalar parameters are dt, h_x, h_y; otherwise `nu` stays a named
/// constant and an extra kernel parameter.
pub fn diffusion(
    shape: &[usize],
    space_order: usize,
    nt: usize,
    precision: ElementKind,
    fold_nu: bool,
) -> Result<ProblemSetup> {
    let grid = Grid::new(shape, &vec![1.0; shape.len()])?;
    let u = DiscreteFunction::time("u", grid.clone(), space_order, 1)?;
    let spacing = grid.spacing();
    let dt = 0.9 * diffusion_stability_limit(&grid, space_order, DIFFUSION_NU)?;

    let mut constants = vec![ConstantSymbol::new("dt", dt, ConstantRole::Timestep)?];
    for (d, h) in spacing.iter().enumerate() {
        constants.push(ConstantSymbol::new(
            &grid.spacing_name(d),
            *h,
            ConstantRole::Spacing,
        )?);
    }

    let laplacian = add((0..grid.ndim())
        .map(|d| expand_derivative(&u, d, 2, DerivFlavor::Centered))
        .collect::<Result<Vec<_>>>()?);
    let nu_factor = if fold_nu {
        Expr::Literal(Rational::from_f64_exact(DIFFUSION_NU).expect("nu is dyadic"))
    } else {
        constants.push(ConstantSymbol::new(
            "nu",
            DIFFUSION_NU,
            ConstantRole::Coefficient,
        )?);
        Expr::sym("nu")
    };
    let rhs = mul(vec![nu_factor, laplacian]);
    let target = forward(&u)?;
    let stencil = solve_forward(&time_derivative(&u, "dt")?, &rhs, &target)?;
    let eq = Eq::new(target, stencil)?;
    let cluster = Cluster::new(vec![eq], grid, Subdomain::Full, vec![u], constants)?;
    ProblemSetup::new("diffusion", cluster, nt, Initializer::Hat, precision)
}

/// Linear convection: du/dt + c*du/dx + c*du/dy = 0 with backward first
/// differences, applied to the interior subdomain of a grid of extent 2.
pub fn convection(
    shape: &[usize],
    space_order: usize,
    nt: usize,
    precision: ElementKind,
) -> Result<ProblemSetup> {
    let grid = Grid::new(shape, &vec![2.0; shape.len()])?;
    let u = DiscreteFunction::time("u", grid.clone(), space_order, 1)?;
    let spacing = grid.spacing();
    let dt = 0.2 * spacing[0];

    let mut constants = vec![
        ConstantSymbol::new("dt", dt, ConstantRole::Timestep)?,
        ConstantSymbol::new("c", CONVECTION_C, ConstantRole::Coefficient)?,
    ];
    for (d, h) in spacing.iter().enumerate() {
        constants.push(ConstantSymbol::new(
            &grid.spacing_name(d),
            *h,
            ConstantRole::Spacing,
        )?);
    }

    let mut lhs_terms = vec![time_derivative(&u, "dt")?];
    for d in 0..grid.ndim() {
        lhs_terms.push(mul(vec![
            Expr::sym("c"),
            expand_derivative(&u, d, 1, DerivFlavor::Left)?,
        ]));
    }
    let lhs = add(lhs_terms);
    let target = forward(&u)?;
    let stencil = solve_forward(&lhs, &Expr::int(0), &target)?;
    let eq = Eq::new(target, stencil)?;
    let cluster = Cluster::new(vec![eq], grid, Subdomain::Interior, vec![u], constants)?;
    ProblemSetup::new("convection", cluster, nt, Initializer::Hat, precision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Diffusion,
    Convection,
}

impl ProblemKind {
    pub fn parse(s: &str) -> Option<ProblemKind> {
        match s {
            "diffusion" => Some(ProblemKind::Diffusion),
            "convection" => Some(ProblemKind::Convection),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Diffusion => "diffusion",
            ProblemKind::Convection => "convection",
        }
    }
}

/// Build a problem by kind; the CLI's diffusion folds nu to match the
/// generated-kernel parameter lists.
pub fn build(
    kind: ProblemKind,
    shape: &[usize],
    space_order: usize,
    nt: usize,
    precision: ElementKind,
) -> Result<ProblemSetup> {
    match kind {
        ProblemKind::Diffusion => diffusion(shape, space_order, nt, precision, true),
        ProblemKind::Convection => convection(shape, space_order, nt, precision),
    }
}

/// Explicit-Euler stability limit of the centered diffusion stencil: the
/// worst Fourier mode of each per-dimension second-derivative operator is
/// its alternating weight sum, so dt must satisfy
/// nu * dt * sum_d |A_d| / h_d^2 <= 2. At space order 2 with uniform h this
/// reduces to h^2 / (4 nu).
pub fn diffusion_stability_limit(grid: &Grid, space_order: usize, nu: f64) -> Result<f64> {
    let half = (space_order / 2) as i64;
    let offsets: Vec<i64> = (-half..=half).collect();
    let weights = crate::fd::fd_weights(2, &offsets)?;
    let alternating: f64 = offsets
        .iter()
        .zip(&weights)
        .map(|(&o, w)| w.to_f64() * if o % 2 == 0 { 1.0 } else { -1.0 })
        .sum::<f64>()
        .abs();
    let denom: f64 = grid
        .spacing()
        .iter()
        .map(|&h| alternating / (h * h))
        .sum();
    Ok(2.0 / (nu * denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dse::{apply_dse, count_ops, DseMode};

    #[test]
    fn diffusion_builds_and_counts() {
        let setup = diffusion(&[64, 64], 2, 100, ElementKind::F32, true).unwrap();
        assert_eq!(setup.cluster.equations.len(), 1);
        assert_eq!(setup.cluster.subdomain, Subdomain::Full);
        // Folded problem has dt, h_x, h_y only.
        let names: Vec<&str> = setup
            .cluster
            .constants
            .keys()
            .map(|s| s.as_str())
            .collect();
        assert_eq!(names, vec!["dt", "h_x", "h_y"]);

        // Division sites: 6 in the canonical advanced-mode body, exactly 2
        // after aggressive hoisting (the reciprocal definitions). Plain CSE
        // binds the one repeated numerator (the center term appears under
        // both denominators) and nothing else.
        let advanced = apply_dse(DseMode::Advanced, &setup.cluster);
        assert_eq!(count_ops(&advanced).div, 6);
        assert_eq!(advanced.temps.len(), 1);
        let aggressive = apply_dse(DseMode::Aggressive, &setup.cluster);
        assert_eq!(aggressive.temps.len(), 2);
        assert_eq!(count_ops(&aggressive).div, 2);
        assert_eq!(aggressive.temps[0].0, "r0");
        assert_eq!(aggressive.temps[1].0, "r1");
    }

    #[test]
    fn aggressive_r0_binds_h_y_denominator() {
        let setup = diffusion(&[64, 64], 2, 100, ElementKind::F32, true).unwrap();
        let aggressive = apply_dse(DseMode::Aggressive, &setup.cluster);
        let r0 = &aggressive.temps[0].1;
        let r1 = &aggressive.temps[1].1;
        let hy2 = Expr::Product(vec![Expr::sym("h_y"), Expr::sym("h_y")]);
        let hx2 = Expr::Product(vec![Expr::sym("h_x"), Expr::sym("h_x")]);
        assert_eq!(*r0, Expr::Div(Box::new(Expr::int(1)), Box::new(hy2)));
        assert_eq!(*r1, Expr::Div(Box::new(Expr::int(1)), Box::new(hx2)));
    }

    #[test]
    fn diffusion_unfolded_keeps_nu() {
        let setup = diffusion(&[16, 16], 2, 10, ElementKind::F32, false).unwrap();
        assert!(setup.cluster.constants.contains_key("nu"));
    }

    #[test]
    fn convection_builds() {
        let setup = convection(&[64, 64], 2, 100, ElementKind::F32).unwrap();
        assert_eq!(setup.cluster.subdomain, Subdomain::Interior);
        assert!(setup.cluster.constants.contains_key("c"));
        // Backward differences only reach one cell back.
        let accesses = crate::expr::retrieve_indexed(&setup.cluster.equations[0].rhs);
        for acc in &accesses {
            for ix in &acc.space {
                let k = ix.shift().unwrap();
                assert!((-1..=0).contains(&k));
            }
        }
    }

    #[test]
    fn diffusion_dt_below_stability_limit() {
        let setup = diffusion(&[64, 64], 2, 100, ElementKind::F32, true).unwrap();
        let limit =
            diffusion_stability_limit(&setup.cluster.grid, 2, DIFFUSION_NU).unwrap();
        assert!(setup.dt().unwrap() < limit);
        assert!((setup.dt().unwrap() - 0.9 * limit).abs() < 1e-15);
        // Order 2 reduces to the classic closed form.
        let h = setup.cluster.grid.spacing()[0];
        assert!((limit - h * h / (4.0 * DIFFUSION_NU)).abs() < 1e-18);
    }

    #[test]
    fn wide_stencils_stay_finite_over_long_runs() {
        // dt must track the stencil's own stability limit, not the order-2
        // closed form, or high-order runs blow up.
        for so in [4usize, 8, 12] {
            let setup = diffusion(&[16, 16], so, 500, ElementKind::F64, true).unwrap();
            let out = crate::exec::interpret(&setup, crate::dse::DseMode::Advanced).unwrap();
            assert!(out.report.checksum.is_finite(), "so={so}");
            assert!(out.report.l2 <= 200.0, "so={so} diverged: l2 {}", out.report.l2);
        }
    }
}
