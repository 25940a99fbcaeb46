//! Finite-difference shortcuts: weight generation, derivative expansion,
//! time shifts and the restricted linear solve used to rearrange update
//! equations for the forward time level.

use crate::error::{Error, Result};
use crate::expr::{add, canon, div, mul, neg, Expr};
use crate::grid::DiscreteFunction;
use crate::rational::Rational;

/// Weights `w` such that sum(w_i * f(x + o_i*h)) / h^m approximates
/// d^m f / dx^m with order `len(offsets) - m`, exact on monomials of degree
/// below `len(offsets)`. Computed with the Fornberg recurrence in exact
/// rational arithmetic.
pub fn fd_weights(deriv_order: usize, offsets: &[i64]) -> Result<Vec<Rational>> {
    let n = offsets.len();
    if n <= deriv_order {
        return Err(Error::SingularSystem);
    }
    for (i, a) in offsets.iter().enumerate() {
        if offsets[i + 1..].contains(a) {
            return Err(Error::SingularSystem);
        }
    }
    let m = deriv_order;
    let a: Vec<Rational> = offsets.iter().map(|&o| Rational::integer(o as i128)).collect();
    // c[i][k]: weight of point i for derivative order k, over points 0..=i.
    let mut c = vec![vec![Rational::zero(); m + 1]; n];
    c[0][0] = Rational::one();
    let mut c1 = Rational::one();
    let mut c4 = a[0];
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = Rational::one();
        let c5 = c4;
        c4 = a[i];
        for j in 0..i {
            let c3 = a[i] - a[j];
            c2 = c2 * c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (Rational::integer(k as i128) * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - Rational::integer(k as i128) * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    Ok(c.into_iter().map(|row| row[m]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivFlavor {
    Centered,
    Left,
}

/// Expand `f.d<dim><order>` into a weighted sum of accesses divided by
/// `h_dim^order`. Centered stencils span `-so/2 ..= so/2`; the left flavor is
/// the one-sided difference over `-order ..= 0`.
pub fn expand_derivative(
    f: &DiscreteFunction,
    dim: usize,
    deriv_order: usize,
    flavor: DerivFlavor,
) -> Result<Expr> {
    if deriv_order == 0 || deriv_order > 2 {
        return Err(Error::UnsupportedDerivative(deriv_order));
    }
    if dim >= f.grid.ndim() {
        return Err(Error::DimensionMismatch(format!(
            "dimension {dim} on a {}-d grid",
            f.grid.ndim()
        )));
    }
    let offsets: Vec<i64> = match flavor {
        DerivFlavor::Centered => {
            let half = (f.space_order / 2) as i64;
            (-half..=half).collect()
        }
        DerivFlavor::Left => (-(deriv_order as i64)..=0).collect(),
    };
    let weights = fd_weights(deriv_order, &offsets)?;
    let time = f.time_order.map(|_| 0);
    let terms: Vec<Expr> = offsets
        .iter()
        .zip(&weights)
        .filter(|(_, w)| !w.is_zero())
        .map(|(&o, &w)| {
            let mut point = vec![0i64; f.grid.ndim()];
            point[dim] = o;
            mul(vec![Expr::Literal(w), Expr::access(&f.name, time, &point)])
        })
        .collect();
    let h = Expr::sym(&f.grid.spacing_name(dim));
    let den = mul(vec![h; deriv_order]);
    Ok(div(add(terms), den))
}

/// Access to a time function shifted `k` levels from the current one.
pub fn time_shift(f: &DiscreteFunction, k: i64) -> Result<Expr> {
    let order = f
        .time_order
        .ok_or_else(|| Error::InvalidFunction(format!("`{}` has no time axis", f.name)))?
        as i64;
    if k.abs() > order {
        return Err(Error::ShiftOutOfRange {
            function: f.name.clone(),
            shift: k,
        });
    }
    Ok(Expr::access(&f.name, Some(k), &vec![0i64; f.grid.ndim()]))
}

/// `f` one time level ahead.
pub fn forward(f: &DiscreteFunction) -> Result<Expr> {
    time_shift(f, 1)
}

/// First-order forward time derivative: `(f[t+1] - f[t]) / dt`.
pub fn time_derivative(f: &DiscreteFunction, dt_name: &str) -> Result<Expr> {
    let ahead = time_shift(f, 1)?;
    let now = time_shift(f, 0)?;
    Ok(div(add(vec![ahead, neg(now)]), Expr::sym(dt_name)))
}

/// Extract `coeff` such that `term == coeff * target`, or report the term as
/// target-free. Nonlinear occurrences (inside powers or denominators) error.
fn target_coefficient(term: &Expr, target: &Expr) -> Result<Option<Expr>> {
    if term == target {
        return Ok(Some(Expr::int(1)));
    }
    let contains = |e: &Expr| contains_target(e, target);
    match term {
        Expr::Product(fs) => {
            let hits = fs.iter().filter(|f| contains(f)).count();
            if hits == 0 {
                return Ok(None);
            }
            if hits > 1 || !fs.iter().any(|f| f == target) {
                return Err(Error::NonlinearTarget);
            }
            let rest: Vec<Expr> = fs.iter().filter(|f| *f != target).cloned().collect();
            Ok(Some(mul(rest)))
        }
        Expr::Div(n, d) => {
            if contains(d) {
                return Err(Error::NonlinearTarget);
            }
            match target_coefficient(n, target)? {
                None => Ok(None),
                Some(c) => Ok(Some(div(c, (**d).clone()))),
            }
        }
        Expr::Power(b, _) if contains(b) => Err(Error::NonlinearTarget),
        _ => {
            if contains(term) {
                Err(Error::NonlinearTarget)
            } else {
                Ok(None)
            }
        }
    }
}

fn contains_target(e: &Expr, target: &Expr) -> bool {
    if e == target {
        return true;
    }
    match e {
        Expr::Power(b, _) => contains_target(b, target),
        Expr::Div(n, d) => contains_target(n, target) || contains_target(d, target),
        Expr::Product(fs) => fs.iter().any(|f| contains_target(f, target)),
        Expr::Sum(ts) => ts.iter().any(|t| contains_target(t, target)),
        _ => false,
    }
}

/// Rearrange `lhs == rhs` into a closed form for `target`, which must occur
/// linearly. This is a restricted rearrangement, not a general solver.
pub fn solve_forward(lhs: &Expr, rhs: &Expr, target: &Expr) -> Result<Expr> {
    let target = canon(target);
    let moved = add(vec![canon(lhs), neg(canon(rhs))]);
    let terms: Vec<Expr> = match moved {
        Expr::Sum(ts) => ts,
        other => vec![other],
    };
    let mut coeffs = Vec::new();
    let mut rest = Vec::new();
    for term in terms {
        match target_coefficient(&term, &target)? {
            Some(c) => coeffs.push(c),
            None => rest.push(term),
        }
    }
    if coeffs.is_empty() {
        return Err(Error::TargetNotFound);
    }
    let total = add(coeffs);
    if total.is_zero() {
        return Err(Error::TargetNotFound);
    }
    // target = -rest / total
    Ok(mul(vec![Expr::int(-1), add(rest), div(Expr::int(1), total)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::substitute;
    use crate::grid::Grid;

    fn rats(v: &[(i128, i128)]) -> Vec<Rational> {
        v.iter().map(|&(n, d)| Rational::new(n, d)).collect()
    }

    #[test]
    fn classic_weights() {
        // Frozen from the independent Vandermonde oracle (see the acceptance
        // suite, which recomputes them).
        assert_eq!(
            fd_weights(2, &[-1, 0, 1]).unwrap(),
            rats(&[(1, 1), (-2, 1), (1, 1)])
        );
        assert_eq!(fd_weights(1, &[0, -1]).unwrap(), rats(&[(1, 1), (-1, 1)]));
        assert_eq!(
            fd_weights(2, &[-2, -1, 0, 1, 2]).unwrap(),
            rats(&[(-1, 12), (4, 3), (-5, 2), (4, 3), (-1, 12)])
        );
    }

    #[test]
    fn weights_reject_bad_input() {
        assert!(matches!(fd_weights(2, &[-1, 0]), Err(Error::SingularSystem)));
        assert!(matches!(fd_weights(1, &[0, 0]), Err(Error::SingularSystem)));
    }

    #[test]
    fn weights_exact_on_monomials() {
        // Applying the weights to x^p at points o_i*h reproduces the exact
        // m-th derivative at 0 for all p < npoints; h = 1 keeps it rational.
        for (m, offsets) in [
            (1usize, vec![-1i64, 0, 1]),
            (2, vec![-1, 0, 1]),
            (1, vec![0, -1]),
            (2, vec![-2, -1, 0, 1, 2]),
            (1, vec![-3, -2, -1, 0, 1, 2, 3]),
            (2, vec![-6, -5, -4, -3, -2, -1, 0, 1, 2, 3, 4, 5, 6]),
        ] {
            let w = fd_weights(m, &offsets).unwrap();
            for p in 0..offsets.len() {
                let mut acc = Rational::zero();
                for (i, &o) in offsets.iter().enumerate() {
                    acc = acc + w[i] * Rational::integer(o as i128).pow(p as u32);
                }
                // d^m/dx^m x^p at 0 = m! when p == m, else 0.
                let expected = if p == m {
                    Rational::integer((1..=m as i128).product())
                } else {
                    Rational::zero()
                };
                assert_eq!(acc, expected, "m={m} offsets={offsets:?} p={p}");
            }
        }
    }

    fn grid2() -> Grid {
        Grid::new(&[8, 8], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn dx2_expansion() {
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let e = expand_derivative(&u, 0, 2, DerivFlavor::Centered).unwrap();
        // (u[x-1] - 2u[x] + u[x+1]) / h_x^2, expanded per term.
        let h2 = Expr::Product(vec![Expr::sym("h_x"), Expr::sym("h_x")]);
        let expected = add(vec![
            div(Expr::access("u", Some(0), &[-1, 0]), h2.clone()),
            div(
                mul(vec![Expr::int(-2), Expr::access("u", Some(0), &[0, 0])]),
                h2.clone(),
            ),
            div(Expr::access("u", Some(0), &[1, 0]), h2),
        ]);
        assert_eq!(e, expected);
    }

    #[test]
    fn dxl_expansion() {
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let e = expand_derivative(&u, 0, 1, DerivFlavor::Left).unwrap();
        let expected = add(vec![
            div(Expr::access("u", Some(0), &[0, 0]), Expr::sym("h_x")),
            div(
                mul(vec![Expr::int(-1), Expr::access("u", Some(0), &[-1, 0])]),
                Expr::sym("h_x"),
            ),
        ]);
        assert_eq!(e, expected);
    }

    #[test]
    fn dy2_so4_has_five_terms() {
        let u = DiscreteFunction::time("u", grid2(), 4, 1).unwrap();
        let e = expand_derivative(&u, 1, 2, DerivFlavor::Centered).unwrap();
        match &e {
            Expr::Sum(ts) => assert_eq!(ts.len(), 5),
            other => panic!("expected 5-term sum, got {other}"),
        }
        assert!(matches!(
            expand_derivative(&u, 1, 3, DerivFlavor::Centered),
            Err(Error::UnsupportedDerivative(3))
        ));
    }

    #[test]
    fn derivative_of_constant_field_vanishes() {
        // Substituting one symbol for every access collapses the stencil to
        // zero: the weights sum to zero for deriv >= 1.
        let u = DiscreteFunction::time("u", grid2(), 4, 1).unwrap();
        for (dim, order, flavor) in [
            (0, 1, DerivFlavor::Centered),
            (0, 2, DerivFlavor::Centered),
            (1, 1, DerivFlavor::Left),
        ] {
            let e = expand_derivative(&u, dim, order, flavor).unwrap();
            let mut collapsed = e;
            for acc in crate::expr::retrieve_indexed(&collapsed) {
                collapsed = substitute(&collapsed, &Expr::Indexed(acc), &Expr::sym("c"));
            }
            assert!(collapsed.is_zero(), "{dim} {order} {flavor:?}");
        }
    }

    #[test]
    fn time_shift_examples() {
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        assert_eq!(forward(&u).unwrap(), Expr::access("u", Some(1), &[0, 0]));
        assert_eq!(time_shift(&u, 0).unwrap(), Expr::access("u", Some(0), &[0, 0]));
        assert!(matches!(
            time_shift(&u, 2),
            Err(Error::ShiftOutOfRange { .. })
        ));
        let dt = time_derivative(&u, "dt").unwrap();
        let expected = add(vec![
            div(Expr::access("u", Some(1), &[0, 0]), Expr::sym("dt")),
            div(
                mul(vec![Expr::int(-1), Expr::access("u", Some(0), &[0, 0])]),
                Expr::sym("dt"),
            ),
        ]);
        assert_eq!(dt, expected);
    }

    #[test]
    fn solve_simple_rearrangement() {
        // (u[t+1] - u[t])/dt == R  =>  u[t+1] = u[t] + dt*R
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let target = forward(&u).unwrap();
        let lhs = time_derivative(&u, "dt").unwrap();
        let rhs = Expr::sym("R");
        let solved = solve_forward(&lhs, &rhs, &target).unwrap();
        let expected = add(vec![
            Expr::access("u", Some(0), &[0, 0]),
            mul(vec![Expr::sym("R"), Expr::sym("dt")]),
        ]);
        assert_eq!(solved, expected);
    }

    #[test]
    fn solve_convection_form() {
        // u.dt + c*u.dxl + c*u.dyl == 0  =>  u[t] - dt*c*(dxl + dyl)
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let target = forward(&u).unwrap();
        let dxl = expand_derivative(&u, 0, 1, DerivFlavor::Left).unwrap();
        let dyl = expand_derivative(&u, 1, 1, DerivFlavor::Left).unwrap();
        let lhs = add(vec![
            time_derivative(&u, "dt").unwrap(),
            mul(vec![Expr::sym("c"), dxl.clone()]),
            mul(vec![Expr::sym("c"), dyl.clone()]),
        ]);
        let solved = solve_forward(&lhs, &Expr::int(0), &target).unwrap();
        let expected = add(vec![
            Expr::access("u", Some(0), &[0, 0]),
            neg(mul(vec![
                Expr::sym("dt"),
                Expr::sym("c"),
                add(vec![dxl, dyl]),
            ])),
        ]);
        assert_eq!(solved, expected);
    }

    #[test]
    fn solve_scaled_target() {
        // 2*u[t+1] == u[t]  =>  u[t]/2
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let target = forward(&u).unwrap();
        let lhs = mul(vec![Expr::int(2), target.clone()]);
        let rhs = time_shift(&u, 0).unwrap();
        let solved = solve_forward(&lhs, &rhs, &target).unwrap();
        assert_eq!(
            solved,
            mul(vec![Expr::rat(1, 2), Expr::access("u", Some(0), &[0, 0])])
        );
    }

    #[test]
    fn solve_errors() {
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let target = forward(&u).unwrap();
        // absent target
        assert!(matches!(
            solve_forward(&Expr::sym("a"), &Expr::sym("b"), &target),
            Err(Error::TargetNotFound)
        ));
        // nonlinear occurrence
        let lhs = mul(vec![target.clone(), target.clone()]);
        assert!(matches!(
            solve_forward(&lhs, &Expr::int(0), &target),
            Err(Error::NonlinearTarget)
        ));
    }

    #[test]
    fn solve_round_trips() {
        // Substituting the solution back makes both sides canonically equal.
        let u = DiscreteFunction::time("u", grid2(), 2, 1).unwrap();
        let target = forward(&u).unwrap();
        let dx2 = expand_derivative(&u, 0, 2, DerivFlavor::Centered).unwrap();
        let dy2 = expand_derivative(&u, 1, 2, DerivFlavor::Centered).unwrap();
        let lhs = time_derivative(&u, "dt").unwrap();
        let rhs = mul(vec![Expr::sym("nu"), add(vec![dx2, dy2])]);
        let solved = solve_forward(&lhs, &rhs, &target).unwrap();
        let lhs_sub = substitute(&lhs, &target, &solved);
        let rhs_sub = substitute(&rhs, &target, &solved);
        assert_eq!(lhs_sub, rhs_sub);
    }
}
