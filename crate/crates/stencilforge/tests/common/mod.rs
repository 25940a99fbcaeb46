//! Shared test oracles, independent of the implementation paths they check.

use stencilforge::Rational;

/// Independent finite-difference weight oracle: solve the Vandermonde system
/// sum_i o_i^p w_i = delta(p, m) * m! for p = 0..n by Gaussian elimination in
/// exact rational arithmetic.
pub fn vandermonde_weights(deriv_order: usize, offsets: &[i64]) -> Vec<Rational> {
    let n = offsets.len();
    assert!(n > deriv_order);
    let mut a: Vec<Vec<Rational>> = (0..n)
        .map(|p| {
            offsets
                .iter()
                .map(|&o| Rational::integer(o as i128).pow(p as u32))
                .collect()
        })
        .collect();
    let mut rhs: Vec<Rational> = (0..n)
        .map(|p| {
            if p == deriv_order {
                Rational::integer((1..=deriv_order as i128).product())
            } else {
                Rational::zero()
            }
        })
        .collect();
    // Forward elimination with row pivoting on the first nonzero entry.
    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !a[r][col].is_zero())
            .expect("distinct offsets give a nonsingular system");
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in (col + 1)..n {
            if a[row][col].is_zero() {
                continue;
            }
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                let v = a[row][k] - factor * a[col][k];
                a[row][k] = v;
            }
            let v = rhs[row] - factor * rhs[col];
            rhs[row] = v;
        }
    }
    // Back substitution.
    let mut w = vec![Rational::zero(); n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in (row + 1)..n {
            acc = acc - a[row][k] * w[k];
        }
        w[row] = acc / a[row][row];
    }
    w
}
