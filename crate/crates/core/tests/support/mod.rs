//! Test-only oracles, independent of the implementation paths they check.

use weft_core::rng::SplitMix64;
use weft_core::tensor::{Real, Tensor};

/// Singular values by one-sided Jacobi rotations: brute force, only for the
/// small matrices the tests use. Returns them in descending order.
pub fn jacobi_singular_values(w: &Tensor) -> Vec<Real> {
    let (r, c) = w.dims2().expect("2-D");
    let work = if r >= c { w.clone() } else { w.transposed().unwrap() };
    let (m, n) = work.dims2().unwrap();
    let mut a = work.data().to_vec();
    let at = |a: &[Real], i: usize, j: usize| a[i * n + j];

    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let (ap, aq) = (at(&a, i, p), at(&a, i, q));
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt().max(1e-300) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..m {
                    let ap = at(&a, i, p);
                    let aq = at(&a, i, q);
                    a[i * n + p] = cs * ap - sn * aq;
                    a[i * n + q] = sn * ap + cs * aq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<Real> = (0..n)
        .map(|j| (0..m).map(|i| at(&a, i, j).powi(2)).sum::<Real>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Frobenius error of the best rank-`r` approximation by the oracle:
/// the root of the discarded singular values' energy.
pub fn oracle_rank_error(w: &Tensor, r: usize) -> Real {
    let sv = jacobi_singular_values(w);
    sv[r..].iter().map(|s| s * s).sum::<Real>().sqrt()
}

pub fn random_matrix(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::normal(shape, 1.0, rng)
}

#[allow(dead_code)]
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Real {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, Real::max)
}
