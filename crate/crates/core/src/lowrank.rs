//! Low-rank representation of transfer-participating parameters.
//!
//! A weight matrix `W ∈ rows×cols` that takes part in knowledge transfer is
//! stored as a factor pair `B·A` with `B: rows×r`, `A: r×cols` and shared
//! rank `r ≤ min(rows, cols)`. Models train these factors natively, so the
//! `A` factor is always available at transfer events; truncated-SVD
//! re-encoding is reserved for importing dense pretrained weights into the
//! same form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tape, Tensor, Var};

/// A transfer-participating parameter held as factors `b·a`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankParam {
    pub slot_id: String,
    /// rows×r; absorbs the singular values under SVD re-encoding.
    pub b: Tensor,
    /// r×cols; the factor that travels through the parameter adapter.
    pub a: Tensor,
    pub rank: usize,
}

impl LowRankParam {
    pub fn new(slot_id: impl Into<String>, b: Tensor, a: Tensor) -> Result<Self> {
        let (rows, rb) = b.dims2()?;
        let (ra, cols) = a.dims2()?;
        if rb != ra {
            return Err(Error::Shape {
                op: "low_rank_param",
                lhs: b.shape().to_vec(),
                rhs: a.shape().to_vec(),
            });
        }
        let rank = rb;
        if rank > rows.min(cols) {
            return Err(Error::contract(format!(
                "rank {rank} exceeds min({rows}, {cols})"
            )));
        }
        Ok(LowRankParam {
            slot_id: slot_id.into(),
            b,
            a,
            rank,
        })
    }

    /// Random factors scaled so the product matches a dense layer's
    /// 1/√fan_in initialization: Var[B] = 1/rows, Var[A] = 1/r gives
    /// Var[(BA)_ij] = 1/rows.
    pub fn init(
        slot_id: impl Into<String>,
        rows: usize,
        cols: usize,
        rank: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if rank == 0 || rank > rows.min(cols) {
            return Err(Error::contract(format!(
                "rank {rank} out of range for {rows}×{cols}"
            )));
        }
        let b = Tensor::uniform(&[rows, rank], (3.0 / rows as Real).sqrt(), rng);
        let a = Tensor::uniform(&[rank, cols], (3.0 / rank as Real).sqrt(), rng);
        LowRankParam::new(slot_id, b, a)
    }

    pub fn rows(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.a.shape()[1]
    }

    /// Effective dense weight `b·a`, value-level.
    pub fn densify_value(&self) -> Tensor {
        self.b.matmul(&self.a).expect("factor shapes validated")
    }
}

/// Tape-level densify: the effective dense weight of a factor pair,
/// differentiable through both factors.
pub fn densify<'t>(b: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
    b.matmul(a)
}

/// Partition of a model's parameters into transfer-participating slots and
/// the remaining (frozen-or-local) ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPartition {
    pub transfer_slots: Vec<String>,
    pub frozen_or_local: Vec<String>,
}

impl ParamPartition {
    pub fn validate(&self) -> Result<()> {
        for s in &self.transfer_slots {
            if self.frozen_or_local.contains(s) {
                return Err(Error::contract(format!(
                    "slot {s} appears in both partitions"
                )));
            }
        }
        Ok(())
    }
}

/// Result of truncated-SVD re-encoding.
#[derive(Debug, Clone)]
pub struct ReencodeOutcome {
    pub param: LowRankParam,
    /// False when the subspace basis was still rotating after `iters`
    /// iterations; the best factors found are returned regardless.
    pub converged: bool,
    pub iterations: usize,
}

const BASIS_TOL: Real = 1e-10;

/// Best rank-`r` factorization of `w` by orthogonal (subspace) iteration on
/// `w·wᵀ` with QR re-orthonormalization, deterministic given `seed` for the
/// starting basis. Singular values are absorbed into `b` (`b = U_r·Σ_r`,
/// `a = V_rᵀ`), leaving the rows of `a` unit-norm up to convergence.
pub fn reencode_truncated_svd(
    w: &Tensor,
    slot_id: &str,
    r: usize,
    iters: usize,
    seed: u64,
) -> Result<ReencodeOutcome> {
    let (rows, cols) = w.dims2()?;
    if r == 0 || r > rows.min(cols) {
        return Err(Error::contract(format!(
            "rank {r} out of range for {rows}×{cols}"
        )));
    }
    if iters == 0 {
        return Err(Error::contract("iters must be ≥ 1"));
    }

    // Gram matrix G = w·wᵀ (rows×rows); its top-r eigenvectors are the left
    // singular vectors of w.
    let g = w.matmul(&w.transposed()?)?;

    let mut rng = SplitMix64::derive(seed, &[0x57D0]);
    let mut q = Tensor::normal(&[rows, r], 1.0, &mut rng);
    orthonormalize_columns(&mut q, &mut rng);

    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=iters {
        iterations = it;
        let mut z = g.matmul(&q)?;
        orthonormalize_columns(&mut z, &mut rng);
        // Basis rotation measured through the projector difference
        // ‖Q_newQ_newᵀ − QQᵀ‖_F, which is invariant to column sign flips.
        let rot = projector_distance(&z, &q);
        q = z;
        if rot < BASIS_TOL {
            converged = true;
            break;
        }
    }

    // C = Qᵀ·w has rows σ_i·v_iᵀ at convergence. Splitting its row norms off
    // gives b = Q·diag(norms), a = row-normalized C, whose product Q·C is the
    // projection of w onto span(Q) regardless of convergence.
    let c = q.transposed()?.matmul(w)?;
    let mut norms: Vec<(usize, Real)> = (0..r)
        .map(|i| {
            let row = &c.data()[i * cols..(i + 1) * cols];
            (i, row.iter().map(|x| x * x).sum::<Real>().sqrt())
        })
        .collect();
    // Descending singular values, index as deterministic tie-break.
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut a = Tensor::zeros(&[r, cols]);
    let mut b = Tensor::zeros(&[rows, r]);
    for (dst, &(src, norm)) in norms.iter().enumerate() {
        if norm > 0.0 {
            for j in 0..cols {
                a.data_mut()[dst * cols + j] = c.data()[src * cols + j] / norm;
            }
        }
        for i in 0..rows {
            b.data_mut()[i * r + dst] = q.data()[i * r + src] * norm;
        }
    }

    Ok(ReencodeOutcome {
        param: LowRankParam::new(slot_id, b, a)?,
        converged,
        iterations,
    })
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Columns that
/// vanish (rank-deficient input) are replaced by fresh random directions and
/// re-orthogonalized, keeping the basis full column rank.
fn orthonormalize_columns(m: &mut Tensor, rng: &mut SplitMix64) {
    let (rows, cols) = m.dims2().expect("2-D basis");
    let col = |data: &[Real], j: usize| -> Vec<Real> {
        (0..rows).map(|i| data[i * cols + j]).collect()
    };
    for j in 0..cols {
        let mut v = col(m.data(), j);
        for _pass in 0..2 {
            for k in 0..j {
                let u = col(m.data(), k);
                let proj: Real = v.iter().zip(&u).map(|(a, b)| a * b).sum();
                for i in 0..rows {
                    v[i] -= proj * u[i];
                }
            }
        }
        let mut norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        if norm < 1e-300 {
            // Degenerate direction: restart it from the RNG stream.
            for x in v.iter_mut() {
                *x = rng.normal();
            }
            for k in 0..j {
                let u = col(m.data(), k);
                let proj: Real = v.iter().zip(&u).map(|(a, b)| a * b).sum();
                for i in 0..rows {
                    v[i] -= proj * u[i];
                }
            }
            norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        }
        for i in 0..rows {
            m.data_mut()[i * cols + j] = v[i] / norm;
        }
    }
}

/// ‖Q1·Q1ᵀ − Q2·Q2ᵀ‖_F for two bases with orthonormal columns.
fn projector_distance(q1: &Tensor, q2: &Tensor) -> Real {
    let p1 = q1.matmul(&q1.transposed().unwrap()).unwrap();
    let p2 = q2.matmul(&q2.transposed().unwrap()).unwrap();
    p1.distance(&p2).unwrap()
}

/// 2-D view of a conv kernel: [out, in, kh, kw] → [out, in·kh·kw]. Row `i`
/// is filter `i` flattened; with row-major layout this is a pure reshape and
/// the round trip is bit-exact.
pub fn reshape_conv_kernel(k: &Tensor) -> Result<Tensor> {
    let [o, c, kh, kw] = k.shape()[..] else {
        return Err(Error::Shape {
            op: "reshape_conv_kernel",
            lhs: k.shape().to_vec(),
            rhs: vec![],
        });
    };
    k.reshaped(&[o, c * kh * kw])
}

/// Inverse of [`reshape_conv_kernel`].
pub fn restore_conv_kernel(m: &Tensor, c: usize, kh: usize, kw: usize) -> Result<Tensor> {
    let [o, flat] = m.shape()[..] else {
        return Err(Error::Shape {
            op: "restore_conv_kernel",
            lhs: m.shape().to_vec(),
            rhs: vec![c, kh, kw],
        });
    };
    if flat != c * kh * kw {
        return Err(Error::Shape {
            op: "restore_conv_kernel",
            lhs: m.shape().to_vec(),
            rhs: vec![c, kh, kw],
        });
    }
    m.reshaped(&[o, c, kh, kw])
}

/// Frobenius reconstruction error ‖w − b·a‖_F.
pub fn reconstruction_error(w: &Tensor, p: &LowRankParam) -> Result<Real> {
    w.distance(&p.densify_value())
}

/// Register a factor pair on a tape and densify it in one step.
pub fn densify_on<'t>(
    tape: &'t Tape,
    p: &LowRankParam,
    trainable: bool,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let b = tape.leaf(&p.b, trainable);
    let a = tape.leaf(&p.a, trainable);
    let w = densify(b, a)?;
    Ok((b, a, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densify_examples() {
        let b = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let p = LowRankParam::new("s", b, a).unwrap();
        assert_eq!(
            p.densify_value(),
            Tensor::from_rows(&[vec![2.0, 3.0], vec![0.0, 0.0]]).unwrap()
        );

        let zero = LowRankParam::new(
            "z",
            Tensor::zeros(&[3, 2]),
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(zero.densify_value(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn rank_bound_enforced() {
        let mut rng = SplitMix64::new(1);
        assert!(LowRankParam::init("s", 4, 3, 3, &mut rng).is_ok());
        assert!(LowRankParam::init("s", 4, 3, 4, &mut rng).is_err());
        let w = Tensor::zeros(&[4, 3]);
        assert!(reencode_truncated_svd(&w, "s", 4, 10, 0).is_err());
        assert!(reencode_truncated_svd(&w, "s", 1, 0, 0).is_err());
    }

    #[test]
    fn exact_rank_one_input_reconstructs_exactly() {
        let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let out = reencode_truncated_svd(&w, "s", 1, 50, 7).unwrap();
        assert_eq!(out.param.densify_value(), w);
    }

    #[test]
    fn known_rank_two_reconstructs_within_1e6() {
        // w = X·Y with X: 6×2, Y: 2×4 has true rank 2
        let mut rng = SplitMix64::new(11);
        let x = Tensor::normal(&[6, 2], 1.0, &mut rng);
        let y = Tensor::normal(&[2, 4], 1.0, &mut rng);
        let w = x.matmul(&y).unwrap();
        let out = reencode_truncated_svd(&w, "s", 2, 100, 3).unwrap();
        let err = reconstruction_error(&w, &out.param).unwrap();
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn roundtrip_when_true_rank_at_most_r() {
        let mut rng = SplitMix64::new(21);
        for r in 1..=3 {
            let x = Tensor::normal(&[5, r], 1.0, &mut rng);
            let y = Tensor::normal(&[r, 6], 1.0, &mut rng);
            let w = x.matmul(&y).unwrap();
            let out = reencode_truncated_svd(&w, "s", r, 200, 5).unwrap();
            let err = reconstruction_error(&w, &out.param).unwrap();
            assert!(err <= 1e-8, "rank {r} err {err}");
        }
    }

    #[test]
    fn a_rows_are_unit_norm_and_b_columns_sorted() {
        let mut rng = SplitMix64::new(31);
        let w = Tensor::normal(&[6, 5], 1.0, &mut rng);
        let out = reencode_truncated_svd(&w, "s", 3, 200, 5).unwrap();
        for i in 0..3 {
            let row = &out.param.a.data()[i * 5..(i + 1) * 5];
            let n: Real = row.iter().map(|x| x * x).sum::<Real>().sqrt();
            assert!((n - 1.0).abs() < 1e-9, "row {i} norm {n}");
        }
        // b column norms are the singular values, sorted descending
        let (rows, r) = out.param.b.dims2().unwrap();
        let mut prev = Real::INFINITY;
        for j in 0..r {
            let n: Real = (0..rows)
                .map(|i| out.param.b.data()[i * r + j].powi(2))
                .sum::<Real>()
                .sqrt();
            assert!(n <= prev + 1e-12);
            prev = n;
        }
    }

    #[test]
    fn zero_matrix_reencodes_to_zero() {
        let w = Tensor::zeros(&[4, 4]);
        let out = reencode_truncated_svd(&w, "s", 2, 10, 9).unwrap();
        assert_eq!(out.param.densify_value(), w);
    }

    #[test]
    fn conv_kernel_view_roundtrip_bit_exact() {
        let mut rng = SplitMix64::new(41);
        let k = Tensor::normal(&[4, 3, 3, 3], 1.0, &mut rng);
        let m = reshape_conv_kernel(&k).unwrap();
        assert_eq!(m.shape(), &[4, 27]);
        assert_eq!(m.data(), k.data());
        let back = restore_conv_kernel(&m, 3, 3, 3).unwrap();
        assert_eq!(back, k);
    }

    #[test]
    fn conv_kernel_view_tiny() {
        let k = Tensor::new(vec![2, 1, 1, 1], vec![5.0, 6.0]).unwrap();
        let m = reshape_conv_kernel(&k).unwrap();
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(restore_conv_kernel(&m, 1, 1, 1).unwrap(), k);
        assert!(reshape_conv_kernel(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn densify_is_differentiable_through_both_factors() {
        let mut rng = SplitMix64::new(51);
        let p = LowRankParam::init("s", 4, 3, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let (b, a, w) = densify_on(&tape, &p, true).unwrap();
        let loss = w.sum();
        tape.backward(loss).unwrap();
        assert!(tape.grad(b).is_some());
        assert!(tape.grad(a).is_some());
    }
}
