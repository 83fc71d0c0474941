//! Feed-forward baseline adapter.
//!
//! Maps the source model's dense weight `W ∈ N×M` straight to a target-shaped
//! matrix `n×m` with two per-axis affine maps and a transpose between them:
//! the first acts on row slices (M→n), the second on the transposed result's
//! row slices (N→m). The target's own parameters never enter, which is this
//! baseline's known weakness: each output vector is produced independently of
//! the knowledge already accumulated in the target.

use super::uniform_fan_in;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpAdapter {
    pub source_rows: usize,
    pub source_cols: usize,
    pub target_rows: usize,
    pub target_cols: usize,
    /// First map, M→n: applied to each row of the source weight.
    pub xi1_w: Tensor,
    pub xi1_b: Tensor,
    /// Second map, N→m: applied to each row of the transposed intermediate.
    pub xi2_w: Tensor,
    pub xi2_b: Tensor,
}

impl MlpAdapter {
    pub fn new(
        source_rows: usize,
        source_cols: usize,
        target_rows: usize,
        target_cols: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if source_rows == 0 || source_cols == 0 || target_rows == 0 || target_cols == 0 {
            return Err(Error::contract("adapter dimensions must be positive"));
        }
        Ok(MlpAdapter {
            source_rows,
            source_cols,
            target_rows,
            target_cols,
            xi1_w: uniform_fan_in(source_cols, target_rows, rng),
            xi1_b: Tensor::zeros(&[target_rows]),
            xi2_w: uniform_fan_in(source_rows, target_cols, rng),
            xi2_b: Tensor::zeros(&[target_cols]),
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.xi1_w, &self.xi1_b, &self.xi2_w, &self.xi2_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.xi1_w,
            &mut self.xi1_b,
            &mut self.xi2_w,
            &mut self.xi2_b,
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        BoundMlp {
            xi1_w: tape.leaf(&self.xi1_w, trainable),
            xi1_b: tape.leaf(&self.xi1_b, trainable),
            xi2_w: tape.leaf(&self.xi2_w, trainable),
            xi2_b: tape.leaf(&self.xi2_b, trainable),
        }
    }

    pub fn bound_params<'t>(&self, bound: &BoundMlp<'t>) -> Vec<Var<'t>> {
        vec![bound.xi1_w, bound.xi1_b, bound.xi2_w, bound.xi2_b]
    }

    pub fn sgd_apply(&mut self, tape: &Tape, bound: &BoundMlp<'_>, eta: Real) {
        let vars = self.bound_params(bound);
        for (t, v) in self.params_mut().into_iter().zip(vars) {
            if let Some(g) = tape.grad(v) {
                for (w, gi) in t.data_mut().iter_mut().zip(g.data()) {
                    *w -= eta * gi;
                }
            }
        }
    }

    /// First map along one axis, transpose, second map along the other:
    /// `((W·Ξ1 + b1)ᵀ)·Ξ2 + b2`, producing `target_rows×target_cols`.
    pub fn forward<'t>(&self, bound: &BoundMlp<'t>, w_source: Var<'t>) -> Result<Var<'t>> {
        let shape = w_source.shape();
        if shape != vec![self.source_rows, self.source_cols] {
            return Err(Error::contract(format!(
                "adapter bound to source {}×{} but got {:?}",
                self.source_rows, self.source_cols, shape
            )));
        }
        let h = w_source.matmul(bound.xi1_w)?.add_bias(bound.xi1_b)?; // N×n
        let out = h.transpose()?.matmul(bound.xi2_w)?.add_bias(bound.xi2_b)?; // n×m
        debug_assert_eq!(out.shape(), vec![self.target_rows, self.target_cols]);
        Ok(out)
    }

    pub fn checkpoint_entries(&self, prefix: &str) -> Vec<crate::checkpoint::CheckpointEntry> {
        use crate::checkpoint::CheckpointEntry;
        vec![
            CheckpointEntry::dense(format!("{prefix}/xi1/w"), &self.xi1_w),
            CheckpointEntry::dense(format!("{prefix}/xi1/b"), &self.xi1_b),
            CheckpointEntry::dense(format!("{prefix}/xi2/w"), &self.xi2_w),
            CheckpointEntry::dense(format!("{prefix}/xi2/b"), &self.xi2_b),
        ]
    }
}

#[derive(Clone, Copy)]
pub struct BoundMlp<'t> {
    pub xi1_w: Var<'t>,
    pub xi1_b: Var<'t>,
    pub xi2_w: Var<'t>,
    pub xi2_b: Var<'t>,
}
