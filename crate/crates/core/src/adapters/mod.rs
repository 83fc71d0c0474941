//! Parameter adapters: the modules that read another model's parameters and
//! generate replacement parameters for a target model.
//!
//! [`LpkaAdapter`] fuses the low-rank `A` factors of both models with
//! softmax attention over their row/column flattenings; [`MlpAdapter`] is
//! the plain feed-forward baseline that maps the source's dense weight
//! directly (and ignores the target's own parameters); [`KtlStack`] chains
//! per-layer adapters so repeated layers transfer more.

mod ktl;
mod mlp;

pub use ktl::{BoundStack, Direction, Directions, KtlLayer, KtlStack};
pub use mlp::{BoundMlp, MlpAdapter};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{flatten_cols, flatten_rows, Real, Tape, Tensor, Var};

/// Which flattening feeds the query side and which feeds the key/value
/// side. Fixed order RR, RL, LR, LL; the ω weights index it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnCombo {
    RR,
    RL,
    LR,
    LL,
}

impl AttnCombo {
    pub const ALL: [AttnCombo; 4] = [AttnCombo::RR, AttnCombo::RL, AttnCombo::LR, AttnCombo::LL];

    /// Query side flattens by rows?
    pub fn query_rows(self) -> bool {
        matches!(self, AttnCombo::RR | AttnCombo::RL)
    }

    /// Key/value side flattens by rows?
    pub fn kv_rows(self) -> bool {
        matches!(self, AttnCombo::RR | AttnCombo::LR)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttnCombo::RR => "rr",
            AttnCombo::RL => "rl",
            AttnCombo::LR => "lr",
            AttnCombo::LL => "ll",
        }
    }
}

/// Fusion variants: the full four-combo form with learnable ω, the
/// row-flattened-only form, and the fixed-average form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpkaVariant {
    Full,
    RowOnly,
    AvgAttn,
}

impl LpkaVariant {
    pub fn active_combos(self) -> &'static [AttnCombo] {
        match self {
            LpkaVariant::Full | LpkaVariant::AvgAttn => &AttnCombo::ALL,
            LpkaVariant::RowOnly => &AttnCombo::ALL[..1],
        }
    }

    /// Whether the ω weights participate at all (the average variant fixes
    /// every weight at 1/4 with no trainable parameter).
    pub fn uses_omega(self) -> bool {
        !matches!(self, LpkaVariant::AvgAttn)
    }
}

/// Projections of one attention combo.
#[derive(Debug, Clone, PartialEq)]
pub struct ComboProjections {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// Attention-based parameter adapter over low-rank factors.
///
/// Bound to one slot pair: the target factor is `rank×target_cols`, the
/// source factor `rank×source_cols`. Token lengths follow the flattening:
/// row tokens of the target have length `target_cols`, column tokens length
/// `rank`, and likewise for the source; every combo projects its tokens into
/// a shared attention dimension `attn_dim` and back out to the output token
/// length.
#[derive(Debug, Clone, PartialEq)]
pub struct LpkaAdapter {
    pub variant: LpkaVariant,
    pub rank: usize,
    pub target_cols: usize,
    pub source_cols: usize,
    pub attn_dim: usize,
    /// Projections for the variant's active combos, in ω order.
    pub combos: Vec<(AttnCombo, ComboProjections)>,
    /// Four learnable balance weights, initialized to 0.25 each so the
    /// initial behavior matches the fixed-average variant.
    pub omega: Tensor,
    pub omega_trainable: bool,
    /// When set, the generated factor is added to the target factor instead
    /// of replacing it. Off by default.
    pub residual: bool,
}

pub(crate) fn uniform_fan_in(rows: usize, cols: usize, rng: &mut SplitMix64) -> Tensor {
    Tensor::uniform(&[rows, cols], (3.0 / rows as Real).sqrt(), rng)
}

impl LpkaAdapter {
    pub fn new(
        variant: LpkaVariant,
        rank: usize,
        target_cols: usize,
        source_cols: usize,
        attn_dim: usize,
        omega_trainable: bool,
        residual: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if rank == 0 || target_cols == 0 || source_cols == 0 || attn_dim == 0 {
            return Err(Error::contract("adapter dimensions must be positive"));
        }
        let combos = variant
            .active_combos()
            .iter()
            .map(|&combo| {
                let q_dim = if combo.query_rows() { target_cols } else { rank };
                let kv_dim = if combo.kv_rows() { source_cols } else { rank };
                let out_dim = if combo.query_rows() { target_cols } else { rank };
                let proj = ComboProjections {
                    wq: uniform_fan_in(q_dim, attn_dim, rng),
                    wk: uniform_fan_in(kv_dim, attn_dim, rng),
                    wv: uniform_fan_in(kv_dim, attn_dim, rng),
                    wo: uniform_fan_in(attn_dim, out_dim, rng),
                };
                (combo, proj)
            })
            .collect();
        Ok(LpkaAdapter {
            variant,
            rank,
            target_cols,
            source_cols,
            attn_dim,
            combos,
            omega: Tensor::new(vec![4], vec![0.25; 4])?,
            omega_trainable,
            residual,
        })
    }

    /// Trainable tensors in a stable order: per combo wq, wk, wv, wo, then ω
    /// when the variant uses it.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (_, p) in &self.combos {
            out.extend([&p.wq, &p.wk, &p.wv, &p.wo]);
        }
        if self.variant.uses_omega() && self.omega_trainable {
            out.push(&self.omega);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (_, p) in &mut self.combos {
            out.push(&mut p.wq);
            out.push(&mut p.wk);
            out.push(&mut p.wv);
            out.push(&mut p.wo);
        }
        if self.variant.uses_omega() && self.omega_trainable {
            out.push(&mut self.omega);
        }
        out
    }

    /// Register the adapter's parameters on a tape.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundLpka<'t> {
        let combos = self
            .combos
            .iter()
            .map(|(combo, p)| BoundCombo {
                combo: *combo,
                wq: tape.leaf(&p.wq, trainable),
                wk: tape.leaf(&p.wk, trainable),
                wv: tape.leaf(&p.wv, trainable),
                wo: tape.leaf(&p.wo, trainable),
            })
            .collect();
        let omega = tape.leaf(
            &self.omega,
            trainable && self.omega_trainable && self.variant.uses_omega(),
        );
        BoundLpka { combos, omega }
    }

    /// Variables that receive gradients, in [`LpkaAdapter::params`] order.
    pub fn bound_params<'t>(&self, bound: &BoundLpka<'t>) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for c in &bound.combos {
            out.extend([c.wq, c.wk, c.wv, c.wo]);
        }
        if self.variant.uses_omega() && self.omega_trainable {
            out.push(bound.omega);
        }
        out
    }

    /// Apply one SGD step to every parameter from the gradients on `tape`.
    pub fn sgd_apply(&mut self, tape: &Tape, bound: &BoundLpka<'_>, eta: Real) {
        let vars = self.bound_params(bound);
        for (t, v) in self.params_mut().into_iter().zip(vars) {
            if let Some(g) = tape.grad(v) {
                for (w, gi) in t.data_mut().iter_mut().zip(g.data()) {
                    *w -= eta * gi;
                }
            }
        }
    }

    fn check_inputs(&self, a_target: &[usize], a_source: &[usize]) -> Result<()> {
        let ([r_t, m], [r_s, cap_m]) = (
            <[usize; 2]>::try_from(a_target).map_err(|_| Error::contract("factors must be 2-D"))?,
            <[usize; 2]>::try_from(a_source).map_err(|_| Error::contract("factors must be 2-D"))?,
        );
        if r_t != r_s {
            return Err(Error::contract(format!(
                "rank mismatch between target factor {a_target:?} and source factor {a_source:?}"
            )));
        }
        if r_t != self.rank || m != self.target_cols || cap_m != self.source_cols {
            return Err(Error::contract(format!(
                "adapter bound to rank {} / target {} / source {} but got {:?} and {:?}",
                self.rank, self.target_cols, self.source_cols, a_target, a_source
            )));
        }
        Ok(())
    }

    /// Generate the fused target factor (`rank×target_cols`), differentiable
    /// with respect to the adapter parameters and both input factors.
    pub fn forward<'t>(
        &self,
        bound: &BoundLpka<'t>,
        a_target: Var<'t>,
        a_source: Var<'t>,
    ) -> Result<Var<'t>> {
        Ok(self.forward_detailed(bound, a_target, a_source)?.output)
    }

    /// Like [`LpkaAdapter::forward`] but also hands back each combo's head
    /// and softmax attention matrix for inspection.
    pub fn forward_detailed<'t>(
        &self,
        bound: &BoundLpka<'t>,
        a_target: Var<'t>,
        a_source: Var<'t>,
    ) -> Result<LpkaDetail<'t>> {
        self.check_inputs(&a_target.shape(), &a_source.shape())?;
        let scale = 1.0 / (self.attn_dim as Real).sqrt();

        let mut heads = Vec::with_capacity(bound.combos.len());
        let mut attns = Vec::with_capacity(bound.combos.len());
        for c in &bound.combos {
            // Token sequences: rows of the matrix (R) or of its transpose (L).
            let tq = if c.combo.query_rows() {
                flatten_rows(a_target)?
            } else {
                flatten_cols(a_target)?
            };
            let ts = if c.combo.kv_rows() {
                flatten_rows(a_source)?
            } else {
                flatten_cols(a_source)?
            };
            let q = tq.matmul(c.wq)?;
            let k = ts.matmul(c.wk)?;
            let v = ts.matmul(c.wv)?;
            let attn = q.matmul(k.transpose()?)?.scale(scale).softmax_rows()?;
            let mixed = attn.matmul(v)?.matmul(c.wo)?;
            // L-query combos come out token-major (target_cols×rank); put
            // every head into the target factor orientation rank×target_cols.
            let head = if c.combo.query_rows() {
                mixed
            } else {
                mixed.transpose()?
            };
            heads.push((c.combo, head));
            attns.push((c.combo, attn.value()));
        }

        let mut combined: Option<Var<'t>> = None;
        for (i, (_, head)) in heads.iter().enumerate() {
            let weighted = match self.variant {
                LpkaVariant::Full | LpkaVariant::RowOnly => {
                    head.scale_var(bound.omega.element(i)?)?
                }
                LpkaVariant::AvgAttn => head.scale(0.25),
            };
            combined = Some(match combined {
                None => weighted,
                Some(acc) => acc.add(weighted)?,
            });
        }
        let mut output = combined.expect("at least one combo");
        if self.residual {
            output = a_target.add(output)?;
        }
        debug_assert_eq!(output.shape(), vec![self.rank, self.target_cols]);
        Ok(LpkaDetail {
            output,
            heads,
            attn: attns,
        })
    }

    /// Checkpoint entries under `prefix` (e.g. `adapter/0/l2s`): one dense
    /// entry per projection named `<prefix>/<combo>/<role>`, plus
    /// `<prefix>/omega` when the variant uses ω.
    pub fn checkpoint_entries(&self, prefix: &str) -> Vec<crate::checkpoint::CheckpointEntry> {
        use crate::checkpoint::CheckpointEntry;
        let mut out = Vec::new();
        for (combo, p) in &self.combos {
            for (role, t) in [("wq", &p.wq), ("wk", &p.wk), ("wv", &p.wv), ("wo", &p.wo)] {
                out.push(CheckpointEntry::dense(
                    format!("{prefix}/{}/{role}", combo.name()),
                    t,
                ));
            }
        }
        if self.variant.uses_omega() {
            out.push(CheckpointEntry::dense(format!("{prefix}/omega"), &self.omega));
        }
        out
    }
}

/// Tape handles for one combo's projections.
#[derive(Clone, Copy)]
pub struct BoundCombo<'t> {
    pub combo: AttnCombo,
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
}

/// Tape handles for a whole adapter.
pub struct BoundLpka<'t> {
    pub combos: Vec<BoundCombo<'t>>,
    pub omega: Var<'t>,
}

/// Forward result with per-combo internals exposed.
pub struct LpkaDetail<'t> {
    pub output: Var<'t>,
    pub heads: Vec<(AttnCombo, Var<'t>)>,
    /// Softmax attention matrices (values, one per active combo).
    pub attn: Vec<(AttnCombo, Tensor)>,
}
