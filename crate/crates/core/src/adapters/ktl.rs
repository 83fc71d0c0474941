//! Stacked knowledge-transfer layers.
//!
//! Each layer consumes both models' factors and emits a same-shaped pair;
//! stacking layers deepens the exchange. Every layer and every direction
//! owns independent adapter parameters, and within a layer both directions
//! read the layer's *inputs* (a simultaneous update), so the two directions
//! stay symmetric.

use serde::{Deserialize, Serialize};

use super::{BoundLpka, LpkaAdapter, LpkaVariant};
use crate::checkpoint::CheckpointEntry;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tape, Tensor, Var};

/// One transfer direction: `L2s` writes into the second ("smaller") side,
/// `S2l` into the first ("larger") side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    L2s,
    S2l,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::L2s, Direction::S2l];

    pub fn name(self) -> &'static str {
        match self {
            Direction::L2s => "l2s",
            Direction::S2l => "s2l",
        }
    }
}

/// Requested direction set for a plan or a single apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directions {
    L2s,
    S2l,
    Both,
}

impl Directions {
    pub fn has(self, d: Direction) -> bool {
        match (self, d) {
            (Directions::Both, _) => true,
            (Directions::L2s, Direction::L2s) => true,
            (Directions::S2l, Direction::S2l) => true,
            _ => false,
        }
    }

    pub fn iter(self) -> impl Iterator<Item = Direction> {
        Direction::BOTH.into_iter().filter(move |&d| self.has(d))
    }

    pub fn from_set(l2s: bool, s2l: bool) -> Option<Directions> {
        match (l2s, s2l) {
            (true, true) => Some(Directions::Both),
            (true, false) => Some(Directions::L2s),
            (false, true) => Some(Directions::S2l),
            (false, false) => None,
        }
    }
}

/// Adapters of one knowledge-transfer layer, one per built direction.
#[derive(Debug, Clone, PartialEq)]
pub struct KtlLayer {
    pub l2s: Option<LpkaAdapter>,
    pub s2l: Option<LpkaAdapter>,
}

/// A stack of knowledge-transfer layers bound to one slot pair. The "l"
/// side carries factors `rank×l_cols`, the "s" side `rank×s_cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct KtlStack {
    pub layers: Vec<KtlLayer>,
    pub directions: Directions,
    pub rank: usize,
    pub l_cols: usize,
    pub s_cols: usize,
}

impl KtlStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_layers: usize,
        directions: Directions,
        variant: LpkaVariant,
        rank: usize,
        l_cols: usize,
        s_cols: usize,
        attn_dim: usize,
        omega_trainable: bool,
        residual: bool,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::contract("a transfer stack needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let l2s = if directions.has(Direction::L2s) {
                Some(LpkaAdapter::new(
                    variant,
                    rank,
                    s_cols,
                    l_cols,
                    attn_dim,
                    omega_trainable,
                    residual,
                    rng,
                )?)
            } else {
                None
            };
            let s2l = if directions.has(Direction::S2l) {
                Some(LpkaAdapter::new(
                    variant,
                    rank,
                    l_cols,
                    s_cols,
                    attn_dim,
                    omega_trainable,
                    residual,
                    rng,
                )?)
            } else {
                None
            };
            layers.push(KtlLayer { l2s, s2l });
        }
        Ok(KtlStack {
            layers,
            directions,
            rank,
            l_cols,
            s_cols,
        })
    }

    fn adapters(&self) -> impl Iterator<Item = &LpkaAdapter> {
        self.layers
            .iter()
            .flat_map(|l| l.l2s.iter().chain(l.s2l.iter()))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.adapters().flat_map(|a| a.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.l2s.iter_mut().chain(l.s2l.iter_mut()))
            .flat_map(|a| a.params_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundStack<'t> {
        BoundStack {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        l.l2s.as_ref().map(|a| a.bind(tape, trainable)),
                        l.s2l.as_ref().map(|a| a.bind(tape, trainable)),
                    )
                })
                .collect(),
        }
    }

    pub fn bound_params<'t>(&self, bound: &BoundStack<'t>) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for (layer, (bl, bs)) in self.layers.iter().zip(&bound.layers) {
            if let (Some(a), Some(b)) = (&layer.l2s, bl) {
                out.extend(a.bound_params(b));
            }
            if let (Some(a), Some(b)) = (&layer.s2l, bs) {
                out.extend(a.bound_params(b));
            }
        }
        out
    }

    pub fn sgd_apply(&mut self, tape: &Tape, bound: &BoundStack<'_>, eta: Real) {
        for (layer, (bl, bs)) in self.layers.iter_mut().zip(&bound.layers) {
            if let (Some(a), Some(b)) = (&mut layer.l2s, bl) {
                a.sgd_apply(tape, b, eta);
            }
            if let (Some(a), Some(b)) = (&mut layer.s2l, bs) {
                a.sgd_apply(tape, b, eta);
            }
        }
    }

    /// Run the stack. Directions not requested pass the factor through
    /// unchanged; requesting a direction the stack was not built with is a
    /// contract error. Within each layer both outputs are computed from the
    /// layer's inputs before either is advanced.
    pub fn apply<'t>(
        &self,
        bound: &BoundStack<'t>,
        a_l: Var<'t>,
        a_s: Var<'t>,
        dirs: Directions,
    ) -> Result<(Var<'t>, Var<'t>)> {
        for d in dirs.iter() {
            if !self.directions.has(d) {
                return Err(Error::contract(format!(
                    "stack was built without the {} direction",
                    d.name()
                )));
            }
        }
        let (mut cur_l, mut cur_s) = (a_l, a_s);
        for (layer, (bl, bs)) in self.layers.iter().zip(&bound.layers) {
            let next_s = if dirs.has(Direction::L2s) {
                let adapter = layer.l2s.as_ref().expect("built direction");
                adapter.forward(bl.as_ref().expect("bound direction"), cur_s, cur_l)?
            } else {
                cur_s
            };
            let next_l = if dirs.has(Direction::S2l) {
                let adapter = layer.s2l.as_ref().expect("built direction");
                adapter.forward(bs.as_ref().expect("bound direction"), cur_l, cur_s)?
            } else {
                cur_l
            };
            cur_l = next_l;
            cur_s = next_s;
        }
        Ok((cur_l, cur_s))
    }

    /// Checkpoint entries named `adapter/<layer>/<direction>/<combo>/<role>`
    /// (ω rides along as `adapter/<layer>/<direction>/omega`).
    pub fn checkpoint_entries(&self) -> Vec<CheckpointEntry> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(a) = &layer.l2s {
                out.extend(a.checkpoint_entries(&format!("adapter/{i}/l2s")));
            }
            if let Some(a) = &layer.s2l {
                out.extend(a.checkpoint_entries(&format!("adapter/{i}/s2l")));
            }
        }
        out
    }
}

/// Tape bindings for every adapter in a stack.
pub struct BoundStack<'t> {
    pub layers: Vec<(Option<BoundLpka<'t>>, Option<BoundLpka<'t>>)>,
}
