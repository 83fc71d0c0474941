//! Desk-scale reference models with declared transfer slots.
//!
//! Four architectures, sized so a full experiment runs in minutes on one
//! CPU core: two MLPs and two small CNNs. Any named weight slot can be
//! stored factorized (`B·A`) at build time; conv kernels factorize through
//! their 2-D `out×(in·kh·kw)` view. Everything else stays dense.

mod baseline;
mod cifar;
mod data;
mod losses;

pub use baseline::copy_share;
pub use cifar::{encode_cifar_record, load_cifar_binary, CifarVariant, CIFAR_PIXELS};
pub use data::{
    gen_synthetic, standardize_pair, Batch, BatchStream, Dataset, SyntheticData, SyntheticTask,
};
pub use losses::kd_loss;

/// Input width of a CIFAR record after decoding.
pub fn cifar_features() -> usize {
    CIFAR_PIXELS
}

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointEntry;
use crate::error::{Error, Result};
use crate::lowrank::{densify, reshape_conv_kernel, restore_conv_kernel, LowRankParam, ParamPartition};
use crate::rng::SplitMix64;
use crate::tensor::{conv2d, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MlpSmall,
    MlpLarge,
    CnnSmall,
    CnnLarge,
}

impl ModelKind {
    pub fn is_cnn(self) -> bool {
        matches!(self, ModelKind::CnnSmall | ModelKind::CnnLarge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Flat(usize),
    Image { c: usize, h: usize, w: usize },
}

impl InputShape {
    pub fn features(self) -> usize {
        match self {
            InputShape::Flat(n) => n,
            InputShape::Image { c, h, w } => c * h * w,
        }
    }
}

/// A weight slot: dense, or held as trainable low-rank factors.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightParam {
    Dense(Tensor),
    Factored(LowRankParam),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockOp {
    /// `y = relu?(x·W + b)`, W: in×out.
    Dense { relu: bool },
    /// 3×3 same-padding convolution + relu, optionally followed by 2×2
    /// average pooling. Kernel logically [out, in, 3, 3].
    Conv { pool: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub op: BlockOp,
    pub weight: WeightParam,
    pub bias: Tensor,
    /// Kernel geometry for conv blocks: (out_ch, in_ch, kh, kw).
    pub conv_dims: Option<(usize, usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZooModel {
    pub kind: ModelKind,
    pub classes: usize,
    pub input: InputShape,
    pub rank: usize,
    pub blocks: Vec<Block>,
}

const KERNEL: usize = 3;
const PAD: usize = 1;

struct ArchLayer {
    name: &'static str,
    conv: bool,
    out: usize,
    pool: bool,
    relu: bool,
}

fn architecture(kind: ModelKind) -> Vec<ArchLayer> {
    let dense = |name, out, relu| ArchLayer {
        name,
        conv: false,
        out,
        pool: false,
        relu,
    };
    let conv = |name, out, pool| ArchLayer {
        name,
        conv: true,
        out,
        pool,
        relu: true,
    };
    match kind {
        ModelKind::MlpSmall => vec![
            dense("fc1", 64, true),
            dense("fc2", 64, true),
            dense("head", 0, false),
        ],
        ModelKind::MlpLarge => vec![
            dense("fc1", 256, true),
            dense("fc2", 256, true),
            dense("fc3", 128, true),
            dense("head", 0, false),
        ],
        ModelKind::CnnSmall => vec![
            conv("conv1", 8, true),
            conv("conv2", 16, true),
            dense("head", 0, false),
        ],
        ModelKind::CnnLarge => vec![
            conv("conv1", 8, true),
            conv("conv2", 16, true),
            conv("conv3", 32, false),
            conv("conv4", 32, false),
            dense("head", 0, false),
        ],
    }
}

/// Build a model with the named slots stored factorized at rank `rank`.
/// Initialization is fully determined by `rng`.
pub fn build_model(
    kind: ModelKind,
    input: InputShape,
    classes: usize,
    rank: usize,
    transfer_slots: &[String],
    rng: &mut SplitMix64,
) -> Result<ZooModel> {
    let arch = architecture(kind);
    let known: Vec<&str> = arch.iter().map(|l| l.name).collect();
    for s in transfer_slots {
        if !known.contains(&s.as_str()) {
            return Err(Error::config(format!(
                "unknown transfer slot {s:?} for {kind:?}; available: {known:?}"
            )));
        }
    }
    if kind.is_cnn() && !matches!(input, InputShape::Image { .. }) {
        return Err(Error::config(format!(
            "{kind:?} needs an image input shape"
        )));
    }

    let mut blocks = Vec::new();
    let (mut ch, mut hh, mut ww) = match input {
        InputShape::Flat(n) => (n, 1, 1),
        InputShape::Image { c, h, w } => (c, h, w),
    };
    let mut flat = input.features();
    for layer in &arch {
        let factorize = transfer_slots.iter().any(|s| s == layer.name);
        if layer.conv {
            let out_ch = layer.out;
            let (rows, cols) = (out_ch, ch * KERNEL * KERNEL);
            let weight = if factorize {
                if rank > rows.min(cols) {
                    return Err(Error::config(format!(
                        "rank {rank} too large for slot {} ({rows}×{cols})",
                        layer.name
                    )));
                }
                WeightParam::Factored(LowRankParam::init(
                    format!("{}/w", layer.name),
                    rows,
                    cols,
                    rank,
                    rng,
                )?)
            } else {
                // dense kernels use the same 1/√fan_in scheme over the 2-D view
                let m = Tensor::uniform(&[rows, cols], (3.0 / cols as Real).sqrt(), rng);
                WeightParam::Dense(restore_conv_kernel(&m, ch, KERNEL, KERNEL)?)
            };
            blocks.push(Block {
                name: layer.name.to_string(),
                op: BlockOp::Conv { pool: layer.pool },
                weight,
                bias: Tensor::zeros(&[out_ch]),
                conv_dims: Some((out_ch, ch, KERNEL, KERNEL)),
            });
            ch = out_ch;
            if layer.pool {
                if hh % 2 != 0 || ww % 2 != 0 {
                    return Err(Error::config(format!(
                        "input {hh}×{ww} not divisible by pooling in {kind:?}"
                    )));
                }
                hh /= 2;
                ww /= 2;
            }
            flat = ch * hh * ww;
        } else {
            let out = if layer.name == "head" { classes } else { layer.out };
            let (rows, cols) = (flat, out);
            let weight = if factorize {
                if rank > rows.min(cols) {
                    return Err(Error::config(format!(
                        "rank {rank} too large for slot {} ({rows}×{cols})",
                        layer.name
                    )));
                }
                WeightParam::Factored(LowRankParam::init(
                    format!("{}/w", layer.name),
                    rows,
                    cols,
                    rank,
                    rng,
                )?)
            } else {
                WeightParam::Dense(Tensor::uniform(
                    &[rows, cols],
                    (3.0 / rows as Real).sqrt(),
                    rng,
                ))
            };
            blocks.push(Block {
                name: layer.name.to_string(),
                op: BlockOp::Dense { relu: layer.relu },
                weight,
                bias: Tensor::zeros(&[out]),
                conv_dims: None,
            });
            flat = out;
        }
    }

    Ok(ZooModel {
        kind,
        classes,
        input,
        rank,
        blocks,
    })
}

/// Tape handles for one model's parameters, in the same order as
/// [`ZooModel::params_mut`].
pub struct ModelVars<'t> {
    blocks: Vec<BlockVars<'t>>,
}

enum WeightVars<'t> {
    Dense(Var<'t>),
    Factored { b: Var<'t>, a: Var<'t> },
}

struct BlockVars<'t> {
    weight: WeightVars<'t>,
    bias: Var<'t>,
}

impl<'t> ModelVars<'t> {
    pub fn flat(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            match &b.weight {
                WeightVars::Dense(w) => out.push(*w),
                WeightVars::Factored { b: fb, a } => {
                    out.push(*fb);
                    out.push(*a);
                }
            }
            out.push(b.bias);
        }
        out
    }
}

impl ZooModel {
    /// Trainable tensors in a stable order (per block: weight factors or
    /// dense weight, then bias).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for blk in &mut self.blocks {
            match &mut blk.weight {
                WeightParam::Dense(t) => out.push(t),
                WeightParam::Factored(p) => {
                    out.push(&mut p.b);
                    out.push(&mut p.a);
                }
            }
            out.push(&mut blk.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for blk in &self.blocks {
            n += match &blk.weight {
                WeightParam::Dense(t) => t.len(),
                WeightParam::Factored(p) => p.b.len() + p.a.len(),
            };
            n += blk.bias.len();
        }
        n
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> ModelVars<'t> {
        let blocks = self
            .blocks
            .iter()
            .map(|blk| BlockVars {
                weight: match &blk.weight {
                    WeightParam::Dense(t) => WeightVars::Dense(tape.leaf(t, trainable)),
                    WeightParam::Factored(p) => WeightVars::Factored {
                        b: tape.leaf(&p.b, trainable),
                        a: tape.leaf(&p.a, trainable),
                    },
                },
                bias: tape.leaf(&blk.bias, trainable),
            })
            .collect();
        ModelVars { blocks }
    }

    /// Forward to logits. Accepts `[b, features]` input and reshapes to the
    /// model's image layout when needed.
    pub fn forward<'t>(&self, vars: &ModelVars<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut cur = match self.input {
            InputShape::Flat(_) => x,
            InputShape::Image { c, h, w } => {
                let b = x.shape()[0];
                x.reshape(&[b, c, h, w])?
            }
        };
        for (blk, bv) in self.blocks.iter().zip(&vars.blocks) {
            match blk.op {
                BlockOp::Dense { relu } => {
                    if cur.shape().len() == 4 {
                        let s = cur.shape();
                        cur = cur.reshape(&[s[0], s[1] * s[2] * s[3]])?;
                    }
                    let w = match &bv.weight {
                        WeightVars::Dense(w) => *w,
                        WeightVars::Factored { b, a } => densify(*b, *a)?,
                    };
                    cur = cur.matmul(w)?.add_bias(bv.bias)?;
                    if relu {
                        cur = cur.relu();
                    }
                }
                BlockOp::Conv { pool } => {
                    let (o, c, kh, kw) = blk.conv_dims.expect("conv geometry");
                    let k = match &bv.weight {
                        WeightVars::Dense(w) => *w,
                        WeightVars::Factored { b, a } => {
                            densify(*b, *a)?.reshape(&[o, c, kh, kw])?
                        }
                    };
                    cur = conv2d(cur, k, PAD)?.add_channel_bias(bv.bias)?.relu();
                    if pool {
                        cur = cur.avg_pool2()?;
                    }
                }
            }
        }
        Ok(cur)
    }

    /// Apply one SGD step from the gradients recorded on `tape`.
    pub fn sgd_apply(&mut self, tape: &Tape, vars: &ModelVars<'_>, eta: Real) {
        let flat = vars.flat();
        for (t, v) in self.params_mut().into_iter().zip(flat) {
            if let Some(g) = tape.grad(v) {
                for (w, gi) in t.data_mut().iter_mut().zip(g.data()) {
                    *w -= eta * gi;
                }
            }
        }
    }

    /// No-grad forward on raw inputs.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let xv = tape.leaf(x, false);
        Ok(self.forward(&vars, xv)?.value())
    }

    /// Top-1/top-k accuracy over a dataset (k = min(5, classes)).
    pub fn evaluate(&self, ds: &Dataset) -> Result<(Real, Real)> {
        let k = 5.min(self.classes);
        let mut top1 = 0usize;
        let mut topk = 0usize;
        let bs = 256;
        let mut i = 0;
        while i < ds.len() {
            let n = bs.min(ds.len() - i);
            let batch = ds.batch(&(i..i + n).collect::<Vec<_>>());
            let logits = self.logits(&batch.inputs)?;
            for (row, &label) in (0..n).zip(&batch.labels) {
                let scores = &logits.data()[row * self.classes..(row + 1) * self.classes];
                // stable descending order, index as tie-break
                let mut idx: Vec<usize> = (0..self.classes).collect();
                idx.sort_by(|&a, &b| {
                    scores[b]
                        .partial_cmp(&scores[a])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                if idx[0] == label {
                    top1 += 1;
                }
                if idx[..k].contains(&label) {
                    topk += 1;
                }
            }
            i += n;
        }
        Ok((
            top1 as Real / ds.len() as Real,
            topk as Real / ds.len() as Real,
        ))
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::config(format!("no slot named {name:?}")))
    }

    fn block_mut(&mut self, name: &str) -> Result<&mut Block> {
        self.blocks
            .iter_mut()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::config(format!("no slot named {name:?}")))
    }

    /// Factors of a factorized slot.
    pub fn slot_factors(&self, name: &str) -> Result<&LowRankParam> {
        match &self.block(name)?.weight {
            WeightParam::Factored(p) => Ok(p),
            WeightParam::Dense(_) => Err(Error::contract(format!(
                "slot {name:?} is dense, not factorized"
            ))),
        }
    }

    /// Replace the A factor of a factorized slot (B is untouched).
    pub fn set_slot_a(&mut self, name: &str, a: Tensor) -> Result<()> {
        match &mut self.block_mut(name)?.weight {
            WeightParam::Factored(p) => {
                if a.shape() != p.a.shape() {
                    return Err(Error::Shape {
                        op: "set_slot_a",
                        lhs: p.a.shape().to_vec(),
                        rhs: a.shape().to_vec(),
                    });
                }
                p.a = a;
                Ok(())
            }
            WeightParam::Dense(_) => Err(Error::contract(format!(
                "slot {name:?} is dense, not factorized"
            ))),
        }
    }

    /// The 2-D dense view of a slot's weight (conv kernels flattened,
    /// factorized slots densified).
    pub fn slot_dense_2d(&self, name: &str) -> Result<Tensor> {
        let blk = self.block(name)?;
        match &blk.weight {
            WeightParam::Dense(t) => {
                if blk.conv_dims.is_some() {
                    reshape_conv_kernel(t)
                } else {
                    Ok(t.clone())
                }
            }
            WeightParam::Factored(p) => Ok(p.densify_value()),
        }
    }

    /// Overwrite a dense slot's weight from its 2-D view.
    pub fn set_slot_dense_2d(&mut self, name: &str, m: &Tensor) -> Result<()> {
        let blk = self.block_mut(name)?;
        match &mut blk.weight {
            WeightParam::Dense(t) => {
                if let Some((_, c, kh, kw)) = blk.conv_dims {
                    let cur = reshape_conv_kernel(t)?;
                    if cur.shape() != m.shape() {
                        return Err(Error::Shape {
                            op: "set_slot_dense_2d",
                            lhs: cur.shape().to_vec(),
                            rhs: m.shape().to_vec(),
                        });
                    }
                    *t = restore_conv_kernel(m, c, kh, kw)?;
                } else {
                    if t.shape() != m.shape() {
                        return Err(Error::Shape {
                            op: "set_slot_dense_2d",
                            lhs: t.shape().to_vec(),
                            rhs: m.shape().to_vec(),
                        });
                    }
                    *t = m.clone();
                }
                Ok(())
            }
            WeightParam::Factored(_) => Err(Error::contract(format!(
                "slot {name:?} is factorized; overwrite its factors instead"
            ))),
        }
    }

    /// Replace a dense slot with SVD-re-encoded factors of its current
    /// weight (the import path for frozen pretrained sources). Returns the
    /// convergence flag of the re-encoding.
    pub fn factorize_slot(
        &mut self,
        name: &str,
        rank: usize,
        iters: usize,
        seed: u64,
    ) -> Result<bool> {
        let dense2d = self.slot_dense_2d(name)?;
        let blk = self.block_mut(name)?;
        if matches!(blk.weight, WeightParam::Factored(_)) {
            return Err(Error::contract(format!("slot {name:?} already factorized")));
        }
        let out = crate::lowrank::reencode_truncated_svd(
            &dense2d,
            &format!("{name}/w"),
            rank,
            iters,
            seed,
        )?;
        blk.weight = WeightParam::Factored(out.param);
        self.rank = rank;
        Ok(out.converged)
    }

    /// Declared transfer slots vs everything else.
    pub fn partition(&self, transfer_slots: &[String]) -> ParamPartition {
        let frozen_or_local = self
            .blocks
            .iter()
            .map(|b| b.name.clone())
            .filter(|n| !transfer_slots.contains(n))
            .collect();
        ParamPartition {
            transfer_slots: transfer_slots.to_vec(),
            frozen_or_local,
        }
    }

    /// Checkpoint entries: `<slot>/w` (dense or factored) and `<slot>/b`.
    pub fn checkpoint_entries(&self) -> Vec<CheckpointEntry> {
        let mut out = Vec::new();
        for blk in &self.blocks {
            match &blk.weight {
                WeightParam::Dense(t) => {
                    out.push(CheckpointEntry::dense(format!("{}/w", blk.name), t))
                }
                WeightParam::Factored(p) => out.push(CheckpointEntry::factored(p)),
            }
            out.push(CheckpointEntry::dense(format!("{}/b", blk.name), &blk.bias));
        }
        out
    }
}
