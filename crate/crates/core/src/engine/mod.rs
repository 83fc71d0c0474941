//! Training orchestration: the cycle-interleaved transfer/self-learning
//! schedule, transfer events, the delta-based adapter update rule, frozen
//! sources, and adapter removal at test time.
//!
//! Steps are 1-based. A transfer fires for a direction when
//! `t mod (t_cycle · freq_ratio[target model]) == 0`, so the first event
//! lands after one full cycle of self-learning; the `literal_t0` flag
//! additionally fires one event before the first step. At every transfer
//! step the adapter first learns from the drift since its previous
//! generation (`φ ← φ − η·(∇_φÃ)ᵀΔA`), then generates fresh factors that
//! replace the target slot's `A`; the `B` factors are never touched.

mod record;

pub use record::{parse_run_csv, records_to_csv, Phase, RunRecord, RUN_CSV_HEADER};

use crate::adapters::{Direction, Directions, KtlStack, MlpAdapter};
use crate::checkpoint::CheckpointEntry;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::zoo::{kd_loss, Batch, BatchStream, Dataset, ZooModel};

/// A model slot addressed by model index and slot name.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotRef {
    pub model: usize,
    pub slot: String,
}

/// One source↔target pairing. `source` is the "l" side of the direction
/// names: `l2s` writes into `target`, `s2l` writes into `source`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSpec {
    pub source: SlotRef,
    pub target: SlotRef,
}

/// The adapter attached to one pair.
#[derive(Debug, Clone, PartialEq)]
pub enum PairAdapter {
    /// Attention fusion over low-rank factors (the main method).
    Ktl(KtlStack),
    /// Feed-forward baseline over dense weights, one adapter per direction.
    Mlp {
        l2s: Option<MlpAdapter>,
        s2l: Option<MlpAdapter>,
    },
    /// Direct overlap copy of dense weights, no parameters.
    CopyShare,
}

impl PairAdapter {
    fn has_update_rule(&self) -> bool {
        !matches!(self, PairAdapter::CopyShare)
    }
}

/// Schedule and rates for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferPlan {
    pub pairs: Vec<PairSpec>,
    pub directions: Directions,
    pub t_cycle: usize,
    /// Per-model frequency multiplier: transfers into model `m` fire every
    /// `t_cycle · freq_ratio[m]` steps (mismatched-dataset scheduling).
    pub freq_ratio: Vec<usize>,
    /// Per-model freeze flags; frozen models take no gradient steps and
    /// must not be written by any transfer direction.
    pub frozen: Vec<bool>,
    pub eta_adapter: Real,
    pub eta_models: Vec<Real>,
    /// Fire one transfer event before the first step as well.
    pub literal_t0: bool,
}

impl TransferPlan {
    pub fn vanilla(n_models: usize, eta: Real) -> Self {
        TransferPlan {
            pairs: Vec::new(),
            directions: Directions::Both,
            t_cycle: 4,
            freq_ratio: vec![1; n_models],
            frozen: vec![false; n_models],
            eta_adapter: 0.0,
            eta_models: vec![eta; n_models],
            literal_t0: false,
        }
    }

    pub fn validate(&self, models: &[ZooModel]) -> Result<()> {
        let n = models.len();
        if self.t_cycle == 0 {
            return Err(Error::plan("t_cycle must be ≥ 1"));
        }
        if self.freq_ratio.len() != n || self.eta_models.len() != n || self.frozen.len() != n {
            return Err(Error::plan(format!(
                "per-model vectors must have length {n}"
            )));
        }
        if self.freq_ratio.iter().any(|&r| r == 0) {
            return Err(Error::plan("freq_ratio entries must be ≥ 1"));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            for (side, slot) in [("source", &p.source), ("target", &p.target)] {
                if slot.model >= n {
                    return Err(Error::plan(format!(
                        "pair {i}: {side} model index {} out of range",
                        slot.model
                    )));
                }
                models[slot.model].block(&slot.slot)?;
            }
            // a frozen model must never be written
            if self.directions.has(Direction::S2l) && self.frozen[p.source.model] {
                return Err(Error::plan(format!(
                    "pair {i}: s2l direction writes into frozen model {}",
                    p.source.model
                )));
            }
            if self.directions.has(Direction::L2s) && self.frozen[p.target.model] {
                return Err(Error::plan(format!(
                    "pair {i}: l2s direction writes into frozen model {}",
                    p.target.model
                )));
            }
        }
        Ok(())
    }
}

/// True iff a transfer fires at 1-based step `t` for the given cycle length
/// and frequency multiplier.
pub fn should_transfer(t: u64, t_cycle: usize, ratio: usize) -> bool {
    let period = (t_cycle as u64) * (ratio as u64);
    t % period == 0
}

/// Snapshot of one generation: the inputs fed to the adapter, the pre-write
/// payloads, and what was written. Immutable once recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferEvent {
    pub step: u64,
    pub pair: usize,
    /// Directions generated in this event's forward pass.
    pub dirs: Directions,
    /// Source-side payload fed to the adapter (A factor, or dense 2-D view).
    pub input_l: Tensor,
    /// Target-side payload fed to the adapter.
    pub input_s: Tensor,
    pub pre_l: Option<Tensor>,
    pub pre_s: Option<Tensor>,
    pub gen_l: Option<Tensor>,
    pub gen_s: Option<Tensor>,
}

/// Payload plumbing: factorized slots exchange their A factor, dense slots
/// (MLP adapter, copy-share) their 2-D dense view.
fn read_payload(model: &ZooModel, slot: &str, factored: bool) -> Result<Tensor> {
    if factored {
        Ok(model.slot_factors(slot)?.a.clone())
    } else {
        model.slot_dense_2d(slot)
    }
}

fn write_payload(model: &mut ZooModel, slot: &str, factored: bool, value: Tensor) -> Result<()> {
    if factored {
        model.set_slot_a(slot, value)
    } else {
        model.set_slot_dense_2d(slot, &value)
    }
}

/// Run one generation for `pair` and write the results into the target
/// slots. Returns the recorded event.
pub fn transfer_step(
    models: &mut [ZooModel],
    spec: &PairSpec,
    pair_idx: usize,
    adapter: &PairAdapter,
    dirs: Directions,
    step: u64,
) -> Result<TransferEvent> {
    let factored = matches!(adapter, PairAdapter::Ktl(_));
    let input_l = read_payload(&models[spec.source.model], &spec.source.slot, factored)?;
    let input_s = read_payload(&models[spec.target.model], &spec.target.slot, factored)?;

    let (gen_l, gen_s) = match adapter {
        PairAdapter::Ktl(stack) => {
            let tape = Tape::new();
            let bound = stack.bind(&tape, false);
            let vl = tape.leaf(&input_l, false);
            let vs = tape.leaf(&input_s, false);
            let (out_l, out_s) = stack.apply(&bound, vl, vs, dirs)?;
            (
                dirs.has(Direction::S2l).then(|| out_l.value()),
                dirs.has(Direction::L2s).then(|| out_s.value()),
            )
        }
        PairAdapter::Mlp { l2s, s2l } => {
            let tape = Tape::new();
            let gen_s = if dirs.has(Direction::L2s) {
                let ad = l2s
                    .as_ref()
                    .ok_or_else(|| Error::plan("mlp adapter missing l2s direction"))?;
                let v = tape.leaf(&input_l, false);
                Some(ad.forward(&ad.bind(&tape, false), v)?.value())
            } else {
                None
            };
            let gen_l = if dirs.has(Direction::S2l) {
                let ad = s2l
                    .as_ref()
                    .ok_or_else(|| Error::plan("mlp adapter missing s2l direction"))?;
                let v = tape.leaf(&input_s, false);
                Some(ad.forward(&ad.bind(&tape, false), v)?.value())
            } else {
                None
            };
            (gen_l, gen_s)
        }
        PairAdapter::CopyShare => {
            let gen_s = if dirs.has(Direction::L2s) {
                let mut t = input_s.clone();
                crate::zoo::copy_share(&input_l, &mut t)?;
                Some(t)
            } else {
                None
            };
            let gen_l = if dirs.has(Direction::S2l) {
                let mut t = input_l.clone();
                crate::zoo::copy_share(&input_s, &mut t)?;
                Some(t)
            } else {
                None
            };
            (gen_l, gen_s)
        }
    };

    let event = TransferEvent {
        step,
        pair: pair_idx,
        dirs,
        pre_l: gen_l.is_some().then(|| input_l.clone()),
        pre_s: gen_s.is_some().then(|| input_s.clone()),
        input_l,
        input_s,
        gen_l,
        gen_s,
    };
    if let Some(g) = &event.gen_s {
        write_payload(&mut models[spec.target.model], &spec.target.slot, factored, g.clone())?;
    }
    if let Some(g) = &event.gen_l {
        write_payload(&mut models[spec.source.model], &spec.source.slot, factored, g.clone())?;
    }
    Ok(event)
}

/// Adapter update rule: re-run the recorded generation under the tape, form
/// the surrogate `J = Σ ⟨Ã(φ), detach(ΔA)⟩` over the directions being
/// consumed, and step `φ ← φ − η·∇_φJ`, which equals
/// `φ − η·(∇_φÃ)ᵀ·vec(ΔA)`. `current_*` are the payloads as they stand now;
/// `ΔA = current − generated-at-event`.
pub fn adapter_update(
    adapter: &mut PairAdapter,
    event: &TransferEvent,
    consume: &[Direction],
    current_l: Option<&Tensor>,
    current_s: Option<&Tensor>,
    eta: Real,
) -> Result<()> {
    let delta = |gen: &Option<Tensor>, cur: Option<&Tensor>, what: &str| -> Result<Tensor> {
        let gen = gen
            .as_ref()
            .ok_or_else(|| Error::contract(format!("event has no {what} snapshot")))?;
        let cur = cur.ok_or_else(|| Error::contract(format!("no current {what} payload")))?;
        if cur.shape() != gen.shape() {
            return Err(Error::Shape {
                op: "adapter_update",
                lhs: cur.shape().to_vec(),
                rhs: gen.shape().to_vec(),
            });
        }
        Tensor::new(
            cur.shape().to_vec(),
            cur.data().iter().zip(gen.data()).map(|(c, g)| c - g).collect(),
        )
    };

    match adapter {
        PairAdapter::CopyShare => Ok(()),
        PairAdapter::Ktl(stack) => {
            let tape = Tape::new();
            let bound = stack.bind(&tape, true);
            let vl = tape.leaf(&event.input_l, false);
            let vs = tape.leaf(&event.input_s, false);
            let (out_l, out_s) = stack.apply(&bound, vl, vs, event.dirs)?;
            let mut j: Option<Var<'_>> = None;
            for &d in consume {
                let term = match d {
                    Direction::L2s => {
                        let dt = delta(&event.gen_s, current_s, "target")?;
                        out_s.dot(tape.leaf(&dt, false))?
                    }
                    Direction::S2l => {
                        let dt = delta(&event.gen_l, current_l, "source")?;
                        out_l.dot(tape.leaf(&dt, false))?
                    }
                };
                j = Some(match j {
                    None => term,
                    Some(acc) => acc.add(term)?,
                });
            }
            if let Some(j) = j {
                tape.backward(j)?;
                stack.sgd_apply(&tape, &bound, eta);
            }
            Ok(())
        }
        PairAdapter::Mlp { l2s, s2l } => {
            for &d in consume {
                match d {
                    Direction::L2s => {
                        let ad = l2s
                            .as_mut()
                            .ok_or_else(|| Error::plan("mlp adapter missing l2s direction"))?;
                        let dt = delta(&event.gen_s, current_s, "target")?;
                        let tape = Tape::new();
                        let bound = ad.bind(&tape, true);
                        let v = tape.leaf(&event.input_l, false);
                        let out = ad.forward(&bound, v)?;
                        let j = out.dot(tape.leaf(&dt, false))?;
                        tape.backward(j)?;
                        ad.sgd_apply(&tape, &bound, eta);
                    }
                    Direction::S2l => {
                        let ad = s2l
                            .as_mut()
                            .ok_or_else(|| Error::plan("mlp adapter missing s2l direction"))?;
                        let dt = delta(&event.gen_l, current_l, "source")?;
                        let tape = Tape::new();
                        let bound = ad.bind(&tape, true);
                        let v = tape.leaf(&event.input_s, false);
                        let out = ad.forward(&bound, v)?;
                        let j = out.dot(tape.leaf(&dt, false))?;
                        tape.backward(j)?;
                        ad.sgd_apply(&tape, &bound, eta);
                    }
                }
            }
            Ok(())
        }
    }
}

/// One plain SGD step on the model's own cross-entropy loss.
pub fn self_learning_step(model: &mut ZooModel, batch: &Batch, eta: Real, step: u64) -> Result<Real> {
    let tape = Tape::new();
    let vars = model.bind(&tape, true);
    let x = tape.leaf(&batch.inputs, false);
    let loss = model.forward(&vars, x)?.cross_entropy_mean(&batch.labels)?;
    let lv = loss.item()?;
    if !lv.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {step}")));
    }
    tape.backward(loss)?;
    model.sgd_apply(&tape, &vars, eta);
    Ok(lv)
}

/// One SGD step on the distillation objective against the teacher's logits
/// for the same batch.
pub fn kd_student_step(
    student: &mut ZooModel,
    teacher_logits: &Tensor,
    batch: &Batch,
    temperature: Real,
    alpha: Real,
    eta: Real,
    step: u64,
) -> Result<Real> {
    let tape = Tape::new();
    let vars = student.bind(&tape, true);
    let x = tape.leaf(&batch.inputs, false);
    let logits = student.forward(&vars, x)?;
    let loss = kd_loss(logits, teacher_logits, &batch.labels, temperature, alpha)?;
    let lv = loss.item()?;
    if !lv.is_finite() {
        return Err(Error::NonFinite(format!("distillation loss at step {step}")));
    }
    tape.backward(loss)?;
    student.sgd_apply(&tape, &vars, eta);
    Ok(lv)
}

/// Logit distillation settings for the KD baseline (teacher = model 0,
/// student = model 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdParams {
    pub temperature: Real,
    pub alpha: Real,
}

/// Everything one training run needs.
pub struct RunSetup {
    pub models: Vec<ZooModel>,
    pub model_ids: Vec<String>,
    pub plan: TransferPlan,
    /// Parallel to `plan.pairs`.
    pub adapters: Vec<PairAdapter>,
    /// KD baseline mode; mutually exclusive with transfer pairs.
    pub kd: Option<KdParams>,
    pub streams: Vec<BatchStream>,
    pub test_sets: Vec<Dataset>,
    pub total_steps: u64,
    pub eval_every: u64,
}

pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub models: Vec<ZooModel>,
    pub model_ids: Vec<String>,
    pub adapters: Vec<PairAdapter>,
    pub transfer_events: usize,
}

/// The interleaved schedule: at transfer steps the adapter first consumes
/// the drift since its previous event, then generates; every unfrozen model
/// then takes one self-learning step on its own batch; records are emitted
/// one per model per step.
pub fn run_training(mut setup: RunSetup) -> Result<RunOutput> {
    let n = setup.models.len();
    if setup.model_ids.len() != n || setup.streams.len() != n || setup.test_sets.len() != n {
        return Err(Error::contract("per-model vectors must align"));
    }
    if setup.adapters.len() != setup.plan.pairs.len() {
        return Err(Error::contract("one adapter per pair required"));
    }
    if setup.kd.is_some() && (!setup.plan.pairs.is_empty() || n != 2) {
        return Err(Error::plan("kd mode needs exactly two models and no pairs"));
    }
    setup.plan.validate(&setup.models)?;

    let mut pending: Vec<[Option<TransferEvent>; 2]> =
        (0..setup.plan.pairs.len()).map(|_| [None, None]).collect();
    let mut records = Vec::new();
    let mut event_count = 0usize;
    let eval_every = setup.eval_every.max(1);

    // Optional literal-mode event before any learning.
    if setup.plan.literal_t0 {
        for (i, spec) in setup.plan.pairs.iter().enumerate() {
            let ev = transfer_step(
                &mut setup.models,
                spec,
                i,
                &setup.adapters[i],
                setup.plan.directions,
                0,
            )?;
            event_count += 1;
            for d in setup.plan.directions.iter() {
                pending[i][dir_index(d)] = Some(ev.clone());
            }
        }
    }

    for t in 1..=setup.total_steps {
        let mut written = vec![false; n];

        for (i, spec) in setup.plan.pairs.iter().enumerate() {
            // A direction fires when its write target's schedule says so.
            let l2s_fires = setup.plan.directions.has(Direction::L2s)
                && should_transfer(t, setup.plan.t_cycle, setup.plan.freq_ratio[spec.target.model]);
            let s2l_fires = setup.plan.directions.has(Direction::S2l)
                && should_transfer(t, setup.plan.t_cycle, setup.plan.freq_ratio[spec.source.model]);
            let Some(active) = Directions::from_set(l2s_fires, s2l_fires) else {
                continue;
            };

            // Update the adapter from the drift since its previous events,
            // grouping directions that share an event into one step.
            if setup.adapters[i].has_update_rule() {
                let mut groups: Vec<(TransferEvent, Vec<Direction>)> = Vec::new();
                for d in active.iter() {
                    if let Some(ev) = pending[i][dir_index(d)].take() {
                        match groups.iter_mut().find(|(e, _)| e.step == ev.step) {
                            Some((_, ds)) => ds.push(d),
                            None => groups.push((ev, vec![d])),
                        }
                    }
                }
                let factored = matches!(setup.adapters[i], PairAdapter::Ktl(_));
                for (ev, ds) in groups {
                    let cur_l = read_payload(&setup.models[spec.source.model], &spec.source.slot, factored)?;
                    let cur_s = read_payload(&setup.models[spec.target.model], &spec.target.slot, factored)?;
                    adapter_update(
                        &mut setup.adapters[i],
                        &ev,
                        &ds,
                        Some(&cur_l),
                        Some(&cur_s),
                        setup.plan.eta_adapter,
                    )?;
                }
            }

            let ev = transfer_step(&mut setup.models, spec, i, &setup.adapters[i], active, t)?;
            event_count += 1;
            if ev.gen_s.is_some() {
                written[spec.target.model] = true;
            }
            if ev.gen_l.is_some() {
                written[spec.source.model] = true;
            }
            for d in active.iter() {
                pending[i][dir_index(d)] = Some(ev.clone());
            }
        }

        // Self-learning for every unfrozen model on its own batch.
        let mut losses: Vec<Option<Real>> = vec![None; n];
        for m in 0..n {
            if setup.plan.frozen[m] {
                continue;
            }
            let batch = setup.streams[m].next_batch();
            let eta = setup.plan.eta_models[m];
            let loss = match setup.kd {
                Some(kd) if m == 1 => {
                    let teacher_logits = setup.models[0].logits(&batch.inputs)?;
                    kd_student_step(
                        &mut setup.models[m],
                        &teacher_logits,
                        &batch,
                        kd.temperature,
                        kd.alpha,
                        eta,
                        t,
                    )?
                }
                _ => self_learning_step(&mut setup.models[m], &batch, eta, t)?,
            };
            losses[m] = Some(loss);
        }

        let eval_now = t % eval_every == 0 || t == setup.total_steps;
        for m in 0..n {
            let (top1, top5) = if eval_now {
                let (a, b) = setup.models[m].evaluate(&setup.test_sets[m])?;
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            records.push(RunRecord {
                step: t,
                phase: if written[m] { Phase::Transfer } else { Phase::SelfLearning },
                model_id: setup.model_ids[m].clone(),
                loss: losses[m],
                top1,
                top5,
                omega: omega_for_model(&setup.plan, &setup.adapters, m),
            });
        }
    }

    Ok(RunOutput {
        records,
        models: setup.models,
        model_ids: setup.model_ids,
        adapters: setup.adapters,
        transfer_events: event_count,
    })
}

fn dir_index(d: Direction) -> usize {
    match d {
        Direction::L2s => 0,
        Direction::S2l => 1,
    }
}

/// The ω values logged for a model: the first-layer weights of the first
/// attention adapter that writes into it, when that variant has ω at all.
fn omega_for_model(
    plan: &TransferPlan,
    adapters: &[PairAdapter],
    model: usize,
) -> Option<[Real; 4]> {
    for (spec, adapter) in plan.pairs.iter().zip(adapters) {
        let PairAdapter::Ktl(stack) = adapter else {
            continue;
        };
        let candidate = if plan.directions.has(Direction::L2s) && spec.target.model == model {
            stack.layers[0].l2s.as_ref()
        } else if plan.directions.has(Direction::S2l) && spec.source.model == model {
            stack.layers[0].s2l.as_ref()
        } else {
            None
        };
        if let Some(ad) = candidate {
            if ad.variant.uses_omega() {
                let o = ad.omega.data();
                return Some([o[0], o[1], o[2], o[3]]);
            }
        }
    }
    None
}

/// Inference bundle: model parameters only. Adapters are not on the
/// inference path, so forwarding through the bundle is identical to
/// forwarding through the models before stripping.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceBundle {
    pub model_ids: Vec<String>,
    pub models: Vec<ZooModel>,
}

pub fn strip_adapter(models: Vec<ZooModel>, model_ids: Vec<String>) -> InferenceBundle {
    InferenceBundle { model_ids, models }
}

impl InferenceBundle {
    pub fn param_count(&self) -> usize {
        self.models.iter().map(|m| m.param_count()).sum()
    }

    /// Checkpoint entries for every model, slot ids prefixed with the model
    /// id. Contains no adapter entries by construction.
    pub fn checkpoint_entries(&self) -> Vec<CheckpointEntry> {
        let mut out = Vec::new();
        for (id, m) in self.model_ids.iter().zip(&self.models) {
            for mut e in m.checkpoint_entries() {
                e.slot_id = format!("{id}/{}", e.slot_id);
                out.push(e);
            }
        }
        out
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::write_checkpoint(path, &self.checkpoint_entries())
    }
}
