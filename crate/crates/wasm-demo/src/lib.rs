//! Browser demo bindings: three interactive views over the core library.
//!
//! Everything crosses the JS boundary as JSON strings, so the page needs no
//! generated TypeScript. The three entry points are:
//!
//! - [`lpka_fuse`]: one attention-fusion step over two editable low-rank
//!   factors, returning the fused factor plus every combo's attention map.
//! - [`svd_demo`]: truncated-SVD re-encoding of a structured matrix with
//!   the reconstruction-error curve across ranks.
//! - [`train_demo`]: a miniature interleaved-transfer training run against
//!   its vanilla twin, returning loss/accuracy curves and the ω trace.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use weft_core::adapters::{Direction, Directions, KtlStack, LpkaVariant};
use weft_core::engine::{
    adapter_update, self_learning_step, should_transfer, transfer_step, PairAdapter, PairSpec,
    SlotRef, TransferEvent,
};
use weft_core::error::Error;
use weft_core::lowrank::{reconstruction_error, reencode_truncated_svd};
use weft_core::rng::SplitMix64;
use weft_core::tensor::{Real, Tape, Tensor};
use weft_core::zoo::{build_model, gen_synthetic, BatchStream, InputShape, ModelKind, SyntheticTask};

fn err_js(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn parse_matrix(rows: &[Vec<Real>]) -> Result<Tensor, Error> {
    Tensor::from_rows(rows)
}

fn matrix_out(t: &Tensor) -> Vec<Vec<Real>> {
    let (r, c) = t.dims2().expect("2-D");
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].to_vec())
        .collect()
}

// ── Fusion explorer ─────────────────────────────────────────────────

#[derive(Deserialize)]
struct FuseRequest {
    seed: u64,
    attn_dim: usize,
    variant: String,
    omega: Option<[Real; 4]>,
    a_target: Vec<Vec<Real>>,
    a_source: Vec<Vec<Real>>,
}

#[derive(Serialize)]
struct FuseResponse {
    output: Vec<Vec<Real>>,
    omega: Vec<Real>,
    combos: Vec<ComboView>,
}

#[derive(Serialize)]
struct ComboView {
    name: String,
    attn: Vec<Vec<Real>>,
    head: Vec<Vec<Real>>,
}

fn fuse(req: &FuseRequest) -> Result<FuseResponse, Error> {
    let variant = match req.variant.as_str() {
        "full" => LpkaVariant::Full,
        "row_only" => LpkaVariant::RowOnly,
        "avg_attn" => LpkaVariant::AvgAttn,
        other => return Err(Error::config(format!("unknown variant {other:?}"))),
    };
    let a_t = parse_matrix(&req.a_target)?;
    let a_s = parse_matrix(&req.a_source)?;
    let (r, m) = a_t.dims2()?;
    let (_, cap_m) = a_s.dims2()?;
    let mut rng = SplitMix64::new(req.seed);
    let mut ad = weft_core::adapters::LpkaAdapter::new(
        variant,
        r,
        m,
        cap_m,
        req.attn_dim,
        true,
        false,
        &mut rng,
    )?;
    if let Some(o) = req.omega {
        ad.omega = Tensor::new(vec![4], o.to_vec())?;
    }
    let tape = Tape::new();
    let bound = ad.bind(&tape, false);
    let vt = tape.leaf(&a_t, false);
    let vs = tape.leaf(&a_s, false);
    let detail = ad.forward_detailed(&bound, vt, vs)?;
    Ok(FuseResponse {
        output: matrix_out(&detail.output.value()),
        omega: ad.omega.data().to_vec(),
        combos: detail
            .heads
            .iter()
            .zip(&detail.attn)
            .map(|((combo, head), (_, attn))| ComboView {
                name: combo.name().to_string(),
                attn: matrix_out(attn),
                head: matrix_out(&head.value()),
            })
            .collect(),
    })
}

/// Fuse two low-rank factors once and expose the attention internals.
#[wasm_bindgen]
pub fn lpka_fuse(request_json: &str) -> Result<String, JsValue> {
    let req: FuseRequest =
        serde_json::from_str(request_json).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let resp = fuse(&req).map_err(err_js)?;
    serde_json::to_string(&resp).map_err(|e| JsValue::from_str(&e.to_string()))
}

// ── Truncated SVD explorer ──────────────────────────────────────────

#[derive(Deserialize)]
struct SvdRequest {
    seed: u64,
    rows: usize,
    cols: usize,
    /// Singular-value decay factor in (0, 1]; smaller decays faster.
    decay: Real,
    rank: usize,
}

#[derive(Serialize)]
struct SvdResponse {
    matrix: Vec<Vec<Real>>,
    approx: Vec<Vec<Real>>,
    error: Real,
    errors_by_rank: Vec<Real>,
    converged: bool,
    iterations: usize,
}

fn svd(req: &SvdRequest) -> Result<SvdResponse, Error> {
    if req.rows == 0 || req.cols == 0 || req.rows > 24 || req.cols > 24 {
        return Err(Error::config("rows/cols must be in 1..=24"));
    }
    let k = req.rows.min(req.cols);
    if req.rank == 0 || req.rank > k {
        return Err(Error::config(format!("rank must be in 1..={k}")));
    }
    // Structured demo matrix: sum of decaying rank-one terms.
    let mut rng = SplitMix64::new(req.seed);
    let mut w = Tensor::zeros(&[req.rows, req.cols]);
    let mut scale = 1.0;
    for _ in 0..k {
        let u = Tensor::normal(&[req.rows, 1], 1.0, &mut rng);
        let v = Tensor::normal(&[1, req.cols], 1.0, &mut rng);
        let term = u.matmul(&v)?;
        for (x, t) in w.data_mut().iter_mut().zip(term.data()) {
            *x += scale * t;
        }
        scale *= req.decay;
    }
    let mut errors_by_rank = Vec::with_capacity(k);
    let mut picked = None;
    for r in 1..=k {
        let out = reencode_truncated_svd(&w, "demo", r, 300, req.seed ^ 0xA5)?;
        errors_by_rank.push(reconstruction_error(&w, &out.param)?);
        if r == req.rank {
            picked = Some(out);
        }
    }
    let picked = picked.expect("rank in range");
    Ok(SvdResponse {
        matrix: matrix_out(&w),
        approx: matrix_out(&picked.param.densify_value()),
        error: reconstruction_error(&w, &picked.param)?,
        errors_by_rank,
        converged: picked.converged,
        iterations: picked.iterations,
    })
}

/// Re-encode a structured matrix at a chosen rank; returns the matrix, its
/// approximation, and the error curve across every rank.
#[wasm_bindgen]
pub fn svd_demo(request_json: &str) -> Result<String, JsValue> {
    let req: SvdRequest =
        serde_json::from_str(request_json).map_err(|e| JsValue::from_str(&e.to_string()))?;
    let resp = svd(&req).map_err(err_js)?;
    serde_json::to_string(&resp).map_err(|e| JsValue::from_str(&e.to_string()))
}

// ── Miniature training run ──────────────────────────────────────────

#[derive(Deserialize)]
struct TrainRequest {
    seed: u64,
    steps: u64,
    t_cycle: usize,
    /// "full", "row_only", "avg_attn", or "none" for vanilla-only.
    variant: String,
    eta_adapter: Real,
}

#[derive(Serialize)]
struct Curve {
    steps: Vec<u64>,
    loss: Vec<Real>,
    top1: Vec<Real>,
}

#[derive(Serialize)]
struct TrainResponse {
    transfer: Option<Curve>,
    vanilla: Curve,
    omega: Vec<[Real; 4]>,
    transfer_events: usize,
}

const DEMO_RANK: usize = 4;

fn train_arm(
    req: &TrainRequest,
    with_transfer: bool,
    omega_trace: &mut Vec<[Real; 4]>,
) -> Result<(Curve, usize), Error> {
    let variant = match req.variant.as_str() {
        "full" | "none" => LpkaVariant::Full,
        "row_only" => LpkaVariant::RowOnly,
        "avg_attn" => LpkaVariant::AvgAttn,
        other => return Err(Error::config(format!("unknown variant {other:?}"))),
    };
    let mut task =
        SyntheticTask::new(6, 16, 2_000, 500, SplitMix64::derive(req.seed, &[1]).next_u64());
    task.centers_per_class = 2;
    task.mean_scale = 1.0;
    let src_data = gen_synthetic(&task)?;
    let mut small = task.clone();
    small.train = 300;
    let tgt_data = gen_synthetic(&small)?;

    let mut models = vec![
        build_model(
            ModelKind::MlpLarge,
            InputShape::Flat(16),
            6,
            DEMO_RANK,
            &["head".into()],
            &mut SplitMix64::derive(req.seed, &[0x30, 0]),
        )?,
        build_model(
            ModelKind::MlpSmall,
            InputShape::Flat(16),
            6,
            DEMO_RANK,
            &["head".into()],
            &mut SplitMix64::derive(req.seed, &[0x30, 1]),
        )?,
    ];
    let mut streams = vec![
        BatchStream::new(src_data.train.clone(), 16, SplitMix64::derive(req.seed, &[0x57, 0]))?,
        BatchStream::new(tgt_data.train.clone(), 16, SplitMix64::derive(req.seed, &[0x57, 1]))?,
    ];
    let spec = PairSpec {
        source: SlotRef {
            model: 0,
            slot: "head".into(),
        },
        target: SlotRef {
            model: 1,
            slot: "head".into(),
        },
    };
    let mut adapter = PairAdapter::Ktl(KtlStack::new(
        1,
        Directions::L2s,
        variant,
        DEMO_RANK,
        6,
        6,
        8,
        true,
        false,
        &mut SplitMix64::derive(req.seed, &[0xAD]),
    )?);

    let mut curve = Curve {
        steps: Vec::new(),
        loss: Vec::new(),
        top1: Vec::new(),
    };
    let mut pending: Option<TransferEvent> = None;
    let mut events = 0usize;
    let eval_every = (req.steps / 40).max(1);
    for t in 1..=req.steps {
        if with_transfer && should_transfer(t, req.t_cycle, 1) {
            if let Some(ev) = pending.take() {
                let cur_l = models[0].slot_factors("head")?.a.clone();
                let cur_s = models[1].slot_factors("head")?.a.clone();
                adapter_update(
                    &mut adapter,
                    &ev,
                    &[Direction::L2s],
                    Some(&cur_l),
                    Some(&cur_s),
                    req.eta_adapter,
                )?;
            }
            pending = Some(transfer_step(
                &mut models,
                &spec,
                0,
                &adapter,
                Directions::L2s,
                t,
            )?);
            events += 1;
            if let PairAdapter::Ktl(stack) = &adapter {
                if let Some(ad) = stack.layers[0].l2s.as_ref() {
                    let o = ad.omega.data();
                    omega_trace.push([o[0], o[1], o[2], o[3]]);
                }
            }
        }
        let mut last_loss = 0.0;
        for m in 0..2 {
            let batch = streams[m].next_batch();
            let loss = self_learning_step(&mut models[m], &batch, 0.08, t)?;
            if m == 1 {
                last_loss = loss;
            }
        }
        if t % eval_every == 0 || t == req.steps {
            let (top1, _) = models[1].evaluate(&tgt_data.test)?;
            curve.steps.push(t);
            curve.loss.push(last_loss);
            curve.top1.push(top1);
        }
    }
    Ok((curve, events))
}

/// Train the small model with and without interleaved transfer and return
/// both curves.
#[wasm_bindgen]
pub fn train_demo(request_json: &str) -> Result<String, JsValue> {
    let req: TrainRequest =
        serde_json::from_str(request_json).map_err(|e| JsValue::from_str(&e.to_string()))?;
    if req.steps == 0 || req.steps > 2_000 {
        return Err(JsValue::from_str("steps must be in 1..=2000"));
    }
    if req.t_cycle == 0 {
        return Err(JsValue::from_str("t_cycle must be ≥ 1"));
    }
    let mut omega = Vec::new();
    let transfer = if req.variant == "none" {
        None
    } else {
        Some(train_arm(&req, true, &mut omega).map_err(err_js)?)
    };
    let (vanilla, _) = train_arm(&req, false, &mut Vec::new()).map_err(err_js)?;
    let (transfer_curve, events) = match transfer {
        Some((c, e)) => (Some(c), e),
        None => (None, 0),
    };
    let resp = TrainResponse {
        transfer: transfer_curve,
        vanilla,
        omega,
        transfer_events: events,
    };
    serde_json::to_string(&resp).map_err(|e| JsValue::from_str(&e.to_string()))
}
