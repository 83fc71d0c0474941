//! Acceptance suite: one test per acceptance criterion, each printing a
//! pass/fail line. Run with `cargo test -p weft-core --test acceptance`
//! (add `-- --nocapture` to see the lines as they print).

mod support;

use weft_core::adapters::{Direction, Directions, KtlStack, LpkaAdapter, LpkaVariant};
use weft_core::engine::{
    adapter_update, parse_run_csv, run_training, should_transfer, strip_adapter, PairAdapter,
    PairSpec, RunSetup, SlotRef, TransferEvent, TransferPlan,
};
use weft_core::harness::{
    parse_config, preset, run_experiment, run_sweep, ReportRow,
};
use weft_core::lowrank::{reconstruction_error, reencode_truncated_svd};
use weft_core::rng::SplitMix64;
use weft_core::tensor::{grad_check, Real, Tape, Tensor, Var};
use weft_core::zoo::{
    build_model, gen_synthetic, kd_loss, BatchStream, InputShape, ModelKind, SyntheticTask,
};

const GRAD_TOL: Real = 1e-4;

fn pass(criterion: &str, detail: String) {
    println!("[acceptance] {criterion}: PASS — {detail}");
}

// ── 1. Gradient suite ───────────────────────────────────────────────

struct OpCheck {
    name: &'static str,
    run: Box<dyn Fn(&mut SplitMix64) -> Real>,
}

fn rand_dims(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// grad_check a scalar-valued function of one tensor argument; other
/// arguments stay constant inside the closure.
fn check<F>(x: &Tensor, f: F) -> Real
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> weft_core::error::Result<Var<'t>>,
{
    let rep = grad_check(f, x, GRAD_TOL).expect("grad check runs");
    assert!(
        rep.pass,
        "gradient mismatch: max rel err {}",
        rep.max_rel_err
    );
    rep.max_rel_err
}

fn op_checks() -> Vec<OpCheck> {
    let mut ops: Vec<OpCheck> = Vec::new();
    let mut add = |name: &'static str, f: Box<dyn Fn(&mut SplitMix64) -> Real>| {
        ops.push(OpCheck { name, run: f });
    };

    add(
        "matmul",
        Box::new(|rng| {
            let (p, q, s) = (rand_dims(rng, 1, 5), rand_dims(rng, 1, 5), rand_dims(rng, 1, 5));
            let b = Tensor::normal(&[q, s], 1.0, rng);
            let x = Tensor::normal(&[p, q], 1.0, rng);
            if rng.below(2) == 0 {
                check(&x, move |t, v| Ok(v.matmul(t.leaf(&b, false))?.sum()))
            } else {
                let a = Tensor::normal(&[p, q], 1.0, rng);
                let y = Tensor::normal(&[q, s], 1.0, rng);
                check(&y, move |t, v| Ok(t.leaf(&a, false).matmul(v)?.sum()))
            }
        }),
    );
    add(
        "add_sub_mul",
        Box::new(|rng| {
            let shape = vec![rand_dims(rng, 1, 4), rand_dims(rng, 1, 5)];
            let other = Tensor::normal(&shape, 1.0, rng);
            let x = Tensor::normal(&shape, 1.0, rng);
            let which = rng.below(3);
            check(&x, move |t, v| {
                let o = t.leaf(&other, false);
                let y = match which {
                    0 => v.add(o)?,
                    1 => v.sub(o)?,
                    _ => v.mul(o)?,
                };
                // a second elementwise stage exercises accumulation
                Ok(y.mul(y)?.sum())
            })
        }),
    );
    add(
        "scale_and_scale_var",
        Box::new(|rng| {
            let x = Tensor::normal(&[rand_dims(rng, 1, 4), 3], 1.0, rng);
            if rng.below(2) == 0 {
                check(&x, |_, v| Ok(v.scale(-1.75).sum()))
            } else {
                let s = Tensor::scalar(rng.range(-2.0, 2.0));
                check(&x, move |t, v| Ok(v.scale_var(t.leaf(&s, false))?.sum()))
            }
        }),
    );
    add(
        "omega_element",
        Box::new(|rng| {
            let x = Tensor::normal(&[4], 1.0, rng);
            let h = Tensor::normal(&[2, 3], 1.0, rng);
            let i = rng.below(4);
            check(&x, move |t, v| {
                Ok(t.leaf(&h, false).scale_var(v.element(i)?)?.sum())
            })
        }),
    );
    add(
        "transpose_reshape_permute",
        Box::new(|rng| {
            let (a, b, c) = (rand_dims(rng, 1, 3), rand_dims(rng, 1, 3), rand_dims(rng, 1, 3));
            let x = Tensor::normal(&[a, b, c], 1.0, rng);
            let w = Tensor::normal(&[c, a * b], 1.0, rng);
            check(&x, move |t, v| {
                let y = v.permute(&[2, 0, 1])?.reshape(&[c, a * b])?;
                Ok(y.mul(t.leaf(&w, false))?.sum())
            })
        }),
    );
    add(
        "softmax_rows",
        Box::new(|rng| {
            let shape = vec![rand_dims(rng, 1, 4), rand_dims(rng, 1, 5)];
            let m = Tensor::normal(&shape, 1.0, rng);
            let x = Tensor::normal(&shape, 2.0, rng);
            check(&x, move |t, v| {
                Ok(v.softmax_rows()?.mul(t.leaf(&m, false))?.sum())
            })
        }),
    );
    add(
        "log_softmax_rows",
        Box::new(|rng| {
            let shape = vec![rand_dims(rng, 1, 4), rand_dims(rng, 2, 5)];
            let m = Tensor::normal(&shape, 1.0, rng);
            let x = Tensor::normal(&shape, 2.0, rng);
            check(&x, move |t, v| {
                Ok(v.log_softmax_rows()?.mul(t.leaf(&m, false))?.sum())
            })
        }),
    );
    add(
        "relu",
        Box::new(|rng| {
            // keep entries away from the kink
            let shape = vec![rand_dims(rng, 1, 4), 4];
            let mut x = Tensor::normal(&shape, 1.0, rng);
            for v in x.data_mut() {
                if v.abs() < 1e-2 {
                    *v += 0.05_f64.copysign(*v as f64) as Real;
                }
            }
            check(&x, |_, v| Ok(v.relu().sum()))
        }),
    );
    add(
        "map_unary",
        Box::new(|rng| {
            let x = Tensor::normal(&[rand_dims(rng, 1, 5)], 1.0, rng);
            check(&x, |_, v| Ok(v.map_unary(|x| x.sin(), |x| x.cos()).sum()))
        }),
    );
    add(
        "add_bias",
        Box::new(|rng| {
            let (p, q) = (rand_dims(rng, 1, 4), rand_dims(rng, 1, 5));
            let x = Tensor::normal(&[p, q], 1.0, rng);
            let b = Tensor::normal(&[q], 1.0, rng);
            if rng.below(2) == 0 {
                check(&x, move |t, v| {
                    let y = v.add_bias(t.leaf(&b, false))?;
                    Ok(y.mul(y)?.sum())
                })
            } else {
                check(&b, move |t, v| {
                    let y = t.leaf(&x, false).add_bias(v)?;
                    Ok(y.mul(y)?.sum())
                })
            }
        }),
    );
    add(
        "add_channel_bias",
        Box::new(|rng| {
            let c = rand_dims(rng, 1, 3);
            let x = Tensor::normal(&[2, c, 2, 2], 1.0, rng);
            let b = Tensor::normal(&[c], 1.0, rng);
            check(&b, move |t, v| {
                let y = t.leaf(&x, false).add_channel_bias(v)?;
                Ok(y.mul(y)?.sum())
            })
        }),
    );
    add(
        "sum_mean_dot",
        Box::new(|rng| {
            let shape = vec![rand_dims(rng, 1, 4), rand_dims(rng, 1, 4)];
            let o = Tensor::normal(&shape, 1.0, rng);
            let x = Tensor::normal(&shape, 1.0, rng);
            match rng.below(3) {
                0 => check(&x, |_, v| Ok(v.mul(v)?.sum())),
                1 => check(&x, |_, v| Ok(v.mul(v)?.mean())),
                _ => check(&x, move |t, v| v.dot(t.leaf(&o, false))),
            }
        }),
    );
    add(
        "cross_entropy_mean",
        Box::new(|rng| {
            let (b, k) = (rand_dims(rng, 1, 5), rand_dims(rng, 2, 6));
            let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
            let x = Tensor::normal(&[b, k], 2.0, rng);
            check(&x, move |_, v| v.cross_entropy_mean(&labels))
        }),
    );
    add(
        "unfold_avgpool_conv2d",
        Box::new(|rng| {
            let c = rand_dims(rng, 1, 2);
            let x = Tensor::normal(&[1, c, 4, 4], 1.0, rng);
            let k = Tensor::normal(&[2, c, 3, 3], 1.0, rng);
            match rng.below(3) {
                0 => check(&x, |_, v| {
                    let y = v.unfold(3, 3, 1)?;
                    Ok(y.mul(y)?.sum())
                }),
                1 => check(&x, |_, v| {
                    let y = v.avg_pool2()?;
                    Ok(y.mul(y)?.sum())
                }),
                _ => check(&k, move |t, v| {
                    let y = weft_core::tensor::conv2d(t.leaf(&x, false), v, 1)?;
                    Ok(y.mul(y)?.sum())
                }),
            }
        }),
    );
    add(
        "flatten_cols",
        Box::new(|rng| {
            let shape = vec![rand_dims(rng, 1, 4), rand_dims(rng, 1, 4)];
            let m = Tensor::normal(&[shape[1], shape[0]], 1.0, rng);
            let x = Tensor::normal(&shape, 1.0, rng);
            check(&x, move |t, v| {
                let toks = weft_core::tensor::flatten_cols(v)?;
                Ok(toks.mul(t.leaf(&m, false))?.sum())
            })
        }),
    );
    add(
        "densify",
        Box::new(|rng| {
            let (rows, r, cols) = (rand_dims(rng, 2, 5), rand_dims(rng, 1, 2), rand_dims(rng, 2, 5));
            let a = Tensor::normal(&[r, cols], 1.0, rng);
            let b = Tensor::normal(&[rows, r], 1.0, rng);
            if rng.below(2) == 0 {
                check(&b, move |t, v| {
                    Ok(weft_core::lowrank::densify(v, t.leaf(&a, false))?.sum())
                })
            } else {
                check(&a, move |t, v| {
                    Ok(weft_core::lowrank::densify(t.leaf(&b, false), v)?.sum())
                })
            }
        }),
    );
    add(
        "kd_loss",
        Box::new(|rng| {
            let (b, k) = (rand_dims(rng, 1, 4), rand_dims(rng, 2, 5));
            let teacher = Tensor::normal(&[b, k], 2.0, rng);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
            let x = Tensor::normal(&[b, k], 2.0, rng);
            check(&x, move |_, v| kd_loss(v, &teacher, &labels, 3.0, 0.6))
        }),
    );
    add(
        "lpka_forward_inputs",
        Box::new(|rng| {
            let (r, m, cap_m) = (rand_dims(rng, 1, 3), rand_dims(rng, 1, 3), rand_dims(rng, 1, 3));
            let mut seed_rng = SplitMix64::new(rng.next_u64());
            let ad =
                LpkaAdapter::new(LpkaVariant::Full, r, m, cap_m, 4, true, false, &mut seed_rng)
                    .unwrap();
            let a_s = Tensor::normal(&[r, cap_m], 1.0, rng);
            let x = Tensor::normal(&[r, m], 1.0, rng);
            check(&x, move |t, v| {
                let bound = ad.bind(t, false);
                Ok(ad.forward(&bound, v, t.leaf(&a_s, false))?.sum())
            })
        }),
    );
    add(
        "lpka_forward_params",
        Box::new(|rng| {
            // check one randomly selected adapter parameter tensor
            let (r, m, cap_m) = (rand_dims(rng, 1, 3), rand_dims(rng, 1, 3), rand_dims(rng, 1, 3));
            let mut seed_rng = SplitMix64::new(rng.next_u64());
            let ad =
                LpkaAdapter::new(LpkaVariant::Full, r, m, cap_m, 4, true, false, &mut seed_rng)
                    .unwrap();
            let a_t = Tensor::normal(&[r, m], 1.0, rng);
            let a_s = Tensor::normal(&[r, cap_m], 1.0, rng);
            let pidx = rng.below(ad.params().len());
            let x = ad.params()[pidx].clone();
            check(&x, move |t, v| {
                let mut twin = ad.clone();
                *twin.params_mut()[pidx] = v.value();
                // bind, then splice the checked leaf into the right slot
                let mut bound = twin.bind(t, false);
                let mut cursor = 0;
                for combo in bound.combos.iter_mut() {
                    for slot in [&mut combo.wq, &mut combo.wk, &mut combo.wv, &mut combo.wo] {
                        if cursor == pidx {
                            *slot = v;
                        }
                        cursor += 1;
                    }
                }
                if cursor == pidx {
                    bound.omega = v;
                }
                Ok(twin
                    .forward(&bound, t.leaf(&a_t, false), t.leaf(&a_s, false))?
                    .sum())
            })
        }),
    );
    add(
        "mlp_forward",
        Box::new(|rng| {
            let (n_r, n_c, t_r, t_c) = (
                rand_dims(rng, 1, 4),
                rand_dims(rng, 1, 4),
                rand_dims(rng, 1, 3),
                rand_dims(rng, 1, 3),
            );
            let mut seed_rng = SplitMix64::new(rng.next_u64());
            let ad = weft_core::adapters::MlpAdapter::new(n_r, n_c, t_r, t_c, &mut seed_rng).unwrap();
            let which = rng.below(4);
            let x = ad.params()[which].clone();
            let w = Tensor::normal(&[n_r, n_c], 1.0, rng);
            check(&x, move |t, v| {
                let mut bound = ad.bind(t, false);
                match which {
                    0 => bound.xi1_w = v,
                    1 => bound.xi1_b = v,
                    2 => bound.xi2_w = v,
                    _ => bound.xi2_b = v,
                }
                Ok(ad.forward(&bound, t.leaf(&w, false))?.sum())
            })
        }),
    );
    add(
        "ktl_apply",
        Box::new(|rng| {
            let (r, lc, sc) = (rand_dims(rng, 1, 2), rand_dims(rng, 1, 3), rand_dims(rng, 1, 3));
            let mut seed_rng = SplitMix64::new(rng.next_u64());
            let stack = KtlStack::new(
                2,
                Directions::Both,
                LpkaVariant::Full,
                r,
                lc,
                sc,
                2,
                true,
                false,
                &mut seed_rng,
            )
            .unwrap();
            let a_s = Tensor::normal(&[r, sc], 1.0, rng);
            let x = Tensor::normal(&[r, lc], 1.0, rng);
            check(&x, move |t, v| {
                let bound = stack.bind(t, false);
                let (ol, os) = stack.apply(&bound, v, t.leaf(&a_s, false), Directions::Both)?;
                ol.sum().add(os.sum())
            })
        }),
    );
    ops
}

#[test]
fn criterion_01_gradient_suite() {
    let started = std::time::Instant::now();
    let mut worst: (Real, &str) = (0.0, "");
    for op in op_checks() {
        let mut rng = SplitMix64::derive(0xACCE97, &[fnv(op.name)]);
        for _ in 0..100 {
            let err = (op.run)(&mut rng);
            if err > worst.0 {
                worst = (err, op.name);
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "gradient suite took {elapsed:?}, budget is one minute"
    );
    pass(
        "criterion 1 (gradient suite)",
        format!(
            "100 instances × {} op families, worst rel err {:.2e} ({}) in {elapsed:?}",
            op_checks().len(),
            worst.0,
            worst.1
        ),
    );
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

// ── 2. LPKA contracts ───────────────────────────────────────────────

#[test]
fn criterion_02_lpka_contracts() {
    let mut rng = SplitMix64::new(0x1bca);
    for case in 0..200 {
        let r = 1 + rng.below(6);
        let m = 1 + rng.below(6);
        let cap_m = 1 + rng.below(6);
        let d = if rng.below(2) == 0 { 4 } else { 16 };
        let mut arng = SplitMix64::new(rng.next_u64());
        let full =
            LpkaAdapter::new(LpkaVariant::Full, r, m, cap_m, d, true, false, &mut arng).unwrap();
        let a_t = Tensor::normal(&[r, m], 1.5, &mut rng);
        let a_s = Tensor::normal(&[r, cap_m], 1.5, &mut rng);

        let tape = Tape::new();
        let (vt, vs) = (tape.leaf(&a_t, false), tape.leaf(&a_s, false));
        let detail = full
            .forward_detailed(&full.bind(&tape, false), vt, vs)
            .unwrap();
        assert_eq!(detail.output.shape(), vec![r, m], "case {case}");
        for (_, attn) in &detail.attn {
            let (rows, cols) = attn.dims2().unwrap();
            for i in 0..rows {
                let s: Real = attn.data()[i * cols..(i + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() <= 1e-9, "case {case}: row sum {s}");
                assert!(attn.data()[i * cols..(i + 1) * cols]
                    .iter()
                    .all(|&p| p > 0.0 && p < 1.0 + 1e-12));
            }
        }

        // full(ω = e₁) ≡ row_only(ω₁ = 1), element-exact
        let mut full_e1 = full.clone();
        full_e1.omega = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut row_only = LpkaAdapter::new(
            LpkaVariant::RowOnly,
            r,
            m,
            cap_m,
            d,
            true,
            false,
            &mut SplitMix64::new(1),
        )
        .unwrap();
        row_only.combos[0].1 = full.combos[0].1.clone();
        row_only.omega.data_mut()[0] = 1.0;
        let o_full = full_e1
            .forward(&full_e1.bind(&tape, false), vt, vs)
            .unwrap()
            .value();
        let o_row = row_only
            .forward(&row_only.bind(&tape, false), vt, vs)
            .unwrap()
            .value();
        assert_eq!(o_full, o_row, "case {case}: row_only identity");

        // full(ω ≡ 0.25 frozen) ≡ avg_attn, element-exact
        let avg = LpkaAdapter {
            variant: LpkaVariant::AvgAttn,
            omega_trainable: false,
            ..full.clone()
        };
        let o_quarter = full
            .forward(&full.bind(&tape, false), vt, vs)
            .unwrap()
            .value();
        let o_avg = avg.forward(&avg.bind(&tape, false), vt, vs).unwrap().value();
        assert_eq!(o_quarter, o_avg, "case {case}: avg identity");

        // output shape holds for the variants too
        assert_eq!(o_row.shape(), &[r, m]);
        assert_eq!(o_avg.shape(), &[r, m]);
    }
    pass(
        "criterion 2 (LPKA contracts)",
        "200 shape tuples: output r×m, attention rows sum to 1 ± 1e-9, variant algebra exact".into(),
    );
}

// ── 3. Single-token fusion ──────────────────────────────────────────

#[test]
fn criterion_03_single_token_fusion() {
    let mut rng = SplitMix64::new(5);
    let mut worst: Real = 0.0;
    for _ in 0..50 {
        let mut ad =
            LpkaAdapter::new(LpkaVariant::Full, 1, 1, 1, 1, true, false, &mut rng).unwrap();
        for (_, p) in ad.combos.iter_mut() {
            for t in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
                t.data_mut()[0] = 1.0;
            }
        }
        let target = rng.range(-3.0, 3.0);
        let source = rng.range(-3.0, 3.0);
        let tape = Tape::new();
        let vt = tape.leaf(&Tensor::new(vec![1, 1], vec![target]).unwrap(), false);
        let vs = tape.leaf(&Tensor::new(vec![1, 1], vec![source]).unwrap(), false);
        let out = ad
            .forward(&ad.bind(&tape, false), vt, vs)
            .unwrap()
            .value()
            .data()[0];
        // hand derivation: softmax over one key is 1, each head equals the
        // source value, and Σ ωᵢ = 4 × 0.25 reassembles it
        worst = worst.max((out - source).abs());
        assert!(
            (out - source).abs() <= 1e-12,
            "single-token fusion {out} vs source {source}"
        );
    }
    pass(
        "criterion 3 (single-token fusion)",
        format!("output equals source value; worst |Δ| = {worst:.2e} ≤ 1e-12"),
    );
}

// ── 4. Schedule counting ────────────────────────────────────────────

#[test]
fn criterion_04_schedule_counting() {
    let mut rng = SplitMix64::new(7);
    for _ in 0..50 {
        let horizon = 1 + rng.below(500) as u64;
        let t_cycle = 1 + rng.below(10);
        let ratio = 1 + rng.below(4);
        let count = (1..=horizon)
            .filter(|&t| should_transfer(t, t_cycle, ratio))
            .count() as u64;
        assert_eq!(
            count,
            horizon / (t_cycle as u64 * ratio as u64),
            "horizon {horizon} cycle {t_cycle} ratio {ratio}"
        );
    }

    // literal-mode flag shifts events to include t = 0
    let run_events = |literal: bool| {
        let task = SyntheticTask::new(2, 4, 40, 16, 3);
        let data = gen_synthetic(&task).unwrap();
        let mk = |tag| {
            build_model(
                ModelKind::MlpSmall,
                InputShape::Flat(4),
                2,
                2,
                &["head".into()],
                &mut SplitMix64::derive(11, &[tag]),
            )
            .unwrap()
        };
        let stack = KtlStack::new(
            1,
            Directions::L2s,
            LpkaVariant::Full,
            2,
            2,
            2,
            4,
            true,
            false,
            &mut SplitMix64::new(13),
        )
        .unwrap();
        let plan = TransferPlan {
            pairs: vec![PairSpec {
                source: SlotRef { model: 0, slot: "head".into() },
                target: SlotRef { model: 1, slot: "head".into() },
            }],
            directions: Directions::L2s,
            t_cycle: 4,
            freq_ratio: vec![1, 1],
            frozen: vec![false, false],
            eta_adapter: 0.0,
            eta_models: vec![0.05, 0.05],
            literal_t0: literal,
        };
        run_training(RunSetup {
            models: vec![mk(0), mk(1)],
            model_ids: vec!["source".into(), "target".into()],
            plan,
            adapters: vec![PairAdapter::Ktl(stack)],
            kd: None,
            streams: vec![
                BatchStream::new(data.train.clone(), 8, SplitMix64::new(1)).unwrap(),
                BatchStream::new(data.train.clone(), 8, SplitMix64::new(2)).unwrap(),
            ],
            test_sets: vec![data.test.clone(), data.test.clone()],
            total_steps: 20,
            eval_every: 20,
        })
        .unwrap()
        .transfer_events
    };
    assert_eq!(run_events(false), 5); // t = 4, 8, 12, 16, 20
    assert_eq!(run_events(true), 6); // plus the t = 0 event
    pass(
        "criterion 4 (schedule counting)",
        "50 random horizons match ⌊T/(t_cycle·ratio)⌋; literal mode adds the t=0 event".into(),
    );
}

// ── 5. Adapter update rule vs finite-difference Jacobian ────────────

#[test]
fn criterion_05_adapter_update_rule() {
    let eta: Real = 0.37;
    let mut worst: Real = 0.0;
    for seed in 0..20u64 {
        let mut rng = SplitMix64::derive(0xDE17A, &[seed]);
        // row-only adapter with r=1, m=1, M=2, d=2: 12 projection scalars + 4 ω
        let stack = KtlStack::new(
            1,
            Directions::L2s,
            LpkaVariant::RowOnly,
            1,
            2,
            1,
            2,
            true,
            false,
            &mut rng,
        )
        .unwrap();
        let param_count: usize = stack.params().iter().map(|t| t.len()).sum();
        assert!(param_count <= 50, "adapter has {param_count} params");

        let input_l = Tensor::normal(&[1, 2], 1.0, &mut rng);
        let input_s = Tensor::normal(&[1, 1], 1.0, &mut rng);
        let forward = |stack: &KtlStack| -> Tensor {
            let tape = Tape::new();
            let bound = stack.bind(&tape, false);
            let (_, out_s) = stack
                .apply(
                    &bound,
                    tape.leaf(&input_l, false),
                    tape.leaf(&input_s, false),
                    Directions::L2s,
                )
                .unwrap();
            out_s.value()
        };
        let gen = forward(&stack);
        let delta = Tensor::normal(&[1, 1], 1.0, &mut rng);
        let current = Tensor::new(
            vec![1, 1],
            gen.data().iter().zip(delta.data()).map(|(g, d)| g + d).collect(),
        )
        .unwrap();

        // finite-difference Jacobian of vec(Ã) w.r.t. every parameter scalar
        let h = 1e-6;
        let flat_params: Vec<Real> = stack.params().iter().flat_map(|t| t.data().to_vec()).collect();
        let out_len = gen.len();
        let mut jac = vec![vec![0.0; flat_params.len()]; out_len];
        {
            let mut idx = 0;
            let n_tensors = stack.params().len();
            for ti in 0..n_tensors {
                let t_len = stack.params()[ti].len();
                for k in 0..t_len {
                    let mut plus = stack.clone();
                    plus.params_mut()[ti].data_mut()[k] += h;
                    let mut minus = stack.clone();
                    minus.params_mut()[ti].data_mut()[k] -= h;
                    let (fp, fm) = (forward(&plus), forward(&minus));
                    for o in 0..out_len {
                        jac[o][idx] = (fp.data()[o] - fm.data()[o]) / (2.0 * h);
                    }
                    idx += 1;
                }
            }
        }
        // expected: φ − η · Jᵀ · vec(ΔA)
        let expected: Vec<Real> = flat_params
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let grad_j: Real = (0..out_len).map(|o| jac[o][j] * delta.data()[o]).sum();
                p - eta * grad_j
            })
            .collect();

        let event = TransferEvent {
            step: 4,
            pair: 0,
            dirs: Directions::L2s,
            input_l: input_l.clone(),
            input_s: input_s.clone(),
            pre_l: None,
            pre_s: Some(input_s.clone()),
            gen_l: None,
            gen_s: Some(gen.clone()),
        };
        let mut adapter = PairAdapter::Ktl(stack);
        adapter_update(
            &mut adapter,
            &event,
            &[Direction::L2s],
            None,
            Some(&current),
            eta,
        )
        .unwrap();
        let PairAdapter::Ktl(updated) = &adapter else { unreachable!() };
        let got: Vec<Real> = updated.params().iter().flat_map(|t| t.data().to_vec()).collect();
        for (g, e) in got.iter().zip(&expected) {
            let diff = (g - e).abs();
            worst = worst.max(diff);
            assert!(diff <= 1e-6, "seed {seed}: |Δφ| = {diff:.2e}");
        }
    }
    pass(
        "criterion 5 (adapter update rule)",
        format!("20 seeds: implemented update equals φ − η·Jᵀ·vec(ΔA), worst |Δ| = {worst:.2e}"),
    );
}

// ── 6. Truncated SVD ────────────────────────────────────────────────

#[test]
fn criterion_06_truncated_svd() {
    let mut rng = SplitMix64::new(0x57d);

    // exact-rank inputs reconstruct within 1e-6
    for r in 1..=4usize {
        let x = support::random_matrix(&[7, r], &mut rng);
        let y = support::random_matrix(&[r, 6], &mut rng);
        let w = x.matmul(&y).unwrap();
        let out = reencode_truncated_svd(&w, "s", r, 500, 1).unwrap();
        let err = reconstruction_error(&w, &out.param).unwrap();
        assert!(err <= 1e-6, "rank {r}: err {err}");
    }

    // full-rank 8×8: error ≤ Jacobi oracle error + 1e-6, and monotone in r
    let mut worst_gap: Real = Real::NEG_INFINITY;
    for trial in 0..10 {
        let w = support::random_matrix(&[8, 8], &mut rng);
        let mut prev = Real::INFINITY;
        for r in 1..=8usize {
            let out = reencode_truncated_svd(&w, "s", r, 500, trial).unwrap();
            let err = reconstruction_error(&w, &out.param).unwrap();
            let oracle = support::oracle_rank_error(&w, r);
            worst_gap = worst_gap.max(err - oracle);
            assert!(
                err <= oracle + 1e-6,
                "trial {trial} rank {r}: err {err} oracle {oracle}"
            );
            assert!(err <= prev + 1e-9, "trial {trial} rank {r}: not monotone");
            prev = err;
        }
    }
    pass(
        "criterion 6 (truncated SVD)",
        format!("exact-rank ≤ 1e-6; vs brute-force oracle worst gap {worst_gap:.2e} ≤ 1e-6; monotone in r"),
    );
}

// ── 7. Vanilla equivalence and adapter removal ──────────────────────

const EQUIV_CONFIG: &str = r#"
name = "CFGNAME"
seed = 21
total_steps = 30
eval_every = 10

[[models]]
id = "source"
kind = "mlp_large"
transfer_slots = ["head"]
batch_size = 8
dataset = { type = "synthetic", classes = 4, features = 8, train = 128, test = 64 }

[[models]]
id = "target"
kind = "mlp_small"
transfer_slots = ["head"]
batch_size = 8
dataset = { type = "synthetic", classes = 4, features = 8, train = 96, test = 64 }

[plan]
directions = "l2s"
PAIRS

[adapter]
kind = "KIND"
rank = 3
attn_dim = 4

[rates]
eta_source = 0.05
eta_target = 0.05
eta_adapter = 0.01
"#;

#[test]
fn criterion_07_vanilla_equivalence_and_strip() {
    let dir = tempdir("c7");
    // adapter=none vs a plan with no pairs: bit-identical run records
    let vanilla = parse_config(
        &EQUIV_CONFIG
            .replace("CFGNAME", "vanilla")
            .replace("KIND", "none")
            .replace("PAIRS", ""),
    )
    .unwrap();
    let no_pairs = parse_config(
        &EQUIV_CONFIG
            .replace("CFGNAME", "nopairs")
            .replace("KIND", "lpka_full")
            .replace("PAIRS", "pairs = []"),
    )
    .unwrap();
    run_experiment(&vanilla, &dir).unwrap();
    run_experiment(&no_pairs, &dir).unwrap();
    let a = std::fs::read(dir.join("vanilla/seed21/runrecord.csv")).unwrap();
    let b = std::fs::read(dir.join("nopairs/seed21/runrecord.csv")).unwrap();
    assert_eq!(a, b, "run records differ between vanilla and plan-with-no-pairs");

    // strip_adapter leaves logits element-exact and drops no model params
    let task = SyntheticTask::new(3, 6, 90, 30, 9);
    let data = gen_synthetic(&task).unwrap();
    let mk = |tag: u64, kind, slots: &[&str]| {
        let slots: Vec<String> = slots.iter().map(|s| s.to_string()).collect();
        build_model(kind, InputShape::Flat(6), 3, 2, &slots, &mut SplitMix64::derive(2, &[tag]))
            .unwrap()
    };
    let stack = KtlStack::new(
        1,
        Directions::L2s,
        LpkaVariant::Full,
        2,
        3,
        3,
        4,
        true,
        false,
        &mut SplitMix64::new(3),
    )
    .unwrap();
    let out = run_training(RunSetup {
        models: vec![mk(0, ModelKind::MlpLarge, &["head"]), mk(1, ModelKind::MlpSmall, &["head"])],
        model_ids: vec!["source".into(), "target".into()],
        plan: TransferPlan {
            pairs: vec![PairSpec {
                source: SlotRef { model: 0, slot: "head".into() },
                target: SlotRef { model: 1, slot: "head".into() },
            }],
            directions: Directions::L2s,
            t_cycle: 4,
            freq_ratio: vec![1, 1],
            frozen: vec![false, false],
            eta_adapter: 0.01,
            eta_models: vec![0.05, 0.05],
            literal_t0: false,
        },
        adapters: vec![PairAdapter::Ktl(stack)],
        kd: None,
        streams: vec![
            BatchStream::new(data.train.clone(), 8, SplitMix64::new(4)).unwrap(),
            BatchStream::new(data.train.clone(), 8, SplitMix64::new(5)).unwrap(),
        ],
        test_sets: vec![data.test.clone(), data.test.clone()],
        total_steps: 24,
        eval_every: 12,
    })
    .unwrap();

    let probe = data.test.batch(&(0..16).collect::<Vec<_>>()).inputs;
    let before = out.models[1].logits(&probe).unwrap();
    let bundle = strip_adapter(out.models.clone(), out.model_ids.clone());
    let after = bundle.models[1].logits(&probe).unwrap();
    assert_eq!(before, after, "stripping changed inference logits");
    for e in bundle.checkpoint_entries() {
        assert!(!e.slot_id.contains("adapter"), "adapter slot {} in bundle", e.slot_id);
    }
    // parameter count equals the corresponding vanilla models'
    let vanilla_models = [mk(10, ModelKind::MlpLarge, &["head"]), mk(11, ModelKind::MlpSmall, &["head"])];
    let vanilla_count: usize = vanilla_models.iter().map(|m| m.param_count()).sum();
    assert_eq!(bundle.param_count(), vanilla_count);
    pass(
        "criterion 7 (vanilla equivalence & adapter removal)",
        "no-pairs run bit-identical to vanilla; stripped logits element-exact; param counts equal".into(),
    );
}

// ── 8. Frozen-source conservation ───────────────────────────────────

#[test]
fn criterion_08_frozen_source_conservation() {
    let dir = tempdir("c8");
    let cfg = parse_config(
        r#"
        name = "frozen"
        seed = 5
        total_steps = 40
        eval_every = 20

        [[models]]
        id = "source"
        kind = "mlp_large"
        batch_size = 8
        dataset = { type = "synthetic", classes = 4, features = 8, train = 160, test = 64 }

        [[models]]
        id = "target"
        kind = "mlp_small"
        transfer_slots = ["head"]
        batch_size = 8
        dataset = { type = "synthetic", classes = 4, features = 8, train = 96, test = 64 }

        [plan]
        directions = "l2s"
        frozen_source = true
        pretrain_source = 30
        pairs = [{ source = "source/head", target = "target/head" }]

        [adapter]
        kind = "lpka_full"
        rank = 3
        attn_dim = 4

        [rates]
        eta_source = 0.05
        eta_target = 0.05
        eta_adapter = 0.01
        "#,
    )
    .unwrap();
    let res = run_experiment(&cfg, &dir).unwrap();
    assert!(!res.row.failed);
    let pre = std::fs::read(res.run_dir.join("source.pre.ckpt")).unwrap();
    let post = std::fs::read(res.run_dir.join("source.ckpt")).unwrap();
    assert_eq!(pre, post, "frozen source changed during transfer training");
    pass(
        "criterion 8 (frozen-source conservation)",
        format!("source checkpoint byte-identical before/after ({} bytes)", pre.len()),
    );
}

// ── 9. Desk-scale functional smoke ──────────────────────────────────

#[test]
fn criterion_09_transfer_vs_vanilla_smoke() {
    let dir = tempdir("c9");
    let started = std::time::Instant::now();
    let configs = preset("transfer_vs_vanilla").unwrap();
    let seeds = [1u64, 2, 3, 4, 5];
    let sweep = run_sweep(&configs, &seeds, &dir, 1).unwrap();
    let elapsed = started.elapsed();

    let mean_of = |variant: &str| -> (Real, Real) {
        let vals: Vec<Real> = sweep
            .rows
            .iter()
            .filter(|r| r.variant == variant && !r.failed)
            .map(|r| {
                r.models
                    .iter()
                    .find(|m| m.id == "target")
                    .and_then(|m| m.final_top1)
                    .expect("target metric")
            })
            .collect();
        assert_eq!(vals.len(), seeds.len(), "missing rows for {variant}");
        let mean = vals.iter().sum::<Real>() / vals.len() as Real;
        let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>()
            / (vals.len() as Real - 1.0))
            .sqrt();
        (mean, sd)
    };
    let (with_mean, with_sd) = mean_of("lpka_full");
    let (van_mean, van_sd) = mean_of("vanilla");
    println!(
        "[acceptance] criterion 9 data: transfer {with_mean:.4} ± {with_sd:.4}, \
         vanilla {van_mean:.4} ± {van_sd:.4}, wall {elapsed:?} (table: {})",
        sweep.table_path.display()
    );
    assert!(
        elapsed.as_secs() < 300,
        "smoke ran {elapsed:?}, budget is five minutes"
    );
    assert!(
        with_mean >= van_mean,
        "mean target accuracy with transfer ({with_mean:.4}) is below vanilla ({van_mean:.4})"
    );
    pass(
        "criterion 9 (functional smoke)",
        format!("transfer {with_mean:.4} ≥ vanilla {van_mean:.4} over 5 seeds in {elapsed:?}"),
    );
}

// ── 10. Protocol coverage ───────────────────────────────────────────

#[test]
fn criterion_10_protocol_coverage() {
    let names = [
        "ablation_table7",
        "tcycle_sweep",
        "self_transfer",
        "cross_layer",
        "baselines",
        "cross_structure",
    ];
    let root_a = tempdir("c10a");
    let root_b = tempdir("c10b");
    let mut total_runs = 0;
    for name in names {
        let configs = preset(name).unwrap();
        for cfg in &configs {
            let mut cfg = cfg.clone();
            cfg.seed = 1;
            let res_a = run_experiment(&cfg, &root_a).unwrap();
            let res_b = run_experiment(&cfg, &root_b).unwrap();
            assert!(!res_a.row.failed, "{name}/{} failed", cfg.name);
            total_runs += 1;

            let rec_a = std::fs::read(res_a.run_dir.join("runrecord.csv")).unwrap();
            let rec_b = std::fs::read(res_b.run_dir.join("runrecord.csv")).unwrap();
            assert_eq!(rec_a, rec_b, "{name}/{}: rerun not bit-identical", cfg.name);

            // completeness: one row per model per step, parseable
            let records = parse_run_csv(std::str::from_utf8(&rec_a).unwrap()).unwrap();
            assert_eq!(
                records.len() as u64,
                cfg.total_steps * cfg.models.len() as u64,
                "{name}/{}: incomplete records",
                cfg.name
            );
            // report row exists and parses
            let row_text =
                std::fs::read_to_string(res_a.run_dir.join("report_row.csv")).unwrap();
            ReportRow::parse_csv(&row_text).unwrap();
        }
    }
    pass(
        "criterion 10 (protocol coverage)",
        format!("{total_runs} preset runs complete, deterministic, and parseable"),
    );
}

// ── helpers ─────────────────────────────────────────────────────────

fn tempdir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "weft-acceptance-{tag}-{}",
        std::process::id()
    ));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).ok();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn oracle_self_check() {
    // the Jacobi oracle must reproduce a known spectrum before anything
    // else leans on it
    let w = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, -2.0]]).unwrap();
    let sv = support::jacobi_singular_values(&w);
    assert!((sv[0] - 3.0).abs() < 1e-12 && (sv[1] - 2.0).abs() < 1e-12);

    let mut rng = SplitMix64::new(1);
    let x = support::random_matrix(&[6, 3], &mut rng);
    let sv = support::jacobi_singular_values(&x);
    // Frobenius identity: Σσ² = ‖X‖²
    let frob2: Real = x.data().iter().map(|v| v * v).sum();
    let sum2: Real = sv.iter().map(|s| s * s).sum();
    assert!((frob2 - sum2).abs() < 1e-9);
}
