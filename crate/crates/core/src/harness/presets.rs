//! Built-in experiment presets covering the protocol analogs: cross
//! structure, self transfer, frozen source, cross layer, cycle-length
//! sweep, adapter ablations, and the reference baselines. Presets expand to
//! plain configs; a sweep over seeds does the rest.

use super::{
    AdapterConfig, AdapterKind, DatasetConfig, ExperimentConfig, ModelConfig, PairConfig,
    PlanConfig, RatesConfig,
};
use crate::adapters::Directions;
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::zoo::ModelKind;

pub fn preset_names() -> &'static [&'static str] {
    &[
        "transfer_vs_vanilla",
        "cross_structure",
        "self_transfer",
        "frozen_source",
        "cross_layer",
        "tcycle_sweep",
        "ablation_table7",
        "baselines",
    ]
}

fn synthetic(classes: usize, features: usize, train: usize, test: usize) -> DatasetConfig {
    DatasetConfig::Synthetic {
        classes,
        features,
        train,
        test,
        seed_offset: 0,
        centers_per_class: 2,
        mean_scale: 1.0,
        noise: 1.0,
    }
}

fn model(id: &str, kind: ModelKind, slots: &[&str], dataset: DatasetConfig) -> ModelConfig {
    ModelConfig {
        id: id.into(),
        kind,
        transfer_slots: slots.iter().map(|s| s.to_string()).collect(),
        image: None,
        batch_size: 32,
        dataset,
    }
}

fn rates(eta: Real, eta_adapter: Real) -> RatesConfig {
    RatesConfig {
        eta_source: eta,
        eta_target: eta,
        eta_adapter,
    }
}

fn adapter(kind: AdapterKind, rank: usize, attn_dim: usize) -> AdapterConfig {
    AdapterConfig {
        kind,
        rank,
        attn_dim,
        layers: 1,
        omega_trainable: true,
        kd_temperature: 4.0,
        kd_alpha: 0.7,
    }
}

fn plan(directions: Directions, t_cycle: usize, pairs: &[(&str, &str)]) -> PlanConfig {
    PlanConfig {
        t_cycle,
        directions,
        freq_ratio: Vec::new(),
        frozen_source: false,
        pretrain_source: 0,
        residual: false,
        literal_t0: false,
        pairs: pairs
            .iter()
            .map(|(s, t)| PairConfig {
                source: s.to_string(),
                target: t.to_string(),
            })
            .collect(),
    }
}

fn base(name: &str, steps: u64, eval_every: u64) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seed: 1,
        total_steps: steps,
        eval_every,
        output_dir: None,
        models: Vec::new(),
        plan: plan(Directions::L2s, 4, &[]),
        adapter: adapter(AdapterKind::None, 8, 16),
        rates: rates(0.05, -0.5),
    }
}

/// The comparison task for the transfer presets: a 10-class mixture where
/// the source sees 10k samples and the target only 1k, so the source ends
/// up with genuinely better head factors to offer.
fn big_small_models(source_slots: &[&str], target_slots: &[&str]) -> Vec<ModelConfig> {
    let task = || DatasetConfig::Synthetic {
        classes: 10,
        features: 32,
        train: 10_000,
        test: 2_000,
        seed_offset: 0,
        centers_per_class: 3,
        mean_scale: 0.9,
        noise: 1.0,
    };
    let mut target_task = task();
    if let DatasetConfig::Synthetic { train, .. } = &mut target_task {
        *train = 1_000;
    }
    vec![
        model("source", ModelKind::MlpLarge, source_slots, task()),
        model("target", ModelKind::MlpSmall, target_slots, target_task),
    ]
}

/// The fused-factor arm against its matched vanilla twin. The adapter rate
/// is negative: under this crate's drift convention (ΔA = current −
/// generated) a negative rate descends ‖Ã(φ) − A_current‖², regressing the
/// generator onto wherever self-learning actually moved the factors, which
/// is the stabilizing orientation of the update rule.
fn transfer_vs_vanilla() -> Vec<ExperimentConfig> {
    let mut with = base("lpka_full", 3_000, 250);
    with.models = big_small_models(&["head"], &["head"]);
    with.plan = plan(Directions::L2s, 4, &[("source/head", "target/head")]);
    with.adapter = adapter(AdapterKind::LpkaFull, 8, 16);
    with.rates.eta_adapter = -0.5;

    let mut vanilla = base("vanilla", 3_000, 250);
    vanilla.models = big_small_models(&["head"], &["head"]);
    vanilla.adapter = adapter(AdapterKind::None, 8, 16);

    vec![with, vanilla]
}

/// Linear head of an MLP paired with a conv kernel of a CNN, through the
/// kernel's 2-D view.
fn cross_structure() -> Vec<ExperimentConfig> {
    let mut cfg = base("cross_structure", 400, 80);
    let mut cnn = model(
        "target",
        ModelKind::CnnSmall,
        &["conv2"],
        synthetic(6, 64, 1_500, 1_000),
    );
    cnn.image = Some([1, 8, 8]);
    cnn.batch_size = 16;
    cfg.models = vec![
        model(
            "source",
            ModelKind::MlpLarge,
            &["head"],
            synthetic(6, 64, 6_000, 1_000),
        ),
        cnn,
    ];
    cfg.plan = plan(Directions::Both, 4, &[("source/head", "target/conv2")]);
    cfg.adapter = adapter(AdapterKind::LpkaFull, 4, 16);
    vec![cfg]
}

/// One model transferring from its own head into an inner block.
fn self_transfer() -> Vec<ExperimentConfig> {
    let mut cfg = base("self_transfer", 400, 80);
    cfg.models = vec![model(
        "solo",
        ModelKind::MlpSmall,
        &["head", "fc2"],
        synthetic(6, 32, 1_500, 1_000),
    )];
    cfg.plan = plan(Directions::L2s, 4, &[("solo/head", "solo/fc2")]);
    cfg.adapter = adapter(AdapterKind::LpkaFull, 4, 16);
    vec![cfg]
}

/// Source pretrained dense, SVD re-encoded, then frozen; only the target
/// learns.
fn frozen_source() -> Vec<ExperimentConfig> {
    let mut cfg = base("frozen_source", 500, 100);
    cfg.models = big_small_models(&[], &["head"]);
    cfg.plan = plan(Directions::L2s, 4, &[("source/head", "target/head")]);
    cfg.plan.frozen_source = true;
    cfg.plan.pretrain_source = 500;
    cfg.adapter = adapter(AdapterKind::LpkaFull, 8, 16);
    vec![cfg]
}

/// Layer-to-layer pairings between the two MLPs.
fn cross_layer() -> Vec<ExperimentConfig> {
    let pairs = [
        ("layer2_to_layer1", "fc2", "fc1"),
        ("layer3_to_layer1", "fc3", "fc1"),
        ("layer2_to_layer2", "fc2", "fc2"),
        ("layer3_to_layer2", "fc3", "fc2"),
    ];
    pairs
        .iter()
        .map(|(name, src, dst)| {
            let mut cfg = base(name, 400, 80);
            cfg.models = vec![
                model(
                    "source",
                    ModelKind::MlpLarge,
                    &[src],
                    synthetic(6, 32, 4_000, 1_000),
                ),
                model(
                    "target",
                    ModelKind::MlpSmall,
                    &[dst],
                    synthetic(6, 32, 1_000, 1_000),
                ),
            ];
            cfg.plan = plan(
                Directions::L2s,
                4,
                &[(
                    &format!("source/{src}"),
                    &format!("target/{dst}"),
                )],
            );
            cfg.adapter = adapter(AdapterKind::LpkaFull, 4, 16);
            cfg
        })
        .collect()
}

/// Cycle-length ablation: transfer every step up to every 16th step.
fn tcycle_sweep() -> Vec<ExperimentConfig> {
    [1usize, 2, 4, 8, 16]
        .iter()
        .map(|&t| {
            let mut cfg = base(&format!("tcycle_{t}"), 400, 80);
            cfg.models = vec![
                model(
                    "source",
                    ModelKind::MlpLarge,
                    &["head"],
                    synthetic(10, 32, 4_000, 1_000),
                ),
                model(
                    "target",
                    ModelKind::MlpSmall,
                    &["head"],
                    synthetic(10, 32, 1_000, 1_000),
                ),
            ];
            cfg.plan = plan(Directions::L2s, t, &[("source/head", "target/head")]);
            cfg.adapter = adapter(AdapterKind::LpkaFull, 8, 16);
            cfg
        })
        .collect()
}

/// Adapter ablation: feed-forward baseline and the three fusion variants on
/// one task. The feed-forward baseline maps dense weights, so its variant
/// keeps the slots dense.
fn ablation_table7() -> Vec<ExperimentConfig> {
    let lpka = [
        ("lpka_full", AdapterKind::LpkaFull),
        ("lpka_row_only", AdapterKind::LpkaRowOnly),
        ("lpka_avg", AdapterKind::LpkaAvg),
    ];
    let mut out: Vec<ExperimentConfig> = lpka
        .iter()
        .map(|(name, kind)| {
            let mut cfg = base(name, 400, 80);
            cfg.models = big_small_models(&["head"], &["head"]);
            cfg.plan = plan(Directions::L2s, 4, &[("source/head", "target/head")]);
            cfg.adapter = adapter(*kind, 8, 16);
            cfg
        })
        .collect();
    let mut mlp = base("mlp", 400, 80);
    mlp.models = big_small_models(&[], &[]);
    mlp.plan = plan(Directions::L2s, 4, &[("source/head", "target/head")]);
    mlp.adapter = adapter(AdapterKind::Mlp, 8, 16);
    mlp.rates.eta_adapter = -0.001;
    out.push(mlp);
    out
}

/// Vanilla, direct parameter sharing, and logit distillation on a shared
/// dataset.
fn baselines() -> Vec<ExperimentConfig> {
    let shared = || synthetic(10, 32, 2_000, 1_000);
    let mut vanilla = base("vanilla", 400, 80);
    vanilla.models = vec![
        model("source", ModelKind::MlpLarge, &[], shared()),
        model("target", ModelKind::MlpSmall, &[], shared()),
    ];
    vanilla.adapter = adapter(AdapterKind::None, 8, 16);

    let mut copy = vanilla.clone();
    copy.name = "copy_share".into();
    copy.plan = plan(Directions::L2s, 4, &[("source/head", "target/head")]);
    copy.adapter = adapter(AdapterKind::CopyShare, 8, 16);

    let mut kd = vanilla.clone();
    kd.name = "kd".into();
    kd.adapter = adapter(AdapterKind::Kd, 8, 16);

    vec![vanilla, copy, kd]
}

/// Expand a preset by name.
pub fn preset(name: &str) -> Result<Vec<ExperimentConfig>> {
    let configs = match name {
        "transfer_vs_vanilla" => transfer_vs_vanilla(),
        "cross_structure" => cross_structure(),
        "self_transfer" => self_transfer(),
        "frozen_source" => frozen_source(),
        "cross_layer" => cross_layer(),
        "tcycle_sweep" => tcycle_sweep(),
        "ablation_table7" => ablation_table7(),
        "baselines" => baselines(),
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?}; available: {:?}",
                preset_names()
            )))
        }
    };
    for c in &configs {
        super::validate_config(c)?;
    }
    Ok(configs)
}
