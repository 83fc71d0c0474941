//! Config-driven experiment runner.
//!
//! Experiments are described by a strict TOML document (unknown keys are
//! errors; a typo must never become a silent default). Parsing fills in the
//! documented defaults and the resolved config is echoed into the run
//! directory, from which the run is bit-reproducible.

mod curves;
mod presets;
mod sweep;

pub use curves::emit_curves;
pub use presets::{preset, preset_names};
pub use sweep::{report_dir, run_sweep, sweep_table, SweepOutput, TABLE_HEADER};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{Direction, Directions, KtlStack, LpkaVariant, MlpAdapter};
use crate::checkpoint::{write_atomic, write_checkpoint};
use crate::engine::{
    records_to_csv, run_training, strip_adapter, KdParams, PairAdapter, PairSpec, RunOutput,
    RunSetup, SlotRef, TransferPlan,
};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Real;
use crate::zoo::{
    build_model, gen_synthetic, load_cifar_binary, BatchStream, CifarVariant, Dataset, InputShape,
    ModelKind, SyntheticTask,
};

// ── Config schema ───────────────────────────────────────────────────

fn default_batch() -> usize {
    32
}
fn default_rank() -> usize {
    8
}
fn default_attn_dim() -> usize {
    16
}
fn default_layers() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_tcycle() -> usize {
    4
}
fn default_directions() -> Directions {
    Directions::Both
}
fn default_eval_every() -> u64 {
    50
}
fn default_kd_temperature() -> Real {
    4.0
}
fn default_kd_alpha() -> Real {
    0.7
}
fn default_centers() -> usize {
    1
}
fn default_mean_scale() -> Real {
    2.0
}
fn default_noise() -> Real {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        features: usize,
        train: usize,
        test: usize,
        /// Folded into the run seed; equal offsets with equal tables give two
        /// models the same dataset (the KD baseline relies on this).
        #[serde(default)]
        seed_offset: u64,
        #[serde(default = "default_centers")]
        centers_per_class: usize,
        #[serde(default = "default_mean_scale")]
        mean_scale: Real,
        #[serde(default = "default_noise")]
        noise: Real,
    },
    CifarBinary {
        train_path: String,
        test_path: String,
        variant: CifarVariant,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { classes, .. } => *classes,
            DatasetConfig::CifarBinary { variant, .. } => variant.classes(),
        }
    }

    pub fn features(&self) -> usize {
        match self {
            DatasetConfig::Synthetic { features, .. } => *features,
            DatasetConfig::CifarBinary { .. } => crate::zoo::cifar_features(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    pub kind: ModelKind,
    #[serde(default)]
    pub transfer_slots: Vec<String>,
    /// Image layout `[c, h, w]` for CNNs; MLPs default to flat features.
    #[serde(default)]
    pub image: Option<[usize; 3]>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub dataset: DatasetConfig,
}

impl ModelConfig {
    pub fn input_shape(&self) -> InputShape {
        match self.image {
            Some([c, h, w]) => InputShape::Image { c, h, w },
            None => InputShape::Flat(self.dataset.features()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    /// `model_id/slot`, e.g. `source/head`.
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default = "default_tcycle")]
    pub t_cycle: usize,
    #[serde(default = "default_directions")]
    pub directions: Directions,
    /// Per-model transfer-frequency multipliers; defaults to all ones.
    #[serde(default)]
    pub freq_ratio: Vec<usize>,
    #[serde(default)]
    pub frozen_source: bool,
    /// Steps of source-only pretraining before freezing (frozen mode).
    #[serde(default)]
    pub pretrain_source: u64,
    #[serde(default)]
    pub residual: bool,
    /// Fire a transfer event at t = 0 as well.
    #[serde(default)]
    pub literal_t0: bool,
    #[serde(default)]
    pub pairs: Vec<PairConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Mlp,
    LpkaFull,
    LpkaRowOnly,
    LpkaAvg,
    None,
    CopyShare,
    Kd,
}

impl AdapterKind {
    pub fn lpka_variant(self) -> Option<LpkaVariant> {
        match self {
            AdapterKind::LpkaFull => Some(LpkaVariant::Full),
            AdapterKind::LpkaRowOnly => Some(LpkaVariant::RowOnly),
            AdapterKind::LpkaAvg => Some(LpkaVariant::AvgAttn),
            _ => None,
        }
    }

    pub fn wants_pairs(self) -> bool {
        !matches!(self, AdapterKind::None | AdapterKind::Kd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_attn_dim")]
    pub attn_dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_true")]
    pub omega_trainable: bool,
    #[serde(default = "default_kd_temperature")]
    pub kd_temperature: Real,
    #[serde(default = "default_kd_alpha")]
    pub kd_alpha: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesConfig {
    pub eta_source: Real,
    pub eta_target: Real,
    pub eta_adapter: Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Variant label; used for directories and report grouping.
    pub name: String,
    pub seed: u64,
    pub total_steps: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub models: Vec<ModelConfig>,
    pub plan: PlanConfig,
    pub adapter: AdapterConfig,
    pub rates: RatesConfig,
}

/// Parse and validate a config document. Unknown keys, type mismatches and
/// invariant violations all fail with the offending key named.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    validate_config(&cfg)?;
    Ok(cfg)
}

/// Serialize a resolved config (all defaults materialized).
pub fn emit_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::config(e.to_string()))
}

fn split_slot_ref<'a>(cfg: &ExperimentConfig, spec: &'a str) -> Result<(usize, &'a str)> {
    let (id, slot) = spec
        .split_once('/')
        .ok_or_else(|| Error::config(format!("pair reference {spec:?} must be model_id/slot")))?;
    let idx = cfg
        .models
        .iter()
        .position(|m| m.id == id)
        .ok_or_else(|| Error::config(format!("pair reference {spec:?}: no model with id {id:?}")))?;
    Ok((idx, slot))
}

pub fn validate_config(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.name.is_empty()
        || cfg
            .name
            .chars()
            .any(|c| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
    {
        return Err(Error::config(format!(
            "name {:?} must be a nonempty [A-Za-z0-9_-]+ label",
            cfg.name
        )));
    }
    if cfg.total_steps == 0 {
        return Err(Error::config("total_steps must be ≥ 1"));
    }
    if cfg.eval_every == 0 {
        return Err(Error::config("eval_every must be ≥ 1"));
    }
    match cfg.models.len() {
        1 | 2 => {}
        n => {
            return Err(Error::config(format!(
                "models: expected one (self-transfer) or two entries, got {n}"
            )))
        }
    }
    for (i, m) in cfg.models.iter().enumerate() {
        if m.id.is_empty() || m.id.contains('/') || m.id.contains(',') {
            return Err(Error::config(format!(
                "models[{i}].id {:?} must be nonempty without '/' or ','",
                m.id
            )));
        }
        if cfg.models.iter().filter(|o| o.id == m.id).count() > 1 {
            return Err(Error::config(format!("duplicate model id {:?}", m.id)));
        }
        if m.batch_size == 0 {
            return Err(Error::config(format!("models[{i}].batch_size must be ≥ 1")));
        }
        if let DatasetConfig::Synthetic {
            classes,
            features,
            train,
            test,
            centers_per_class,
            ..
        } = &m.dataset
        {
            if *classes < 2 || *features == 0 || *train == 0 || *test == 0 || *centers_per_class == 0
            {
                return Err(Error::config(format!(
                    "models[{i}].dataset: classes ≥ 2 and nonzero sizes required"
                )));
            }
        }
        if let Some([c, h, w]) = m.image {
            if c * h * w != m.dataset.features() {
                return Err(Error::config(format!(
                    "models[{i}].image {:?} does not tile {} features",
                    m.image,
                    m.dataset.features()
                )));
            }
        }
        if m.kind.is_cnn() && m.image.is_none() {
            return Err(Error::config(format!(
                "models[{i}]: {:?} needs image = [c, h, w]",
                m.kind
            )));
        }
    }
    if !cfg.plan.freq_ratio.is_empty() && cfg.plan.freq_ratio.len() != cfg.models.len() {
        return Err(Error::config(format!(
            "plan.freq_ratio must have one entry per model ({} given, {} models)",
            cfg.plan.freq_ratio.len(),
            cfg.models.len()
        )));
    }
    if cfg.plan.t_cycle == 0 {
        return Err(Error::config("plan.t_cycle must be ≥ 1"));
    }

    let kind = cfg.adapter.kind;
    if kind.wants_pairs() {
        if cfg.plan.pairs.is_empty() && !matches!(kind, AdapterKind::None) {
            // an empty pair list is the sanctioned vanilla-equivalence setup,
            // so it stays legal for every adapter kind
        }
    } else if !cfg.plan.pairs.is_empty() {
        return Err(Error::config(format!(
            "adapter {kind:?} does not take transfer pairs"
        )));
    }
    if matches!(kind, AdapterKind::Kd) {
        if cfg.models.len() != 2 {
            return Err(Error::config("adapter kd needs exactly two models"));
        }
        let (a, b) = (&cfg.models[0], &cfg.models[1]);
        if a.dataset != b.dataset {
            return Err(Error::config(
                "adapter kd requires both models on the same dataset/labels",
            ));
        }
    }
    if cfg.plan.frozen_source {
        if cfg.models.len() != 2 {
            return Err(Error::config("frozen_source needs a source and a target model"));
        }
        if !matches!(cfg.plan.directions, Directions::L2s) {
            return Err(Error::config(
                "frozen_source excludes the s2l direction; set plan.directions = \"l2s\"",
            ));
        }
        if cfg.plan.pretrain_source > 0 {
            for p in &cfg.plan.pairs {
                let (midx, slot) = split_slot_ref(cfg, &p.source)?;
                if midx != 0 {
                    return Err(Error::config(
                        "frozen_source assumes models[0] is the source of every pair",
                    ));
                }
                if cfg.models[0].transfer_slots.iter().any(|s| s == slot) {
                    return Err(Error::config(format!(
                        "frozen_source with pretraining re-encodes {slot:?} from dense weights; \
                         leave it out of models[0].transfer_slots"
                    )));
                }
            }
        }
    }
    if cfg.plan.pretrain_source > 0 && !cfg.plan.frozen_source {
        return Err(Error::config("pretrain_source requires frozen_source = true"));
    }

    for p in &cfg.plan.pairs {
        let (sm, ss) = split_slot_ref(cfg, &p.source)?;
        let (tm, ts) = split_slot_ref(cfg, &p.target)?;
        let lpka = kind.lpka_variant().is_some();
        let check = |mi: usize, slot: &str, is_pretrained_source: bool| -> Result<()> {
            let declared = cfg.models[mi].transfer_slots.iter().any(|s| s == slot);
            if lpka && !declared && !is_pretrained_source {
                return Err(Error::config(format!(
                    "slot {}/{slot} must be factorized (listed in transfer_slots) for {kind:?}",
                    cfg.models[mi].id
                )));
            }
            if matches!(kind, AdapterKind::Mlp | AdapterKind::CopyShare) && declared {
                return Err(Error::config(format!(
                    "slot {}/{slot} must stay dense for {kind:?}; remove it from transfer_slots",
                    cfg.models[mi].id
                )));
            }
            Ok(())
        };
        let pretrained_source = cfg.plan.frozen_source && cfg.plan.pretrain_source > 0 && sm == 0;
        check(sm, ss, pretrained_source)?;
        check(tm, ts, false)?;
    }
    Ok(())
}

// ── Report rows ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetrics {
    pub id: String,
    pub final_top1: Option<Real>,
    pub final_top5: Option<Real>,
    pub best_top1: Option<Real>,
    pub best_top5: Option<Real>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub failed: bool,
    pub models: Vec<ModelMetrics>,
    pub wall_time_s: f64,
}

pub const REPORT_ROW_HEADER: &str = "config_hash,variant,seed,status,model_0,final_top1_0,final_top5_0,best_top1_0,best_top5_0,model_1,final_top1_1,final_top5_1,best_top1_1,best_top5_1,wall_time_s";

fn metric_cells(m: Option<&ModelMetrics>) -> String {
    match m {
        Some(m) => format!(
            "{},{},{},{},{}",
            m.id,
            m.final_top1.map(|x| x.to_string()).unwrap_or_default(),
            m.final_top5.map(|x| x.to_string()).unwrap_or_default(),
            m.best_top1.map(|x| x.to_string()).unwrap_or_default(),
            m.best_top5.map(|x| x.to_string()).unwrap_or_default(),
        ),
        None => ",,,,".to_string(),
    }
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{},{},{}\n",
            REPORT_ROW_HEADER,
            self.config_hash,
            self.variant,
            self.seed,
            if self.failed { "failed" } else { "ok" },
            metric_cells(self.models.first()),
            metric_cells(self.models.get(1)),
            self.wall_time_s,
        )
    }

    pub fn parse_csv(text: &str) -> Result<ReportRow> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == REPORT_ROW_HEADER => {}
            other => return Err(Error::format(format!("bad report header {other:?}"))),
        }
        let row = lines
            .next()
            .ok_or_else(|| Error::format("report row missing"))?;
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != 15 {
            return Err(Error::format(format!(
                "report row has {} columns, expected 15",
                cols.len()
            )));
        }
        let num = |s: &str| -> Result<Option<Real>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<Real>()
                    .map(Some)
                    .map_err(|_| Error::format(format!("bad metric {s:?}")))
            }
        };
        let model = |base: usize| -> Result<Option<ModelMetrics>> {
            if cols[base].is_empty() {
                return Ok(None);
            }
            Ok(Some(ModelMetrics {
                id: cols[base].to_string(),
                final_top1: num(cols[base + 1])?,
                final_top5: num(cols[base + 2])?,
                best_top1: num(cols[base + 3])?,
                best_top5: num(cols[base + 4])?,
            }))
        };
        let mut models = Vec::new();
        if let Some(m) = model(4)? {
            models.push(m);
        }
        if let Some(m) = model(9)? {
            models.push(m);
        }
        Ok(ReportRow {
            config_hash: cols[0].to_string(),
            variant: cols[1].to_string(),
            seed: cols[2]
                .parse()
                .map_err(|_| Error::format(format!("bad seed {:?}", cols[2])))?,
            failed: cols[3] == "failed",
            models,
            wall_time_s: cols[14].parse().unwrap_or(0.0),
        })
    }
}

/// FNV-1a 64-bit, printed as hex: a stable, dependency-free config hash.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in text.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

// ── Building and running ────────────────────────────────────────────

struct BuiltExperiment {
    setup: RunSetup,
    norm_stats: Vec<(String, Vec<Real>, Vec<Real>)>,
    /// Source checkpoint written before transfer training (frozen mode).
    pre_source: Option<Vec<crate::checkpoint::CheckpointEntry>>,
}

fn load_dataset(cfg: &ExperimentConfig, m: &ModelConfig) -> Result<(Dataset, Dataset, Vec<Real>, Vec<Real>)> {
    match &m.dataset {
        DatasetConfig::Synthetic {
            classes,
            features,
            train,
            test,
            seed_offset,
            centers_per_class,
            mean_scale,
            noise,
        } => {
            let mut task = SyntheticTask::new(
                *classes,
                *features,
                *train,
                *test,
                SplitMix64::derive(cfg.seed, &[0xD5, *seed_offset]).next_u64(),
            );
            task.centers_per_class = *centers_per_class;
            task.mean_scale = *mean_scale;
            task.noise = *noise;
            let d = gen_synthetic(&task)?;
            Ok((d.train, d.test, d.norm_mean, d.norm_std))
        }
        DatasetConfig::CifarBinary {
            train_path,
            test_path,
            variant,
            limit,
        } => {
            let mut train = load_cifar_binary(Path::new(train_path), *variant, *limit)?;
            let mut test = load_cifar_binary(Path::new(test_path), *variant, *limit)?;
            let (mean, std) = crate::zoo::standardize_pair(&mut train, &mut test);
            Ok((train, test, mean, std))
        }
    }
}

fn build_experiment(cfg: &ExperimentConfig) -> Result<BuiltExperiment> {
    let n = cfg.models.len();
    let mut models = Vec::with_capacity(n);
    let mut streams = Vec::with_capacity(n);
    let mut tests = Vec::with_capacity(n);
    let mut norm_stats = Vec::with_capacity(n);
    for (i, mc) in cfg.models.iter().enumerate() {
        let (train, test, mean, std) = load_dataset(cfg, mc)?;
        if train.classes != mc.dataset.classes() {
            return Err(Error::config("dataset classes mismatch"));
        }
        let model = build_model(
            mc.kind,
            mc.input_shape(),
            train.classes,
            cfg.adapter.rank,
            &mc.transfer_slots,
            &mut SplitMix64::derive(cfg.seed, &[0x30, i as u64]),
        )?;
        let stream = BatchStream::new(
            train,
            mc.batch_size,
            SplitMix64::derive(cfg.seed, &[0x57, i as u64]),
        )?;
        models.push(model);
        streams.push(stream);
        tests.push(test);
        norm_stats.push((mc.id.clone(), mean, std));
    }

    // Frozen-source mode: optionally pretrain the dense source, then import
    // its pair slots as SVD factors and freeze it.
    let mut pre_source = None;
    if cfg.plan.frozen_source {
        if cfg.plan.pretrain_source > 0 {
            let pre_steps = cfg.plan.pretrain_source;
            let source = models.remove(0);
            let stream = streams.remove(0);
            let out = run_training(RunSetup {
                models: vec![source],
                model_ids: vec![cfg.models[0].id.clone()],
                plan: TransferPlan::vanilla(1, cfg.rates.eta_source),
                adapters: vec![],
                kd: None,
                streams: vec![stream],
                test_sets: vec![tests[0].clone()],
                total_steps: pre_steps,
                eval_every: pre_steps,
            })?;
            let mut source = out.models.into_iter().next().expect("pretrained source");
            for (pi, p) in cfg.plan.pairs.iter().enumerate() {
                let (_, slot) = split_slot_ref(cfg, &p.source)?;
                source.factorize_slot(
                    slot,
                    cfg.adapter.rank,
                    200,
                    SplitMix64::derive(cfg.seed, &[0x5D, pi as u64]).next_u64(),
                )?;
            }
            models.insert(0, source);
            // the pretraining consumed the source stream; rebuild it so the
            // frozen run's record is self-contained
            let (train, _, _, _) = load_dataset(cfg, &cfg.models[0])?;
            streams.insert(
                0,
                BatchStream::new(
                    train,
                    cfg.models[0].batch_size,
                    SplitMix64::derive(cfg.seed, &[0x57, 0]),
                )?,
            );
        }
        pre_source = Some(models[0].checkpoint_entries());
    }

    // Adapters per pair.
    let mut pairs = Vec::new();
    let mut adapters = Vec::new();
    for (pi, p) in cfg.plan.pairs.iter().enumerate() {
        let (sm, ss) = split_slot_ref(cfg, &p.source)?;
        let (tm, ts) = split_slot_ref(cfg, &p.target)?;
        let spec = PairSpec {
            source: SlotRef {
                model: sm,
                slot: ss.to_string(),
            },
            target: SlotRef {
                model: tm,
                slot: ts.to_string(),
            },
        };
        let mut rng = SplitMix64::derive(cfg.seed, &[0xAD, pi as u64]);
        let adapter = match cfg.adapter.kind {
            AdapterKind::LpkaFull | AdapterKind::LpkaRowOnly | AdapterKind::LpkaAvg => {
                let variant = cfg.adapter.kind.lpka_variant().expect("lpka kind");
                let l_cols = models[sm].slot_factors(ss)?.cols();
                let s_cols = models[tm].slot_factors(ts)?.cols();
                PairAdapter::Ktl(KtlStack::new(
                    cfg.adapter.layers,
                    cfg.plan.directions,
                    variant,
                    cfg.adapter.rank,
                    l_cols,
                    s_cols,
                    cfg.adapter.attn_dim,
                    cfg.adapter.omega_trainable,
                    cfg.plan.residual,
                    &mut rng,
                )?)
            }
            AdapterKind::Mlp => {
                let sw = models[sm].slot_dense_2d(ss)?;
                let tw = models[tm].slot_dense_2d(ts)?;
                let (srows, scols) = sw.dims2()?;
                let (trows, tcols) = tw.dims2()?;
                let l2s = cfg
                    .plan
                    .directions
                    .has(Direction::L2s)
                    .then(|| MlpAdapter::new(srows, scols, trows, tcols, &mut rng))
                    .transpose()?;
                let s2l = cfg
                    .plan
                    .directions
                    .has(Direction::S2l)
                    .then(|| MlpAdapter::new(trows, tcols, srows, scols, &mut rng))
                    .transpose()?;
                PairAdapter::Mlp { l2s, s2l }
            }
            AdapterKind::CopyShare => PairAdapter::CopyShare,
            AdapterKind::None | AdapterKind::Kd => unreachable!("validated: no pairs"),
        };
        pairs.push(spec);
        adapters.push(adapter);
    }

    let freq_ratio = if cfg.plan.freq_ratio.is_empty() {
        vec![1; n]
    } else {
        cfg.plan.freq_ratio.clone()
    };
    let mut frozen = vec![false; n];
    if cfg.plan.frozen_source {
        frozen[0] = true;
    }
    let eta_models = match n {
        1 => vec![cfg.rates.eta_target],
        _ => vec![cfg.rates.eta_source, cfg.rates.eta_target],
    };
    let plan = TransferPlan {
        pairs,
        directions: cfg.plan.directions,
        t_cycle: cfg.plan.t_cycle,
        freq_ratio,
        frozen,
        eta_adapter: cfg.rates.eta_adapter,
        eta_models,
        literal_t0: cfg.plan.literal_t0,
    };
    let kd = matches!(cfg.adapter.kind, AdapterKind::Kd).then_some(KdParams {
        temperature: cfg.adapter.kd_temperature,
        alpha: cfg.adapter.kd_alpha,
    });

    Ok(BuiltExperiment {
        setup: RunSetup {
            models,
            model_ids: cfg.models.iter().map(|m| m.id.clone()).collect(),
            plan,
            adapters,
            kd,
            streams,
            test_sets: tests,
            total_steps: cfg.total_steps,
            eval_every: cfg.eval_every,
        },
        norm_stats,
        pre_source,
    })
}

/// Where a run's outputs live.
pub fn run_dir(cfg: &ExperimentConfig, out_root: &Path) -> PathBuf {
    match &cfg.output_dir {
        Some(d) => PathBuf::from(d),
        None => out_root.join(&cfg.name).join(format!("seed{}", cfg.seed)),
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub row: ReportRow,
    pub run_dir: PathBuf,
}

/// Execute one experiment: train, evaluate, strip the adapter, and write
/// the run directory (resolved config, run records, normalization stats,
/// checkpoints, report row). A non-finite loss aborts the run and flags the
/// row as failed instead of erroring.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunResult> {
    validate_config(cfg)?;
    let dir = run_dir(cfg, out_root);
    std::fs::create_dir_all(&dir)?;
    let resolved = emit_config(cfg)?;
    write_atomic(&dir.join("config.resolved.toml"), resolved.as_bytes())?;
    let hash = config_hash(&resolved);

    let started = Instant::now();
    let built = build_experiment(cfg)?;

    let mut norm_csv = String::from("model_id,feature,mean,std\n");
    for (id, mean, std) in &built.norm_stats {
        for (j, (m, s)) in mean.iter().zip(std).enumerate() {
            norm_csv.push_str(&format!("{id},{j},{m},{s}\n"));
        }
    }
    write_atomic(&dir.join("norm_stats.csv"), norm_csv.as_bytes())?;
    if let Some(entries) = &built.pre_source {
        write_checkpoint(&dir.join(format!("{}.pre.ckpt", cfg.models[0].id)), entries)?;
    }

    let model_ids: Vec<String> = built.setup.model_ids.clone();
    let outcome = run_training(built.setup);
    let wall = started.elapsed().as_secs_f64();

    let (row, output): (ReportRow, Option<RunOutput>) = match outcome {
        Ok(out) => {
            let mut metrics = Vec::new();
            for id in &model_ids {
                let evals: Vec<&crate::engine::RunRecord> = out
                    .records
                    .iter()
                    .filter(|r| &r.model_id == id && r.top1.is_some())
                    .collect();
                let final_rec = evals.last();
                let best = |f: fn(&crate::engine::RunRecord) -> Option<Real>| {
                    evals
                        .iter()
                        .filter_map(|r| f(r))
                        .fold(None, |acc: Option<Real>, v| {
                            Some(acc.map_or(v, |a| a.max(v)))
                        })
                };
                metrics.push(ModelMetrics {
                    id: id.clone(),
                    final_top1: final_rec.and_then(|r| r.top1),
                    final_top5: final_rec.and_then(|r| r.top5),
                    best_top1: best(|r| r.top1),
                    best_top5: best(|r| r.top5),
                });
            }
            (
                ReportRow {
                    config_hash: hash.clone(),
                    variant: cfg.name.clone(),
                    seed: cfg.seed,
                    failed: false,
                    models: metrics,
                    wall_time_s: wall,
                },
                Some(out),
            )
        }
        Err(Error::NonFinite(what)) => (
            ReportRow {
                config_hash: hash.clone(),
                variant: cfg.name.clone(),
                seed: cfg.seed,
                failed: true,
                models: model_ids
                    .iter()
                    .map(|id| ModelMetrics {
                        id: id.clone(),
                        final_top1: None,
                        final_top5: None,
                        best_top1: None,
                        best_top5: None,
                    })
                    .collect(),
                wall_time_s: wall,
            },
            {
                eprintln!("run {} seed {} aborted: non-finite {what}", cfg.name, cfg.seed);
                None
            },
        ),
        Err(e) => return Err(e),
    };

    if let Some(out) = output {
        write_atomic(
            &dir.join("runrecord.csv"),
            records_to_csv(&out.records).as_bytes(),
        )?;
        for (id, model) in out.model_ids.iter().zip(&out.models) {
            write_checkpoint(&dir.join(format!("{id}.ckpt")), &model.checkpoint_entries())?;
        }
        let mut adapter_entries = Vec::new();
        for (pi, ad) in out.adapters.iter().enumerate() {
            match ad {
                PairAdapter::Ktl(stack) => {
                    for mut e in stack.checkpoint_entries() {
                        e.slot_id = format!("pair{pi}/{}", e.slot_id);
                        adapter_entries.push(e);
                    }
                }
                PairAdapter::Mlp { l2s, s2l } => {
                    if let Some(a) = l2s {
                        adapter_entries.extend(a.checkpoint_entries(&format!("pair{pi}/adapter/0/l2s")));
                    }
                    if let Some(a) = s2l {
                        adapter_entries.extend(a.checkpoint_entries(&format!("pair{pi}/adapter/0/s2l")));
                    }
                }
                PairAdapter::CopyShare => {}
            }
        }
        if !adapter_entries.is_empty() {
            write_checkpoint(&dir.join("adapter.ckpt"), &adapter_entries)?;
        }
        let bundle = strip_adapter(out.models, out.model_ids);
        bundle.write(&dir.join("bundle.ckpt"))?;
    }
    write_atomic(&dir.join("report_row.csv"), row.to_csv().as_bytes())?;

    Ok(RunResult { row, run_dir: dir })
}
