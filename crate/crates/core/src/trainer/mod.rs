//! Contrastive pretraining, linear probing and the ablation harness.

mod ablation;
mod probe;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{self, MultiModalDataset};
use crate::encoder::{BankSpec, BoundBank, BranchSpec, ChannelNorm, EncoderSpec, EncoderVariant, GroupEncoderBank};
use crate::error::{Error, Result};
use crate::grouping::{grouping_variant, GroupingConfig, GroupingResult};
use crate::mstransform::{default_scales, MaskGranularity, ScaleSpec, MASK_RATIOS};
use crate::objective::{cross_modal_loss_var, pairwise_nt_xent_var, MetricReport, Negatives};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Tape, Var};

pub use ablation::{ablate, AblationRow, AblationTable, AblationVariant};
pub use probe::{linear_probe, supervised_train, ProbeOutcome, SupervisedOutcome};

// Sub-seed tags.
const SPLIT: u64 = 1;
const GROUP: u64 = 2;
const INIT: u64 = 3;
const SHUFFLE: u64 = 4;
const STEP: u64 = 5;
const HEAD: u64 = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Pairwise terms between every pair of group embeddings.
    #[default]
    CrossModal,
    /// Two independently masked views of each group contrasted with
    /// each other; the only option when there is a single group.
    InstanceContrastive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Mini-batch size within an epoch.
    pub batch_size: usize,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.01,
            max_epochs: 2000,
            patience: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub negatives: Negatives,
    pub loss: LossVariant,
    pub encoder_variant: EncoderVariant,
    /// Train / validation / test fractions.
    pub split: (f64, f64, f64),
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            batch_size: 32,
            lr: 0.002,
            tau: 0.1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            max_steps: None,
            negatives: Negatives::CrossView,
            loss: LossVariant::CrossModal,
            encoder_variant: EncoderVariant::Mtde,
            split: (0.6, 0.2, 0.2),
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale preset: batch 480.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 480,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::param("training.batch_size must be >= 2"));
        }
        if self.epochs == 0 {
            return Err(Error::param("training.epochs must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("training.lr must be > 0"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param("training.tau must be > 0"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) {
            return Err(Error::param("training.betas must lie in [0, 1) and eps be > 0"));
        }
        if !(self.probe.lr > 0.0) || self.probe.max_epochs == 0 || self.probe.batch_size == 0 {
            return Err(Error::param(
                "training.probe needs lr > 0, max_epochs >= 1 and batch_size >= 1",
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, &[INIT])
    }
}

/// Encoder hyperparameters independent of the sample rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub output_dim: usize,
    pub adapter_width: usize,
    pub kernel_size: usize,
    /// Residual blocks per branch.
    pub layers: Vec<usize>,
    /// Patch lengths in samples; empty derives them from the sample rate.
    pub patch_lens: Vec<usize>,
    pub mask_ratios: Vec<f64>,
    pub mask_granularity: MaskGranularity,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = EncoderSpec::default_for(1.0);
        ModelConfig {
            hidden: d.hidden,
            output_dim: d.output_dim,
            adapter_width: d.adapter_width,
            kernel_size: d.branches[0].kernel_size,
            layers: d.branches.iter().map(|b| b.n_layers).collect(),
            patch_lens: Vec::new(),
            mask_ratios: MASK_RATIOS.to_vec(),
            mask_granularity: MaskGranularity::Timestamp,
        }
    }
}

impl ModelConfig {
    pub fn encoder_spec(&self, fs: f64) -> Result<EncoderSpec> {
        let patch_lens: Vec<usize> = if self.patch_lens.is_empty() {
            default_scales(fs).iter().map(|s| s.patch_len).collect()
        } else {
            self.patch_lens.clone()
        };
        if patch_lens.len() != self.layers.len() || self.mask_ratios.len() != self.layers.len() {
            return Err(Error::param(format!(
                "model.layers ({}), model.patch_lens ({}) and model.mask_ratios ({}) must have \
                 one entry per branch",
                self.layers.len(),
                patch_lens.len(),
                self.mask_ratios.len()
            )));
        }
        let branches = patch_lens
            .iter()
            .zip(&self.mask_ratios)
            .zip(&self.layers)
            .map(|((&patch_len, &mask_ratio), &n_layers)| BranchSpec {
                scale: ScaleSpec { patch_len, mask_ratio },
                kernel_size: self.kernel_size,
                n_layers,
            })
            .collect();
        let spec = EncoderSpec {
            branches,
            hidden: self.hidden,
            output_dim: self.output_dim,
            adapter_width: self.adapter_width,
            mask_granularity: self.mask_granularity,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Everything downstream of the dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub grouping: GroupingConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: MultiModalDataset,
    pub val: MultiModalDataset,
    pub test: MultiModalDataset,
}

impl Splits {
    pub fn new(ds: &MultiModalDataset, cfg: &TrainConfig) -> Result<Self> {
        let (train, val, test) = datagen::split(ds, cfg.split, derive_seed(cfg.seed, &[SPLIT]))?;
        Ok(Splits { train, val, test })
    }

    /// Error unless the three window-id sets are pairwise disjoint.
    pub fn check_disjoint(&self) -> Result<()> {
        let ids = |d: &MultiModalDataset| d.window_ids.iter().copied().collect::<BTreeSet<_>>();
        let (a, b, c) = (ids(&self.train), ids(&self.val), ids(&self.test));
        if !a.is_disjoint(&b) || !a.is_disjoint(&c) || !b.is_disjoint(&c) {
            return Err(Error::contract("train, validation and test windows overlap"));
        }
        Ok(())
    }
}

/// Metrics of one model on every split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub train: MetricReport,
    pub val: MetricReport,
    pub test: MetricReport,
}

impl SplitMetrics {
    pub fn is_finite(&self) -> bool {
        self.train.is_finite() && self.val.is_finite() && self.test.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tag: String,
    pub config: PipelineConfig,
    pub encoder: EncoderSpec,
    pub groups: Vec<Vec<usize>>,
    /// Training loss after every optimizer step.
    pub loss_curve: Vec<f64>,
    pub metrics: Option<SplitMetrics>,
    pub param_count: usize,
    pub wall_clock_s: f64,
}

impl RunReport {
    /// `step,loss` lines with a header.
    pub fn loss_csv(&self) -> String {
        loss_csv(&self.loss_curve)
    }
}

pub fn loss_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        writeln!(out, "{i},{l}").expect("write to string");
    }
    out
}

/// Fresh bank over `groups` for the modalities of `ds`, with inputs
/// standardized by the channel statistics of `ds`.
pub fn init_bank(
    ds: &MultiModalDataset,
    groups: &[Vec<usize>],
    spec: EncoderSpec,
    seed: u64,
) -> Result<GroupEncoderBank> {
    let bank = GroupEncoderBank::new(
        BankSpec {
            groups: groups.to_vec(),
            modality_channels: ds.modalities.iter().map(|m| m.channels).collect(),
            encoder: spec,
            input_norm: ChannelNorm::fit(ds),
        },
        seed,
    )?;
    bank.check_dataset(ds)?;
    Ok(bank)
}

/// Contrastive loss of one batch (rows `batch` of `ds`) at optimizer step
/// `step`. Masks depend on `(config.seed, step, group, window id)` only.
pub fn contrastive_batch_loss(
    bank: &GroupEncoderBank,
    tape: &mut Tape,
    bound: &BoundBank,
    ds: &MultiModalDataset,
    batch: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<Var> {
    let seed = derive_seed(cfg.seed, &[STEP, step as u64]);
    match cfg.loss {
        LossVariant::CrossModal => {
            let h = (0..bank.n_groups())
                .map(|g| bank.encode_batch(tape, bound, g, ds, batch, seed, true))
                .collect::<Result<Vec<_>>>()?;
            cross_modal_loss_var(tape, &h, cfg.tau, cfg.negatives)
        }
        LossVariant::InstanceContrastive => {
            let other = derive_seed(seed, &[0xa06]);
            let mut total: Option<Var> = None;
            for g in 0..bank.n_groups() {
                let a = bank.encode_batch(tape, bound, g, ds, batch, seed, true)?;
                let b = bank.encode_batch(tape, bound, g, ds, batch, other, true)?;
                let term = pairwise_nt_xent_var(tape, a, b, cfg.tau, cfg.negatives)?;
                total = Some(match total {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            Ok(total.expect("bank has a group"))
        }
    }
}

/// Batches of one epoch: a seeded shuffle cut into `batch_size` chunks,
/// dropping a final chunk of fewer than 2 windows.
fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(cfg.seed, &[SHUFFLE, epoch as u64]));
    order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Non-finite activations inside a training step mean the run diverged.
fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::Degenerate(message) => Error::Training { step, message },
        other => other,
    }
}

fn step_budget(cfg: &TrainConfig) -> usize {
    cfg.max_steps.unwrap_or(usize::MAX)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub bank: GroupEncoderBank,
    pub loss_curve: Vec<f64>,
    /// Window ids that entered at least one batch.
    pub seen_windows: BTreeSet<usize>,
}

/// Contrastive pretraining of `bank` on `train`.
pub fn pretrain(train: &MultiModalDataset, mut bank: GroupEncoderBank, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    bank.check_dataset(train)?;
    if train.n_windows() < 2 {
        return Err(Error::contract("pretraining needs at least 2 windows"));
    }
    let mut adam = Adam::new(cfg.adam(), bank.params());
    let mut curve = Vec::new();
    let mut seen = BTreeSet::new();
    let budget = step_budget(cfg);
    'epochs: for epoch in 0..cfg.epochs {
        for batch in epoch_batches(train.n_windows(), cfg, epoch) {
            if curve.len() >= budget {
                break 'epochs;
            }
            let step = curve.len();
            let mut tape = Tape::new();
            let bound = bank.bind(&mut tape);
            let loss = contrastive_batch_loss(&bank, &mut tape, &bound, train, &batch, cfg, step)
                .map_err(|e| diverged(e, step))?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("loss is {value}"),
                });
            }
            tape.backward(loss)?;
            let grads = bank.params().collect_grads(&tape, &bound.vars);
            adam.step(bank.params_mut(), &grads)?;
            if bank.params().iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Training {
                    step,
                    message: "parameters became non-finite".into(),
                });
            }
            curve.push(value);
            seen.extend(batch.iter().map(|&i| train.window_ids[i]));
        }
    }
    Ok(PretrainOutcome {
        bank,
        loss_curve: curve,
        seen_windows: seen,
    })
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub grouping: GroupingResult,
    pub bank: GroupEncoderBank,
}

/// How a run trains its encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Contrastive pretraining then a frozen linear probe.
    Pretrain,
    /// Encoder and head trained jointly on the labels.
    Supervised,
}

/// Grouping of the training split under the configured variant.
pub fn group_training_split(splits: &Splits, cfg: &PipelineConfig) -> Result<GroupingResult> {
    grouping_variant(
        &splits.train,
        &cfg.grouping,
        cfg.grouping.variant,
        derive_seed(cfg.training.seed, &[GROUP]),
    )
}

/// Split, group, build, train and evaluate. Grouping and training only see
/// the training split. Unlabelled datasets skip evaluation.
pub fn run_pipeline(ds: &MultiModalDataset, cfg: &PipelineConfig, mode: RunMode, tag: &str) -> Result<RunOutcome> {
    let start = Instant::now();
    cfg.training.validate()?;
    let splits = Splits::new(ds, &cfg.training)?;
    let grouping = group_training_split(&splits, cfg)?;
    let spec = cfg.model.encoder_spec(ds.fs)?.variant(cfg.training.encoder_variant);
    let bank = init_bank(&splits.train, &grouping.groups, spec.clone(), cfg.training.init_seed())?;
    let param_count = bank.params().scalar_count();
    let (bank, loss_curve, metrics) = match mode {
        RunMode::Pretrain => {
            let out = pretrain(&splits.train, bank, &cfg.training)?;
            let metrics = match ds.labels {
                Some(_) => Some(linear_probe(&out.bank, &splits, &cfg.training.probe)?.metrics),
                None => None,
            };
            (out.bank, out.loss_curve, metrics)
        }
        RunMode::Supervised => {
            let out = supervised_train(&splits, bank, &cfg.training)?;
            (out.bank, out.loss_curve, Some(out.metrics))
        }
    };
    let report = RunReport {
        tag: tag.to_string(),
        config: cfg.clone(),
        encoder: spec,
        groups: grouping.groups.clone(),
        loss_curve,
        metrics,
        param_count,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { report, grouping, bank })
}
