//! Component ablations run end to end under one seed.

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{run_pipeline, LossVariant, PipelineConfig, RunMode, RunReport};
use crate::datagen::MultiModalDataset;
use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::grouping::GroupingVariant;
use crate::objective::MetricReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    /// One group holding every modality, trained with the instance loss.
    WoImg,
    RandomGrouping,
    FullGrouping,
    WoMask,
    ModerateMask,
    WoPatch,
    ModeratePatch,
    PlainTcn,
    /// No pretraining; encoder and head fitted jointly on labels.
    Supervised,
    InstanceContrastive,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 11] = [
        AblationVariant::Full,
        AblationVariant::WoImg,
        AblationVariant::RandomGrouping,
        AblationVariant::FullGrouping,
        AblationVariant::WoMask,
        AblationVariant::ModerateMask,
        AblationVariant::WoPatch,
        AblationVariant::ModeratePatch,
        AblationVariant::PlainTcn,
        AblationVariant::Supervised,
        AblationVariant::InstanceContrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WoImg => "wo_img",
            AblationVariant::RandomGrouping => "random_grouping",
            AblationVariant::FullGrouping => "full_grouping",
            AblationVariant::WoMask => "wo_mask",
            AblationVariant::ModerateMask => "moderate_mask",
            AblationVariant::WoPatch => "wo_patch",
            AblationVariant::ModeratePatch => "moderate_patch",
            AblationVariant::PlainTcn => "plain_tcn",
            AblationVariant::Supervised => "supervised",
            AblationVariant::InstanceContrastive => "instance_contrastive",
        }
    }

    /// The base configuration with this variant's change applied.
    pub fn configure(self, base: &PipelineConfig) -> (PipelineConfig, RunMode) {
        let mut cfg = base.clone();
        let mut mode = RunMode::Pretrain;
        let (g, e) = (&mut cfg.grouping, &mut cfg.training);
        match self {
            AblationVariant::Full => {}
            AblationVariant::WoImg => {
                g.variant = GroupingVariant::None;
                e.loss = LossVariant::InstanceContrastive;
            }
            AblationVariant::RandomGrouping => g.variant = GroupingVariant::Random,
            AblationVariant::FullGrouping => g.variant = GroupingVariant::Full,
            AblationVariant::WoMask => e.encoder_variant = EncoderVariant::NoMask,
            AblationVariant::ModerateMask => e.encoder_variant = EncoderVariant::ModerateMask,
            AblationVariant::WoPatch => e.encoder_variant = EncoderVariant::NoPatch,
            AblationVariant::ModeratePatch => e.encoder_variant = EncoderVariant::ModeratePatch,
            AblationVariant::PlainTcn => e.encoder_variant = EncoderVariant::PlainTcn,
            AblationVariant::Supervised => mode = RunMode::Supervised,
            AblationVariant::InstanceContrastive => e.loss = LossVariant::InstanceContrastive,
        }
        (cfg, mode)
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = AblationVariant::ALL.iter().map(|v| v.name()).collect();
            Error::param(format!(
                "unknown ablation variant `{s}`; expected one of {}",
                names.join(", ")
            ))
        })
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of the comparison: test metrics plus what was trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub groups: Vec<Vec<usize>>,
    pub steps: usize,
    /// Mean training loss over the last 20 steps.
    pub final_loss: Option<f64>,
    #[serde(flatten)]
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

fn tail_mean(curve: &[f64]) -> Option<f64> {
    let tail = &curve[curve.len().saturating_sub(20)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

fn row(variant: AblationVariant, report: &RunReport) -> Result<AblationRow> {
    let metrics = report
        .metrics
        .as_ref()
        .ok_or_else(|| Error::contract("ablation needs a labelled dataset"))?;
    Ok(AblationRow {
        variant,
        groups: report.groups.clone(),
        steps: report.loss_curve.len(),
        final_loss: tail_mean(&report.loss_curve),
        test: metrics.test.clone(),
    })
}

/// Run every variant from `base` with its seed, on up to `jobs` threads.
/// Rows follow the order of `variants` whatever the thread count.
pub fn ablate(
    ds: &MultiModalDataset,
    base: &PipelineConfig,
    variants: &[AblationVariant],
    jobs: usize,
) -> Result<(AblationTable, Vec<RunReport>)> {
    if variants.is_empty() {
        return Err(Error::param("no ablation variants requested"));
    }
    if ds.labels.is_none() {
        return Err(Error::contract("ablation needs a labelled dataset"));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunReport>>>> = Mutex::new(variants.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, variants.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&v) = variants.get(i) else { break };
                let (cfg, mode) = v.configure(base);
                let out = run_pipeline(ds, &cfg, mode, v.name()).map(|o| o.report);
                results.lock().expect("no poisoned lock")[i] = Some(out);
            });
        }
    });
    let mut rows = Vec::with_capacity(variants.len());
    let mut reports = Vec::with_capacity(variants.len());
    for (v, r) in variants.iter().zip(results.into_inner().expect("no poisoned lock")) {
        let report = r.expect("every variant ran")?;
        rows.push(row(*v, &report)?);
        reports.push(report);
    }
    Ok((
        AblationTable {
            seed: base.training.seed,
            rows,
        },
        reports,
    ))
}
