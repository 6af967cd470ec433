//! Contrastive objectives over group embeddings and downstream metrics.

use serde::{Deserialize, Serialize};

use crate::datagen::Labels;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.1;

/// Which embeddings compete with the positive in the softmax denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    /// Only the other view: `h2_k` for every `k` (the positive included).
    #[default]
    CrossView,
    /// Also the anchor's own view, `h1_k` for `k != i`.
    BothViews,
}

/// Per-group embeddings of one batch, `h[g]` is `[N x D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub h: Vec<Tensor>,
    pub normalized: bool,
}

impl EmbeddingBatch {
    pub fn new(h: Vec<Tensor>) -> Result<Self> {
        let batch = EmbeddingBatch { h, normalized: false };
        batch.validate()?;
        Ok(batch)
    }

    pub fn n_groups(&self) -> usize {
        self.h.len()
    }

    pub fn n_samples(&self) -> usize {
        self.h.first().map_or(0, |t| t.shape()[0])
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.h.first() else {
            return Err(Error::contract("embedding batch has no groups"));
        };
        if first.ndim() != 2 {
            return Err(Error::dim("group embeddings must be [samples x dim]"));
        }
        for (g, t) in self.h.iter().enumerate() {
            if t.shape() != first.shape() {
                return Err(Error::dim(format!(
                    "group {g} embeddings {:?} differ from group 0 {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Degenerate(format!("group {g} embeddings are not finite")));
            }
        }
        Ok(())
    }
}

fn check_pair(tape: &Tape, h1: Var, h2: Var, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!("temperature must be > 0, got {tau}")));
    }
    let (s1, s2) = (tape.shape(h1), tape.shape(h2));
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::dim(format!(
            "views must be equal [N x D], got {s1:?} and {s2:?}"
        )));
    }
    if s1[0] < 2 {
        return Err(Error::contract("contrastive loss needs at least 2 samples"));
    }
    Ok(s1[0])
}

/// One direction: anchors `a`, positives and cross-view negatives `b`.
fn directed(tape: &mut Tape, a: Var, b: Var, n: usize, tau: f64, negatives: Negatives) -> Result<Var> {
    let targets: Vec<usize> = (0..n).collect();
    let cross = tape.matmul_nt(a, b)?;
    let cross = tape.scale(cross, 1.0 / tau);
    match negatives {
        Negatives::CrossView => tape.cross_entropy(cross, &targets, None),
        Negatives::BothViews => {
            let own = tape.matmul_nt(a, a)?;
            let own = tape.scale(own, 1.0 / tau);
            let logits = tape.concat(&[cross, own], 1)?;
            let mut exclude = vec![false; n * 2 * n];
            for i in 0..n {
                exclude[i * 2 * n + n + i] = true;
            }
            tape.cross_entropy(logits, &targets, Some(&exclude))
        }
    }
}

/// Symmetrized NT-Xent between two views recorded on `tape`.
pub fn pairwise_nt_xent_var(tape: &mut Tape, h1: Var, h2: Var, tau: f64, negatives: Negatives) -> Result<Var> {
    let n = check_pair(tape, h1, h2, tau)?;
    let z1 = tape.l2_normalize(h1)?;
    let z2 = tape.l2_normalize(h2)?;
    let fwd = directed(tape, z1, z2, n, tau, negatives)?;
    let bwd = directed(tape, z2, z1, n, tau, negatives)?;
    let both = tape.add(fwd, bwd)?;
    Ok(tape.scale(both, 0.5))
}

/// Sum of pairwise terms over unordered group pairs `i < j`.
pub fn cross_modal_loss_var(tape: &mut Tape, groups: &[Var], tau: f64, negatives: Negatives) -> Result<Var> {
    if groups.len() < 2 {
        return Err(Error::contract(format!(
            "cross-modal loss needs at least 2 groups, got {}; use the instance-contrastive loss \
             for single-group runs",
            groups.len()
        )));
    }
    let mut total: Option<Var> = None;
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let term = pairwise_nt_xent_var(tape, groups[i], groups[j], tau, negatives)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    Ok(total.expect("at least one pair"))
}

fn eval_loss(h: &[&Tensor], f: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = h.iter().map(|t| tape.constant((*t).clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

pub fn pairwise_nt_xent(h1: &Tensor, h2: &Tensor, tau: f64) -> Result<f64> {
    eval_loss(&[h1, h2], |tape, v| {
        pairwise_nt_xent_var(tape, v[0], v[1], tau, Negatives::CrossView)
    })
}

pub fn cross_modal_loss(batch: &EmbeddingBatch, tau: f64, negatives: Negatives) -> Result<f64> {
    batch.validate()?;
    let refs: Vec<&Tensor> = batch.h.iter().collect();
    eval_loss(&refs, |tape, v| cross_modal_loss_var(tape, v, tau, negatives))
}

/// NT-Xent between a view and its augmented counterpart; the same
/// arithmetic as [`pairwise_nt_xent`].
pub fn instance_contrastive_loss(h: &Tensor, h_aug: &Tensor, tau: f64) -> Result<f64> {
    pairwise_nt_xent(h, h_aug, tau)
}

/// Downstream metrics, serialized flat with a `task` tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum MetricReport {
    Regression {
        mae: f64,
        /// Population standard deviation of the absolute errors.
        sd: f64,
        rmse: f64,
    },
    Classification {
        acc: f64,
        f1: f64,
        recall: f64,
        auprc: f64,
    },
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        match *self {
            MetricReport::Regression { mae, sd, rmse } => [mae, sd, rmse].iter().all(|v| v.is_finite()),
            MetricReport::Classification { acc, f1, recall, auprc } => {
                [acc, f1, recall, auprc].iter().all(|v| v.is_finite())
            }
        }
    }

    /// Lower is better: MAE for regression, `1 - acc` for classification.
    pub fn headline_error(&self) -> f64 {
        match *self {
            MetricReport::Regression { mae, .. } => mae,
            MetricReport::Classification { acc, .. } => 1.0 - acc,
        }
    }
}

pub enum Predictions {
    Regression(Vec<f64>),
    /// One score row per sample.
    Scores(Vec<Vec<f64>>),
}

pub fn metrics(pred: &Predictions, labels: &Labels) -> Result<MetricReport> {
    match (pred, labels) {
        (Predictions::Regression(p), Labels::Regression(y)) => {
            let y: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
            regression_metrics(p, &y)
        }
        (Predictions::Scores(s), Labels::Classification { classes, n_classes }) => {
            classification_metrics(s, classes, *n_classes)
        }
        _ => Err(Error::contract("prediction kind does not match label kind")),
    }
}

pub fn regression_metrics(pred: &[f64], y: &[f64]) -> Result<MetricReport> {
    if pred.is_empty() || pred.len() != y.len() {
        return Err(Error::param(format!(
            "need equal non-empty predictions and labels, got {} and {}",
            pred.len(),
            y.len()
        )));
    }
    let n = pred.len() as f64;
    let abs: Vec<f64> = pred.iter().zip(y).map(|(p, t)| (p - t).abs()).collect();
    let mae = abs.iter().sum::<f64>() / n;
    let sd = (abs.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / n).sqrt();
    let rmse = (abs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok(MetricReport::Regression { mae, sd, rmse })
}

/// Accuracy, macro recall and macro F1 over the classes present in labels
/// or predictions; macro AUPRC over classes with at least one positive.
pub fn classification_metrics(scores: &[Vec<f64>], y: &[u32], n_classes: usize) -> Result<MetricReport> {
    if scores.is_empty() || scores.len() != y.len() {
        return Err(Error::param(format!(
            "need equal non-empty scores and labels, got {} and {}",
            scores.len(),
            y.len()
        )));
    }
    if scores.iter().any(|s| s.len() != n_classes) || y.iter().any(|&c| c as usize >= n_classes) {
        return Err(Error::dim(format!("scores and labels must index {n_classes} classes")));
    }
    let pred: Vec<usize> = scores
        .iter()
        .map(|s| {
            (0..n_classes)
                .max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a)))
                .expect("n_classes >= 1")
        })
        .collect();
    let n = y.len() as f64;
    let acc = pred.iter().zip(y).filter(|(p, t)| **p == **t as usize).count() as f64 / n;

    let (mut f1_sum, mut rec_sum, mut present) = (0.0, 0.0, 0);
    for c in 0..n_classes {
        let tp = pred
            .iter()
            .zip(y)
            .filter(|(p, t)| **p == c && **t as usize == c)
            .count() as f64;
        let pos = y.iter().filter(|&&t| t as usize == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        if pos == 0.0 && predicted == 0.0 {
            continue;
        }
        present += 1;
        let recall = if pos > 0.0 { tp / pos } else { 0.0 };
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        rec_sum += recall;
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }

    let (mut ap_sum, mut ap_n) = (0.0, 0);
    for c in 0..n_classes {
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let is_pos: Vec<bool> = y.iter().map(|&t| t as usize == c).collect();
        if let Some(ap) = auprc(&s, &is_pos) {
            ap_sum += ap;
            ap_n += 1;
        }
    }
    Ok(MetricReport::Classification {
        acc,
        f1: f1_sum / present as f64,
        recall: rec_sum / present as f64,
        auprc: if ap_n > 0 { ap_sum / ap_n as f64 } else { 0.0 },
    })
}

/// Trapezoidal area under the precision-recall curve traced by the
/// thresholds "score >= s" over the distinct scores, starting from
/// (recall 0, precision 1). `None` without positives.
pub fn auprc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let r = tp as f64 / total_pos as f64;
        let p = tp as f64 / (tp + fp) as f64;
        area += (r - prev_r) * (p + prev_p) / 2.0;
        (prev_r, prev_p) = (r, p);
    }
    Some(area)
}
