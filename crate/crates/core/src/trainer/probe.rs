//! Linear heads on encoder features: the frozen probe and the jointly
//! trained supervised variant.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{diverged, epoch_batches, step_budget, ProbeConfig, SplitMetrics, Splits, TrainConfig, HEAD, STEP};
use crate::datagen::{Labels, MultiModalDataset};
use crate::encoder::GroupEncoderBank;
use crate::error::{Error, Result};
use crate::objective::{metrics, MetricReport, Predictions};
use crate::optim::{adam_step, Adam, AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Tape, Tensor};

/// Training targets in the head's output space.
#[derive(Clone, Debug)]
enum Targets {
    /// Standardized with the training mean and standard deviation.
    Regression {
        y: Vec<f64>,
        mean: f64,
        std: f64,
    },
    Classes {
        y: Vec<u32>,
        n_classes: usize,
    },
}

impl Targets {
    fn fit(labels: &Labels) -> Targets {
        match labels {
            Labels::Regression(v) => {
                let y: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
                let (mean, std) = mean_std(&y);
                Targets::Regression { y, mean, std }
            }
            Labels::Classification { classes, n_classes } => Targets::Classes {
                y: classes.clone(),
                n_classes: *n_classes,
            },
        }
    }

    /// Same scaling as `self`, applied to other labels.
    fn like(&self, labels: &Labels) -> Targets {
        match (self, labels) {
            (Targets::Regression { mean, std, .. }, Labels::Regression(v)) => Targets::Regression {
                y: v.iter().map(|&x| f64::from(x)).collect(),
                mean: *mean,
                std: *std,
            },
            _ => Targets::fit(labels),
        }
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression { y, mean, std } => Targets::Regression {
                y: idx.iter().map(|&i| y[i]).collect(),
                mean: *mean,
                std: *std,
            },
            Targets::Classes { y, n_classes } => Targets::Classes {
                y: idx.iter().map(|&i| y[i]).collect(),
                n_classes: *n_classes,
            },
        }
    }

    fn outputs(&self) -> usize {
        match self {
            Targets::Regression { .. } => 1,
            Targets::Classes { n_classes, .. } => *n_classes,
        }
    }

    /// Mean loss and its gradient with respect to the scores.
    fn loss_grad(&self, scores: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        let n = scores.len() as f64;
        match self {
            Targets::Regression { y, mean, std } => {
                let mut loss = 0.0;
                let grad = scores
                    .iter()
                    .zip(y)
                    .map(|(s, &t)| {
                        let d = s[0] - (t - mean) / std;
                        loss += d * d;
                        vec![2.0 * d / n]
                    })
                    .collect();
                (loss / n, grad)
            }
            Targets::Classes { y, .. } => {
                let mut loss = 0.0;
                let grad = scores
                    .iter()
                    .zip(y)
                    .map(|(s, &t)| {
                        let p = softmax(s);
                        loss -= p[t as usize].max(f64::MIN_POSITIVE).ln();
                        p.iter()
                            .enumerate()
                            .map(|(c, pc)| (pc - if c == t as usize { 1.0 } else { 0.0 }) / n)
                            .collect()
                    })
                    .collect();
                (loss / n, grad)
            }
        }
    }

    fn predictions(&self, scores: Vec<Vec<f64>>) -> Predictions {
        match self {
            Targets::Regression { mean, std, .. } => {
                Predictions::Regression(scores.iter().map(|s| s[0] * std + mean).collect())
            }
            Targets::Classes { .. } => Predictions::Scores(scores),
        }
    }

    /// Early-stopping key, lexicographically smaller is better.
    fn key(&self, scores: &[Vec<f64>], labels: &Labels) -> Result<(f64, f64)> {
        let report = metrics(&self.predictions(scores.to_vec()), labels)?;
        Ok(match report {
            MetricReport::Regression { mae, .. } => (mae, 0.0),
            MetricReport::Classification { acc, .. } => (1.0 - acc, self.loss_grad(scores).0),
        })
    }
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Mean and population standard deviation; a zero deviation becomes 1.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Standardizer {
        let f = x[0].len();
        let (mean, std) = (0..f)
            .map(|j| mean_std(&x.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .unzip();
        Standardizer { mean, std }
    }

    fn apply(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                r.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect()
    }
}

/// Affine map `x -> W x + b` with `W: [outputs x features]`.
#[derive(Clone, Debug)]
struct Head {
    features: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Head {
    fn zeros(outputs: usize, features: usize) -> Head {
        Head {
            features,
            w: vec![0.0; outputs * features],
            b: vec![0.0; outputs],
        }
    }

    fn scores(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                self.b
                    .iter()
                    .enumerate()
                    .map(|(o, b)| {
                        b + self.w[o * self.features..(o + 1) * self.features]
                            .iter()
                            .zip(r)
                            .map(|(w, v)| w * v)
                            .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    fn grads(&self, x: &[Vec<f64>], ds: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; self.w.len()];
        let mut gb = vec![0.0; self.b.len()];
        for (r, d) in x.iter().zip(ds) {
            for (o, &g) in d.iter().enumerate() {
                gb[o] += g;
                for (acc, v) in gw[o * self.features..(o + 1) * self.features].iter_mut().zip(r) {
                    *acc += g * v;
                }
            }
        }
        (gw, gb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub metrics: SplitMetrics,
    pub epochs_run: usize,
    /// Epoch whose head was kept.
    pub best_epoch: usize,
}

fn labels_of(ds: &MultiModalDataset, split: &str) -> Result<Labels> {
    ds.labels
        .clone()
        .ok_or_else(|| Error::contract(format!("{split} split has no labels to evaluate against")))
}

fn split_labels(splits: &Splits) -> Result<[Labels; 3]> {
    let labels = [
        labels_of(&splits.train, "train")?,
        labels_of(&splits.val, "validation")?,
        labels_of(&splits.test, "test")?,
    ];
    let kind = labels[0].kind();
    if labels.iter().any(|l| l.kind() != kind) {
        return Err(Error::contract("label kinds differ between splits"));
    }
    if let Labels::Classification { n_classes, .. } = &labels[0] {
        let same = labels
            .iter()
            .all(|l| matches!(l, Labels::Classification { n_classes: c, .. } if c == n_classes));
        if !same {
            return Err(Error::contract("class counts differ between splits"));
        }
    }
    Ok(labels)
}

/// Fit a linear head by mini-batch Adam on standardized training features,
/// keeping the head with the best validation score and stopping after
/// `patience` epochs without improvement.
fn fit_head(x: [&[Vec<f64>]; 3], labels: &[Labels; 3], cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    let scaler = Standardizer::fit(x[0]);
    let xs: Vec<Vec<Vec<f64>>> = x.iter().map(|v| scaler.apply(v)).collect();
    let targets = Targets::fit(&labels[0]);
    let features = xs[0][0].len();
    let mut head = Head::zeros(targets.outputs(), features);
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let (mut sw, mut sb) = (AdamState::zeros(head.w.len()), AdamState::zeros(head.b.len()));
    let val_targets = targets.like(&labels[1]);
    let mut best = (val_targets.key(&head.scores(&xs[1]), &labels[1])?, head.clone(), 0);
    let mut since = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..xs[0].len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &[HEAD, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let xb: Vec<Vec<f64>> = batch.iter().map(|&i| xs[0][i].clone()).collect();
            let (_, ds) = targets.subset(batch).loss_grad(&head.scores(&xb));
            let (gw, gb) = head.grads(&xb, &ds);
            adam_step(&mut head.w, &gw, &mut sw, &adam)?;
            adam_step(&mut head.b, &gb, &mut sb, &adam)?;
        }
        let key = val_targets.key(&head.scores(&xs[1]), &labels[1])?;
        if !(key.0.is_finite() && key.1.is_finite()) {
            return Err(Error::Training {
                step: epoch,
                message: "probe validation score is not finite".into(),
            });
        }
        if key < best.0 {
            best = (key, head.clone(), epoch);
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    let (_, head, best_epoch) = best;
    let report = |i: usize| metrics(&targets.like(&labels[i]).predictions(head.scores(&xs[i])), &labels[i]);
    Ok(ProbeOutcome {
        metrics: SplitMetrics {
            train: report(0)?,
            val: report(1)?,
            test: report(2)?,
        },
        epochs_run,
        best_epoch,
    })
}

/// Frozen-encoder linear probe: evaluation-mode embeddings of every group,
/// concatenated per window, feed one linear head.
pub fn linear_probe(bank: &GroupEncoderBank, splits: &Splits, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    let labels = split_labels(splits)?;
    let x = [
        bank.embed_dataset(&splits.train)?,
        bank.embed_dataset(&splits.val)?,
        bank.embed_dataset(&splits.test)?,
    ];
    fit_features(&x, &labels, cfg)
}

/// Probe on precomputed features, one row per window of each split.
pub(crate) fn fit_features(x: &[Vec<Vec<f64>>; 3], labels: &[Labels; 3], cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    for (i, (xi, li)) in x.iter().zip(labels).enumerate() {
        if xi.is_empty() || xi.len() != li.len() {
            return Err(Error::dim(format!(
                "split {i}: {} feature rows, {} labels",
                xi.len(),
                li.len()
            )));
        }
    }
    fit_head([&x[0], &x[1], &x[2]], labels, cfg)
}

#[derive(Clone, Debug)]
pub struct SupervisedOutcome {
    pub bank: GroupEncoderBank,
    pub head: ParamSet,
    pub loss_curve: Vec<f64>,
    pub metrics: SplitMetrics,
}

/// Encoder and linear head trained jointly on the training labels with the
/// pretraining schedule; regression targets are standardized.
pub fn supervised_train(splits: &Splits, mut bank: GroupEncoderBank, cfg: &TrainConfig) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    let labels = split_labels(splits)?;
    let train = &splits.train;
    bank.check_dataset(train)?;
    let targets = Targets::fit(&labels[0]);
    let features = bank.n_groups() * bank.output_dim();
    let outputs = targets.outputs();
    let mut rng = rng_from(cfg.seed, &[HEAD]);
    let a = 1.0 / (features as f64).sqrt();
    let mut head = ParamSet::new();
    head.insert(
        "head.weight",
        Tensor::new(
            vec![outputs, features],
            (0..outputs * features).map(|_| rng.random_range(-a..a)).collect(),
        )?,
    )?;
    head.insert("head.bias", Tensor::zeros(&[outputs]))?;

    let mut enc_opt = Adam::new(cfg.adam(), bank.params());
    let mut head_opt = Adam::new(cfg.adam(), &head);
    let mut curve = Vec::new();
    let budget = step_budget(cfg);
    'epochs: for epoch in 0..cfg.epochs {
        for batch in epoch_batches(train.n_windows(), cfg, epoch) {
            if curve.len() >= budget {
                break 'epochs;
            }
            let step = curve.len();
            let seed = derive_seed(cfg.seed, &[STEP, step as u64]);
            let mut tape = Tape::new();
            let bound = bank.bind(&mut tape);
            let hv = head.bind(&mut tape);
            let h = (0..bank.n_groups())
                .map(|g| bank.encode_batch(&mut tape, &bound, g, train, &batch, seed, true))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| diverged(e, step))?;
            let feats = tape.concat(&h, 1)?;
            let scores = tape.linear(feats, hv[0], hv[1])?;
            let loss = match &targets {
                Targets::Regression { y, mean, std } => {
                    let t: Vec<f64> = batch.iter().map(|&i| (y[i] - mean) / std).collect();
                    let t = tape.constant(Tensor::new(vec![batch.len(), 1], t)?);
                    let d = tape.sub(scores, t)?;
                    let sq = tape.mul(d, d)?;
                    tape.mean(sq)
                }
                Targets::Classes { y, .. } => {
                    let t: Vec<usize> = batch.iter().map(|&i| y[i] as usize).collect();
                    tape.cross_entropy(scores, &t, None)?
                }
            };
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("supervised loss is {value}"),
                });
            }
            tape.backward(loss)?;
            let g_enc = bank.params().collect_grads(&tape, &bound.vars);
            let g_head = head.collect_grads(&tape, &hv);
            enc_opt.step(bank.params_mut(), &g_enc)?;
            head_opt.step(&mut head, &g_head)?;
            curve.push(value);
        }
    }

    let lin = Head {
        features,
        w: head.tensor(0).data().to_vec(),
        b: head.tensor(1).data().to_vec(),
    };
    let report = |ds: &MultiModalDataset, l: &Labels| -> Result<MetricReport> {
        let x = bank.embed_dataset(ds)?;
        metrics(&targets.like(l).predictions(lin.scores(&x)), l)
    };
    let metrics = SplitMetrics {
        train: report(&splits.train, &labels[0])?,
        val: report(&splits.val, &labels[1])?,
        test: report(&splits.test, &labels[2])?,
    };
    Ok(SupervisedOutcome {
        bank,
        head,
        loss_curve: curve,
        metrics,
    })
}
