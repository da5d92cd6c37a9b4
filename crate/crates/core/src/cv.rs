//! Stratified Monte-Carlo cross-validation shared across experiment arms.
//!
//! Every arm sees the same train/validation split in a given repeat, so the
//! per-repeat metrics of two arms can be compared with a paired test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model;
use crate::scalar::Scalar;
use crate::stats::{accuracy, auc, mean_std, paired_t_test};
use crate::tensor::{DenseMatrix, SparseSymMatrix};
use crate::trainer::{train, OmegaMode, TrainConfig, TrainHistory, TrainProblem};

/// One repeat's partition of the labeled subjects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub repeat: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl SplitPlan {
    pub fn masks(&self, n: usize) -> (Vec<bool>, Vec<bool>) {
        let mut train = vec![false; n];
        let mut val = vec![false; n];
        for &i in &self.train {
            train[i] = true;
        }
        for &i in &self.validation {
            val[i] = true;
        }
        (train, val)
    }
}

/// Random class-stratified split of the labeled subjects (`None` entries are
/// left out). Each class sends `round(fraction · size)` members to
/// validation, kept within `[1, size - 1]`. Deterministic in `(seed, repeat)`.
pub fn stratified_mc_split(
    classes: &[Option<usize>],
    val_fraction: f64,
    repeat: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let num_classes = classes.iter().flatten().max().map_or(0, |&k| k + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, c) in classes.iter().enumerate() {
        if let Some(c) = c {
            members[*c].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repeat as u64);
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (c, group) in members.iter_mut().enumerate() {
        if group.is_empty() {
            continue;
        }
        if group.len() < 2 {
            return Err(Error::Data(format!(
                "class {c} has {} member(s); stratified splitting needs at least 2",
                group.len()
            )));
        }
        group.shuffle(&mut rng);
        let take = ((group.len() as f64 * val_fraction).round() as usize).clamp(1, group.len() - 1);
        validation.extend_from_slice(&group[..take]);
        train.extend_from_slice(&group[take..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    Ok(SplitPlan {
        repeat,
        seed,
        train,
        validation,
    })
}

/// One experiment arm: graphs, ranking-weight treatment and training settings.
#[derive(Debug, Clone)]
pub struct Arm<'a, T> {
    pub name: String,
    pub graphs: Vec<&'a SparseSymMatrix<T>>,
    pub omega: OmegaMode,
    pub config: TrainConfig,
}

/// Metrics of one arm in one repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatResult {
    pub accuracy: f64,
    /// Only defined for binary problems (score = probability of class 1).
    pub auc: Option<f64>,
    pub best_epoch: usize,
    pub final_omega: Vec<f64>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std_auc: Option<f64>,
    pub acc: Vec<f64>,
    #[serde(default)]
    pub auc: Vec<f64>,
    /// Ranking weights at the end of each repeat's trajectory.
    pub final_omega: Vec<Vec<f64>>,
}

/// Paired comparison of two arms on one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub metric: String,
    /// `ok` or `degenerate` (zero-variance differences).
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub repeats: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub arms: Vec<ArmSummary>,
    pub comparisons: Vec<Comparison>,
}

impl CvReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn comparison(&self, a: &str, b: &str, metric: &str) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.a == a && c.b == b && c.metric == metric)
    }
}

/// Full cross-validation output: the report plus every per-repeat result,
/// indexed `[arm][repeat]`.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: CvReport,
    pub results: Vec<Vec<RepeatResult>>,
}

/// Features, one-hot labels and class indices of the subjects under study.
#[derive(Debug, Clone, Copy)]
pub struct CvData<'a, T> {
    pub features: &'a DenseMatrix<T>,
    pub labels: &'a DenseMatrix<T>,
    pub classes: &'a [Option<usize>],
}

fn run_repeat<T: Scalar>(
    data: &CvData<'_, T>,
    arm: &Arm<'_, T>,
    plan: &SplitPlan,
) -> Result<RepeatResult> {
    let n = data.features.rows();
    let (train_mask, val_mask) = plan.masks(n);
    let problem = TrainProblem {
        features: data.features,
        labels: data.labels,
        train_mask: &train_mask,
        val_mask: &val_mask,
    };
    let config = TrainConfig {
        seed: arm.config.seed.wrapping_add(plan.repeat as u64),
        ..arm.config.clone()
    };
    let outcome = train(&problem, &arm.graphs, &config, &arm.omega)?;
    let eval = model::forward(data.features, &arm.graphs, &outcome.params, None)?;
    let accuracy = accuracy(&eval.probs, data.labels, &val_mask)?;
    let auc = if data.labels.cols() == 2 {
        let scores: Vec<f64> = plan
            .validation
            .iter()
            .map(|&i| eval.probs.get(i, 1).as_f64())
            .collect();
        let positive: Vec<bool> = plan
            .validation
            .iter()
            .map(|&i| data.classes[i] == Some(1))
            .collect();
        Some(auc(&scores, &positive)?)
    } else {
        None
    };
    let final_omega = outcome
        .history
        .last()
        .map(|r| r.omega.clone())
        .unwrap_or_default();
    Ok(RepeatResult {
        accuracy,
        auc,
        best_epoch: outcome.best_epoch,
        final_omega,
        history: outcome.history,
    })
}

/// Trains and evaluates every arm on `repeats` shared stratified splits.
///
/// Repeats run in parallel; each derives its split from `(seed, repeat)` and
/// its model seed from the arm seed plus the repeat index, so the outcome
/// does not depend on scheduling.
pub fn cross_validate<T: Scalar>(
    data: &CvData<'_, T>,
    arms: &[Arm<'_, T>],
    repeats: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<CvOutcome> {
    if repeats < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 repeats, got {repeats}"
        )));
    }
    if arms.is_empty() {
        return Err(Error::Parameter("no experiment arms".into()));
    }
    let mut names = std::collections::HashSet::new();
    for arm in arms {
        if !names.insert(arm.name.as_str()) {
            return Err(Error::Config(format!("duplicate arm name `{}`", arm.name)));
        }
    }
    let plans: Vec<SplitPlan> = (0..repeats)
        .map(|r| stratified_mc_split(data.classes, val_fraction, r, seed))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..arms.len())
        .flat_map(|a| (0..repeats).map(move |r| (a, r)))
        .collect();
    let flat: Vec<RepeatResult> = jobs
        .par_iter()
        .map(|&(a, r)| run_repeat(data, &arms[a], &plans[r]))
        .collect::<Result<_>>()?;
    let mut results: Vec<Vec<RepeatResult>> = Vec::with_capacity(arms.len());
    let mut it = flat.into_iter();
    for _ in arms {
        results.push(it.by_ref().take(repeats).collect());
    }

    let summaries: Vec<ArmSummary> = arms
        .iter()
        .zip(&results)
        .map(|(arm, res)| {
            let acc: Vec<f64> = res.iter().map(|r| r.accuracy).collect();
            let aucs: Vec<f64> = res.iter().filter_map(|r| r.auc).collect();
            let (mean_acc, std_acc) = mean_std(&acc);
            let (mean_auc, std_auc) = if aucs.len() == res.len() {
                let (m, s) = mean_std(&aucs);
                (Some(m), Some(s))
            } else {
                (None, None)
            };
            ArmSummary {
                name: arm.name.clone(),
                mean_acc,
                std_acc,
                mean_auc,
                std_auc,
                acc,
                auc: aucs,
                final_omega: res.iter().map(|r| r.final_omega.clone()).collect(),
            }
        })
        .collect();

    let mut comparisons = Vec::new();
    for i in 0..summaries.len() {
        for j in i + 1..summaries.len() {
            let (a, b) = (&summaries[i], &summaries[j]);
            let mut metrics = vec![("acc", &a.acc, &b.acc)];
            if a.mean_auc.is_some() && b.mean_auc.is_some() {
                metrics.push(("auc", &a.auc, &b.auc));
            }
            for (metric, xa, xb) in metrics {
                let (status, t, p) = match paired_t_test(xa, xb) {
                    Ok(r) => ("ok", Some(r.t), Some(r.p)),
                    Err(Error::Degenerate(_)) => ("degenerate", None, None),
                    Err(e) => return Err(e),
                };
                comparisons.push(Comparison {
                    a: a.name.clone(),
                    b: b.name.clone(),
                    metric: metric.to_string(),
                    status: status.to_string(),
                    t,
                    p,
                });
            }
        }
    }

    Ok(CvOutcome {
        report: CvReport {
            repeats,
            val_fraction,
            seed,
            arms: summaries,
            comparisons,
        },
        results,
    })
}
