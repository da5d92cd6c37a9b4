//! Objective, optimizer and the full-batch training loop.

use std::io::{BufRead, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Dropout, ModelDims, ModelParams, ParamSlot};
use crate::scalar::Scalar;
use crate::stats::accuracy;
use crate::tensor::{DenseMatrix, SparseSymMatrix};

/// Floor applied to probabilities before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Optimizer, regularization and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub dropout: f64,
    pub l2: f64,
    /// Epochs during which trainable ranking weights stay at `1/M`.
    pub omega_warmup_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            max_epochs: 150,
            dropout: 0.3,
            l2: 5e-4,
            omega_warmup_epochs: 30,
            early_stop_patience: 25,
            seed: 0,
            hidden: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// How the ranking weights are treated during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmegaMode {
    /// Start at `1/M`, frozen for the warm-up, then learned.
    Trainable,
    /// Held at the given values for the whole run.
    Fixed(Vec<f64>),
}

impl OmegaMode {
    pub fn is_fixed(&self) -> bool {
        matches!(self, OmegaMode::Fixed(_))
    }
}

/// Mean cross-entropy over the masked rows, `log` floored at [`LOG_FLOOR`].
pub fn cross_entropy<T: Scalar>(
    probs: &DenseMatrix<T>,
    labels: &DenseMatrix<T>,
    mask: &[bool],
) -> Result<T> {
    if probs.shape() != labels.shape() {
        return Err(Error::shape("cross_entropy", probs.shape(), labels.shape()));
    }
    if mask.len() != probs.rows() {
        return Err(Error::shape(
            "cross_entropy mask",
            (mask.len(), 1),
            (probs.rows(), 1),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Parameter(
            "loss needs at least one labeled row".into(),
        ));
    }
    let floor = T::of(LOG_FLOOR);
    let mut total = T::zero();
    for i in (0..probs.rows()).filter(|&i| mask[i]) {
        for (&p, &y) in probs.row(i).iter().zip(labels.row(i)) {
            if y != T::zero() {
                total = total - y * p.max(floor).ln();
            }
        }
    }
    Ok(total / T::of_usize(count))
}

/// Training objective: masked cross-entropy plus `l2 · Σ‖Θ‖²_F`.
pub fn loss<T: Scalar>(
    probs: &DenseMatrix<T>,
    labels: &DenseMatrix<T>,
    mask: &[bool],
    params: &ModelParams<T>,
    l2: T,
) -> Result<T> {
    Ok(cross_entropy(probs, labels, mask)? + l2 * params.weight_norm_sq())
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates. Ranking weights keep their own step
/// count so their bias correction starts when they are first unfrozen.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    first: ModelParams<T>,
    second: ModelParams<T>,
    layer_steps: i32,
    omega_steps: i32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(dims: ModelDims) -> Self {
        Self {
            first: ModelParams::zeros(dims),
            second: ModelParams::zeros(dims),
            layer_steps: 0,
            omega_steps: 0,
        }
    }

    pub fn layer_steps(&self) -> i32 {
        self.layer_steps
    }

    pub fn omega_steps(&self) -> i32 {
        self.omega_steps
    }
}

/// One bias-corrected Adam update of every layer weight and, when
/// `update_omega` is set, of the ranking weights.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    update_omega: bool,
) -> Result<()> {
    let dims = params.dims();
    if grads.dims() != dims || state.first.dims() != dims || grads.omega.len() != params.omega.len()
    {
        return Err(Error::Consistency(
            "optimizer state, gradients and parameters differ in shape".into(),
        ));
    }
    state.layer_steps += 1;
    if update_omega {
        state.omega_steps += 1;
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.epsilon);
    let correction = |steps: i32| (one - b1.powi(steps), one - b2.powi(steps));
    let layer_corr = correction(state.layer_steps);
    let omega_corr = correction(state.omega_steps.max(1));

    let g = grads.to_flat();
    let mut m_flat = Vec::with_capacity(g.len());
    let mut v_flat = Vec::with_capacity(g.len());
    state.first.for_each_mut(|_, v| m_flat.push(*v));
    state.second.for_each_mut(|_, v| v_flat.push(*v));

    let mut k = 0;
    params.for_each_mut(|slot, p| {
        let (c1, c2) = match slot {
            ParamSlot::Layer(_) => layer_corr,
            ParamSlot::Ranking if update_omega => omega_corr,
            ParamSlot::Ranking => {
                k += 1;
                return;
            }
        };
        let m = b1 * m_flat[k] + (one - b1) * g[k];
        let v = b2 * v_flat[k] + (one - b2) * g[k] * g[k];
        m_flat[k] = m;
        v_flat[k] = v;
        *p = *p - lr * (m / c1) / ((v / c2).sqrt() + eps);
        k += 1;
    });

    let mut k = 0;
    state.first.for_each_mut(|_, v| {
        *v = m_flat[k];
        k += 1;
    });
    let mut k = 0;
    state.second.for_each_mut(|_, v| {
        *v = v_flat[k];
        k += 1;
    });
    Ok(())
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Ranking weights after this epoch's update.
    pub omega: Vec<f64>,
}

/// Per-epoch trajectory of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,train_loss,val_loss,val_acc,omega_1,...,omega_M`, one row per epoch.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let m = self.records.first().map_or(0, |r| r.omega.len());
        let mut header = String::from("epoch,train_loss,val_loss,val_acc");
        for i in 1..=m {
            header.push_str(&format!(",omega_{i}"));
        }
        writeln!(out, "{header}")?;
        for r in &self.records {
            write!(
                out,
                "{},{:.16e},{:.16e},{:.16e}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc
            )?;
            for w in &r.omega {
                write!(out, ",{w:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::Data(format!("history: {e}")))?
            .ok_or_else(|| Error::Data("history file is empty".into()))?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let fixed = ["epoch", "train_loss", "val_loss", "val_acc"];
        if cols.len() < 5 || cols[..4] != fixed {
            return Err(Error::Data(format!(
                "history header not recognized: `{header}`"
            )));
        }
        for (i, c) in cols[4..].iter().enumerate() {
            if *c != format!("omega_{}", i + 1) {
                return Err(Error::Data(format!(
                    "history header column `{c}` out of place"
                )));
            }
        }
        let m = cols.len() - 4;
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Data(format!("history: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || {
                Error::Data(format!(
                    "history line {}: malformed row `{line}`",
                    lineno + 2
                ))
            };
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 4 + m {
                return Err(bad());
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(bad)
            };
            records.push(EpochRecord {
                epoch: fields[0].parse().map_err(|_| bad())?,
                train_loss: num(fields[1])?,
                val_loss: num(fields[2])?,
                val_acc: num(fields[3])?,
                omega: fields[4..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            });
        }
        Ok(Self { records })
    }
}

/// Inputs of a transductive run: all nodes propagate, only masked rows
/// enter the loss.
#[derive(Debug, Clone, Copy)]
pub struct TrainProblem<'a, T> {
    pub features: &'a DenseMatrix<T>,
    /// One-hot rows; rows outside both masks are ignored.
    pub labels: &'a DenseMatrix<T>,
    pub train_mask: &'a [bool],
    pub val_mask: &'a [bool],
}

impl<T: Scalar> TrainProblem<'_, T> {
    fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.labels.rows() != n {
            return Err(Error::shape(
                "labels",
                self.labels.shape(),
                self.features.shape(),
            ));
        }
        if self.train_mask.len() != n || self.val_mask.len() != n {
            return Err(Error::shape(
                "masks",
                (self.train_mask.len(), self.val_mask.len()),
                (n, n),
            ));
        }
        if !self.train_mask.iter().any(|&m| m) {
            return Err(Error::Parameter("training set is empty".into()));
        }
        if !self.val_mask.iter().any(|&m| m) {
            return Err(Error::Parameter("validation set is empty".into()));
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters at the epoch with the lowest validation loss.
    pub params: ModelParams<T>,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

/// Full-batch training with Adam, warm-up of the ranking weights and early
/// stopping on validation loss.
///
/// The patience counter only runs once trainable ranking weights are
/// released, so early stopping cannot end a run during the warm-up.
pub fn train<T: Scalar>(
    problem: &TrainProblem<'_, T>,
    graphs: &[&SparseSymMatrix<T>],
    config: &TrainConfig,
    omega: &OmegaMode,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    problem.validate()?;
    if graphs.is_empty() {
        return Err(Error::Parameter("training needs at least one graph".into()));
    }
    let dims = ModelDims {
        features: problem.features.cols(),
        hidden: config.hidden,
        classes: problem.labels.cols(),
        branches: graphs.len(),
    };
    let mut params = model::init_params::<T>(dims, config.seed)?;
    let trainable = match omega {
        OmegaMode::Trainable => true,
        OmegaMode::Fixed(w) => {
            if w.len() != graphs.len() {
                return Err(Error::Config(format!(
                    "{} fixed ranking weights for {} graphs",
                    w.len(),
                    graphs.len()
                )));
            }
            params.omega = w.iter().map(|&v| T::of(v)).collect();
            false
        }
    };

    let adam = AdamConfig::new(config.learning_rate);
    let mut state = AdamState::new(dims);
    let l2 = T::of(config.l2);
    let mut dropout_seeds = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_seeds.set_stream(u64::MAX);

    let mut history = TrainHistory::default();
    let mut best = (T::infinity(), 0usize, params.clone());
    let mut stale = 0usize;
    for epoch in 1..=config.max_epochs {
        let dropout = Dropout {
            rate: config.dropout,
            seed: dropout_seeds.next_u64(),
        };
        let cache = model::forward(problem.features, graphs, &params, Some(dropout))?;
        let train_loss = loss(
            &cache.probs,
            problem.labels,
            problem.train_mask,
            &params,
            l2,
        )?;
        let grads = model::backward(&cache, problem.labels, problem.train_mask, &params, l2)?;
        let release = trainable && epoch > config.omega_warmup_epochs;
        adam_step(&mut params, &grads, &mut state, &adam, release)?;

        let eval = model::forward(problem.features, graphs, &params, None)?;
        let val_loss = cross_entropy(&eval.probs, problem.labels, problem.val_mask)?;
        let val_acc = accuracy(&eval.probs, problem.labels, problem.val_mask)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Consistency(format!(
                "loss diverged at epoch {epoch}"
            )));
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: train_loss.as_f64(),
            val_loss: val_loss.as_f64(),
            val_acc,
            omega: params.omega.iter().map(|w| w.as_f64()).collect(),
        });

        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
            stale = 0;
        } else if !trainable || epoch > config.omega_warmup_epochs {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        best_epoch: best.1,
        history,
    })
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_rel_error_layers: f64,
    pub max_rel_error_omega: f64,
    pub entries: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares [`model::backward`] against central finite differences of
/// [`loss`] for every parameter scalar, dropout disabled. Intended for small
/// instances; cost is two forward passes per parameter.
pub fn grad_check<T: Scalar>(
    features: &DenseMatrix<T>,
    labels: &DenseMatrix<T>,
    mask: &[bool],
    graphs: &[&SparseSymMatrix<T>],
    params: &ModelParams<T>,
    l2: f64,
    epsilon: f64,
) -> Result<GradCheck> {
    let l2 = T::of(l2);
    let eval = |p: &ModelParams<T>| -> Result<f64> {
        let cache = model::forward(features, graphs, p, None)?;
        Ok(loss(&cache.probs, labels, mask, p, l2)?.as_f64())
    };
    let cache = model::forward(features, graphs, params, None)?;
    let analytic = model::backward(&cache, labels, mask, params, l2)?.to_flat();

    let mut slots = Vec::with_capacity(analytic.len());
    params.clone().for_each_mut(|s, _| slots.push(s));

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_rel_error_layers: 0.0,
        max_rel_error_omega: 0.0,
        entries: analytic.len(),
    };
    for (k, (&slot, &a)) in slots.iter().zip(&analytic).enumerate() {
        let probe = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            let mut idx = 0;
            p.for_each_mut(|_, v| {
                if idx == k {
                    *v = *v + T::of(delta);
                }
                idx += 1;
            });
            eval(&p)
        };
        let numeric = (probe(epsilon)? - probe(-epsilon)?) / (2.0 * epsilon);
        let err = relative_error(a.as_f64(), numeric);
        report.max_rel_error = report.max_rel_error.max(err);
        match slot {
            ParamSlot::Layer(_) => {
                report.max_rel_error_layers = report.max_rel_error_layers.max(err)
            }
            ParamSlot::Ranking => report.max_rel_error_omega = report.max_rel_error_omega.max(err),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, BranchParams};
    use rand::Rng;

    type M = DenseMatrix<f64>;

    fn dims(d: usize, h: usize, k: usize, m: usize) -> ModelDims {
        ModelDims {
            features: d,
            hidden: h,
            classes: k,
            branches: m,
        }
    }

    fn empty_params() -> ModelParams<f64> {
        ModelParams::zeros(dims(1, 1, 2, 1))
    }

    #[test]
    fn loss_uniform_predictor_is_ln2() {
        let p = M::from_rows(&[[0.5, 0.5]]).unwrap();
        let y = M::from_rows(&[[1.0, 0.0]]).unwrap();
        let l = loss(&p, &y, &[true], &empty_params(), 0.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_perfect_predictor_is_zero() {
        let y = M::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let l = loss(&y, &y, &[true, true], &empty_params(), 0.0).unwrap();
        assert!(l.abs() <= 2e-12);
    }

    #[test]
    fn loss_two_rows() {
        let p = M::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
        let y = M::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let l = loss(&p, &y, &[true, true], &empty_params(), 0.0).unwrap();
        // -(ln 0.9 + ln 0.8) / 2 = (0.105360515657826 + 0.223143551314210) / 2
        assert!((l - 0.164252033486018).abs() < 1e-12);
    }

    #[test]
    fn loss_needs_labeled_rows_and_adds_penalty() {
        let p = M::from_rows(&[[0.5, 0.5]]).unwrap();
        assert!(matches!(
            loss(&p, &p, &[false], &empty_params(), 0.0),
            Err(Error::Parameter(_))
        ));
        let mut params = empty_params();
        params.branches[0].input.set(0, 0, 2.0);
        let y = M::from_rows(&[[1.0, 0.0]]).unwrap();
        let l = loss(&p, &y, &[true], &params, 0.1).unwrap();
        assert!((l - (std::f64::consts::LN_2 + 0.4)).abs() < 1e-15);
    }

    fn scalar_params(v: f64) -> ModelParams<f64> {
        ModelParams {
            branches: vec![BranchParams {
                input: M::filled(1, 1, v),
                output: M::zeros(1, 2),
            }],
            omega: vec![1.0],
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = init_params::<f64>(dims(3, 2, 2, 2), 1).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(p.dims());
        let zero = p.zeros_like();
        adam_step(&mut p, &zero, &mut state, &AdamConfig::new(0.1), true).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = scalar_params(0.0);
        let mut g = p.zeros_like();
        g.branches[0].input.set(0, 0, 1.0);
        let mut state = AdamState::new(p.dims());
        adam_step(&mut p, &g, &mut state, &AdamConfig::new(0.1), false).unwrap();
        // m̂ = 1, v̂ = 1: Δ = -0.1 / (1 + 1e-8).
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.branches[0].input.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_moments_decay_after_gradient_stops() {
        let lr = 0.1;
        let mut p = scalar_params(0.0);
        let mut g = p.zeros_like();
        g.branches[0].input.set(0, 0, 1.0);
        let mut state = AdamState::new(p.dims());
        let cfg = AdamConfig::new(lr);
        adam_step(&mut p, &g, &mut state, &cfg, false).unwrap();
        let zero = p.zeros_like();
        // Recursion by hand: m_t = 0.1 * 0.9^(t-1), v_t = 0.001 * 0.999^(t-1).
        let mut x = p.branches[0].input.get(0, 0);
        for t in 2..=3 {
            adam_step(&mut p, &zero, &mut state, &cfg, false).unwrap();
            let m = 0.1 * 0.9f64.powi(t - 1) / (1.0 - 0.9f64.powi(t));
            let v = 0.001 * 0.999f64.powi(t - 1) / (1.0 - 0.999f64.powi(t));
            let step = lr * m / (v.sqrt() + 1e-8);
            let now = p.branches[0].input.get(0, 0);
            assert!((x - now - step).abs() < 1e-14);
            assert!((x - now).abs() < lr);
            x = now;
        }
    }

    #[test]
    fn adam_leaves_frozen_omega_and_its_moments_alone() {
        let mut p = init_params::<f64>(dims(2, 2, 2, 2), 1).unwrap();
        let mut g = p.zeros_like();
        g.omega = vec![1.0, -1.0];
        let mut state = AdamState::new(p.dims());
        adam_step(&mut p, &g, &mut state, &AdamConfig::new(0.1), false).unwrap();
        assert_eq!(p.omega, vec![0.5, 0.5]);
        assert_eq!(state.omega_steps(), 0);
        adam_step(&mut p, &g, &mut state, &AdamConfig::new(0.1), true).unwrap();
        // First ω step uses its own bias correction: a full-size step.
        assert!((p.omega[0] - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = init_params::<f64>(dims(2, 2, 2, 1), 1).unwrap();
        let g = ModelParams::zeros(dims(3, 2, 2, 1));
        let mut state = AdamState::new(p.dims());
        assert!(matches!(
            adam_step(&mut p, &g, &mut state, &AdamConfig::new(0.1), true),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn history_csv_round_trip() {
        let h = TrainHistory {
            records: vec![
                EpochRecord {
                    epoch: 1,
                    train_loss: 0.7,
                    val_loss: 0.69,
                    val_acc: 0.5,
                    omega: vec![0.5, 0.5],
                },
                EpochRecord {
                    epoch: 2,
                    train_loss: 0.1 + 0.2,
                    val_loss: 1.0 / 3.0,
                    val_acc: 0.75,
                    omega: vec![0.61, 0.39],
                },
            ],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,val_acc,omega_1,omega_2\n"));
        assert_eq!(TrainHistory::read_csv(buf.as_slice()).unwrap(), h);
        assert!(TrainHistory::read_csv("epoch,loss\n".as_bytes()).is_err());
        assert!(TrainHistory::read_csv(
            "epoch,train_loss,val_loss,val_acc,omega_1\n1,0.1,0.2\n".as_bytes()
        )
        .is_err());
    }

    fn toy_problem(n: usize, d: usize, seed: u64) -> (M, M, SparseSymMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = M::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let y = M::from_fn(n, 2, |i, j| if i % 2 == j { 1.0 } else { 0.0 });
        let a = crate::graph::random_graph::<f64>(n, 0.3, seed)
            .unwrap()
            .normalized;
        (x, y, a)
    }

    #[test]
    fn grad_check_small_instance() {
        for l2 in [0.0, 5e-4] {
            let (x, y, a) = toy_problem(12, 5, 3);
            let b = crate::graph::random_graph::<f64>(12, 0.5, 99)
                .unwrap()
                .normalized;
            let mut p = init_params::<f64>(dims(5, 4, 2, 2), 3).unwrap();
            p.omega = vec![0.8, -0.3];
            let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
            let r = grad_check(&x, &y, &mask, &[&a, &b], &p, l2, 1e-6).unwrap();
            assert_eq!(r.entries, p.dims().parameter_count());
            assert!(r.max_rel_error < 1e-5, "{r:?}");
            assert!(r.max_rel_error_omega < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let (x, y, a) = toy_problem(10, 3, 1);
        let train_mask = vec![true; 10];
        let none = vec![false; 10];
        let p = TrainProblem {
            features: &x,
            labels: &y,
            train_mask: &none,
            val_mask: &train_mask,
        };
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&p, &[&a], &cfg, &OmegaMode::Trainable),
            Err(Error::Parameter(_))
        ));
        let p = TrainProblem {
            train_mask: &train_mask,
            ..p
        };
        assert!(matches!(
            train(&p, &[], &cfg, &OmegaMode::Trainable),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            train(&p, &[&a], &cfg, &OmegaMode::Fixed(vec![0.5, 0.5])),
            Err(Error::Config(_))
        ));
        let bad = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&p, &[&a], &bad, &OmegaMode::Trainable),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn warmup_freezes_omega_and_best_snapshot_is_minimal() {
        let (x, y, a) = toy_problem(40, 6, 5);
        let b = crate::graph::random_graph::<f64>(40, 0.2, 17)
            .unwrap()
            .normalized;
        let train_mask: Vec<bool> = (0..40).map(|i| i % 5 != 0).collect();
        let val_mask: Vec<bool> = train_mask.iter().map(|m| !m).collect();
        let p = TrainProblem {
            features: &x,
            labels: &y,
            train_mask: &train_mask,
            val_mask: &val_mask,
        };
        let cfg = TrainConfig {
            max_epochs: 60,
            omega_warmup_epochs: 10,
            ..TrainConfig::default()
        };
        let out = train(&p, &[&a, &b], &cfg, &OmegaMode::Trainable).unwrap();
        for r in &out.history.records[..10] {
            assert_eq!(r.omega, vec![0.5, 0.5]);
        }
        if out.history.len() > 10 {
            assert_ne!(out.history.records[10].omega, vec![0.5, 0.5]);
        }
        let best = out.history.records[out.best_epoch - 1].val_loss;
        assert!(out.history.records.iter().all(|r| best <= r.val_loss));

        let again = train(&p, &[&a, &b], &cfg, &OmegaMode::Trainable).unwrap();
        assert_eq!(again.history, out.history);
        assert_eq!(again.params, out.params);
    }

    #[test]
    fn fixed_omega_never_moves() {
        let (x, y, a) = toy_problem(30, 4, 2);
        let train_mask: Vec<bool> = (0..30).map(|i| i % 4 != 0).collect();
        let val_mask: Vec<bool> = train_mask.iter().map(|m| !m).collect();
        let p = TrainProblem {
            features: &x,
            labels: &y,
            train_mask: &train_mask,
            val_mask: &val_mask,
        };
        let cfg = TrainConfig {
            max_epochs: 20,
            ..TrainConfig::default()
        };
        let out = train(&p, &[&a, &a], &cfg, &OmegaMode::Fixed(vec![1.0, 0.0])).unwrap();
        assert!(out
            .history
            .records
            .iter()
            .all(|r| r.omega == vec![1.0, 0.0]));
        assert_eq!(out.params.omega, vec![1.0, 0.0]);
    }
}
