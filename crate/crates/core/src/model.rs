//! Parallel-branch graph convolutional network with a ranking layer.
//!
//! Every branch runs two first-order graph convolutions over its own
//! propagation operator `Â` and the shared features:
//!
//! ```text
//! H1     = ReLU(Â (X ∘ drop) Θ0)
//! logits = Â (H1 ∘ drop) Θ1
//! ```
//!
//! The ranking layer fuses branch logits as `Z = Σ_m ω_m logits_m` and
//! predicts `Ŷ = softmax(Z)`. The second layer has no ReLU; the softmax plays
//! that role. There are no bias terms.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseMatrix, SparseSymMatrix};

/// Layer sizes shared by every branch, plus the branch count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
    pub branches: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.hidden == 0 {
            return Err(Error::Parameter(
                "feature and hidden widths must be >= 1".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.branches == 0 {
            return Err(Error::Parameter("need at least one branch".into()));
        }
        Ok(())
    }

    /// Total trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.branches * (self.features * self.hidden + self.hidden * self.classes) + self.branches
    }
}

/// Weights of one branch: `input` is `d x h`, `output` is `h x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<T> {
    pub input: DenseMatrix<T>,
    pub output: DenseMatrix<T>,
}

/// All trainable state: per-branch layer weights and ranking weights `ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub branches: Vec<BranchParams<T>>,
    pub omega: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn dims(&self) -> ModelDims {
        let first = &self.branches[0];
        ModelDims {
            features: first.input.rows(),
            hidden: first.input.cols(),
            classes: first.output.cols(),
            branches: self.branches.len(),
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            branches: (0..dims.branches)
                .map(|_| BranchParams {
                    input: DenseMatrix::zeros(dims.features, dims.hidden),
                    output: DenseMatrix::zeros(dims.hidden, dims.classes),
                })
                .collect(),
            omega: vec![T::zero(); dims.branches],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    /// Checks that every branch has consistent shapes and all values are finite.
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Parameter("model has no branches".into()));
        }
        if self.omega.len() != self.branches.len() {
            return Err(Error::shape(
                "ranking weights",
                (self.omega.len(), 1),
                (self.branches.len(), 1),
            ));
        }
        let dims = self.dims();
        dims.validate()?;
        for b in &self.branches {
            if b.input.shape() != (dims.features, dims.hidden) {
                return Err(Error::shape(
                    "branch input weights",
                    b.input.shape(),
                    (dims.features, dims.hidden),
                ));
            }
            if b.output.shape() != (dims.hidden, dims.classes) {
                return Err(Error::shape(
                    "branch output weights",
                    b.output.shape(),
                    (dims.hidden, dims.classes),
                ));
            }
            if !b.input.is_finite() || !b.output.is_finite() {
                return Err(Error::Parameter("non-finite layer weight".into()));
            }
        }
        if self.omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::Parameter("non-finite ranking weight".into()));
        }
        Ok(())
    }

    /// Sum of squared Frobenius norms of all layer weights (ω excluded).
    pub fn weight_norm_sq(&self) -> T {
        self.branches
            .iter()
            .map(|b| b.input.norm_sq() + b.output.norm_sq())
            .sum()
    }

    /// Visits every scalar in a fixed order: branch by branch (input then
    /// output weights, row-major), then ω.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(ParamSlot, &mut T)) {
        for (m, b) in self.branches.iter_mut().enumerate() {
            for v in b.input.as_mut_slice() {
                f(ParamSlot::Layer(m), v);
            }
            for v in b.output.as_mut_slice() {
                f(ParamSlot::Layer(m), v);
            }
        }
        for v in &mut self.omega {
            f(ParamSlot::Ranking, v);
        }
    }

    /// Flattened values in [`for_each_mut`](Self::for_each_mut) order.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dims().parameter_count());
        let mut copy = self.clone();
        copy.for_each_mut(|_, v| out.push(*v));
        out
    }
}

/// Which group a parameter scalar belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Layer(usize),
    Ranking,
}

/// Glorot-uniform layer weights and `ω = 1/M`.
pub fn init_params<T: Scalar>(dims: ModelDims, seed: u64) -> Result<ModelParams<T>> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut glorot = |rows: usize, cols: usize| -> DenseMatrix<T> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        DenseMatrix::from_fn(rows, cols, |_, _| T::of(dist.sample(&mut rng)))
    };
    let branches = (0..dims.branches)
        .map(|_| BranchParams {
            input: glorot(dims.features, dims.hidden),
            output: glorot(dims.hidden, dims.classes),
        })
        .collect();
    let share = T::one() / T::of_usize(dims.branches);
    Ok(ModelParams {
        branches,
        omega: vec![share; dims.branches],
    })
}

/// Inverted dropout applied to each layer input during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

fn dropout_mask<T: Scalar>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> DenseMatrix<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    DenseMatrix::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    })
}

/// Intermediate values of one branch kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BranchCache<T> {
    /// Features after dropout; `None` when no dropout was applied.
    pub input_dropped: Option<DenseMatrix<T>>,
    pub input_mask: Option<DenseMatrix<T>>,
    /// `Â X̃ Θ0`, before the ReLU.
    pub pre_activation: DenseMatrix<T>,
    /// Hidden layer after ReLU and dropout.
    pub hidden: DenseMatrix<T>,
    pub hidden_mask: Option<DenseMatrix<T>>,
    pub logits: DenseMatrix<T>,
}

/// One branch: two graph convolutions. `masks` are the (input, hidden)
/// dropout multipliers, already scaled by `1/(1-p)`.
pub fn branch_forward<T: Scalar>(
    x: &DenseMatrix<T>,
    a_hat: &SparseSymMatrix<T>,
    params: &BranchParams<T>,
    masks: Option<(DenseMatrix<T>, DenseMatrix<T>)>,
) -> Result<BranchCache<T>> {
    let (input_mask, hidden_mask) = match masks {
        Some((i, h)) => (Some(i), Some(h)),
        None => (None, None),
    };
    let input_dropped = input_mask.as_ref().map(|m| x.hadamard(m)).transpose()?;
    let xt = input_dropped.as_ref().unwrap_or(x);
    // Â (X Θ0) is cheaper than (Â X) Θ0 whenever d > h.
    let pre_activation = a_hat.spmm(&xt.matmul(&params.input)?)?;
    let mut hidden = pre_activation.relu();
    if let Some(m) = &hidden_mask {
        hidden = hidden.hadamard(m)?;
    }
    let logits = a_hat.spmm(&hidden.matmul(&params.output)?)?;
    Ok(BranchCache {
        input_dropped,
        input_mask,
        pre_activation,
        hidden,
        hidden_mask,
        logits,
    })
}

/// Ranking layer: `Z = Σ_m ω_m H_m` summed in branch order, `Ŷ = softmax(Z)`.
pub fn rank_combine<T: Scalar>(
    branch_logits: &[&DenseMatrix<T>],
    omega: &[T],
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    if branch_logits.len() != omega.len() || omega.is_empty() {
        return Err(Error::shape(
            "rank_combine",
            (branch_logits.len(), 1),
            (omega.len(), 1),
        ));
    }
    let shape = branch_logits[0].shape();
    let mut fused = DenseMatrix::zeros(shape.0, shape.1);
    for (h, &w) in branch_logits.iter().zip(omega) {
        if h.shape() != shape {
            return Err(Error::shape("rank_combine", shape, h.shape()));
        }
        fused.axpy(w, h)?;
    }
    let probs = fused.softmax_rows();
    Ok((fused, probs))
}

/// Everything a forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardCache<'a, T> {
    pub features: &'a DenseMatrix<T>,
    pub graphs: Vec<&'a SparseSymMatrix<T>>,
    pub branches: Vec<BranchCache<T>>,
    pub omega: Vec<T>,
    /// Fused logits `Z`.
    pub fused: DenseMatrix<T>,
    /// Class probabilities `Ŷ`.
    pub probs: DenseMatrix<T>,
}

/// Full model forward pass. With `dropout = None` (evaluation mode) the
/// result is a pure function of the inputs.
pub fn forward<'a, T: Scalar>(
    x: &'a DenseMatrix<T>,
    graphs: &[&'a SparseSymMatrix<T>],
    params: &ModelParams<T>,
    dropout: Option<Dropout>,
) -> Result<ForwardCache<'a, T>> {
    let dims = params.dims();
    if graphs.len() != dims.branches {
        return Err(Error::shape(
            "forward graphs",
            (graphs.len(), 1),
            (dims.branches, 1),
        ));
    }
    if x.cols() != dims.features {
        return Err(Error::shape(
            "forward features",
            x.shape(),
            (x.rows(), dims.features),
        ));
    }
    if let Some(d) = dropout {
        if !(0.0..1.0).contains(&d.rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must lie in [0, 1), got {}",
                d.rate
            )));
        }
    }
    let mut branches = Vec::with_capacity(dims.branches);
    for (m, (a_hat, bp)) in graphs.iter().zip(&params.branches).enumerate() {
        let masks = dropout.filter(|d| d.rate > 0.0).map(|d| {
            // One stream per branch keeps masks independent of evaluation order.
            let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
            rng.set_stream(m as u64);
            let input = dropout_mask(x.rows(), dims.features, d.rate, &mut rng);
            let hidden = dropout_mask(x.rows(), dims.hidden, d.rate, &mut rng);
            (input, hidden)
        });
        branches.push(branch_forward(x, a_hat, bp, masks)?);
    }
    let logits: Vec<&DenseMatrix<T>> = branches.iter().map(|b| &b.logits).collect();
    let (fused, probs) = rank_combine(&logits, &params.omega)?;
    Ok(ForwardCache {
        features: x,
        graphs: graphs.to_vec(),
        branches,
        omega: params.omega.clone(),
        fused,
        probs,
    })
}

/// Analytic gradients of the masked cross-entropy (mean over labeled rows)
/// plus `l2 · Σ‖Θ‖²`, with respect to every layer weight and every `ω_m`.
pub fn backward<T: Scalar>(
    cache: &ForwardCache<'_, T>,
    labels: &DenseMatrix<T>,
    labeled: &[bool],
    params: &ModelParams<T>,
    l2: T,
) -> Result<ModelParams<T>> {
    let n = cache.probs.rows();
    if labels.shape() != cache.probs.shape() {
        return Err(Error::shape(
            "backward labels",
            labels.shape(),
            cache.probs.shape(),
        ));
    }
    if labeled.len() != n {
        return Err(Error::shape("backward mask", (labeled.len(), 1), (n, 1)));
    }
    if params.branches.len() != cache.branches.len() || params.omega != cache.omega {
        return Err(Error::Consistency(
            "forward cache was produced with different parameters".into(),
        ));
    }
    let dims = params.dims();
    for b in &cache.branches {
        if b.pre_activation.cols() != dims.hidden || b.logits.cols() != dims.classes {
            return Err(Error::Consistency(
                "forward cache shapes do not match the parameters".into(),
            ));
        }
    }

    let count = labeled.iter().filter(|&&l| l).count();
    let mut d_fused = DenseMatrix::zeros(n, dims.classes);
    if count > 0 {
        let inv = T::one() / T::of_usize(count);
        for i in (0..n).filter(|&i| labeled[i]) {
            let p = cache.probs.row(i);
            let y = labels.row(i);
            for (k, d) in d_fused.row_mut(i).iter_mut().enumerate() {
                *d = (p[k] - y[k]) * inv;
            }
        }
    }

    let two_l2 = l2 + l2;
    let mut grads = params.zeros_like();
    for (m, (bc, bp)) in cache.branches.iter().zip(&params.branches).enumerate() {
        let a_hat = cache.graphs[m];
        grads.omega[m] = d_fused
            .as_slice()
            .iter()
            .zip(bc.logits.as_slice())
            .map(|(&g, &h)| g * h)
            .sum();

        let d_logits = d_fused.scale(params.omega[m]);
        let back = a_hat.spmm(&d_logits)?;
        let mut d_output = bc.hidden.t_matmul(&back)?;
        d_output.axpy(two_l2, &bp.output)?;

        let mut d_hidden = back.matmul_t(&bp.output)?;
        if let Some(mask) = &bc.hidden_mask {
            d_hidden = d_hidden.hadamard(mask)?;
        }
        for (g, &z) in d_hidden
            .as_mut_slice()
            .iter_mut()
            .zip(bc.pre_activation.as_slice())
        {
            if !(z > T::zero()) {
                *g = T::zero();
            }
        }
        let back = a_hat.spmm(&d_hidden)?;
        let xt = bc.input_dropped.as_ref().unwrap_or(cache.features);
        let mut d_input = xt.t_matmul(&back)?;
        d_input.axpy(two_l2, &bp.input)?;

        grads.branches[m] = BranchParams {
            input: d_input,
            output: d_output,
        };
    }
    Ok(grads)
}

const CHECKPOINT_MAGIC: &str = "mlpgcn-checkpoint 1";

/// Saved model: parameters plus the seed of the run that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub seed: u64,
}

impl<T: Scalar> Checkpoint<T> {
    /// Line-oriented text container. Values use shortest round-trip
    /// formatting so a reload is bit-exact.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dims = self.params.dims();
        let mut s = String::new();
        let join = |vals: &[T]| {
            vals.iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "scalar {}", std::any::type_name::<T>()).unwrap();
        writeln!(s, "features {}", dims.features).unwrap();
        writeln!(s, "hidden {}", dims.hidden).unwrap();
        writeln!(s, "classes {}", dims.classes).unwrap();
        writeln!(s, "branches {}", dims.branches).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "omega {}", join(&self.params.omega)).unwrap();
        for (m, b) in self.params.branches.iter().enumerate() {
            for (name, mat) in [("input", &b.input), ("output", &b.output)] {
                writeln!(s, "branch {m} {name} {} {}", mat.rows(), mat.cols()).unwrap();
                for i in 0..mat.rows() {
                    writeln!(s, "{}", join(mat.row(i))).unwrap();
                }
            }
        }
        out.write_all(s.as_bytes())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut lineno = 0usize;
        let mut next = |what: &str| -> Result<String> {
            lineno += 1;
            lines
                .next()
                .transpose()
                .map_err(|e| Error::Data(format!("checkpoint: {e}")))?
                .ok_or_else(|| Error::Data(format!("checkpoint truncated before {what}")))
        };
        let bad =
            |what: &str, line: &str| Error::Data(format!("checkpoint: malformed {what}: `{line}`"));

        let magic = next("header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(bad("header", &magic));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = next(key)?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(|s| s.trim().to_string())
                .ok_or_else(|| bad(key, &line))
        };
        let scalar = field("scalar")?;
        if scalar != std::any::type_name::<T>() {
            return Err(Error::Data(format!(
                "checkpoint holds {scalar} values, expected {}",
                std::any::type_name::<T>()
            )));
        }
        let count = |key: &str, v: String| -> Result<usize> { v.parse().map_err(|_| bad(key, &v)) };
        let dims = ModelDims {
            features: count("features", field("features")?)?,
            hidden: count("hidden", field("hidden")?)?,
            classes: count("classes", field("classes")?)?,
            branches: count("branches", field("branches")?)?,
        };
        dims.validate()?;
        let seed: u64 = {
            let v = field("seed")?;
            v.parse().map_err(|_| bad("seed", &v))?
        };
        let parse_row = |line: &str, len: usize| -> Result<Vec<T>> {
            let vals: Vec<T> = line
                .split_whitespace()
                .map(|t| t.parse::<T>().map_err(|_| bad("value", t)))
                .collect::<Result<_>>()?;
            if vals.len() != len {
                return Err(bad("row length", line));
            }
            Ok(vals)
        };
        let omega = parse_row(&field("omega")?, dims.branches)?;
        let mut branches = Vec::with_capacity(dims.branches);
        for m in 0..dims.branches {
            let mut read_matrix =
                |name: &str, rows: usize, cols: usize| -> Result<DenseMatrix<T>> {
                    let header = next(name)?;
                    if header.trim() != format!("branch {m} {name} {rows} {cols}") {
                        return Err(bad("matrix header", &header));
                    }
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        data.extend(parse_row(&next(name)?, cols)?);
                    }
                    DenseMatrix::from_vec(rows, cols, data)
                };
            let input = read_matrix("input", dims.features, dims.hidden)?;
            let output = read_matrix("output", dims.hidden, dims.classes)?;
            branches.push(BranchParams { input, output });
        }
        let params = ModelParams { branches, omega };
        params.validate()?;
        Ok(Self { params, seed })
    }
}
