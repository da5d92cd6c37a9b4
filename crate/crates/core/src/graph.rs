//! Population graphs built from per-subject metadata.
//!
//! One graph per metadata element: an edge joins two subjects whose element
//! values agree (categorical) or lie closer than a threshold (continuous).
//! Edges are weighted by feature similarity and the weighted adjacency is
//! turned into the symmetric-normalized propagation operator
//! `D̃^{-1/2} (W + I) D̃^{-1/2}` consumed by the graph-convolution layers.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseMatrix, SparseSymMatrix};

/// Threshold applied to continuous columns when none is configured.
pub const DEFAULT_BETA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaKind {
    Categorical,
    Continuous,
}

impl fmt::Display for MetaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaKind::Categorical => "categorical",
            MetaKind::Continuous => "continuous",
        })
    }
}

impl FromStr for MetaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "categorical" => Ok(MetaKind::Categorical),
            "continuous" => Ok(MetaKind::Continuous),
            other => Err(Error::Data(format!("unknown metadata kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetaValues {
    /// Category labels; the alphabet is the set of distinct labels.
    Categorical(Vec<String>),
    /// Real values in the column's native unit.
    Continuous(Vec<f64>),
}

/// One metadata element (gender, age, site, ...) with a value per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaColumn {
    pub name: String,
    pub values: MetaValues,
}

impl MetaColumn {
    pub fn categorical(name: impl Into<String>, values: Vec<String>) -> Self {
        Self {
            name: name.into(),
            values: MetaValues::Categorical(values),
        }
    }

    pub fn continuous(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values: MetaValues::Continuous(values),
        }
    }

    pub fn kind(&self) -> MetaKind {
        match self.values {
            MetaValues::Categorical(_) => MetaKind::Categorical,
            MetaValues::Continuous(_) => MetaKind::Continuous,
        }
    }

    pub fn len(&self) -> usize {
        match &self.values {
            MetaValues::Categorical(v) => v.len(),
            MetaValues::Continuous(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct category labels in sorted order; empty for continuous columns.
    pub fn alphabet(&self) -> Vec<String> {
        match &self.values {
            MetaValues::Categorical(v) => v
                .iter()
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            MetaValues::Continuous(_) => Vec::new(),
        }
    }

    /// Value of subject `i` rendered as text.
    pub fn display_value(&self, i: usize) -> String {
        match &self.values {
            MetaValues::Categorical(v) => v[i].clone(),
            MetaValues::Continuous(v) => format!("{:.16e}", v[i]),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let values = match &self.values {
            MetaValues::Categorical(v) => {
                MetaValues::Categorical(idx.iter().map(|&i| v[i].clone()).collect())
            }
            MetaValues::Continuous(v) => {
                MetaValues::Continuous(idx.iter().map(|&i| v[i]).collect())
            }
        };
        Self {
            name: self.name.clone(),
            values,
        }
    }
}

/// Symmetric boolean adjacency without self-edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    bits: Vec<bool>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            bits: vec![false; n * n],
        }
    }

    /// From undirected pairs; self-pairs are ignored.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adj = Self::empty(n);
        for (i, j) in pairs {
            adj.insert(i, j);
        }
        adj
    }

    fn insert(&mut self, i: usize, j: usize) {
        if i != j {
            self.bits[i * self.n + j] = true;
            self.bits[j * self.n + i] = true;
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Undirected edges as `(i, j)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.contains(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count() / 2
    }

    /// Fraction of the `n(n-1)/2` possible edges present.
    pub fn density(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.edge_count() as f64 / (self.n * (self.n - 1) / 2) as f64
    }

    /// Node `perm[i]` of `self` becomes node `i` of the result.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let mut out = Self::empty(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.bits[i * self.n + j] = self.contains(perm[i], perm[j]);
            }
        }
        out
    }
}

/// Edge rule for one metadata element.
///
/// Categorical columns connect equal codes. Continuous columns connect
/// subjects with `|a - b| < beta`.
pub fn build_edges(col: &MetaColumn, beta: f64) -> Result<Adjacency> {
    let n = col.len();
    if n < 2 {
        return Err(Error::Parameter(format!(
            "column `{}` needs at least 2 subjects, has {n}",
            col.name
        )));
    }
    let mut adj = Adjacency::empty(n);
    match &col.values {
        MetaValues::Categorical(codes) => {
            for i in 0..n {
                for j in i + 1..n {
                    if codes[i] == codes[j] {
                        adj.insert(i, j);
                    }
                }
            }
        }
        MetaValues::Continuous(values) => {
            if !(beta > 0.0) {
                return Err(Error::Parameter(format!(
                    "threshold for continuous column `{}` must be > 0, got {beta}",
                    col.name
                )));
            }
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "column `{}` has a non-finite value at subject {i}",
                    col.name
                )));
            }
            for i in 0..n {
                for j in i + 1..n {
                    if (values[i] - values[j]).abs() < beta {
                        adj.insert(i, j);
                    }
                }
            }
        }
    }
    Ok(adj)
}

/// Feature-similarity measure used to weight edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Pearson,
    Cosine,
}

/// Pairwise similarity of the rows of `x`, clamped to `[-1, 1]` with a unit
/// diagonal.
pub fn similarity_matrix<T: Scalar>(
    x: &DenseMatrix<T>,
    metric: Similarity,
) -> Result<DenseMatrix<T>> {
    let (n, d) = x.shape();
    if d < 2 {
        return Err(Error::Parameter(format!(
            "similarity needs at least 2 features per subject, got {d}"
        )));
    }
    // Rows are centred (Pearson only) and scaled to unit norm, so each
    // similarity is a plain dot product.
    let mut unit = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = match metric {
            Similarity::Pearson => row.iter().copied().sum::<T>() / T::of_usize(d),
            Similarity::Cosine => T::zero(),
        };
        let centred: Vec<T> = row.iter().map(|&v| v - mean).collect();
        let norm = centred.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::Data(format!(
                "subject {i} has zero-variance features; similarity undefined"
            )));
        }
        unit.push(centred.into_iter().map(|v| v / norm).collect::<Vec<T>>());
    }
    let mut sim = DenseMatrix::zeros(n, n);
    for i in 0..n {
        sim.set(i, i, T::one());
        for j in i + 1..n {
            let dot: T = unit[i].iter().zip(&unit[j]).map(|(&a, &b)| a * b).sum();
            let v = dot.max(-T::one()).min(T::one());
            sim.set(i, j, v);
            sim.set(j, i, v);
        }
    }
    Ok(sim)
}

/// `W = max(0, Sim ∘ E)`, stored sparsely.
pub fn build_affinity<T: Scalar>(
    sim: &DenseMatrix<T>,
    edges: &Adjacency,
) -> Result<SparseSymMatrix<T>> {
    let n = edges.len();
    if sim.shape() != (n, n) {
        return Err(Error::shape("build_affinity", sim.shape(), (n, n)));
    }
    let mut entries = Vec::new();
    for (i, j) in edges.edges() {
        // Sim is symmetric by construction; average guards externally supplied matrices.
        let v = (sim.get(i, j) + sim.get(j, i)) / T::of(2.0);
        if v > T::zero() {
            entries.push((i, j, v));
            entries.push((j, i, v));
        }
    }
    SparseSymMatrix::from_triplets(n, &entries)
}

/// `D̃^{-1/2} (W + I) D̃^{-1/2}` with `D̃` the row sums of `W + I`.
pub fn normalize<T: Scalar>(w: &SparseSymMatrix<T>) -> Result<SparseSymMatrix<T>> {
    let n = w.dim();
    let mut entries = Vec::with_capacity(w.nnz() + n);
    for i in 0..n {
        for (j, v) in w.row_iter(i) {
            if v < T::zero() {
                return Err(Error::Parameter(format!(
                    "negative weight {v} at ({i}, {j}); normalization needs W >= 0"
                )));
            }
            entries.push((i, j, v));
        }
        entries.push((i, i, T::one()));
    }
    let tilde = SparseSymMatrix::from_triplets(n, &entries)?;
    let degree = tilde.row_sums();
    let mut scaled = Vec::with_capacity(tilde.nnz());
    for i in 0..n {
        for (j, v) in tilde.row_iter(i) {
            scaled.push((i, j, v / (degree[i] * degree[j]).sqrt()));
        }
    }
    SparseSymMatrix::from_triplets(n, &scaled)
}

/// A population graph together with its propagation operator.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph<T> {
    pub edges: Adjacency,
    pub weights: SparseSymMatrix<T>,
    pub normalized: SparseSymMatrix<T>,
    /// Metadata element name, `random`, or the file the graph came from.
    pub source: String,
}

impl<T: Scalar> AffinityGraph<T> {
    /// Edges from `col`, weighted by the similarity of the rows of `x`.
    pub fn from_metadata(
        col: &MetaColumn,
        beta: f64,
        x: &DenseMatrix<T>,
        metric: Similarity,
    ) -> Result<Self> {
        if x.rows() != col.len() {
            return Err(Error::shape("from_metadata", x.shape(), (col.len(), 1)));
        }
        let edges = build_edges(col, beta)?;
        let sim = similarity_matrix(x, metric)?;
        let weights = build_affinity(&sim, &edges)?;
        let normalized = normalize(&weights)?;
        Ok(Self {
            edges,
            weights,
            normalized,
            source: col.name.clone(),
        })
    }

    /// Wraps an existing weight matrix; off-diagonal nonzeros become edges.
    pub fn from_weights(weights: SparseSymMatrix<T>, source: impl Into<String>) -> Result<Self> {
        let n = weights.dim();
        let edges = Adjacency::from_pairs(n, weights.upper_entries().map(|(i, j, _)| (i, j)));
        let normalized = normalize(&weights)?;
        Ok(Self {
            edges,
            weights,
            normalized,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Erdős–Rényi graph with unit weights; each pair is an edge with
/// probability `density`.
pub fn random_graph<T: Scalar>(n: usize, density: f64, seed: u64) -> Result<AffinityGraph<T>> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Parameter(format!(
            "random graph density must lie in (0, 1], got {density}"
        )));
    }
    if n < 2 {
        return Err(Error::Parameter(format!(
            "random graph needs at least 2 nodes, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < density {
                pairs.push((i, j));
            }
        }
    }
    let edges = Adjacency::from_pairs(n, pairs.iter().copied());
    let entries: Vec<_> = pairs
        .iter()
        .flat_map(|&(i, j)| [(i, j, T::one()), (j, i, T::one())])
        .collect();
    let weights = SparseSymMatrix::from_triplets(n, &entries)?;
    let normalized = normalize(&weights)?;
    Ok(AffinityGraph {
        edges,
        weights,
        normalized,
        source: "random".to_string(),
    })
}

/// Writes `n <N>` followed by one `i j weight` line per undirected edge
/// (`i < j`), weights with 17 significant digits.
pub fn write_edge_list<T: Scalar, W: Write>(
    weights: &SparseSymMatrix<T>,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "n {}", weights.dim())?;
    for (i, j, v) in weights.upper_entries() {
        writeln!(out, "{i} {j} {:.16e}", v.as_f64())?;
    }
    Ok(())
}

/// Parses the format produced by [`write_edge_list`].
pub fn read_edge_list<T: Scalar, R: BufRead>(input: R) -> Result<SparseSymMatrix<T>> {
    let mut lines = input
        .lines()
        .enumerate()
        .map(|(k, l)| l.map(|l| (k + 1, l)))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()));
    let (_, header) = lines
        .next()
        .transpose()
        .map_err(|e| Error::Data(format!("edge list: {e}")))?
        .ok_or_else(|| Error::Data("edge list is empty".into()))?;
    let n: usize = header
        .trim()
        .strip_prefix("n ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Data(format!("edge list header must be `n <N>`, got `{header}`")))?;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for line in lines {
        let (lineno, line) = line.map_err(|e| Error::Data(format!("edge list: {e}")))?;
        let bad = || {
            Error::Data(format!(
                "edge list line {lineno}: expected `i j weight`, got `{line}`"
            ))
        };
        let mut parts = line.split_whitespace();
        let i: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let j: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let w: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        if i >= j || j >= n {
            return Err(Error::Data(format!(
                "edge list line {lineno}: need i < j < {n}, got ({i}, {j})"
            )));
        }
        if !w.is_finite() {
            return Err(Error::Data(format!(
                "edge list line {lineno}: non-finite weight"
            )));
        }
        if !seen.insert((i, j)) {
            return Err(Error::Data(format!(
                "edge list line {lineno}: duplicate edge ({i}, {j})"
            )));
        }
        entries.push((i, j, T::of(w)));
        entries.push((j, i, T::of(w)));
    }
    SparseSymMatrix::from_triplets(n, &entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    type M = DenseMatrix<f64>;

    fn cats(v: &[&str]) -> MetaColumn {
        MetaColumn::categorical("g", v.iter().map(|s| s.to_string()).collect())
    }

    /// Largest |eigenvalue| estimate of a symmetric matrix by power iteration.
    fn power_radius(a: &SparseSymMatrix<f64>, iters: usize) -> f64 {
        let n = a.dim();
        let mut v = M::from_fn(n, 1, |i, _| 1.0 + (i as f64 * 0.37).sin());
        let mut est = 0.0;
        for _ in 0..iters {
            let w = a.spmm(&v).unwrap();
            let norm_v = v.norm_sq().sqrt();
            let norm_w = w.norm_sq().sqrt();
            est = norm_w / norm_v;
            if norm_w == 0.0 {
                break;
            }
            v = w.scale(1.0 / norm_w);
        }
        est
    }

    #[test]
    fn continuous_threshold_edges() {
        let col = MetaColumn::continuous("age", vec![30.0, 31.0, 50.0]);
        let adj = build_edges(&col, 2.0).unwrap();
        assert_eq!(adj.edges(), vec![(0, 1)]);
    }

    #[test]
    fn categorical_equality_edges() {
        let adj = build_edges(&cats(&["A", "B", "A"]), 0.0).unwrap();
        assert_eq!(adj.edges(), vec![(0, 2)]);
    }

    #[test]
    fn identical_column_is_complete() {
        let col = MetaColumn::continuous("x", vec![4.0; 5]);
        let adj = build_edges(&col, 0.5).unwrap();
        assert_eq!(adj.edge_count(), 10);
        assert!((0..5).all(|i| !adj.contains(i, i)));
    }

    #[test]
    fn edge_errors() {
        let col = MetaColumn::continuous("age", vec![1.0, 2.0]);
        assert!(matches!(build_edges(&col, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(build_edges(&col, -1.0), Err(Error::Parameter(_))));
        let col = MetaColumn::continuous("age", vec![1.0, f64::NAN]);
        assert!(matches!(build_edges(&col, 1.0), Err(Error::Data(_))));
        assert!(matches!(
            build_edges(&cats(&["a"]), 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn similarity_cases() {
        let x = M::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]]).unwrap();
        let s = similarity_matrix(&x, Similarity::Pearson).unwrap();
        assert!((s.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((s.get(0, 2) + 1.0).abs() < 1e-15);
        assert_eq!(s.get(2, 2), 1.0);

        let x = M::from_rows(&[[1.0, -1.0], [1.0, 1.0]]).unwrap();
        let s = similarity_matrix(&x, Similarity::Cosine).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
    }

    #[test]
    fn zero_variance_row_is_named() {
        let x = M::from_rows(&[[1.0, 2.0], [3.0, 3.0]]).unwrap();
        let err = similarity_matrix(&x, Similarity::Pearson).unwrap_err();
        assert!(
            matches!(&err, Error::Data(m) if m.contains("subject 1")),
            "{err}"
        );
    }

    #[test]
    fn affinity_masks_and_clamps() {
        let sim = M::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap();
        let w = build_affinity(&sim, &Adjacency::from_pairs(2, [(0, 1)])).unwrap();
        assert_eq!(
            w.to_dense(),
            M::from_rows(&[[0.0, 0.5], [0.5, 0.0]]).unwrap()
        );

        let w = build_affinity(&sim, &Adjacency::empty(2)).unwrap();
        assert_eq!(w.nnz(), 0);

        let sim = M::from_rows(&[[1.0, -0.3], [-0.3, 1.0]]).unwrap();
        let w = build_affinity(&sim, &Adjacency::from_pairs(2, [(0, 1)])).unwrap();
        assert_eq!(w.get(0, 1), 0.0);
        assert_eq!(w.nnz(), 0);
    }

    #[test]
    fn normalize_cases() {
        let w = SparseSymMatrix::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert_eq!(normalize(&w).unwrap().to_dense(), M::filled(2, 2, 0.5));
        let a = normalize(&SparseSymMatrix::<f64>::zeros(1)).unwrap();
        assert_eq!(a.to_dense(), M::identity(1));
    }

    #[test]
    fn random_graph_cases() {
        let a = random_graph::<f64>(30, 0.3, 7).unwrap();
        let b = random_graph::<f64>(30, 0.3, 7).unwrap();
        assert_eq!(a, b);
        let full = random_graph::<f64>(6, 1.0, 1).unwrap();
        assert_eq!(full.edges.edge_count(), 15);
        assert!(matches!(
            random_graph::<f64>(5, 0.0, 1),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            random_graph::<f64>(5, 1.5, 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn random_graph_edge_count_binomial() {
        // Pairs = 4950, p = 0.1: mean 495, sd sqrt(4950 * 0.09) ~ 21.1.
        let pairs = 4950.0;
        let mean = pairs * 0.1;
        let sd = (pairs * 0.1 * 0.9f64).sqrt();
        for seed in 0..5 {
            let g = random_graph::<f64>(100, 0.1, seed).unwrap();
            let count = g.edges.edge_count() as f64;
            assert!((count - mean).abs() <= 3.0 * sd, "seed {seed}: {count}");
        }
    }

    #[test]
    fn edge_list_round_trip_and_errors() {
        let g = random_graph::<f64>(12, 0.4, 3).unwrap();
        let w = g.normalized.clone();
        // Off-diagonal part of a non-trivial weight matrix.
        let off: Vec<_> = w
            .upper_entries()
            .flat_map(|(i, j, v)| [(i, j, v), (j, i, v)])
            .collect();
        let w = SparseSymMatrix::from_triplets(12, &off).unwrap();
        let mut buf = Vec::new();
        write_edge_list(&w, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("n 12\n"));
        let back: SparseSymMatrix<f64> = read_edge_list(buf.as_slice()).unwrap();
        assert_eq!(back, w);

        assert!(read_edge_list::<f64, _>("n 3\n1 0 0.5\n".as_bytes()).is_err());
        assert!(read_edge_list::<f64, _>("n 3\n0 1 0.5\n0 1 0.5\n".as_bytes()).is_err());
        assert!(read_edge_list::<f64, _>("3\n".as_bytes()).is_err());
        assert!(read_edge_list::<f64, _>("n 3\n0 1 x\n".as_bytes()).is_err());
    }

    fn random_weights(n: usize, seed: u64) -> SparseSymMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.4 {
                    let v = rng.random_range(0.0..3.0);
                    entries.push((i, j, v));
                    entries.push((j, i, v));
                }
            }
        }
        SparseSymMatrix::from_triplets(n, &entries).unwrap()
    }

    #[test]
    fn normalized_spectral_radius_bounded() {
        for seed in 0..10 {
            let a = normalize(&random_weights(10, seed)).unwrap();
            assert!(power_radius(&a, 200) <= 1.0 + 1e-9);
        }
    }

    proptest! {
        #[test]
        fn edges_symmetric_and_loop_free(values in proptest::collection::vec(-5.0f64..5.0, 2..20), beta in 0.1f64..4.0) {
            let col = MetaColumn::continuous("c", values);
            let adj = build_edges(&col, beta).unwrap();
            for i in 0..adj.len() {
                prop_assert!(!adj.contains(i, i));
                for j in 0..adj.len() {
                    prop_assert_eq!(adj.contains(i, j), adj.contains(j, i));
                }
            }
        }

        #[test]
        fn normalize_symmetric_and_contractive(n in 2usize..24, seed in any::<u64>()) {
            let a = normalize(&random_weights(n, seed)).unwrap();
            let d = a.to_dense();
            prop_assert!(d.max_abs_diff(&d.transpose()).unwrap() <= 1e-12);
            prop_assert!(power_radius(&a, 200) <= 1.0 + 1e-9);
        }

        #[test]
        fn relabeling_commutes_with_construction(
            codes in proptest::collection::vec(0u8..3, 4..12),
            seed in any::<u64>(),
        ) {
            let n = codes.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = M::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
            let col = MetaColumn::categorical("c", codes.iter().map(|c| c.to_string()).collect());
            let mut perm: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);

            let g = AffinityGraph::from_metadata(&col, 1.0, &x, Similarity::Pearson).unwrap();
            let gp = AffinityGraph::from_metadata(&col.select(&perm), 1.0, &x.select_rows(&perm), Similarity::Pearson).unwrap();
            prop_assert_eq!(&gp.edges, &g.edges.permute(&perm));
            let w = g.weights.permute(&perm).unwrap().to_dense();
            prop_assert!(gp.weights.to_dense().max_abs_diff(&w).unwrap() <= 1e-12);
            let a = g.normalized.permute(&perm).unwrap().to_dense();
            prop_assert!(gp.normalized.to_dense().max_abs_diff(&a).unwrap() <= 1e-12);
        }

        #[test]
        fn affinity_zero_exactly_off_edges(codes in proptest::collection::vec(0u8..2, 3..10), seed in any::<u64>()) {
            let n = codes.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = M::from_fn(n, 5, |_, _| rng.random_range(-1.0..1.0));
            let col = MetaColumn::categorical("c", codes.iter().map(|c| c.to_string()).collect());
            let g = AffinityGraph::from_metadata(&col, 1.0, &x, Similarity::Pearson).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if !g.edges.contains(i, j) {
                        prop_assert_eq!(g.weights.get(i, j), 0.0);
                    }
                }
            }
        }
    }
}
