//! Dense and sparse linear-algebra kernels.
//!
//! Everything here is a pure function of its inputs. Matrices are small
//! (hundreds of rows), so the dense type is a plain row-major buffer and the
//! graph operators use compressed sparse row storage.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Wraps a row-major buffer; the length must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", (1, cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::shape("t_matmul", self.shape(), rhs.shape()));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let b_row = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::shape("matmul_t", self.shape(), rhs.shape()));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.rows {
                let dot = a_row
                    .iter()
                    .zip(rhs.row(j))
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                out.data[i * rhs.rows + j] = dot;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Elementwise product.
    pub fn hadamard(&self, rhs: &Self) -> Result<Self> {
        self.zip_with("hadamard", rhs, |a, b| a * b)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with("sub", rhs, |a, b| a - b)
    }

    /// `self += alpha * rhs`.
    pub fn axpy(&mut self, alpha: T, rhs: &Self) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("axpy", self.shape(), rhs.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, op: &'static str, rhs: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(op, self.shape(), rhs.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `max(0, x)` elementwise. Negative zero maps to positive zero.
    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        out
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Column index of the row maximum; ties go to the lowest index.
    pub fn argmax_row(&self, i: usize) -> usize {
        let row = self.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        best
    }

    /// Reorders rows so that row `i` of the result is row `perm[i]` of `self`.
    pub fn select_rows(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(perm.len() * self.cols);
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Self {
            rows: perm.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> Result<T> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("max_abs_diff", self.shape(), rhs.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }
}

/// Symmetric matrix in compressed sparse row form.
///
/// Column indices are strictly increasing within each row and the sparsity
/// pattern is symmetric with mirrored values agreeing to `1e-12`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix<T> {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

const SYMMETRY_TOL: f64 = 1e-12;

impl<T: Scalar> SparseSymMatrix<T> {
    /// Empty `dim x dim` matrix.
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            row_ptr: vec![0; dim + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            row_ptr: (0..=dim).collect(),
            col_idx: (0..dim).collect(),
            values: vec![T::one(); dim],
        }
    }

    /// Builds from `(row, col, value)` entries. Duplicates are summed and the
    /// result must be symmetric; both `(i, j)` and `(j, i)` have to be given.
    pub fn from_triplets(dim: usize, entries: &[(usize, usize, T)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, T)> = entries.to_vec();
        for &(i, j, v) in &sorted {
            if i >= dim || j >= dim {
                return Err(Error::Data(format!(
                    "entry ({i}, {j}) outside a {dim}x{dim} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value at ({i}, {j})")));
            }
        }
        sorted.sort_by_key(|&(i, j, _)| (i, j));

        let mut row_ptr = vec![0usize; dim + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            if last == Some((i, j)) {
                let tail = values.last_mut().expect("duplicate follows an entry");
                *tail = *tail + v;
                continue;
            }
            last = Some((i, j));
            row_ptr[i + 1] += 1;
            col_idx.push(j);
            values.push(v);
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        let m = Self {
            dim,
            row_ptr,
            col_idx,
            values,
        };
        m.check_symmetric()?;
        Ok(m)
    }

    /// Keeps the nonzero entries of a square dense matrix.
    pub fn from_dense(dense: &DenseMatrix<T>) -> Result<Self> {
        if dense.rows() != dense.cols() {
            return Err(Error::shape("from_dense", dense.shape(), dense.shape()));
        }
        let n = dense.rows();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = dense.get(i, j);
                if v != T::zero() {
                    entries.push((i, j, v));
                }
            }
        }
        Self::from_triplets(n, &entries)
    }

    fn check_symmetric(&self) -> Result<()> {
        let tol = T::of(SYMMETRY_TOL);
        for i in 0..self.dim {
            for (j, v) in self.row_iter(i) {
                match self.get_entry(j, i) {
                    Some(w) if (v - w).abs() <= tol * T::one().max(v.abs()) => {}
                    Some(_) => {
                        return Err(Error::Data(format!(
                            "values at ({i}, {j}) and ({j}, {i}) differ"
                        )))
                    }
                    None => {
                        return Err(Error::Data(format!(
                            "entry ({i}, {j}) has no mirror ({j}, {i})"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `i`, in increasing column order.
    pub fn row_iter(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    fn get_entry(&self, i: usize, j: usize) -> Option<T> {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .binary_search(&j)
            .ok()
            .map(|k| self.values[span.start + k])
    }

    /// Stored value at `(i, j)`, zero when absent.
    pub fn get(&self, i: usize, j: usize) -> T {
        self.get_entry(i, j).unwrap_or_else(T::zero)
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.dim)
            .map(|i| self.row_iter(i).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for (j, v) in self.row_iter(i) {
                out.set(i, j, v);
            }
        }
        out
    }

    /// Sparse-times-dense product `self * rhs`.
    pub fn spmm(&self, rhs: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if self.dim != rhs.rows() {
            return Err(Error::shape("spmm", (self.dim, self.dim), rhs.shape()));
        }
        let q = rhs.cols();
        let mut out = DenseMatrix::zeros(self.dim, q);
        for i in 0..self.dim {
            let out_row = out.row_mut(i);
            for (k, a) in self.row_iter(i) {
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// Entries strictly above the diagonal, row-major.
    pub fn upper_entries(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.dim).flat_map(move |i| {
            self.row_iter(i)
                .filter(move |&(j, _)| j > i)
                .map(move |(j, v)| (i, j, v))
        })
    }

    /// Relabels nodes: node `perm[i]` of `self` becomes node `i` of the result.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.dim {
            return Err(Error::shape(
                "permute",
                (self.dim, self.dim),
                (perm.len(), 1),
            ));
        }
        let mut inverse = vec![usize::MAX; self.dim];
        for (new, &old) in perm.iter().enumerate() {
            if old >= self.dim || inverse[old] != usize::MAX {
                return Err(Error::Parameter("not a permutation".into()));
            }
            inverse[old] = new;
        }
        let mut entries = Vec::with_capacity(self.nnz());
        for i in 0..self.dim {
            for (j, v) in self.row_iter(i) {
                entries.push((inverse[i], inverse[j], v));
            }
        }
        Self::from_triplets(self.dim, &entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type M = DenseMatrix<f64>;

    fn m(rows: &[&[f64]]) -> M {
        M::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let b = m(&[&[3., 4.], &[5., 6.]]);
        assert_eq!(M::identity(2).matmul(&b).unwrap(), b);
        let c = m(&[&[1., 2.]]).matmul(&m(&[&[3.], &[4.]])).unwrap();
        assert_eq!(c, m(&[&[11.]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = M::zeros(2, 3);
        let err = a.matmul(&a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert_eq!(err.code(), "E_SHAPE");
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = M::from_fn(4, 3, |i, j| (i * 3 + j) as f64 - 5.0);
        let b = M::from_fn(4, 2, |i, j| (i as f64) * 0.5 - j as f64);
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        let c = M::from_fn(5, 3, |i, j| (i + 2 * j) as f64);
        assert_eq!(a.matmul_t(&c).unwrap(), a.matmul(&c.transpose()).unwrap());
    }

    #[test]
    fn sparse_identity_and_permutation() {
        let b = m(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(SparseSymMatrix::identity(2).spmm(&b).unwrap(), b);
        let swap = SparseSymMatrix::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert_eq!(
            swap.spmm(&M::identity(2)).unwrap(),
            m(&[&[0., 1.], &[1., 0.]])
        );
    }

    #[test]
    fn spmm_shape_error() {
        let s = SparseSymMatrix::<f64>::identity(3);
        assert!(matches!(s.spmm(&M::zeros(2, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn asymmetric_triplets_rejected() {
        let err = SparseSymMatrix::from_triplets(2, &[(0, 1, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let err = SparseSymMatrix::from_triplets(2, &[(0, 1, 1.0), (1, 0, 2.0)]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn relu_cases() {
        assert_eq!(m(&[&[-1., 2.]]).relu(), m(&[&[0., 2.]]));
        assert_eq!(M::zeros(2, 2).relu(), M::zeros(2, 2));
        let z = m(&[&[-0.0]]).relu();
        assert!(z.get(0, 0).is_sign_positive());
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(m(&[&[0., 0.]]).softmax_rows(), m(&[&[0.5, 0.5]]));
        assert_eq!(m(&[&[1000., 1000.]]).softmax_rows(), m(&[&[0.5, 0.5]]));
        let s = m(&[&[2., 0.]]).softmax_rows();
        // e^2 / (1 + e^2) evaluated to 12 digits by hand.
        assert!((s.get(0, 0) - 0.880797077978).abs() < 1e-11);
        assert!((s.get(0, 1) - 0.119202922022).abs() < 1e-11);
    }

    #[test]
    fn hadamard_cases() {
        let a = m(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(a.hadamard(&M::filled(2, 2, 1.0)).unwrap(), a);
        assert_eq!(a.hadamard(&M::zeros(2, 2)).unwrap(), M::zeros(2, 2));
        assert_eq!(
            a.hadamard(&m(&[&[0., 1.], &[1., 0.]])).unwrap(),
            m(&[&[0., 2.], &[3., 0.]])
        );
        assert!(a.hadamard(&M::zeros(1, 2)).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(m(&[&[0.5, 0.5]]).argmax_row(0), 0);
        assert_eq!(m(&[&[0.1, 0.7, 0.7]]).argmax_row(0), 1);
    }

    #[test]
    fn generic_over_f32() {
        let a = DenseMatrix::<f32>::from_rows(&[[1.0f32, 2.0]]).unwrap();
        let b = DenseMatrix::<f32>::from_rows(&[[3.0f32], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().get(0, 0), 11.0);
        let s = a.softmax_rows();
        assert!((s.row(0).iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    fn dense_strategy(rows: usize, cols: usize) -> impl Strategy<Value = M> {
        proptest::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |d| M::from_vec(rows, cols, d).unwrap())
    }

    fn sym_strategy() -> impl Strategy<Value = SparseSymMatrix<f64>> {
        (
            1usize..=32,
            prop::sample::select(vec![0.1, 0.5, 1.0]),
            any::<u64>(),
        )
            .prop_map(|(n, density, seed)| {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut entries = Vec::new();
                for i in 0..n {
                    for j in i..n {
                        if rng.random::<f64>() < density {
                            let v = rng.random_range(-2.0..2.0);
                            entries.push((i, j, v));
                            if i != j {
                                entries.push((j, i, v));
                            }
                        }
                    }
                }
                SparseSymMatrix::from_triplets(n, &entries).unwrap()
            })
    }

    proptest! {
        #[test]
        fn spmm_matches_densified_matmul(s in sym_strategy(), q in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = M::from_fn(s.dim(), q, |_, _| rng.random_range(-3.0..3.0));
            let sparse = s.spmm(&b).unwrap();
            let dense = s.to_dense().matmul(&b).unwrap();
            prop_assert!(sparse.max_abs_diff(&dense).unwrap() <= 1e-12);
        }

        #[test]
        fn softmax_rows_normalized_and_shift_invariant(a in dense_strategy(3, 4), c in -50.0f64..50.0) {
            let s = a.softmax_rows();
            for i in 0..3 {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| v > 0.0 && v <= 1.0));
            }
            let shifted = a.map(|v| v + c).softmax_rows();
            prop_assert!(shifted.max_abs_diff(&s).unwrap() <= 1e-12);
        }

        #[test]
        fn matmul_associative(a in dense_strategy(3, 4), b in dense_strategy(4, 2), c in dense_strategy(2, 5)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-9 * scale);
        }

        #[test]
        fn relu_idempotent(a in dense_strategy(4, 4)) {
            let once = a.relu();
            prop_assert_eq!(once.relu(), once);
        }
    }
}
