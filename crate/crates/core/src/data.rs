//! Subject datasets: CSV ingestion, export and a planted-structure generator.
//!
//! Three files describe a dataset, all keyed by subject id in the first
//! column:
//!
//! * features: `subject_id,f_1,...,f_d`, header optional;
//! * metadata: header `subject_id,<name>:<kind>,...` with kind
//!   `categorical` or `continuous`;
//! * labels: `subject_id,class_index`, header optional. Subjects without a
//!   row are unlabeled.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{MetaColumn, MetaKind};
use crate::scalar::Scalar;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub ids: Vec<String>,
    pub features: DenseMatrix<T>,
    pub meta: Vec<MetaColumn>,
    /// Class index per subject, `None` when unlabeled.
    pub classes: Vec<Option<usize>>,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labeled_mask(&self) -> Vec<bool> {
        self.classes.iter().map(Option::is_some).collect()
    }

    /// One-hot label matrix; unlabeled subjects get an all-zero row.
    pub fn one_hot(&self) -> DenseMatrix<T> {
        DenseMatrix::from_fn(self.len(), self.num_classes, |i, k| {
            if self.classes[i] == Some(k) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn column(&self, name: &str) -> Option<&MetaColumn> {
        self.meta.iter().find(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.features.rows() != n || self.classes.len() != n {
            return Err(Error::Data(format!(
                "dataset fields disagree on subject count: {} ids, {} feature rows, {} labels",
                n,
                self.features.rows(),
                self.classes.len()
            )));
        }
        if let Some(c) = self.meta.iter().find(|c| c.len() != n) {
            return Err(Error::Data(format!(
                "metadata column `{}` has {} values for {n} subjects",
                c.name,
                c.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Data(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if let Some(k) = self
            .classes
            .iter()
            .flatten()
            .find(|&&k| k >= self.num_classes)
        {
            return Err(Error::Data(format!("class index {k} out of range")));
        }
        if !self.features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(())
    }
}

fn read_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    reader
        .records()
        .filter(|r| !matches!(r, Ok(rec) if rec.iter().all(str::is_empty)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn parse_number<T: Scalar>(path: &Path, row: usize, col: usize, s: &str) -> Result<T> {
    s.parse::<T>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: row {row}, column {col}: `{s}` is not a finite number",
                path.display()
            ))
        })
}

/// Reads and joins the three dataset files. Row order follows the features file.
pub fn load_dataset<T: Scalar>(
    features_path: &Path,
    meta_path: &Path,
    labels_path: &Path,
) -> Result<Dataset<T>> {
    // Features.
    let records = read_records(features_path)?;
    let skip = usize::from(
        records
            .first()
            .is_some_and(|r| r.iter().skip(1).any(|f| f.parse::<f64>().is_err())),
    );
    let mut ids = Vec::new();
    let mut index = HashMap::new();
    let mut data = Vec::new();
    let mut width = None;
    for (r, rec) in records.iter().enumerate().skip(skip) {
        let row = r + 1;
        let id = rec.get(0).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(Error::Data(format!(
                "{}: row {row}: missing subject id",
                features_path.display()
            )));
        }
        let d = rec.len() - 1;
        if *width.get_or_insert(d) != d {
            return Err(Error::Data(format!(
                "{}: row {row}: expected {} features, found {d}",
                features_path.display(),
                width.unwrap_or(0)
            )));
        }
        for (c, field) in rec.iter().enumerate().skip(1) {
            data.push(parse_number::<T>(features_path, row, c + 1, field)?);
        }
        if index.insert(id.clone(), ids.len()).is_some() {
            return Err(Error::Data(format!(
                "{}: row {row}: duplicate subject id `{id}`",
                features_path.display()
            )));
        }
        ids.push(id);
    }
    let n = ids.len();
    let d = width.unwrap_or(0);
    if n == 0 || d == 0 {
        return Err(Error::Data(format!(
            "{}: no feature rows",
            features_path.display()
        )));
    }
    let features = DenseMatrix::from_vec(n, d, data)?;

    // Metadata.
    let records = read_records(meta_path)?;
    let header = records
        .first()
        .ok_or_else(|| Error::Data(format!("{}: missing header", meta_path.display())))?;
    let mut columns: Vec<(String, MetaKind)> = Vec::new();
    for field in header.iter().skip(1) {
        let (name, kind) = field.rsplit_once(':').ok_or_else(|| {
            Error::Data(format!(
                "{}: header field `{field}` must be `name:kind`",
                meta_path.display()
            ))
        })?;
        columns.push((name.to_string(), kind.parse()?));
    }
    let mut cat: Vec<Vec<String>> = vec![vec![String::new(); n]; columns.len()];
    let mut cont: Vec<Vec<f64>> = vec![vec![0.0; n]; columns.len()];
    let mut seen = HashSet::new();
    for (r, rec) in records.iter().enumerate().skip(1) {
        let row = r + 1;
        let id = rec.get(0).unwrap_or_default();
        let &i = index.get(id).ok_or_else(|| {
            Error::Data(format!(
                "{}: row {row}: subject `{id}` has no feature row",
                meta_path.display()
            ))
        })?;
        if !seen.insert(i) {
            return Err(Error::Data(format!(
                "{}: row {row}: duplicate subject id `{id}`",
                meta_path.display()
            )));
        }
        if rec.len() != columns.len() + 1 {
            return Err(Error::Data(format!(
                "{}: row {row}: expected {} fields, found {}",
                meta_path.display(),
                columns.len() + 1,
                rec.len()
            )));
        }
        for (c, ((_, kind), field)) in columns.iter().zip(rec.iter().skip(1)).enumerate() {
            match kind {
                MetaKind::Categorical => cat[c][i] = field.to_string(),
                MetaKind::Continuous => {
                    cont[c][i] = parse_number::<f64>(meta_path, row, c + 2, field)?
                }
            }
        }
    }
    if seen.len() != n {
        return Err(Error::Data(format!(
            "{}: metadata covers {} of {n} subjects",
            meta_path.display(),
            seen.len()
        )));
    }
    let meta = columns
        .into_iter()
        .enumerate()
        .map(|(c, (name, kind))| match kind {
            MetaKind::Categorical => MetaColumn::categorical(name, std::mem::take(&mut cat[c])),
            MetaKind::Continuous => MetaColumn::continuous(name, std::mem::take(&mut cont[c])),
        })
        .collect();

    // Labels.
    let records = read_records(labels_path)?;
    let skip = usize::from(
        records
            .first()
            .is_some_and(|r| r.get(1).is_none_or(|f| f.parse::<usize>().is_err())),
    );
    let mut classes = vec![None; n];
    for (r, rec) in records.iter().enumerate().skip(skip) {
        let row = r + 1;
        if rec.len() != 2 {
            return Err(Error::Data(format!(
                "{}: row {row}: expected `subject_id,class`",
                labels_path.display()
            )));
        }
        let id = &rec[0];
        let &i = index.get(id).ok_or_else(|| {
            Error::Data(format!(
                "{}: row {row}: subject `{id}` has no feature row",
                labels_path.display()
            ))
        })?;
        let k: usize = rec[1].parse().map_err(|_| {
            Error::Data(format!(
                "{}: row {row}, column 2: `{}` is not a class index",
                labels_path.display(),
                &rec[1]
            ))
        })?;
        if classes[i].replace(k).is_some() {
            return Err(Error::Data(format!(
                "{}: row {row}: duplicate subject id `{id}`",
                labels_path.display()
            )));
        }
    }
    let num_classes = classes.iter().flatten().max().map_or(0, |&k| k + 1);
    let ds = Dataset {
        ids,
        features,
        meta,
        classes,
        num_classes,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `features.csv`, `meta.csv` and `labels.csv` into `dir`. Numbers
/// carry 17 significant digits, so [`load_dataset`] restores them exactly.
pub fn write_dataset<T: Scalar>(ds: &Dataset<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = ds.features.cols();
    let mut features = String::from("subject_id");
    for j in 1..=d {
        features.push_str(&format!(",f{j}"));
    }
    features.push('\n');
    for (i, id) in ds.ids.iter().enumerate() {
        features.push_str(id);
        for &v in ds.features.row(i) {
            features.push_str(&format!(",{:.16e}", v.as_f64()));
        }
        features.push('\n');
    }

    let mut meta = String::from("subject_id");
    for c in &ds.meta {
        meta.push_str(&format!(",{}:{}", c.name, c.kind()));
    }
    meta.push('\n');
    for (i, id) in ds.ids.iter().enumerate() {
        meta.push_str(id);
        for c in &ds.meta {
            meta.push(',');
            meta.push_str(&c.display_value(i));
        }
        meta.push('\n');
    }

    let mut labels = String::from("subject_id,class\n");
    for (id, k) in ds.ids.iter().zip(&ds.classes) {
        if let Some(k) = k {
            labels.push_str(&format!("{id},{k}\n"));
        }
    }
    for (name, body) in [
        ("features.csv", features),
        ("meta.csv", meta),
        ("labels.csv", labels),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Probability that a subject's informative category equals its class.
pub const INFORMATIVE_AGREEMENT: f64 = 0.9;

/// Synthetic binary dataset with one label-correlated metadata column
/// (`informative`, category equals the class with probability 0.9) and one
/// label-independent column (`nuisance`).
///
/// The class means are `±(strength / 2) · p` with `p = (1, -1, 1, -1, ...)`,
/// so they sit `strength` apart on every coordinate; Gaussian noise of
/// standard deviation `noise` is added. The alternating pattern keeps the
/// shift visible to row-centered similarities such as Pearson correlation,
/// which would cancel a shift shared by all coordinates.
pub fn synth_generate<T: Scalar>(
    n: usize,
    d: usize,
    seed: u64,
    strength: f64,
    noise: f64,
) -> Result<(Dataset<T>, MetaColumn, MetaColumn)> {
    if n < 20 || !n.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "subject count must be even and >= 20, got {n}"
        )));
    }
    if d < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 features, got {d}"
        )));
    }
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(Error::Parameter(format!(
            "informative strength must be >= 0, got {strength}"
        )));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Parameter(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    classes.shuffle(&mut rng);

    let category = |c: usize| if c == 0 { "A" } else { "B" }.to_string();
    let informative: Vec<String> = classes
        .iter()
        .map(|&c| {
            if rng.random::<f64>() < INFORMATIVE_AGREEMENT {
                category(c)
            } else {
                category(1 - c)
            }
        })
        .collect();
    let nuisance: Vec<String> = (0..n).map(|_| category(rng.random_range(0..2))).collect();

    let features = DenseMatrix::from_fn(n, d, |i, j| {
        let class_sign = if classes[i] == 1 { 0.5 } else { -0.5 };
        let sign = if j % 2 == 0 { class_sign } else { -class_sign };
        let eps: f64 = rng.sample(StandardNormal);
        T::of(sign * strength + noise * eps)
    });

    let informative = MetaColumn::categorical("informative", informative);
    let nuisance = MetaColumn::categorical("nuisance", nuisance);
    let width = (n - 1).to_string().len();
    let ds = Dataset {
        ids: (0..n).map(|i| format!("s{i:0width$}")).collect(),
        features,
        meta: vec![informative.clone(), nuisance.clone()],
        classes: classes.into_iter().map(Some).collect(),
        num_classes: 2,
    };
    Ok((ds, informative, nuisance))
}
