//! Experiment specifications, graph assembly and reporting.
//!
//! An experiment file is TOML:
//!
//! ```toml
//! repeats = 10
//! val_fraction = 0.1
//! seed = 7
//! similarity = "pearson"
//!
//! [synth]            # or [data] with features/meta/labels paths
//! n = 200
//! d = 10
//!
//! [train]
//! max_epochs = 150
//!
//! [beta]
//! age = 2.0
//!
//! [[arm]]
//! name = "ranking"
//! graphs = ["informative", "nuisance"]
//! omega = "trainable"
//!
//! [[arm]]
//! name = "mean"
//! graphs = ["informative", "nuisance"]
//! omega = [0.5, 0.5]
//! train = { dropout = 0.0 }
//! ```
//!
//! Graph sources are metadata element names, `random`, or `file:<path>`
//! pointing at an edge list (relative paths resolve against the base
//! directory passed to [`run_experiment`]).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cv::{cross_validate, Arm, CvData, CvOutcome, CvReport};
use crate::data::{load_dataset, synth_generate, Dataset};
use crate::error::{Error, Result};
use crate::graph::{random_graph, read_edge_list, AffinityGraph, Similarity, DEFAULT_BETA};
use crate::model::{init_params, ModelDims};
use crate::scalar::Scalar;
use crate::tensor::DenseMatrix;
use crate::trainer::{grad_check, GradCheck, OmegaMode, TrainConfig, TrainHistory};

/// Density of a `random` source when no other source fixes it.
pub const DEFAULT_RANDOM_DENSITY: f64 = 0.1;

fn default_repeats() -> usize {
    10
}

fn default_val_fraction() -> f64 {
    0.1
}

/// Dataset files on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub features: PathBuf,
    pub meta: PathBuf,
    pub labels: PathBuf,
}

/// Parameters of the planted-structure generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub informative_strength: f64,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 200,
            d: 10,
            seed: 0,
            informative_strength: 1.0,
            noise: 1.0,
        }
    }
}

/// Ranking-weight treatment as written in a spec: `"trainable"` or a list
/// of fixed weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OmegaSpec {
    Named(String),
    Fixed(Vec<f64>),
}

impl Default for OmegaSpec {
    fn default() -> Self {
        OmegaSpec::Named("trainable".into())
    }
}

impl OmegaSpec {
    pub fn to_mode(&self) -> Result<OmegaMode> {
        match self {
            OmegaSpec::Named(s) if s == "trainable" => Ok(OmegaMode::Trainable),
            OmegaSpec::Named(s) => Err(Error::Config(format!(
                "omega must be \"trainable\" or a list of weights, got \"{s}\""
            ))),
            OmegaSpec::Fixed(w) => Ok(OmegaMode::Fixed(w.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    pub graphs: Vec<String>,
    #[serde(default)]
    pub omega: OmegaSpec,
    /// Keys overriding the experiment-wide `[train]` table for this arm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub similarity: Similarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Continuous-element thresholds; elements not listed use the default.
    #[serde(default)]
    pub beta: BTreeMap<String, f64>,
    #[serde(rename = "arm")]
    pub arms: Vec<ArmSpec>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Structural checks that need no dataset.
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::Config("experiment has no [[arm]] entries".into()));
        }
        if self.data.is_some() && self.synth.is_some() {
            return Err(Error::Config(
                "give either [data] or [synth], not both".into(),
            ));
        }
        self.train.validate()?;
        for arm in &self.arms {
            if arm.graphs.is_empty() {
                return Err(Error::Config(format!(
                    "arm `{}` has no graph sources",
                    arm.name
                )));
            }
            if let OmegaMode::Fixed(w) = arm.omega.to_mode()? {
                if w.len() != arm.graphs.len() {
                    return Err(Error::Config(format!(
                        "arm `{}`: {} fixed weights for {} graphs",
                        arm.name,
                        w.len(),
                        arm.graphs.len()
                    )));
                }
            }
            self.train_config(arm)?;
        }
        for (name, &b) in &self.beta {
            if !(b > 0.0) {
                return Err(Error::Config(format!(
                    "beta for `{name}` must be > 0, got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Experiment-wide training settings with the arm's overrides applied.
    pub fn train_config(&self, arm: &ArmSpec) -> Result<TrainConfig> {
        let Some(overrides) = &arm.train else {
            return Ok(self.train.clone());
        };
        let mut table =
            toml::Table::try_from(&self.train).map_err(|e| Error::Config(e.to_string()))?;
        table.extend(overrides.clone());
        let config: TrainConfig = table.try_into().map_err(|e: toml::de::Error| {
            Error::Config(format!("arm `{}`: {}", arm.name, one_line(&e.to_string())))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn beta_for(&self, element: &str) -> f64 {
        self.beta.get(element).copied().unwrap_or(DEFAULT_BETA)
    }

    /// Loads `[data]` (relative to `base`) or generates `[synth]`.
    pub fn dataset<T: Scalar>(&self, base: &Path) -> Result<Dataset<T>> {
        match (&self.data, &self.synth) {
            (Some(files), None) => load_dataset(
                &base.join(&files.features),
                &base.join(&files.meta),
                &base.join(&files.labels),
            ),
            (None, Some(s)) => {
                Ok(synth_generate(s.n, s.d, s.seed, s.informative_strength, s.noise)?.0)
            }
            _ => Err(Error::Config(
                "experiment needs exactly one of [data] or [synth]".into(),
            )),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Builds every distinct graph source used by `spec`, keyed by source string.
///
/// `random` takes the edge density of the first non-random source of the
/// first arm that has one, or [`DEFAULT_RANDOM_DENSITY`].
pub fn build_graphs<T: Scalar>(
    ds: &Dataset<T>,
    spec: &ExperimentSpec,
    base: &Path,
) -> Result<BTreeMap<String, AffinityGraph<T>>> {
    let n = ds.len();
    let mut graphs = BTreeMap::new();
    for source in spec.arms.iter().flat_map(|a| &a.graphs) {
        if source == "random" || graphs.contains_key(source) {
            continue;
        }
        let graph = if let Some(file) = source.strip_prefix("file:") {
            let path = base.join(file);
            let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let w = read_edge_list::<T, _>(BufReader::new(f))?;
            if w.dim() != n {
                return Err(Error::Config(format!(
                    "graph file {} has {} nodes, dataset has {n} subjects",
                    path.display(),
                    w.dim()
                )));
            }
            AffinityGraph::from_weights(w, source.clone())?
        } else {
            let col = ds
                .column(source)
                .ok_or_else(|| Error::Config(format!("unknown metadata element `{source}`")))?;
            AffinityGraph::from_metadata(col, spec.beta_for(source), &ds.features, spec.similarity)?
        };
        graphs.insert(source.clone(), graph);
    }
    if spec
        .arms
        .iter()
        .any(|a| a.graphs.iter().any(|g| g == "random"))
    {
        let density = spec
            .arms
            .iter()
            .flat_map(|a| &a.graphs)
            .find(|g| *g != "random")
            .map(|g| edge_density(&graphs[g]))
            .filter(|&d| d > 0.0)
            .unwrap_or(DEFAULT_RANDOM_DENSITY);
        graphs.insert("random".into(), random_graph(n, density, spec.seed)?);
    }
    Ok(graphs)
}

/// Fraction of node pairs joined by a positive-weight edge.
pub fn edge_density<T: Scalar>(g: &AffinityGraph<T>) -> f64 {
    let n = g.weights.dim();
    if n < 2 {
        return 0.0;
    }
    g.weights.upper_entries().count() as f64 / (n * (n - 1) / 2) as f64
}

/// Report file contents: the spec that produced it followed by the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub report: CvReport,
}

impl ExperimentReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Builds the graphs, cross-validates every arm and, when `out_dir` is
/// given, writes `report.toml` and `<arm>/history_r<k>.csv` per repeat.
pub fn run_experiment<T: Scalar>(
    ds: &Dataset<T>,
    spec: &ExperimentSpec,
    base: &Path,
    out_dir: Option<&Path>,
) -> Result<CvOutcome> {
    spec.validate()?;
    ds.validate()?;
    let graphs = build_graphs(ds, spec, base)?;
    let mut arms = Vec::with_capacity(spec.arms.len());
    for a in &spec.arms {
        arms.push(Arm {
            name: a.name.clone(),
            graphs: a.graphs.iter().map(|g| &graphs[g].normalized).collect(),
            omega: a.omega.to_mode()?,
            config: spec.train_config(a)?,
        });
    }
    let labels = ds.one_hot();
    let data = CvData {
        features: &ds.features,
        labels: &labels,
        classes: &ds.classes,
    };
    let outcome = cross_validate(&data, &arms, spec.repeats, spec.val_fraction, spec.seed)?;
    if let Some(dir) = out_dir {
        write_outputs(spec, &outcome, dir)?;
    }
    Ok(outcome)
}

fn write_outputs(spec: &ExperimentSpec, outcome: &CvOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = ExperimentReport {
        spec: spec.clone(),
        report: outcome.report.clone(),
    };
    let path = dir.join("report.toml");
    fs::write(&path, report.to_toml()?).map_err(|e| Error::io(&path, e))?;
    for (arm, results) in spec.arms.iter().zip(&outcome.results) {
        let arm_dir = dir.join(&arm.name);
        fs::create_dir_all(&arm_dir).map_err(|e| Error::io(&arm_dir, e))?;
        let path = arm_dir.join("graphs.txt");
        fs::write(&path, arm.graphs.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
        for (r, result) in results.iter().enumerate() {
            write_history(&result.history, &arm_dir.join(format!("history_r{r}.csv")))?;
        }
    }
    Ok(())
}

pub fn write_history(history: &TrainHistory, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    history.write_csv(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<TrainHistory> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    TrainHistory::read_csv(BufReader::new(f)).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Ranking weight trajectory of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphRank {
    pub name: String,
    pub final_omega: f64,
    pub min: f64,
    pub max: f64,
}

/// Ranking summary of one training history.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSummary {
    pub label: String,
    pub epochs: usize,
    /// Every weight kept its initial value for the whole run.
    pub fixed: bool,
    pub graphs: Vec<GraphRank>,
    /// Graph indices by decreasing final `|ω|`, ties broken by index.
    pub order: Vec<usize>,
}

impl RankSummary {
    pub fn ranked_names(&self) -> Vec<&str> {
        self.order
            .iter()
            .map(|&m| self.graphs[m].name.as_str())
            .collect()
    }
}

impl fmt::Display for RankSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "history {}", self.label)?;
        writeln!(f, "  epochs {}", self.epochs)?;
        writeln!(
            f,
            "  trajectory {}",
            if self.fixed { "fixed" } else { "learned" }
        )?;
        for g in &self.graphs {
            writeln!(
                f,
                "  graph {} final {:.6e} min {:.6e} max {:.6e}",
                g.name, g.final_omega, g.min, g.max
            )?;
        }
        writeln!(f, "  ranking {}", self.ranked_names().join(" > "))
    }
}

/// Summarizes the ranking weights of a history. Missing or short `names`
/// fall back to `omega_<m>`.
pub fn rank_report(label: &str, history: &TrainHistory, names: &[String]) -> Result<RankSummary> {
    let last = history
        .last()
        .ok_or_else(|| Error::Data(format!("{label}: history has no epochs")))?;
    let m = last.omega.len();
    if m == 0 {
        return Err(Error::Data(format!(
            "{label}: history has no ranking weights"
        )));
    }
    let first = &history.records[0].omega;
    let graphs: Vec<GraphRank> = (0..m)
        .map(|k| {
            let traj = history.records.iter().map(|r| r.omega[k]);
            GraphRank {
                name: names
                    .get(k)
                    .cloned()
                    .unwrap_or_else(|| format!("omega_{}", k + 1)),
                final_omega: last.omega[k],
                min: traj.clone().fold(f64::INFINITY, f64::min),
                max: traj.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let fixed = history.records.iter().all(|r| r.omega == *first);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        graphs[b]
            .final_omega
            .abs()
            .total_cmp(&graphs[a].final_omega.abs())
            .then(a.cmp(&b))
    });
    Ok(RankSummary {
        label: label.to_string(),
        epochs: history.len(),
        fixed,
        graphs,
        order,
    })
}

/// Shape of a random gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSpec {
    pub n: usize,
    pub dims: ModelDims,
    pub l2: f64,
    pub epsilon: f64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        Self {
            n: 12,
            dims: ModelDims {
                features: 5,
                hidden: 4,
                classes: 2,
                branches: 2,
            },
            l2: 5e-4,
            epsilon: 1e-6,
        }
    }
}

/// Gradient check on a random instance: Gaussian features, random labels
/// with some rows left out of the loss, random positive-weight graphs and
/// ranking weights away from `1/M`.
pub fn random_grad_check(spec: &GradCheckSpec, seed: u64) -> Result<GradCheck> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let GradCheckSpec {
        n,
        dims,
        l2,
        epsilon,
    } = *spec;
    dims.validate()?;
    if n < 2 {
        return Err(Error::Parameter(format!(
            "gradient check needs at least 2 nodes, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DenseMatrix::<f64>::from_fn(n, dims.features, |_, _| rng.sample(StandardNormal));
    let labels = DenseMatrix::<f64>::from_fn(n, dims.classes, |i, k| {
        f64::from(u8::from(i % dims.classes == k))
    });
    let mask: Vec<bool> = (0..n).map(|i| i % 4 != 3).collect();
    let mut normalized = Vec::with_capacity(dims.branches);
    for m in 0..dims.branches {
        let g = random_graph::<f64>(n, 0.4, seed.wrapping_mul(31).wrapping_add(m as u64))?;
        let mut entries = Vec::new();
        for (i, j, _) in g.weights.upper_entries() {
            let w: f64 = rng.random_range(0.1..1.0);
            entries.push((i, j, w));
            entries.push((j, i, w));
        }
        let w = crate::tensor::SparseSymMatrix::from_triplets(n, &entries)?;
        normalized.push(crate::graph::normalize(&w)?);
    }
    let graphs: Vec<_> = normalized.iter().collect();
    let mut params = init_params::<f64>(dims, seed)?;
    for w in &mut params.omega {
        *w += rng.random_range(-0.3..0.3);
    }
    grad_check(&x, &labels, &mask, &graphs, &params, l2, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::EpochRecord;

    const SPEC: &str = r#"
repeats = 2
seed = 3

[synth]
n = 40
d = 6

[train]
max_epochs = 20

[[arm]]
name = "ranking"
graphs = ["informative", "nuisance"]

[[arm]]
name = "mean"
graphs = ["informative", "nuisance"]
omega = [0.5, 0.5]
train = { dropout = 0.0 }

[[arm]]
name = "noise"
graphs = ["random"]
omega = [1.0]
"#;

    #[test]
    fn spec_parses_with_overrides() {
        let spec = ExperimentSpec::from_toml(SPEC).unwrap();
        assert_eq!(spec.val_fraction, 0.1);
        assert_eq!(spec.arms[0].omega.to_mode().unwrap(), OmegaMode::Trainable);
        let mean = spec.train_config(&spec.arms[1]).unwrap();
        assert_eq!(mean.dropout, 0.0);
        assert_eq!(mean.max_epochs, 20);
        assert_eq!(spec.train_config(&spec.arms[0]).unwrap().dropout, 0.3);
        let again = ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn spec_rejects_bad_input() {
        let bad_len = SPEC.replace("omega = [0.5, 0.5]", "omega = [0.5]");
        assert_eq!(
            ExperimentSpec::from_toml(&bad_len).unwrap_err().code(),
            "E_CONFIG"
        );
        let bad_key = SPEC.replace("max_epochs = 20", "max_epoch = 20");
        assert_eq!(
            ExperimentSpec::from_toml(&bad_key).unwrap_err().code(),
            "E_CONFIG"
        );
        let bad_mode = SPEC.replace("omega = [1.0]", "omega = \"learned\"");
        assert_eq!(
            ExperimentSpec::from_toml(&bad_mode).unwrap_err().code(),
            "E_CONFIG"
        );
    }

    #[test]
    fn unknown_element_is_config_error() {
        let mut spec = ExperimentSpec::from_toml(SPEC).unwrap();
        spec.arms[0].graphs[1] = "site".into();
        let ds = spec.dataset::<f64>(Path::new(".")).unwrap();
        let err = run_experiment(&ds, &spec, Path::new("."), None).unwrap_err();
        assert_eq!(err.code(), "E_CONFIG");
        assert!(err.to_string().contains("site"));
    }

    #[test]
    fn random_source_matches_reference_density() {
        let spec = ExperimentSpec::from_toml(SPEC).unwrap();
        let ds = spec.dataset::<f64>(Path::new(".")).unwrap();
        let graphs = build_graphs(&ds, &spec, Path::new(".")).unwrap();
        let target = edge_density(&graphs["informative"]);
        let got = edge_density(&graphs["random"]);
        // Binomial standard deviation over 780 pairs is at most 0.018.
        assert!((got - target).abs() < 0.08, "{got} vs {target}");
    }

    #[test]
    fn writes_report_and_histories() {
        let spec = ExperimentSpec::from_toml(SPEC).unwrap();
        let ds = spec.dataset::<f64>(Path::new(".")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&ds, &spec, Path::new("."), Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join("report.toml")).unwrap();
        let parsed: ExperimentReport = toml::from_str(&text).unwrap();
        assert_eq!(parsed.spec, spec);
        assert_eq!(parsed.report, out.report);
        let h = read_history(&dir.path().join("mean/history_r1.csv")).unwrap();
        assert_eq!(h, out.results[1][1].history);
        let s = rank_report("mean", &h, &spec.arms[1].graphs).unwrap();
        assert!(s.fixed);
        assert_eq!(s.graphs[0].final_omega, 0.5);
    }

    fn history(traj: &[[f64; 2]]) -> TrainHistory {
        TrainHistory {
            records: traj
                .iter()
                .enumerate()
                .map(|(e, w)| EpochRecord {
                    epoch: e + 1,
                    train_loss: 1.0,
                    val_loss: 1.0,
                    val_acc: 0.5,
                    omega: w.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn rank_orders_by_magnitude() {
        let h = history(&[[0.5, 0.5], [0.4, -0.7], [0.3, -0.9]]);
        let s = rank_report("h", &h, &["a".into()]).unwrap();
        assert!(!s.fixed);
        assert_eq!(s.ranked_names(), vec!["omega_2", "a"]);
        assert_eq!((s.graphs[1].min, s.graphs[1].max), (-0.9, 0.5));
        assert!(s.to_string().contains("ranking omega_2 > a"));
    }

    #[test]
    fn single_graph_rank_is_trivial() {
        let h = TrainHistory {
            records: history(&[[1.0, 0.0]; 3])
                .records
                .into_iter()
                .map(|mut r| {
                    r.omega.truncate(1);
                    r
                })
                .collect(),
        };
        let s = rank_report("h", &h, &["only".into()]).unwrap();
        assert_eq!(s.order, vec![0]);
        assert!(s.fixed);
    }

    #[test]
    fn empty_history_is_data_error() {
        let err = rank_report("h", &TrainHistory::default(), &[]).unwrap_err();
        assert_eq!(err.code(), "E_DATA");
    }

    #[test]
    fn default_grad_check_passes() {
        let r = random_grad_check(&GradCheckSpec::default(), 0).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert_eq!(r.entries, 2 * (5 * 4 + 4 * 2) + 2);
    }
}
