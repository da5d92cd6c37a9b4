use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlpgcn::cv::stratified_mc_split;
use mlpgcn::data::{load_dataset, synth_generate, write_dataset};
use mlpgcn::experiment::{
    build_graphs, random_grad_check, rank_report, read_history, run_experiment, write_history,
    ArmSpec, ExperimentSpec, GradCheckSpec, OmegaSpec,
};
use mlpgcn::graph::{write_edge_list, AffinityGraph, Similarity, DEFAULT_BETA};
use mlpgcn::model::Checkpoint;
use mlpgcn::trainer::{train, TrainConfig, TrainProblem};
use mlpgcn::{Dataset, Error, Result};

/// Multi-layered parallel graph convolutional networks over metadata graphs.
#[derive(Parser)]
#[command(name = "mlpgcn", version)]
struct Cli {
    /// Seed for the command's randomness (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-structure dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        strength: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
    },
    /// Build the affinity graph of one metadata element and write its edge list.
    BuildGraph {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        element: String,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
        #[arg(long, value_enum, default_value = "pearson")]
        similarity: SimilarityArg,
        /// Output file; defaults to `<out-dir>/<element>.edges`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train once on one stratified split; writes a checkpoint and history.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Graph sources (ignored with --config, which names them per arm).
        #[arg(long, value_delimiter = ',')]
        graphs: Vec<String>,
        /// `trainable` or comma-separated fixed weights.
        #[arg(long)]
        omega: Option<String>,
        /// Arm of the config file to train; defaults to the first.
        #[arg(long)]
        arm: Option<String>,
        /// Which repeat's split to use.
        #[arg(long, default_value_t = 0)]
        repeat: usize,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
    },
    /// Cross-validate every arm of the config file.
    Cv,
    /// Compare analytic gradients with finite differences on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 5e-4)]
        l2: f64,
    },
    /// Summarize ranking weights from training histories.
    RankReport {
        #[arg(required = true)]
        histories: Vec<PathBuf>,
        /// Graph names in branch order; read from `graphs.txt` beside the
        /// history when omitted.
        #[arg(long, value_delimiter = ',')]
        names: Vec<String>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding features.csv, meta.csv and labels.csv.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
}

impl DataArgs {
    fn is_empty(&self) -> bool {
        self.data_dir.is_none()
            && self.features.is_none()
            && self.meta.is_none()
            && self.labels.is_none()
    }

    fn load(&self) -> Result<Dataset> {
        let pick = |explicit: &Option<PathBuf>, file: &str| -> Result<PathBuf> {
            explicit
                .clone()
                .or_else(|| self.data_dir.as_ref().map(|d| d.join(file)))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no path for {file}; pass --data-dir or the file flag"
                    ))
                })
        };
        load_dataset(
            &pick(&self.features, "features.csv")?,
            &pick(&self.meta, "meta.csv")?,
            &pick(&self.labels, "labels.csv")?,
        )
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SimilarityArg {
    Pearson,
    Cosine,
}

impl From<SimilarityArg> for Similarity {
    fn from(s: SimilarityArg) -> Self {
        match s {
            SimilarityArg::Pearson => Similarity::Pearson,
            SimilarityArg::Cosine => Similarity::Cosine,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let io = |e| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    body(&mut w).and_then(|_| w.flush()).map_err(io)
}

fn load_spec(cli: &Cli) -> Result<(ExperimentSpec, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config <file>".into()))?;
    let mut spec = ExperimentSpec::load(path)?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((spec, base))
}

fn parse_omega(s: &str) -> Result<OmegaSpec> {
    if s == "trainable" {
        return Ok(OmegaSpec::Named(s.into()));
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad ranking weight `{t}`")))
        })
        .collect::<Result<_>>()
        .map(OmegaSpec::Fixed)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth {
            n,
            d,
            strength,
            noise,
        } => {
            let (ds, _, _) =
                synth_generate::<f64>(*n, *d, cli.seed.unwrap_or(0), *strength, *noise)?;
            write_dataset(&ds, &cli.out_dir)?;
            println!("wrote {} subjects to {}", ds.len(), cli.out_dir.display());
        }
        Command::BuildGraph {
            data,
            element,
            beta,
            similarity,
            output,
        } => {
            let ds = data.load()?;
            let col = ds
                .column(element)
                .ok_or_else(|| Error::Config(format!("unknown metadata element `{element}`")))?;
            let g = AffinityGraph::from_metadata(col, *beta, &ds.features, (*similarity).into())?;
            let path = output
                .clone()
                .unwrap_or_else(|| cli.out_dir.join(format!("{element}.edges")));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_file(&path, |w| write_edge_list(&g.weights, w))?;
            println!(
                "{}: {} candidate edges, {} weighted edges",
                path.display(),
                g.edges.edge_count(),
                g.weights.upper_entries().count()
            );
        }
        Command::Train {
            data,
            graphs,
            omega,
            arm,
            repeat,
            val_fraction,
        } => {
            let (spec, base, ds) = if cli.config.is_some() {
                let (mut spec, base) = load_spec(cli)?;
                let chosen = match arm {
                    Some(name) => spec
                        .arms
                        .iter()
                        .find(|a| &a.name == name)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("no arm named `{name}`")))?,
                    None => spec.arms[0].clone(),
                };
                let mut config = spec.train_config(&chosen)?;
                if let Some(seed) = cli.seed {
                    config.seed = seed;
                }
                spec.train = config;
                spec.arms = vec![ArmSpec {
                    train: None,
                    ..chosen
                }];
                let ds = if data.is_empty() {
                    spec.dataset(&base)?
                } else {
                    data.load()?
                };
                (spec, base, ds)
            } else {
                if graphs.is_empty() {
                    return Err(Error::Config("pass --graphs or --config".into()));
                }
                let spec = ExperimentSpec {
                    repeats: 1,
                    val_fraction: *val_fraction,
                    seed: cli.seed.unwrap_or(0),
                    similarity: Similarity::default(),
                    data: None,
                    synth: None,
                    train: TrainConfig {
                        seed: cli.seed.unwrap_or(0),
                        ..TrainConfig::default()
                    },
                    beta: Default::default(),
                    arms: vec![ArmSpec {
                        name: "train".into(),
                        graphs: graphs.clone(),
                        omega: omega
                            .as_deref()
                            .map(parse_omega)
                            .transpose()?
                            .unwrap_or_default(),
                        train: None,
                    }],
                };
                spec.validate()?;
                (spec, PathBuf::new(), data.load()?)
            };
            let built = build_graphs(&ds, &spec, &base)?;
            let arm = &spec.arms[0];
            let normalized: Vec<_> = arm.graphs.iter().map(|g| &built[g].normalized).collect();
            let fraction = if cli.config.is_some() {
                spec.val_fraction
            } else {
                *val_fraction
            };
            let plan = stratified_mc_split(&ds.classes, fraction, *repeat, spec.seed)?;
            let (train_mask, val_mask) = plan.masks(ds.len());
            let labels = ds.one_hot();
            let problem = TrainProblem {
                features: &ds.features,
                labels: &labels,
                train_mask: &train_mask,
                val_mask: &val_mask,
            };
            let outcome = train(&problem, &normalized, &spec.train, &arm.omega.to_mode()?)?;
            create_dir(&cli.out_dir)?;
            let checkpoint = Checkpoint {
                params: outcome.params,
                seed: spec.train.seed,
            };
            write_file(&cli.out_dir.join("checkpoint.txt"), |w| checkpoint.write(w))?;
            write_history(&outcome.history, &cli.out_dir.join("history.csv"))?;
            fs::write(cli.out_dir.join("graphs.txt"), arm.graphs.join("\n") + "\n").map_err(
                |e| Error::Io {
                    path: cli.out_dir.join("graphs.txt").display().to_string(),
                    source: e,
                },
            )?;
            let best = &outcome.history.records[outcome.best_epoch - 1];
            println!(
                "best epoch {} of {}: val_loss {:.6} val_acc {:.4}",
                outcome.best_epoch,
                outcome.history.len(),
                best.val_loss,
                best.val_acc
            );
        }
        Command::Cv => {
            let (spec, base) = load_spec(cli)?;
            let ds = spec.dataset::<f64>(&base)?;
            let outcome = run_experiment(&ds, &spec, &base, Some(&cli.out_dir))?;
            for a in &outcome.report.arms {
                print!("{}: acc {:.4} ± {:.4}", a.name, a.mean_acc, a.std_acc);
                if let (Some(m), Some(s)) = (a.mean_auc, a.std_auc) {
                    print!("  auc {m:.4} ± {s:.4}");
                }
                println!();
            }
            for c in &outcome.report.comparisons {
                match (c.t, c.p) {
                    (Some(t), Some(p)) => {
                        println!("{} vs {} ({}): t {t:.4} p {p:.4}", c.a, c.b, c.metric)
                    }
                    _ => println!("{} vs {} ({}): {}", c.a, c.b, c.metric, c.status),
                }
            }
            println!(
                "report written to {}",
                cli.out_dir.join("report.toml").display()
            );
        }
        Command::Gradcheck { seeds, l2 } => {
            let spec = GradCheckSpec {
                l2: *l2,
                ..GradCheckSpec::default()
            };
            let base = cli.seed.unwrap_or(0);
            let mut worst = 0.0f64;
            for s in base..base + seeds {
                let r = random_grad_check(&spec, s)?;
                println!(
                    "seed {s}: max rel error {:.3e} (layers {:.3e}, omega {:.3e}, {} entries)",
                    r.max_rel_error, r.max_rel_error_layers, r.max_rel_error_omega, r.entries
                );
                worst = worst.max(r.max_rel_error);
            }
            println!("max rel error {worst:.3e}");
            if worst.is_nan() || worst >= 1e-5 {
                return Err(Error::Consistency(format!(
                    "gradient check failed: max relative error {worst:.3e} >= 1e-5"
                )));
            }
        }
        Command::RankReport { histories, names } => {
            for path in histories {
                let history = read_history(path)?;
                let names = if names.is_empty() {
                    path.parent()
                        .map(|d| d.join("graphs.txt"))
                        .and_then(|p| fs::read_to_string(p).ok())
                        .map(|s| s.lines().map(str::to_string).collect())
                        .unwrap_or_default()
                } else {
                    names.clone()
                };
                print!(
                    "{}",
                    rank_report(&path.display().to_string(), &history, &names)?
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("E_USAGE: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e
                .to_string()
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
