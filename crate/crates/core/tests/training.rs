use std::path::Path;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlpgcn::cv::{cross_validate, stratified_mc_split, Arm, CvData};
use mlpgcn::data::synth_generate;
use mlpgcn::experiment::{run_experiment, ExperimentSpec};
use mlpgcn::graph::{AffinityGraph, Similarity, DEFAULT_BETA};
use mlpgcn::model::{ModelDims, ModelParams};
use mlpgcn::trainer::{loss, train, OmegaMode, TrainConfig, TrainProblem};
use mlpgcn::{Dataset, Graph, Matrix};

fn synth(seed: u64, noise: f64) -> (Dataset, Graph, Graph) {
    let (ds, inf, nui) = synth_generate(200, 10, seed, 1.0, noise).unwrap();
    let g = |c| {
        AffinityGraph::from_metadata(c, DEFAULT_BETA, &ds.features, Similarity::Pearson).unwrap()
    };
    let (a, b) = (g(&inf), g(&nui));
    (ds, a, b)
}

#[test]
fn separable_synthetic_data_is_learned() {
    for seed in 0..10 {
        let (ds, inf, nui) = synth(seed, 0.5);
        let plan = stratified_mc_split(&ds.classes, 0.1, 0, seed).unwrap();
        let (train_mask, val_mask) = plan.masks(ds.len());
        let labels = ds.one_hot();
        let problem = TrainProblem {
            features: &ds.features,
            labels: &labels,
            train_mask: &train_mask,
            val_mask: &val_mask,
        };
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let out = train(
            &problem,
            &[&inf.normalized, &nui.normalized],
            &config,
            &OmegaMode::Trainable,
        )
        .unwrap();
        let best = &out.history.records[out.best_epoch - 1];
        assert!(best.val_acc >= 0.95, "seed {seed}: {}", best.val_acc);
        assert!(best.train_loss < out.history.records[0].train_loss);
        for r in &out.history.records {
            assert!(best.val_loss <= r.val_loss);
            if r.epoch <= config.omega_warmup_epochs {
                assert_eq!(r.omega, vec![0.5, 0.5]);
            }
        }
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let (ds, inf, nui) = synth(4, 1.0);
    let plan = stratified_mc_split(&ds.classes, 0.2, 1, 9).unwrap();
    let (train_mask, val_mask) = plan.masks(ds.len());
    let labels = ds.one_hot();
    let problem = TrainProblem {
        features: &ds.features,
        labels: &labels,
        train_mask: &train_mask,
        val_mask: &val_mask,
    };
    let config = TrainConfig {
        max_epochs: 60,
        seed: 3,
        ..TrainConfig::default()
    };
    let graphs = [&inf.normalized, &nui.normalized];
    let a = train(&problem, &graphs, &config, &OmegaMode::Trainable).unwrap();
    let b = train(&problem, &graphs, &config, &OmegaMode::Trainable).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    let other = train(
        &problem,
        &graphs,
        &TrainConfig { seed: 4, ..config },
        &OmegaMode::Trainable,
    )
    .unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn identical_arms_give_degenerate_comparison_and_exact_means() {
    let (ds, inf, _) = synth(1, 1.0);
    let labels = ds.one_hot();
    let data = CvData {
        features: &ds.features,
        labels: &labels,
        classes: &ds.classes,
    };
    let config = TrainConfig {
        max_epochs: 40,
        ..TrainConfig::default()
    };
    let arm = |name: &str| Arm {
        name: name.into(),
        graphs: vec![&inf.normalized],
        omega: OmegaMode::Fixed(vec![1.0]),
        config: config.clone(),
    };
    let out = cross_validate(&data, &[arm("a"), arm("b")], 3, 0.1, 5).unwrap();
    let cmp = out.report.comparison("a", "b", "acc").unwrap();
    assert_eq!(cmp.status, "degenerate");
    assert!(cmp.p.is_none());
    for (summary, results) in out.report.arms.iter().zip(&out.results) {
        let mean = results.iter().map(|r| r.accuracy).sum::<f64>() / results.len() as f64;
        assert!((summary.mean_acc - mean).abs() <= 1e-12);
    }
    let single = cross_validate(&data, &[arm("a")], 1, 0.1, 5).unwrap_err();
    assert_eq!(single.code(), "E_PARAM");
}

#[test]
fn fixed_arms_reproduce_baselines() {
    let spec = ExperimentSpec::from_toml(
        r#"
repeats = 2
[synth]
n = 60
d = 6
[train]
max_epochs = 40
[[arm]]
name = "onehot"
graphs = ["informative", "nuisance"]
omega = [1.0, 0.0]
[[arm]]
name = "baseline"
graphs = ["informative"]
omega = [1.0]
"#,
    )
    .unwrap();
    let ds = spec.dataset::<f64>(Path::new(".")).unwrap();
    let out = run_experiment(&ds, &spec, Path::new("."), None).unwrap();
    assert_eq!(out.report.arms[0].acc, out.report.arms[1].acc);
    for (a, b) in out.results[0].iter().zip(&out.results[1]) {
        let va: Vec<f64> = a.history.records.iter().map(|r| r.val_loss).collect();
        let vb: Vec<f64> = b.history.records.iter().map(|r| r.val_loss).collect();
        assert_eq!(va, vb);
    }
}

fn probs_strategy() -> impl Strategy<Value = (Matrix, Matrix, Vec<bool>)> {
    (2usize..12, 2usize..4).prop_flat_map(|(n, k)| {
        (
            proptest::collection::vec(-5.0f64..5.0, n * k),
            proptest::collection::vec(0..k, n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(z, cls, mut mask)| {
                mask[0] = true;
                let probs = Matrix::from_vec(n, k, z).unwrap().softmax_rows();
                let labels = Matrix::from_fn(n, k, |i, c| f64::from(u8::from(cls[i] == c)));
                (probs, labels, mask)
            })
    })
}

proptest! {
    #[test]
    fn loss_nonnegative_and_permutation_invariant((probs, labels, mask) in probs_strategy(), l2 in 0.0f64..1e-2, seed in any::<u64>()) {
        let params = ModelParams::<f64>::zeros(ModelDims { features: 2, hidden: 2, classes: 2, branches: 1 });
        let base = loss(&probs, &labels, &mask, &params, l2).unwrap();
        prop_assert!(base >= 0.0);
        let mut perm: Vec<usize> = (0..probs.rows()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled_mask: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let moved = loss(&probs.select_rows(&perm), &labels.select_rows(&perm), &shuffled_mask, &params, l2).unwrap();
        prop_assert!((moved - base).abs() <= 1e-12 * base.max(1.0));
    }
}
