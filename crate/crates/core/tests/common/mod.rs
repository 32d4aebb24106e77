#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cilseg::experiment::{DataSource, ExperimentSpec, Strategy, TrainConfig};
use cilseg::ingest::{generate_synthetic, SplitDataset, SynthConfig};
use cilseg::losses::{combined, combined_grad, KdMode, LossConfig, OutputVariant};
use cilseg::model::{Inputs, Prediction, SegmenterState, Standardizer, INPUT_DIM};
use cilseg::scenario::ScenarioKind;
use cilseg::{ClassId, ClassTaxonomy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Finite-difference step on parameters.
pub const FD_STEP: f64 = 1e-4;
/// Relative-error tolerance of the gradient check.
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up to
/// round-off compare by absolute error.
pub const FD_FLOOR: f64 = 1e-6;

pub struct GradCase {
    pub name: String,
    pub state: SegmenterState,
    pub inputs: Inputs,
    pub classes: Vec<ClassId>,
    pub prev: Option<Prediction>,
    pub labels: Vec<ClassId>,
    pub cfg: LossConfig,
    pub taxonomy: Option<ClassTaxonomy>,
}

fn random_inputs(rng: &mut ChaCha8Rng, n: usize) -> Inputs {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let rows: Vec<[f64; INPUT_DIM]> = (0..n).map(|_| std::array::from_fn(|_| normal.sample(rng))).collect();
    Inputs::from_rows(&rows).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: &[ClassId]) -> Vec<ClassId> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.15) {
                ClassId::UNLABELED
            } else {
                classes[rng.random_range(0..classes.len())]
            }
        })
        .collect()
}

/// A loss setup over a flat head `[BG, 1..=4]` with a previous model over `[BG, 1, 2]`,
/// or, for the coarse-sum variant, a coarse-to-fine head distilled from the coarse level.
pub fn grad_case(seed: u64, kd_mode: KdMode, variant: OutputVariant, lambda: f64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 7;
    let inputs = random_inputs(&mut rng, n);
    let cfg = LossConfig {
        lambda,
        kd_mode,
        output_variant: variant,
    };
    let (taxonomy, head, classes, prev_classes) = if variant == OutputVariant::CoarseSum {
        let t = ClassTaxonomy::c2f();
        let coarse = t.step(0).unwrap().to_vec();
        let mid = t.step(1).unwrap().to_vec();
        let head: Vec<ClassId> = coarse.iter().chain(&mid).copied().collect();
        (Some(t), head, mid, coarse)
    } else {
        let head: Vec<ClassId> = (0..=4).map(ClassId).collect();
        (None, head.clone(), head, vec![ClassId(0), ClassId(1), ClassId(2)])
    };
    let state = SegmenterState::new(head, Standardizer::identity(), seed).unwrap();
    let prev = (kd_mode != KdMode::None).then(|| {
        let other = SegmenterState::new(prev_classes.clone(), Standardizer::identity(), seed + 1000).unwrap();
        other.forward(&inputs)
    });
    let labels = random_labels(&mut rng, n, &classes);
    GradCase {
        name: format!("{kd_mode:?}/{variant:?}/lambda={lambda}"),
        state,
        inputs,
        classes,
        prev,
        labels,
        cfg,
        taxonomy,
    }
}

pub fn loss_at(case: &GradCase, state: &SegmenterState) -> f64 {
    let pred = state.forward_over(&case.inputs, &case.classes).unwrap();
    combined(&pred, case.prev.as_ref(), &case.labels, &case.cfg, case.taxonomy.as_ref())
        .unwrap()
        .total
}

/// Largest relative error between analytic and central-difference gradients
/// over `samples` randomly chosen parameters.
pub fn max_relative_error(case: &GradCase, samples: usize, seed: u64) -> f64 {
    let (_, grads) = case
        .state
        .gradients(&case.inputs, &case.classes, |pred| {
            let (v, g) = combined_grad(pred, case.prev.as_ref(), &case.labels, &case.cfg, case.taxonomy.as_ref())?;
            Ok((v, v.total, g))
        })
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let sizes: Vec<usize> = grads.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let analytic = grads.tensors()[t][flat];
        let mut plus = case.state.clone();
        plus.params.tensors_mut()[t][flat] += FD_STEP;
        let mut minus = case.state.clone();
        minus.params.tensors_mut()[t][flat] -= FD_STEP;
        let numeric = (loss_at(case, &plus) - loss_at(case, &minus)) / (2.0 * FD_STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

/// Every loss configuration the training loop can produce.
pub fn loss_configs() -> Vec<(KdMode, OutputVariant, f64)> {
    let mut v = vec![(KdMode::None, OutputVariant::Standard, 1.0)];
    for variant in [OutputVariant::Standard, OutputVariant::JoinedUnknowns, OutputVariant::CoarseSum] {
        v.push((KdMode::Output, variant, 1.0));
    }
    v.push((KdMode::FeatureL1, OutputVariant::Standard, 1.0));
    v.push((KdMode::FeatureL2, OutputVariant::Standard, 1.0));
    for lambda in [0.5, 1.0] {
        v.push((KdMode::Both, OutputVariant::Standard, lambda));
        v.push((KdMode::Output, OutputVariant::JoinedUnknowns, lambda));
    }
    v
}

pub fn small_dataset(seed: u64) -> (ClassTaxonomy, SplitDataset) {
    let mut cfg = SynthConfig::new(ClassTaxonomy::synth8(), seed, 24, 60);
    cfg.validation_scans = 8;
    let data = generate_synthetic(&cfg).unwrap();
    (cfg.taxonomy, data)
}

pub fn spec(name: &str, scenario: ScenarioKind, strategy: Strategy, seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        scenario,
        taxonomy: None,
        strategy,
        train: TrainConfig {
            seed,
            ..TrainConfig::default()
        },
        data: DataSource::Synthetic { dir: "unused".into() },
        output: None,
    }
}

/// Every file under `root`, keyed by relative path.
pub fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}
