//! Incremental training driver: runs every step of a scenario with a chosen
//! strategy, evaluates after each step and persists checkpoints, label
//! files, reports and summary tables.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{generate_synthetic, load_synthetic, LabeledCloud, LearningMap, SplitDataset, SynthConfigFile};
use crate::inpaint::{inpaint_step, InpaintConfig, InpaintStats};
use crate::losses::{combined_grad, KdMode, LossConfig, OutputVariant};
use crate::metrics::{per_class_table, progress_table, report, ConfusionMatrix, StepReport, Table};
use crate::model::{AdamConfig, Inputs, Prediction, SegmenterState, Standardizer};
use crate::scenario::{build_step, eval_labels, head_classes, index_scans, output_classes, write_step, ScenarioKind, ScenarioPlan};
use crate::taxonomy::{ClassTaxonomy, CIL_SEQUENCE_GROUPS, CIL_VALIDATION_GROUP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_power: f64,
    /// Scans per update.
    pub batch_size: usize,
    /// Epochs per step = this factor times the number of new classes.
    pub epochs_per_class: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            lr_power: 0.95,
            batch_size: 3,
            epochs_per_class: 2,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.initial_lr, self.lr_power, self.adam.epsilon];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning rate, power and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("moment decay rates must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs_per_class == 0 {
            return Err(Error::Config("batch size and epochs per class must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of epochs for a step introducing `new_classes` classes.
    pub fn epochs(&self, new_classes: usize) -> usize {
        (self.epochs_per_class * new_classes).max(1)
    }
}

/// Polynomial decay: `carry * (1 - t/total)^power`.
///
/// The rate is updated once per epoch, so `t` is the epoch index within the
/// step and `total` the step's epoch count. A step starts from the rate used
/// in the last epoch of the previous step.
pub fn lr_at(cfg: &TrainConfig, t: usize, total: usize, carry: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("schedule length must be positive".into()));
    }
    if t > total {
        return Err(Error::OutOfRange(format!("epoch {t} beyond schedule length {total}")));
    }
    Ok(carry * (1.0 - t as f64 / total as f64).powf(cfg.lr_power))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    FineTune,
    Kd { loss: LossConfig },
    SelfInpaint { inpaint: InpaintConfig },
    KdPlusInpaint { loss: LossConfig, inpaint: InpaintConfig },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FineTune => "fine_tune",
            Self::Kd { .. } => "kd",
            Self::SelfInpaint { .. } => "self_inpaint",
            Self::KdPlusInpaint { .. } => "kd_plus_inpaint",
        }
    }

    /// Parses a strategy name, filling in default loss and thresholds.
    pub fn from_name(name: &str) -> Result<Self> {
        let kd = LossConfig {
            kd_mode: KdMode::Output,
            ..LossConfig::default()
        };
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "fine_tune" | "finetune" | "ft" => Ok(Self::FineTune),
            "kd" => Ok(Self::Kd { loss: kd }),
            "self_inpaint" | "inpaint" => Ok(Self::SelfInpaint {
                inpaint: InpaintConfig::default(),
            }),
            "kd_plus_inpaint" => Ok(Self::KdPlusInpaint {
                loss: kd,
                inpaint: InpaintConfig::default(),
            }),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }

    pub fn loss(&self, k: usize) -> LossConfig {
        match self {
            Self::Kd { loss } | Self::KdPlusInpaint { loss, .. } if k > 0 => *loss,
            _ => LossConfig::default(),
        }
    }

    pub fn inpaint(&self, k: usize) -> Option<InpaintConfig> {
        match self {
            Self::SelfInpaint { inpaint } | Self::KdPlusInpaint { inpaint, .. } if k > 0 => Some(*inpaint),
            _ => None,
        }
    }

    pub fn validate(&self, kind: ScenarioKind) -> Result<()> {
        if let Some(cfg) = self.inpaint(1) {
            cfg.validate()?;
            if !kind.has_background() {
                return Err(Error::Config(format!(
                    "self-inpainting needs background labels, which the {kind} scenario does not produce"
                )));
            }
        }
        let loss = self.loss(1);
        loss.validate()?;
        if loss.uses_output() {
            let coarse = loss.output_variant == OutputVariant::CoarseSum;
            if coarse != kind.is_hierarchical() {
                return Err(Error::Config(format!(
                    "output distillation variant {:?} does not fit the {kind} scenario",
                    loss.output_variant
                )));
            }
            if loss.output_variant == OutputVariant::JoinedUnknowns && !kind.has_background() {
                return Err(Error::Config("joined-unknowns distillation needs background labels".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Directory written by the `synth` command.
    Synthetic { dir: PathBuf },
    /// Generate in memory from a synthetic configuration.
    Generate { config: SynthConfigFile },
    /// SemanticKITTI-style root holding `sequences/`.
    Real {
        root: PathBuf,
        #[serde(default)]
        learning_map: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub scenario: ScenarioKind,
    /// Built-in name or file; defaults to the data source's taxonomy.
    #[serde(default)]
    pub taxonomy: Option<String>,
    pub strategy: Strategy,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes") + "\n"
    }
}

/// Loads the taxonomy and scans named by a spec.
pub fn load_data(spec: &ExperimentSpec) -> Result<(ClassTaxonomy, SplitDataset)> {
    let requested = spec.taxonomy.as_deref().map(ClassTaxonomy::resolve).transpose()?;
    let (taxonomy, dataset) = match &spec.data {
        DataSource::Synthetic { dir } => {
            let (_, t, d) = load_synthetic(dir)?;
            (t, d)
        }
        DataSource::Generate { config } => {
            let cfg = config.resolve()?;
            let d = generate_synthetic(&cfg)?;
            (cfg.taxonomy, d)
        }
        DataSource::Real { root, learning_map } => {
            let t = requested.clone().unwrap_or_else(ClassTaxonomy::cil);
            let map = match learning_map {
                Some(p) => LearningMap::load(p, &t, true)?,
                None => LearningMap::semantic_kitti(&t, true)?,
            };
            let groups: Vec<Vec<String>> = CIL_SEQUENCE_GROUPS
                .iter()
                .map(|g| g.iter().map(|s| s.to_string()).collect())
                .collect();
            let val: Vec<String> = CIL_VALIDATION_GROUP.iter().map(|s| s.to_string()).collect();
            (t, SplitDataset::load_real(root, &groups, &val, &map)?)
        }
    };
    if let Some(r) = requested {
        if r != taxonomy {
            return Err(Error::Config("requested taxonomy differs from the data's taxonomy".into()));
        }
    }
    Ok((taxonomy, dataset))
}

/// One learning-rate value as applied during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the batch losses of that epoch.
    pub mean_loss: f64,
}

pub struct StepOutcome {
    pub state: SegmenterState,
    pub report: StepReport,
    pub lr_log: Vec<LrRecord>,
    /// Rate of the last epoch; the next step starts from it.
    pub final_lr: f64,
}

/// Confusion matrix of a model on held-out scans after step `k`.
pub fn evaluate(
    state: &SegmenterState,
    kind: ScenarioKind,
    taxonomy: &ClassTaxonomy,
    k: usize,
    clouds: &[LabeledCloud],
) -> Result<ConfusionMatrix> {
    let out = output_classes(kind, taxonomy, k)?;
    let mut cm = ConfusionMatrix::for_taxonomy(taxonomy);
    for cloud in clouds {
        let pred = state.forward_over(&state.inputs(cloud)?, &out)?;
        let truth = eval_labels(kind, taxonomy, k, &cloud.labels)?;
        cm.accumulate(&truth, &pred.argmax_labels())?;
    }
    Ok(cm)
}

/// A spec bound to its loaded data.
pub struct Experiment<'a> {
    pub spec: ExperimentSpec,
    pub plan: ScenarioPlan,
    pub dataset: &'a SplitDataset,
}

impl<'a> Experiment<'a> {
    pub fn new(spec: ExperimentSpec, taxonomy: ClassTaxonomy, dataset: &'a SplitDataset) -> Result<Self> {
        spec.train.validate()?;
        spec.strategy.validate(spec.scenario)?;
        if dataset.validation.is_empty() {
            return Err(Error::Data("no held-out scans to evaluate on".into()));
        }
        let plan = ScenarioPlan::new(spec.scenario, taxonomy, dataset)?;
        Ok(Self { spec, plan, dataset })
    }

    fn taxonomy(&self) -> &ClassTaxonomy {
        &self.plan.taxonomy
    }

    fn config_echo(&self, k: usize) -> serde_json::Value {
        serde_json::json!({
            "name": self.spec.name,
            "scenario": self.spec.scenario,
            "strategy": self.spec.strategy,
            "train": self.spec.train,
            "step": k,
        })
    }

    /// Trains and evaluates step `k`, starting from `prev` when `k > 0`.
    pub fn run_step(&self, k: usize, prev: Option<&SegmenterState>, carry: f64) -> Result<StepOutcome> {
        let tax = self.taxonomy();
        let kind = self.spec.scenario;
        let cfg = &self.spec.train;
        let head = head_classes(kind, tax, k)?;
        let mut state = match (k, prev) {
            (0, None) => {
                let scans: Vec<&LabeledCloud> = self
                    .plan
                    .groups
                    .first()
                    .into_iter()
                    .flatten()
                    .filter_map(|id| self.dataset.training_scans().find(|c| &c.id == id))
                    .collect();
                let standardizer = Standardizer::fit(scans)?;
                SegmenterState::new(head.clone(), standardizer, cfg.seed)?
            }
            (0, Some(_)) => return Err(Error::Config("the first step starts from scratch".into())),
            (_, None) => return Err(Error::Config(format!("step {k} needs the previous model"))),
            (_, Some(p)) => {
                let expected = head_classes(kind, tax, k - 1)?;
                if p.class_list != expected {
                    return Err(Error::Config(format!("previous model does not match step {}", k - 1)));
                }
                p.expand_head(&head[expected.len()..])?
            }
        };

        let mut step_data = build_step(&self.plan, k, self.dataset)?;
        let mut stats: Option<InpaintStats> = None;
        if let Some(out) = &self.spec.output {
            write_step(out.join("labels"), &step_data, "")?;
        }
        if let Some(ip) = self.spec.strategy.inpaint(k) {
            let prev = prev.expect("checked above");
            let (data, s) = inpaint_step(&step_data, prev, self.dataset, tax, &ip)?;
            info!("step {k}: inpainted {} of {} background points", s.inpainted, s.candidates);
            if let Some(out) = &self.spec.output {
                write_step(out.join("labels"), &data, ".ip")?;
            }
            step_data = data;
            stats = Some(s);
        }

        let index = index_scans(self.dataset);
        let inputs: Vec<Inputs> = step_data
            .scans
            .iter()
            .map(|s| {
                let cloud = index
                    .get(&s.id)
                    .ok_or_else(|| Error::Data(format!("scan {} is missing", s.id)))?;
                state.inputs(cloud)
            })
            .collect::<Result<_>>()?;

        let loss_cfg = self.spec.strategy.loss(k);
        let out = output_classes(kind, tax, k)?;
        // the previous model is frozen, so its predictions are computed once
        let prev_preds: Option<Vec<Prediction>> = match (loss_cfg.kd_mode, prev) {
            (KdMode::None, _) => None,
            (_, Some(p)) => {
                let prev_out = output_classes(kind, tax, k - 1)?;
                Some(inputs.iter().map(|x| p.forward_over(x, &prev_out)).collect::<Result<_>>()?)
            }
            (_, None) => unreachable!("distillation is off at the first step"),
        };

        let new_classes = tax.step(k)?.len();
        let epochs = cfg.epochs(new_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + k as u64);
        let mut order: Vec<usize> = (0..step_data.scans.len()).collect();
        let mut lr_log = Vec::with_capacity(epochs);
        let mut lr = carry;
        for epoch in 0..epochs {
            lr = lr_at(cfg, epoch, epochs, carry)?;
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let x = Inputs::concat(&batch.iter().map(|&i| &inputs[i]).collect::<Vec<_>>());
                let labels: Vec<_> = batch
                    .iter()
                    .flat_map(|&i| step_data.scans[i].labels.iter().copied())
                    .collect();
                let prev_pred = match &prev_preds {
                    Some(p) => Some(Prediction::concat(&batch.iter().map(|&i| &p[i]).collect::<Vec<_>>())?),
                    None => None,
                };
                let (value, grads) = state.gradients(&x, &out, |pred| {
                    let (v, g) = combined_grad(pred, prev_pred.as_ref(), &labels, &loss_cfg, Some(tax))?;
                    Ok((v, v.total, g))
                })?;
                let SegmenterState { params, optimizer, .. } = &mut state;
                optimizer.step(params, &grads, lr, &cfg.adam);
                if !params.is_finite() {
                    return Err(Error::Numerical(format!("parameters diverged at step {k}, epoch {epoch}")));
                }
                loss_sum += value.total;
                batches += 1;
            }
            let mean_loss = if batches > 0 { loss_sum / batches as f64 } else { 0.0 };
            debug!("step {k} epoch {epoch}: lr {lr:.3e} loss {mean_loss:.5}");
            lr_log.push(LrRecord {
                step: k,
                epoch,
                lr,
                mean_loss,
            });
        }

        let cm = evaluate(&state, kind, tax, k, &self.dataset.validation)?;
        let mut rep = report(&cm, tax, k, kind.is_hierarchical())?;
        rep.inpaint = stats;
        rep.config = self.config_echo(k);
        info!(
            "step {k}: mIoU {} over {} classes",
            crate::metrics::pct(rep.miou),
            rep.classes.len()
        );
        if let Some(out) = &self.spec.output {
            state.save(out.join(format!("step{k}.ckpt.json")))?;
            write_text(&out.join(format!("step{k}_report.json")), &rep.to_json())?;
        }
        Ok(StepOutcome {
            state,
            report: rep,
            lr_log,
            final_lr: lr,
        })
    }

    /// Runs every step in order. Reports of finished steps stay on disk if a
    /// later step fails.
    pub fn run(&self) -> Result<ExperimentResult> {
        if let Some(out) = &self.spec.output {
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            // the echo omits the output path so that reruns elsewhere stay byte-identical
            let echo = ExperimentSpec {
                output: None,
                ..self.spec.clone()
            };
            write_text(&out.join("spec.json"), &echo.to_json())?;
        }
        let mut result = ExperimentResult::default();
        let mut prev: Option<SegmenterState> = None;
        let mut carry = self.spec.train.initial_lr;
        for k in 0..self.plan.num_steps() {
            let outcome = self.run_step(k, prev.as_ref(), carry)?;
            carry = outcome.final_lr;
            result.reports.push(outcome.report);
            result.lr_log.extend(outcome.lr_log);
            if let Some(out) = &self.spec.output {
                write_text(&out.join("run_log.csv"), &lr_log_csv(&result.lr_log))?;
            }
            result.states.push(outcome.state.clone());
            prev = Some(outcome.state);
        }
        if let Some(out) = &self.spec.output {
            let runs = [(self.spec.name.clone(), result.reports.clone())];
            write_tables(out, &runs)?;
        }
        Ok(result)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentResult {
    pub reports: Vec<StepReport>,
    pub lr_log: Vec<LrRecord>,
    /// Model after each step.
    pub states: Vec<SegmenterState>,
}

/// Loads the spec's data and runs all steps.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    let (taxonomy, dataset) = load_data(spec)?;
    Experiment::new(spec.clone(), taxonomy, &dataset)?.run()
}

pub fn lr_log_csv(log: &[LrRecord]) -> String {
    let mut s = String::from("step,epoch,lr,mean_loss\n");
    for r in log {
        s.push_str(&format!("{},{},{:e},{:e}\n", r.step, r.epoch, r.lr, r.mean_loss));
    }
    s
}

/// Progress and per-class tables for a set of runs.
pub fn summary_tables(runs: &[(String, Vec<StepReport>)]) -> (Table, Table) {
    (progress_table(runs), per_class_table(runs))
}

/// Writes `summary.{csv,md,txt}` and `per_class.{csv,md,txt}` into `dir`.
pub fn write_tables(dir: &Path, runs: &[(String, Vec<StepReport>)]) -> Result<()> {
    let (progress, per_class) = summary_tables(runs);
    for (stem, t) in [("summary", &progress), ("per_class", &per_class)] {
        write_text(&dir.join(format!("{stem}.csv")), &t.to_csv())?;
        write_text(&dir.join(format!("{stem}.md")), &t.to_markdown())?;
        write_text(&dir.join(format!("{stem}.txt")), &t.to_text())?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
