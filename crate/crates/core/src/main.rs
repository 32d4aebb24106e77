//! `cilseg` command line: synthesize data, plan scenarios, train, evaluate
//! and tabulate results.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cilseg::experiment::{
    evaluate, load_data, run_experiment, summary_tables, write_tables, DataSource, ExperimentSpec, Strategy, TrainConfig,
};
use cilseg::ingest::{generate_synthetic, write_synthetic, SynthConfig, SynthConfigFile};
use cilseg::inpaint::InpaintConfig;
use cilseg::losses::{KdMode, LossConfig};
use cilseg::metrics::{report, StepReport};
use cilseg::model::SegmenterState;
use cilseg::scenario::{build_step, summarize_plan, write_step, ScenarioKind, ScenarioPlan};
use cilseg::{Error, Result};

#[derive(Parser)]
#[command(name = "cilseg", version, about = "Class-incremental point-cloud segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Write per-step label files and print the class distribution per step.
    Plan(PlanArgs),
    /// Run an incremental experiment.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out scans.
    Eval(EvalArgs),
    /// Tabulate step reports from one or more run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Synthetic dataset directory written by `synth`.
    #[arg(long, conflicts_with = "real")]
    data: Option<PathBuf>,
    /// Root of a SemanticKITTI-style dataset.
    #[arg(long)]
    real: Option<PathBuf>,
    /// Taxonomy name (cil, c2f, synth8) or JSON file.
    #[arg(long)]
    taxonomy: Option<String>,
}

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        match (&self.data, &self.real) {
            (Some(dir), None) => Ok(DataSource::Synthetic { dir: dir.clone() }),
            (None, Some(root)) => Ok(DataSource::Real {
                root: root.clone(),
                learning_map: None,
            }),
            _ => Err(Error::Config("pass exactly one of --data or --real".into())),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthetic configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    taxonomy: Option<String>,
    #[arg(long)]
    scans_per_group: Option<usize>,
    #[arg(long)]
    points_per_scan: Option<usize>,
    #[arg(long)]
    validation_scans: Option<usize>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    scenario: ScenarioKind,
    /// Directory for step manifests and label files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment specification (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// fine_tune, kd, self_inpaint or kd_plus_inpaint.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    scenario: Option<ScenarioKind>,
    #[arg(long)]
    taxonomy: Option<String>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// none, output, feature_l1, feature_l2 or both.
    #[arg(long)]
    kd_mode: Option<KdMode>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    scenario: ScenarioKind,
    /// Step the checkpoint was trained for.
    #[arg(long)]
    step: usize,
    /// Write the report JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories holding step<k>_report.json files.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Directory for CSV, markdown and text tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Plan(a) => plan(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => tabulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut file = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SynthConfigFile>(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?
        }
        None => SynthConfigFile {
            seed: 0,
            scans_per_group: 200,
            validation_scans: None,
            points_per_scan: 250,
            taxonomy: "synth8".into(),
            class_mix: None,
            primitives: Default::default(),
            skew: None,
        },
    };
    if let Some(s) = a.seed {
        file.seed = s;
    }
    if let Some(t) = a.taxonomy {
        file.taxonomy = t;
    }
    if let Some(n) = a.scans_per_group {
        file.scans_per_group = n;
    }
    if let Some(n) = a.points_per_scan {
        file.points_per_scan = n;
    }
    if a.validation_scans.is_some() {
        file.validation_scans = a.validation_scans;
    }
    let cfg: SynthConfig = file.resolve()?;
    let dataset = generate_synthetic(&cfg)?;
    let echo = serde_json::to_value(&file).expect("config serializes");
    let manifest = write_synthetic(&dataset, &cfg, echo, &a.out)?;
    println!(
        "wrote {} training groups ({} scans) and {} held-out scans to {}",
        manifest.groups.len(),
        manifest.groups.iter().map(Vec::len).sum::<usize>(),
        manifest.validation.len(),
        a.out.display()
    );
    Ok(())
}

fn probe_spec(data: &DataArgs, scenario: ScenarioKind) -> Result<ExperimentSpec> {
    Ok(ExperimentSpec {
        name: "plan".into(),
        scenario,
        taxonomy: data.taxonomy.clone(),
        strategy: Strategy::FineTune,
        train: TrainConfig::default(),
        data: data.source()?,
        output: None,
    })
}

fn plan(a: PlanArgs) -> Result<()> {
    let spec = probe_spec(&a.data, a.scenario)?;
    let (taxonomy, dataset) = load_data(&spec)?;
    let plan = ScenarioPlan::new(a.scenario, taxonomy, &dataset)?;
    for k in 0..plan.num_steps() {
        write_step(&a.out, &build_step(&plan, k, &dataset)?, "")?;
    }
    let table = summarize_plan(&plan, &dataset)?.table(&plan.taxonomy);
    fs::write(a.out.join("plan_summary.csv"), table.to_csv()).map_err(|e| Error::io(&a.out, e))?;
    print!("{}", table.to_text());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut spec = ExperimentSpec::load(&a.spec)?;
    if let Some(s) = a.seed {
        spec.train.seed = s;
    }
    if let Some(o) = a.out {
        spec.output = Some(o);
    }
    if let Some(s) = a.scenario {
        spec.scenario = s;
    }
    if let Some(t) = a.taxonomy {
        spec.taxonomy = Some(t);
    }
    if let Some(s) = &a.strategy {
        spec.strategy = Strategy::from_name(s)?;
    }
    override_strategy(&mut spec.strategy, a.lambda, a.kd_mode, a.tau1, a.tau2)?;
    if spec.output.is_none() {
        return Err(Error::Config("no output directory: set \"output\" in the spec or pass --out".into()));
    }
    let result = run_experiment(&spec)?;
    let runs = [(spec.name.clone(), result.reports)];
    print!("{}", summary_tables(&runs).0.to_text());
    Ok(())
}

fn override_strategy(
    strategy: &mut Strategy,
    lambda: Option<f64>,
    kd_mode: Option<KdMode>,
    tau1: Option<f64>,
    tau2: Option<f64>,
) -> Result<()> {
    let edit_loss = |loss: &mut LossConfig| {
        if let Some(l) = lambda {
            loss.lambda = l;
        }
        if let Some(m) = kd_mode {
            loss.kd_mode = m;
        }
    };
    let edit_inpaint = |ip: &mut InpaintConfig| {
        if let Some(t) = tau1 {
            ip.tau1 = t;
        }
        if let Some(t) = tau2 {
            ip.tau2 = t;
        }
    };
    let wants_loss = lambda.is_some() || kd_mode.is_some();
    let wants_inpaint = tau1.is_some() || tau2.is_some();
    match strategy {
        Strategy::Kd { loss } => edit_loss(loss),
        Strategy::SelfInpaint { inpaint } => edit_inpaint(inpaint),
        Strategy::KdPlusInpaint { loss, inpaint } => {
            edit_loss(loss);
            edit_inpaint(inpaint);
        }
        Strategy::FineTune => {}
    }
    let has_loss = matches!(strategy, Strategy::Kd { .. } | Strategy::KdPlusInpaint { .. });
    let has_inpaint = matches!(strategy, Strategy::SelfInpaint { .. } | Strategy::KdPlusInpaint { .. });
    if (wants_loss && !has_loss) || (wants_inpaint && !has_inpaint) {
        return Err(Error::Config(format!("flags do not apply to the {} strategy", strategy.name())));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let spec = probe_spec(&a.data, a.scenario)?;
    let (taxonomy, dataset) = load_data(&spec)?;
    let state = SegmenterState::load(&a.checkpoint)?;
    let cm = evaluate(&state, a.scenario, &taxonomy, a.step, &dataset.validation)?;
    let mut rep = report(&cm, &taxonomy, a.step, a.scenario.is_hierarchical())?;
    rep.config = serde_json::json!({
        "checkpoint": a.checkpoint,
        "scenario": a.scenario,
        "step": a.step,
    });
    match a.out {
        Some(p) => fs::write(&p, rep.to_json()).map_err(|e| Error::io(&p, e))?,
        None => print!("{}", rep.to_json()),
    }
    Ok(())
}

fn load_reports(dir: &Path) -> Result<Vec<StepReport>> {
    let mut reports = Vec::new();
    for k in 0.. {
        let p = dir.join(format!("step{k}_report.json"));
        if !p.exists() {
            break;
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        reports.push(StepReport::from_json(&text)?);
    }
    if reports.is_empty() {
        return Err(Error::Data(format!("no step reports in {}", dir.display())));
    }
    Ok(reports)
}

fn tabulate(a: ReportArgs) -> Result<()> {
    let runs = a
        .runs
        .iter()
        .map(|d| {
            let name = d
                .file_name()
                .map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, load_reports(d)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (progress, per_class) = summary_tables(&runs);
    print!("{}\n{}", progress.to_text(), per_class.to_text());
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_tables(out, &runs)?;
    }
    Ok(())
}
