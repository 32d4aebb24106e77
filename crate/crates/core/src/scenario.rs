//! Incremental learning scenarios: which scans each step sees and how their
//! ground truth is rewritten.
//!
//! Classes of future steps become [`ClassId::UNLABELED`] in every kind except
//! overlapped, so they neither train nor score; the geometry stays in place.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_labels, LabeledCloud, ScanId, SplitDataset};
use crate::metrics::Table;
use crate::taxonomy::{ClassId, ClassTaxonomy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Sequential,
    SequentialMasked,
    Disjoint,
    Overlapped,
    CoarseToFine,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        Self::Sequential,
        Self::SequentialMasked,
        Self::Disjoint,
        Self::Overlapped,
        Self::CoarseToFine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sequential => "sequential",
            Self::SequentialMasked => "sequential_masked",
            Self::Disjoint => "disjoint",
            Self::Overlapped => "overlapped",
            Self::CoarseToFine => "coarse_to_fine",
        }
    }

    /// Whether step labels contain the background class.
    pub fn has_background(self) -> bool {
        matches!(self, Self::Disjoint | Self::Overlapped)
    }

    pub fn is_hierarchical(self) -> bool {
        self == Self::CoarseToFine
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match key.as_str() {
            "sequential" => Self::Sequential,
            "sequential_masked" | "masked" => Self::SequentialMasked,
            "disjoint" => Self::Disjoint,
            "overlapped" => Self::Overlapped,
            "coarse_to_fine" | "c2f" => Self::CoarseToFine,
            _ => return Err(Error::Config(format!("unknown scenario {s:?}"))),
        })
    }
}

fn require_hierarchy(taxonomy: &ClassTaxonomy) -> Result<()> {
    if taxonomy.num_levels() != taxonomy.num_steps() {
        return Err(Error::Unsupported(format!(
            "coarse-to-fine needs a hierarchy with {} levels, taxonomy has {}",
            taxonomy.num_steps(),
            taxonomy.num_levels()
        )));
    }
    Ok(())
}

fn check_step(taxonomy: &ClassTaxonomy, k: usize) -> Result<()> {
    if k >= taxonomy.num_steps() {
        return Err(Error::OutOfRange(format!("step {k} of {}", taxonomy.num_steps())));
    }
    Ok(())
}

/// Rewrites ground-truth labels for step `k` of a scenario.
pub fn transform_labels(kind: ScenarioKind, taxonomy: &ClassTaxonomy, k: usize, truth: &[ClassId]) -> Result<Vec<ClassId>> {
    check_step(taxonomy, k)?;
    if kind.is_hierarchical() {
        require_hierarchy(taxonomy)?;
    }
    truth
        .iter()
        .map(|&c| {
            if c.is_sentinel() {
                return Err(Error::InvalidClass(format!("sentinel {c} in ground truth")));
            }
            if kind.is_hierarchical() {
                return taxonomy.ancestor(c, k);
            }
            let step = taxonomy
                .step_of(c)
                .ok_or_else(|| Error::InvalidClass(format!("id {c}")))?;
            Ok(match kind {
                ScenarioKind::Sequential if step <= k => c,
                ScenarioKind::Sequential => ClassId::UNLABELED,
                _ if step == k => c,
                ScenarioKind::SequentialMasked => ClassId::UNLABELED,
                ScenarioKind::Disjoint if step < k => ClassId::BACKGROUND,
                ScenarioKind::Disjoint => ClassId::UNLABELED,
                ScenarioKind::Overlapped => ClassId::BACKGROUND,
                ScenarioKind::CoarseToFine => unreachable!("handled above"),
            })
        })
        .collect()
}

/// Label values present in step-`k` training data.
pub fn active_classes(kind: ScenarioKind, taxonomy: &ClassTaxonomy, k: usize) -> Result<Vec<ClassId>> {
    check_step(taxonomy, k)?;
    let mut set: Vec<ClassId> = match kind {
        ScenarioKind::Sequential => taxonomy.cumulative_classes(k)?.into_iter().collect(),
        ScenarioKind::SequentialMasked | ScenarioKind::CoarseToFine => taxonomy.step(k)?.to_vec(),
        ScenarioKind::Disjoint | ScenarioKind::Overlapped => {
            let mut v = vec![ClassId::BACKGROUND];
            v.extend_from_slice(taxonomy.step(k)?);
            v
        }
    };
    set.sort();
    Ok(set)
}

/// Classes the step-`k` model predicts among.
pub fn output_classes(kind: ScenarioKind, taxonomy: &ClassTaxonomy, k: usize) -> Result<Vec<ClassId>> {
    check_step(taxonomy, k)?;
    if kind.is_hierarchical() {
        return Ok(taxonomy.step(k)?.to_vec());
    }
    head_classes(kind, taxonomy, k)
}

/// Append-only head order after step `k`: background first when the
/// scenario uses it, then each step's classes in id order.
pub fn head_classes(kind: ScenarioKind, taxonomy: &ClassTaxonomy, k: usize) -> Result<Vec<ClassId>> {
    check_step(taxonomy, k)?;
    let mut out = Vec::new();
    if kind.has_background() {
        out.push(ClassId::BACKGROUND);
    }
    for j in 0..=k {
        out.extend_from_slice(taxonomy.step(j)?);
    }
    Ok(out)
}

/// Ground truth as scored after step `k`: classes not yet learned are
/// unlabeled; coarse-to-fine scores at level `k`.
pub fn eval_labels(kind: ScenarioKind, taxonomy: &ClassTaxonomy, k: usize, truth: &[ClassId]) -> Result<Vec<ClassId>> {
    if kind.is_hierarchical() {
        return transform_labels(kind, taxonomy, k, truth);
    }
    let learned = taxonomy.cumulative_classes(k)?;
    Ok(truth
        .iter()
        .map(|c| if learned.contains(c) { *c } else { ClassId::UNLABELED })
        .collect())
}

/// Resolved assignment of scans to steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioPlan {
    pub kind: ScenarioKind,
    pub taxonomy: ClassTaxonomy,
    pub groups: Vec<Vec<ScanId>>,
}

impl ScenarioPlan {
    /// Assigns dataset group `k` to step `k`; overlapped steps instead take
    /// every training scan holding at least one point of the step's classes.
    pub fn new(kind: ScenarioKind, taxonomy: ClassTaxonomy, dataset: &SplitDataset) -> Result<Self> {
        let steps = taxonomy.num_steps();
        if kind.is_hierarchical() {
            require_hierarchy(&taxonomy)?;
        }
        if dataset.groups.len() != steps {
            return Err(Error::Config(format!(
                "{} data groups for a {steps}-step taxonomy",
                dataset.groups.len()
            )));
        }
        let groups = if kind == ScenarioKind::Overlapped {
            let mut all: Vec<&LabeledCloud> = dataset.training_scans().collect();
            all.sort_by(|a, b| a.id.cmp(&b.id));
            taxonomy
                .steps()
                .iter()
                .map(|step| {
                    all.iter()
                        .filter(|c| c.labels.iter().any(|l| step.binary_search(l).is_ok()))
                        .map(|c| c.id.clone())
                        .collect()
                })
                .collect()
        } else {
            let groups: Vec<Vec<ScanId>> = dataset
                .groups
                .iter()
                .map(|g| g.iter().map(|c| c.id.clone()).collect())
                .collect();
            let mut seen = BTreeSet::new();
            for id in groups.iter().flatten() {
                if !seen.insert(id) {
                    return Err(Error::Data(format!("scan {id} belongs to more than one group")));
                }
            }
            groups
        };
        Ok(Self { kind, taxonomy, groups })
    }

    pub fn num_steps(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepScan {
    pub id: ScanId,
    pub labels: Vec<ClassId>,
}

/// Training set of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDataset {
    pub step: usize,
    pub scans: Vec<StepScan>,
    pub active_classes: Vec<ClassId>,
}

impl StepDataset {
    pub fn num_points(&self) -> usize {
        self.scans.iter().map(|s| s.labels.len()).sum()
    }
}

/// Index of training scans by id.
pub fn index_scans(dataset: &SplitDataset) -> HashMap<&ScanId, &LabeledCloud> {
    dataset.training_scans().map(|c| (&c.id, c)).collect()
}

pub fn build_step(plan: &ScenarioPlan, k: usize, dataset: &SplitDataset) -> Result<StepDataset> {
    let group = plan
        .groups
        .get(k)
        .ok_or_else(|| Error::OutOfRange(format!("step {k} of {}", plan.num_steps())))?;
    let index = index_scans(dataset);
    let scans = group
        .iter()
        .map(|id| {
            let cloud = index
                .get(id)
                .ok_or_else(|| Error::Data(format!("scan {id} referenced by the plan is missing")))?;
            Ok(StepScan {
                id: id.clone(),
                labels: transform_labels(plan.kind, &plan.taxonomy, k, &cloud.labels)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(StepDataset {
        step: k,
        scans,
        active_classes: active_classes(plan.kind, &plan.taxonomy, k)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub scans: usize,
    pub points: usize,
    pub labeled_pct: f64,
    /// Counts of each transformed label value.
    pub class_counts: BTreeMap<ClassId, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub steps: Vec<StepSummary>,
    /// Per ground-truth class, the share of its points falling in each data group.
    pub class_histogram: BTreeMap<ClassId, Vec<f64>>,
}

pub fn summarize_plan(plan: &ScenarioPlan, dataset: &SplitDataset) -> Result<PlanSummary> {
    let steps = (0..plan.num_steps())
        .map(|k| {
            let step = build_step(plan, k, dataset)?;
            let mut class_counts = BTreeMap::new();
            let mut labeled = 0usize;
            for l in step.scans.iter().flat_map(|s| &s.labels) {
                *class_counts.entry(*l).or_insert(0u64) += 1;
                if *l != ClassId::UNLABELED {
                    labeled += 1;
                }
            }
            let points = step.num_points();
            Ok(StepSummary {
                step: k,
                scans: step.scans.len(),
                points,
                labeled_pct: if points > 0 { 100.0 * labeled as f64 / points as f64 } else { 0.0 },
                class_counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let groups = dataset.groups.len();
    let mut raw: BTreeMap<ClassId, Vec<u64>> = BTreeMap::new();
    for (g, group) in dataset.groups.iter().enumerate() {
        for l in group.iter().flat_map(|c| &c.labels) {
            raw.entry(*l).or_insert_with(|| vec![0; groups])[g] += 1;
        }
    }
    let class_histogram = raw
        .into_iter()
        .map(|(c, counts)| {
            let total: u64 = counts.iter().sum();
            (c, counts.iter().map(|&n| n as f64 / total as f64).collect())
        })
        .collect();
    Ok(PlanSummary { steps, class_histogram })
}

impl PlanSummary {
    pub fn table(&self, taxonomy: &ClassTaxonomy) -> Table {
        let mut labels: BTreeSet<ClassId> = BTreeSet::new();
        for s in &self.steps {
            labels.extend(s.class_counts.keys().copied());
        }
        let mut header: Vec<String> = ["step", "scans", "points", "% labeled"].map(String::from).to_vec();
        header.extend(labels.iter().map(|&c| taxonomy.name(c).unwrap_or("?").to_string()));
        let rows = self
            .steps
            .iter()
            .map(|s| {
                let mut row = vec![
                    s.step.to_string(),
                    s.scans.to_string(),
                    s.points.to_string(),
                    format!("{:.2}", s.labeled_pct),
                ];
                row.extend(labels.iter().map(|c| s.class_counts.get(c).copied().unwrap_or(0).to_string()));
                row
            })
            .collect();
        Table { header, rows }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StepManifest {
    pub step: usize,
    pub active_classes: Vec<ClassId>,
    pub scans: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: ScanId,
    pub labels: String,
}

/// Writes `step<k>.json` and the transformed labels under `step<k>/labels/`.
/// `suffix` is appended to label file names (`.ip` for inpainted labels).
pub fn write_step(dir: impl AsRef<Path>, step: &StepDataset, suffix: &str) -> Result<()> {
    let dir = dir.as_ref();
    let mut scans = Vec::with_capacity(step.scans.len());
    for s in &step.scans {
        let rel = format!("step{}/labels/{}.label{suffix}", step.step, s.id.stem());
        write_labels(dir.join(&rel), &s.labels)?;
        scans.push(ManifestEntry {
            id: s.id.clone(),
            labels: rel,
        });
    }
    let manifest = StepManifest {
        step: step.step,
        active_classes: step.active_classes.clone(),
        scans,
    };
    let path = dir.join(format!("step{}{suffix}.json", step.step));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{generate_synthetic, SynthConfig};
    use proptest::prelude::*;

    fn cil_id(name: &str) -> ClassId {
        ClassTaxonomy::cil().id(name).unwrap()
    }

    #[test]
    fn disjoint_old_class_is_background() {
        let t = ClassTaxonomy::cil();
        let out = transform_labels(ScenarioKind::Disjoint, &t, 1, &[cil_id("road")]).unwrap();
        assert_eq!(out, [ClassId::BACKGROUND]);
        let out = transform_labels(ScenarioKind::Disjoint, &t, 1, &[cil_id("car"), cil_id("pole")]).unwrap();
        assert_eq!(out, [ClassId::UNLABELED, cil_id("pole")]);
    }

    #[test]
    fn per_kind_rules() {
        let t = ClassTaxonomy::cil();
        let truth = [cil_id("road"), cil_id("pole"), cil_id("car")];
        let u = ClassId::UNLABELED;
        let b = ClassId::BACKGROUND;
        let run = |kind| transform_labels(kind, &t, 1, &truth).unwrap();
        assert_eq!(run(ScenarioKind::Sequential), [truth[0], truth[1], u]);
        assert_eq!(run(ScenarioKind::SequentialMasked), [u, truth[1], u]);
        assert_eq!(run(ScenarioKind::Disjoint), [b, truth[1], u]);
        assert_eq!(run(ScenarioKind::Overlapped), [b, truth[1], b]);
        let all: Vec<_> = (1..=19).map(ClassId).collect();
        assert_eq!(transform_labels(ScenarioKind::Sequential, &t, 2, &all).unwrap(), all);
    }

    #[test]
    fn coarse_to_fine_rules() {
        let t = ClassTaxonomy::c2f();
        let car = t.id("car").unwrap();
        let out = transform_labels(ScenarioKind::CoarseToFine, &t, 0, &[car]).unwrap();
        assert_eq!(out, [t.id("dynamic").unwrap()]);
        let out = transform_labels(ScenarioKind::CoarseToFine, &t, 2, &[car]).unwrap();
        assert_eq!(out, [car]);
        let err = transform_labels(ScenarioKind::CoarseToFine, &ClassTaxonomy::cil(), 0, &[car]).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn sentinel_truth_rejected() {
        let t = ClassTaxonomy::cil();
        for s in [ClassId::UNLABELED, ClassId::BACKGROUND] {
            assert!(transform_labels(ScenarioKind::Sequential, &t, 0, &[s]).is_err());
        }
    }

    #[test]
    fn active_and_head_sets() {
        let t = ClassTaxonomy::cil();
        assert_eq!(active_classes(ScenarioKind::Sequential, &t, 1).unwrap().len(), 11);
        assert_eq!(active_classes(ScenarioKind::SequentialMasked, &t, 1).unwrap().len(), 5);
        let d = active_classes(ScenarioKind::Disjoint, &t, 1).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d[0], ClassId::BACKGROUND);
        let h0 = head_classes(ScenarioKind::Sequential, &t, 0).unwrap();
        let h1 = head_classes(ScenarioKind::Sequential, &t, 1).unwrap();
        assert_eq!((h0.len(), h1.len()), (6, 11));
        assert_eq!(&h1[..6], &h0[..]);
        let c = ClassTaxonomy::c2f();
        assert_eq!(output_classes(ScenarioKind::CoarseToFine, &c, 1).unwrap().len(), 6);
        assert_eq!(head_classes(ScenarioKind::CoarseToFine, &c, 1).unwrap().len(), 9);
    }

    fn synth() -> (ClassTaxonomy, SplitDataset) {
        let cfg = SynthConfig::new(ClassTaxonomy::synth8(), 11, 6, 120);
        (cfg.taxonomy.clone(), generate_synthetic(&cfg).unwrap())
    }

    #[test]
    fn masked_and_disjoint_agree_at_step_zero() {
        let (t, data) = synth();
        let a = build_step(&ScenarioPlan::new(ScenarioKind::SequentialMasked, t.clone(), &data).unwrap(), 0, &data).unwrap();
        let b = build_step(&ScenarioPlan::new(ScenarioKind::Disjoint, t, &data).unwrap(), 0, &data).unwrap();
        assert_eq!(a.scans, b.scans);
    }

    #[test]
    fn overlapped_scan_count_brute_force() {
        let (t, data) = synth();
        let k = 2;
        let over = build_step(&ScenarioPlan::new(ScenarioKind::Overlapped, t.clone(), &data).unwrap(), k, &data).unwrap();
        let disj = build_step(&ScenarioPlan::new(ScenarioKind::Disjoint, t.clone(), &data).unwrap(), k, &data).unwrap();
        let mut qualifying = 0;
        for cloud in data.training_scans() {
            if cloud.labels.iter().any(|l| t.step_of(*l) == Some(k)) {
                qualifying += 1;
            }
        }
        assert_eq!(over.scans.len(), qualifying);
        assert!(over.scans.len() >= disj.scans.len());
    }

    #[test]
    fn summary_percentages() {
        let (t, data) = synth();
        let seq = ScenarioPlan::new(ScenarioKind::Sequential, t.clone(), &data).unwrap();
        let s = summarize_plan(&seq, &data).unwrap();
        assert_eq!(s.steps[2].labeled_pct, 100.0);
        for shares in s.class_histogram.values() {
            assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let masked = summarize_plan(&ScenarioPlan::new(ScenarioKind::SequentialMasked, t.clone(), &data).unwrap(), &data).unwrap();
        let disjoint = summarize_plan(&ScenarioPlan::new(ScenarioKind::Disjoint, t.clone(), &data).unwrap(), &data).unwrap();
        // background points count as labeled; recount directly
        let group = &data.groups[1];
        let direct = |kind| {
            let n: usize = group
                .iter()
                .map(|c| {
                    transform_labels(kind, &t, 1, &c.labels)
                        .unwrap()
                        .iter()
                        .filter(|l| **l != ClassId::UNLABELED)
                        .count()
                })
                .sum();
            100.0 * n as f64 / group.iter().map(LabeledCloud::len).sum::<usize>() as f64
        };
        assert_eq!(disjoint.steps[1].labeled_pct, direct(ScenarioKind::Disjoint));
        assert_eq!(masked.steps[1].labeled_pct, direct(ScenarioKind::SequentialMasked));
        assert!(disjoint.steps[1].labeled_pct > masked.steps[1].labeled_pct);
        let table = s.table(&t);
        assert_eq!(table.rows.len(), 3);
    }

    #[test]
    fn missing_scan_is_data_error() {
        let (t, data) = synth();
        let mut plan = ScenarioPlan::new(ScenarioKind::Disjoint, t, &data).unwrap();
        plan.groups[0].push(ScanId::new("zz", 1));
        assert!(matches!(build_step(&plan, 0, &data), Err(Error::Data(_))));
    }

    #[test]
    fn step_manifest_written() {
        let (t, data) = synth();
        let plan = ScenarioPlan::new(ScenarioKind::Disjoint, t.clone(), &data).unwrap();
        let step = build_step(&plan, 1, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_step(dir.path(), &step, "").unwrap();
        let m: StepManifest = serde_json::from_str(&fs::read_to_string(dir.path().join("step1.json")).unwrap()).unwrap();
        assert_eq!(m.scans.len(), step.scans.len());
        let map = crate::ingest::LearningMap::identity(&t);
        let back = crate::ingest::read_labels(dir.path().join(&m.scans[0].labels), &map).unwrap();
        assert_eq!(back, step.scans[0].labels);
    }

    fn fine_labels(n: usize) -> impl Strategy<Value = Vec<ClassId>> {
        prop::collection::vec((1u16..=19).prop_map(ClassId), 1..n)
    }

    proptest! {
        #[test]
        fn partition_property(truth in fine_labels(64), k in 0usize..3) {
            let t = ClassTaxonomy::cil();
            for kind in [ScenarioKind::Sequential, ScenarioKind::SequentialMasked, ScenarioKind::Disjoint, ScenarioKind::Overlapped] {
                let out = transform_labels(kind, &t, k, &truth).unwrap();
                let active = active_classes(kind, &t, k).unwrap();
                for (o, c) in out.iter().zip(&truth) {
                    prop_assert!(*o == *c || *o == ClassId::BACKGROUND || *o == ClassId::UNLABELED);
                    prop_assert!(*o == ClassId::UNLABELED || active.contains(o));
                }
            }
        }

        #[test]
        fn current_step_classes_survive(truth in fine_labels(64), k in 0usize..3) {
            let t = ClassTaxonomy::cil();
            let outs: Vec<_> = [ScenarioKind::Sequential, ScenarioKind::SequentialMasked, ScenarioKind::Disjoint, ScenarioKind::Overlapped]
                .iter()
                .map(|&kind| transform_labels(kind, &t, k, &truth).unwrap())
                .collect();
            for (i, c) in truth.iter().enumerate() {
                if t.step_of(*c) == Some(k) {
                    for o in &outs {
                        prop_assert_eq!(o[i], *c);
                    }
                }
            }
        }

        #[test]
        fn sequential_refinement_monotone(truth in fine_labels(64)) {
            let t = ClassTaxonomy::cil();
            let steps: Vec<_> = (0..3).map(|k| transform_labels(ScenarioKind::Sequential, &t, k, &truth).unwrap()).collect();
            for k in 0..3 {
                for later in k..3 {
                    for i in 0..truth.len() {
                        if steps[k][i] != ClassId::UNLABELED {
                            prop_assert_eq!(steps[later][i], steps[k][i]);
                        }
                    }
                }
            }
        }

        #[test]
        fn coarse_to_fine_consistent(truth in fine_labels(64)) {
            let t = ClassTaxonomy::c2f();
            let steps: Vec<_> = (0..3).map(|k| transform_labels(ScenarioKind::CoarseToFine, &t, k, &truth).unwrap()).collect();
            for k in 0..3 {
                for later in k..3 {
                    for i in 0..truth.len() {
                        prop_assert_eq!(t.ancestor(steps[later][i], k).unwrap(), steps[k][i]);
                    }
                }
            }
        }
    }
}
