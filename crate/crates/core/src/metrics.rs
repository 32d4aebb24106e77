//! Confusion matrices and the per-step scores derived from them.
//!
//! Matrices are indexed by label id (background at 0) so predictions of the
//! background class are counted as misses of the true class. Background is
//! never an evaluated class.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inpaint::InpaintStats;
use crate::taxonomy::{ClassId, ClassTaxonomy};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            counts: vec![0; size * size],
        }
    }

    /// Sized for every id of `taxonomy` plus background.
    pub fn for_taxonomy(taxonomy: &ClassTaxonomy) -> Self {
        Self::new(taxonomy.max_id().index() + 1)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, truth: ClassId, pred: ClassId) -> u64 {
        self.counts[truth.index() * self.size + pred.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn check(&self, id: ClassId, what: &str) -> Result<()> {
        if id == ClassId::UNLABELED || id.index() >= self.size {
            return Err(Error::InvalidClass(format!("{what} label {id} outside a {0}x{0} matrix", self.size)));
        }
        Ok(())
    }

    /// Counts every point whose truth is not unlabeled.
    pub fn accumulate(&mut self, truth: &[ClassId], pred: &[ClassId]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!("{} truth labels vs {} predictions", truth.len(), pred.len())));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == ClassId::UNLABELED {
                continue;
            }
            self.check(t, "truth")?;
            self.check(p, "predicted")?;
            self.counts[t.index() * self.size + p.index()] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.size != self.size {
            return Err(Error::Shape(format!("merging {} and {} matrices", self.size, other.size)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn true_positives(&self, c: ClassId) -> u64 {
        self.get(c, c)
    }

    pub fn row_sum(&self, c: ClassId) -> u64 {
        let i = c.index();
        self.counts[i * self.size..(i + 1) * self.size].iter().sum()
    }

    pub fn col_sum(&self, c: ClassId) -> u64 {
        (0..self.size).map(|r| self.counts[r * self.size + c.index()]).sum()
    }

    /// TP / (TP + FP + FN), `None` when the class is absent from both truth
    /// and prediction.
    pub fn iou(&self, c: ClassId) -> Option<f64> {
        if c.index() >= self.size {
            return None;
        }
        let tp = self.true_positives(c);
        let denom = self.row_sum(c) + self.col_sum(c) - tp;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// TP / (TP + FP), `None` when the class is never predicted.
    pub fn precision(&self, c: ClassId) -> Option<f64> {
        if c.index() >= self.size {
            return None;
        }
        let predicted = self.col_sum(c);
        (predicted > 0).then(|| self.true_positives(c) as f64 / predicted as f64)
    }

    /// Relabels rows and columns through `map` into a matrix of `size`.
    pub fn collapse(&self, size: usize, map: impl Fn(ClassId) -> Result<ClassId>) -> Result<Self> {
        let mut out = Self::new(size);
        for t in 0..self.size {
            for p in 0..self.size {
                let n = self.counts[t * self.size + p];
                if n == 0 {
                    continue;
                }
                let (mt, mp) = (map(ClassId(t as u16))?, map(ClassId(p as u16))?);
                out.check(mt, "truth")?;
                out.check(mp, "predicted")?;
                out.counts[mt.index() * size + mp.index()] += n;
            }
        }
        Ok(out)
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean IoU over the classes of `set` whose IoU is defined.
pub fn miou(cm: &ConfusionMatrix, set: &[ClassId]) -> Option<f64> {
    let ious: Vec<f64> = set.iter().filter_map(|&c| cm.iou(c)).collect();
    mean(&ious)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub id: ClassId,
    pub name: String,
    pub iou: Option<f64>,
    pub precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Scores of the classes entering the headline mIoU.
    pub classes: Vec<ClassScore>,
    /// `group_miou[j]` is the mIoU over the classes of step `j`.
    pub group_miou: Vec<Option<f64>>,
    /// mIoU over every class learned up to this step.
    pub miou: Option<f64>,
    pub pa: f64,
    pub pp: Option<f64>,
    pub sigma: Option<f64>,
    pub sigma_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inpaint: Option<InpaintStats>,
    pub confusion: ConfusionMatrix,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl StepReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "report".into(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// Derives the step-`k` scores from a confusion matrix.
///
/// With `hierarchical` set, the matrix holds level-`k` labels of a
/// coarse-to-fine taxonomy: the headline set is the level-`k` classes and
/// each `group_miou[j]` is computed after collapsing the matrix to level `j`.
/// Otherwise the headline set is every class of steps `0..=k` and
/// `group_miou[j]` is the mIoU over step `j`'s classes.
pub fn report(cm: &ConfusionMatrix, taxonomy: &ClassTaxonomy, k: usize, hierarchical: bool) -> Result<StepReport> {
    if cm.total() == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let headline: Vec<ClassId> = if hierarchical {
        taxonomy.step(k)?.to_vec()
    } else {
        taxonomy.cumulative_classes(k)?.into_iter().collect()
    };
    let group_miou = (0..=k)
        .map(|j| -> Result<Option<f64>> {
            if hierarchical {
                let collapsed = cm.collapse(cm.size(), |c| {
                    if c.is_sentinel() {
                        Ok(c)
                    } else {
                        taxonomy.ancestor(c, j)
                    }
                })?;
                Ok(miou(&collapsed, taxonomy.step(j)?))
            } else {
                Ok(miou(cm, taxonomy.step(j)?))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let classes = headline
        .iter()
        .map(|&c| {
            Ok(ClassScore {
                id: c,
                name: taxonomy.name(c)?.to_string(),
                iou: cm.iou(c),
                precision: cm.precision(c),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ious: Vec<f64> = classes.iter().filter_map(|s| s.iou).collect();
    let miou_all = mean(&ious);
    let sigma = miou_all.map(|m| (ious.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ious.len() as f64).sqrt());
    let precisions: Vec<f64> = classes.iter().filter_map(|s| s.precision).collect();

    let eval: BTreeSet<ClassId> = headline.iter().copied().collect();
    let (mut hits, mut total) = (0u64, 0u64);
    for &c in &eval {
        hits += cm.true_positives(c);
        total += cm.row_sum(c);
    }
    let pa = if total > 0 { hits as f64 / total as f64 } else { 0.0 };

    Ok(StepReport {
        step: k,
        classes,
        group_miou,
        miou: miou_all,
        pa,
        pp: mean(&precisions),
        sigma,
        sigma_kind: "population".into(),
        inpaint: None,
        confusion: cm.clone(),
        config: serde_json::Value::Null,
    })
}

/// Plain rectangular table with CSV, markdown and aligned-text renderings.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let line = |cells: &[String]| {
            cells
                .iter()
                .map(|c| if c.contains(',') { format!("\"{c}\"") } else { c.clone() })
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = line(&self.header);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n", self.header.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for row in &self.rows {
            out.push_str(&format!("| {} |\n", row.join(" | ")));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|i| {
                std::iter::once(&self.header)
                    .chain(&self.rows)
                    .map(|r| r.get(i).map_or(0, String::len))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = line(&self.header);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

/// Score as a percentage with one decimal, `-` when undefined.
pub fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v))
}

fn group_label(k: usize) -> String {
    (0..=k).map(|j| j.to_string()).collect::<Vec<_>>().join(",")
}

/// One row per run: for every step, mIoU of each group seen so far followed
/// by the cumulative mIoU (omitted at step 0, where it equals mIoU_0).
pub fn progress_table(runs: &[(String, Vec<StepReport>)]) -> Table {
    let steps = runs.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    let mut header = vec!["method".to_string()];
    for k in 0..steps {
        for j in 0..=k {
            header.push(format!("s{k} mIoU_{j}"));
        }
        if k > 0 {
            header.push(format!("s{k} mIoU_{}", group_label(k)));
        }
    }
    let rows = runs
        .iter()
        .map(|(name, reports)| {
            let mut row = vec![name.clone()];
            for k in 0..steps {
                match reports.get(k) {
                    Some(r) => {
                        row.extend((0..=k).map(|j| pct(r.group_miou.get(j).copied().flatten())));
                        if k > 0 {
                            row.push(pct(r.miou));
                        }
                    }
                    None => row.extend(std::iter::repeat_n("|".to_string(), if k > 0 { k + 2 } else { 1 })),
                }
            }
            row
        })
        .collect();
    Table { header, rows }
}

/// Per-class IoU at each run's final step, followed by mIoU, sigma, PA and PP.
pub fn per_class_table(runs: &[(String, Vec<StepReport>)]) -> Table {
    let names: Vec<String> = runs
        .iter()
        .filter_map(|(_, r)| r.last())
        .flat_map(|r| r.classes.iter().map(|c| c.name.clone()))
        .fold(Vec::new(), |mut acc, n| {
            if !acc.contains(&n) {
                acc.push(n);
            }
            acc
        });
    let mut header = vec!["method".to_string()];
    header.extend(names.iter().cloned());
    header.extend(["mIoU", "sigma", "PA", "PP"].map(String::from));
    let rows = runs
        .iter()
        .filter_map(|(name, reports)| reports.last().map(|r| (name, r)))
        .map(|(name, r)| {
            let mut row = vec![name.clone()];
            for n in &names {
                row.push(pct(r.classes.iter().find(|c| &c.name == n).and_then(|c| c.iou)));
            }
            row.extend([pct(r.miou), pct(r.sigma), pct(Some(r.pa)), pct(r.pp)]);
            row
        })
        .collect();
    Table { header, rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u16]) -> Vec<ClassId> {
        v.iter().map(|&x| ClassId(x)).collect()
    }

    #[test]
    fn hand_counted_matrix() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&ids(&[0, 0, 1, 1]), &ids(&[0, 1, 1, 1])).unwrap();
        assert_eq!(cm.counts, vec![1, 1, 0, 2]);
        assert_eq!(cm.iou(ClassId(0)), Some(0.5));
        assert_eq!(cm.iou(ClassId(1)), Some(2.0 / 3.0));
        let m = miou(&cm, &ids(&[0, 1])).unwrap();
        assert!((m - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn unlabeled_truth_ignored() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&ids(&[255, 255]), &ids(&[1, 2])).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut cm = ConfusionMatrix::new(3);
        assert!(cm.accumulate(&ids(&[1]), &ids(&[3])).is_err());
        assert!(cm.accumulate(&ids(&[4]), &ids(&[1])).is_err());
        assert!(cm.accumulate(&ids(&[1]), &ids(&[255])).is_err());
        assert!(cm.accumulate(&ids(&[1, 2]), &ids(&[1])).is_err());
    }

    #[test]
    fn additivity() {
        let (ta, pa) = (ids(&[1, 2, 2]), ids(&[1, 1, 2]));
        let (tb, pb) = (ids(&[0, 255, 2]), ids(&[2, 1, 0]));
        let mut split = ConfusionMatrix::new(3);
        split.accumulate(&ta, &pa).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&tb, &pb).unwrap();
        split.merge(&b).unwrap();
        let mut joined = ConfusionMatrix::new(3);
        joined
            .accumulate(&[ta, tb].concat(), &[pa, pb].concat())
            .unwrap();
        assert_eq!(split, joined);
    }

    #[test]
    fn absent_class_undefined() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&ids(&[1, 2]), &ids(&[1, 2])).unwrap();
        assert_eq!(cm.iou(ClassId(1)), Some(1.0));
        assert_eq!(cm.iou(ClassId(3)), None);
        assert_eq!(miou(&cm, &ids(&[1, 2, 3])), Some(1.0));
    }

    #[test]
    fn forgotten_group_scores_zero() {
        // step 1 model predicts background for every step-0 point
        let tax = ClassTaxonomy::synth8();
        let mut cm = ConfusionMatrix::for_taxonomy(&tax);
        let truth = ids(&[1, 2, 3, 4, 5, 6]);
        let pred = ids(&[0, 0, 0, 4, 5, 6]);
        cm.accumulate(&truth, &pred).unwrap();
        let r = report(&cm, &tax, 1, false).unwrap();
        assert_eq!(r.group_miou[0], Some(0.0));
        assert_eq!(r.group_miou[1], Some(1.0));
        assert_eq!(r.miou, Some(0.5));
        assert_eq!(r.sigma, Some(0.5));
        assert_eq!(r.pa, 0.5);
        assert_eq!(r.pp, Some(1.0));
    }

    #[test]
    fn perfect_prediction_report() {
        let tax = ClassTaxonomy::synth8();
        let mut cm = ConfusionMatrix::for_taxonomy(&tax);
        let labels = ids(&[1, 2, 3, 4, 5, 6, 7, 8]);
        cm.accumulate(&labels, &labels).unwrap();
        let r = report(&cm, &tax, 2, false).unwrap();
        assert_eq!(r.pa, 1.0);
        assert_eq!(r.miou, Some(1.0));
        assert_eq!(r.sigma, Some(0.0));
        assert!(r.classes.iter().all(|c| c.iou == Some(1.0)));
    }

    #[test]
    fn empty_matrix_rejected() {
        let tax = ClassTaxonomy::synth8();
        assert!(report(&ConfusionMatrix::for_taxonomy(&tax), &tax, 0, false).is_err());
    }

    #[test]
    fn hierarchical_groups_collapse() {
        let tax = ClassTaxonomy::c2f();
        let car = tax.id("car").unwrap();
        let truck = tax.id("truck").unwrap();
        let mut cm = ConfusionMatrix::for_taxonomy(&tax);
        // car mistaken for truck: wrong at level 2, right at levels 0 and 1
        cm.accumulate(&[car, truck], &[truck, truck]).unwrap();
        let r = report(&cm, &tax, 2, true).unwrap();
        assert_eq!(r.group_miou[0], Some(1.0));
        assert_eq!(r.group_miou[1], Some(1.0));
        assert_eq!(r.miou, Some(0.25));
        assert_eq!(r.classes.len(), 19);
    }

    #[test]
    fn tables_layout() {
        let tax = ClassTaxonomy::synth8();
        let mut cm = ConfusionMatrix::for_taxonomy(&tax);
        let labels = ids(&[1, 2, 3, 4, 5, 6, 7, 8]);
        cm.accumulate(&labels, &labels).unwrap();
        let reports: Vec<_> = (0..3).map(|k| report(&cm, &tax, k, false).unwrap()).collect();
        let t = progress_table(&[("ft".into(), reports.clone())]);
        assert_eq!(t.header.len(), 1 + 1 + 3 + 4);
        assert_eq!(t.header[4], "s1 mIoU_0,1");
        assert_eq!(t.rows[0][1], "100.0");
        let p = per_class_table(&[("ft".into(), reports)]);
        assert_eq!(p.header.len(), 1 + 8 + 4);
        assert!(t.to_csv().contains("\"s1 mIoU_0,1\""));
        assert!(t.to_markdown().starts_with("| method |"));
    }
}
