//! Background self-inpainting: background points of the current step take
//! the previous model's label where that model is confident.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SplitDataset;
use crate::model::{Prediction, SegmenterState};
use crate::scenario::{index_scans, StepDataset};
use crate::taxonomy::{ClassId, ClassTaxonomy};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintConfig {
    /// Required margin between the two largest probabilities.
    pub tau1: f64,
    /// Required largest probability.
    pub tau2: f64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self { tau1: 0.2, tau2: 0.7 }
    }
}

impl InpaintConfig {
    pub fn new(tau1: f64, tau2: f64) -> Result<Self> {
        let cfg = Self { tau1, tau2 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InpaintStats {
    /// Background points considered.
    pub candidates: u64,
    /// Points whose label was rewritten.
    pub inpainted: u64,
    pub per_class: BTreeMap<ClassId, u64>,
}

/// 1 when the row is confident: margin above `tau1` and peak above `tau2`.
pub fn rho(row: &[f64], cfg: &InpaintConfig) -> Result<bool> {
    let sum: f64 = row.iter().sum();
    if row.is_empty() || (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Numerical(format!("row is not a probability distribution (sum {sum})")));
    }
    let mut top1 = f64::NEG_INFINITY;
    let mut top2 = 0.0;
    for &p in row {
        if p > top1 {
            top2 = top1.max(0.0);
            top1 = p;
        } else if p > top2 {
            top2 = p;
        }
    }
    Ok(top1 - top2 > cfg.tau1 && top1 > cfg.tau2)
}

/// Applies the inpainting rule to one scan's labels given predictions for it.
pub fn inpaint_labels(labels: &[ClassId], pred: &Prediction, cfg: &InpaintConfig, stats: &mut InpaintStats) -> Result<Vec<ClassId>> {
    if labels.len() != pred.n {
        return Err(Error::Shape(format!("{} labels for {} predictions", labels.len(), pred.n)));
    }
    let mut out = labels.to_vec();
    for (i, l) in out.iter_mut().enumerate() {
        if *l != ClassId::BACKGROUND {
            continue;
        }
        stats.candidates += 1;
        if rho(pred.probs(i), cfg)? {
            let c = pred.class_list[pred.argmax_index(i)];
            if c != ClassId::BACKGROUND {
                *l = c;
                stats.inpainted += 1;
                *stats.per_class.entry(c).or_default() += 1;
            }
        }
    }
    Ok(out)
}

/// Rewrites background labels of a step-`k` training set (k > 0) with the
/// previous model's confident predictions.
pub fn inpaint_step(
    step: &StepDataset,
    prev: &SegmenterState,
    dataset: &SplitDataset,
    taxonomy: &ClassTaxonomy,
    cfg: &InpaintConfig,
) -> Result<(StepDataset, InpaintStats)> {
    cfg.validate()?;
    if step.step == 0 {
        return Err(Error::Config("labels at the first step are not inpainted".into()));
    }
    let old = taxonomy.cumulative_classes(step.step - 1)?;
    if let Some(c) = prev
        .class_list
        .iter()
        .find(|c| **c != ClassId::BACKGROUND && !old.contains(c))
    {
        return Err(Error::Config(format!("previous model predicts class {c}, which is not yet learned")));
    }
    let index = index_scans(dataset);
    let mut stats = InpaintStats::default();
    let mut scans = Vec::with_capacity(step.scans.len());
    for s in &step.scans {
        let cloud = index
            .get(&s.id)
            .ok_or_else(|| Error::Data(format!("scan {} is missing", s.id)))?;
        let pred = prev.forward(&prev.inputs(cloud)?);
        let mut scan = s.clone();
        scan.labels = inpaint_labels(&s.labels, &pred, cfg, &mut stats)?;
        scans.push(scan);
    }
    let mut active: Vec<ClassId> = taxonomy.cumulative_classes(step.step)?.into_iter().collect();
    active.push(ClassId::BACKGROUND);
    active.sort();
    Ok((
        StepDataset {
            step: step.step,
            scans,
            active_classes: active,
        },
        stats,
    ))
}
