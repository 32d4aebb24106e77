//! Training objectives: masked cross-entropy, output distillation in three
//! flavours, feature distillation and their weighted combination.
//!
//! Every loss returns its value together with the derivative with respect to
//! the logits (and features where relevant), ready for
//! [`SegmenterState::gradients`](crate::model::SegmenterState::gradients).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OutputGrad, Prediction};
use crate::taxonomy::{ClassId, ClassTaxonomy};

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum KdMode {
    None,
    Output,
    FeatureL1,
    FeatureL2,
    Both,
}

impl std::str::FromStr for KdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(Self::None),
            "output" => Ok(Self::Output),
            "feature_l1" | "l1" => Ok(Self::FeatureL1),
            "feature_l2" | "l2" => Ok(Self::FeatureL2),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown kd mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutputVariant {
    /// Compare old classes slot by slot; new classes receive zero target mass.
    Standard,
    /// Sum the current model's new-class probabilities into background.
    JoinedUnknowns,
    /// Sum fine probabilities by ancestor at the previous model's level.
    CoarseSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub kd_mode: KdMode,
    pub output_variant: OutputVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            kd_mode: KdMode::None,
            output_variant: OutputVariant::Standard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn uses_output(&self) -> bool {
        matches!(self.kd_mode, KdMode::Output | KdMode::Both)
    }

    pub fn feature_norm(&self) -> Option<Norm> {
        match self.kd_mode {
            KdMode::FeatureL1 => Some(Norm::L1),
            KdMode::FeatureL2 | KdMode::Both => Some(Norm::L2),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub ce_part: f64,
    pub kd_part: f64,
    /// Points that entered the cross-entropy mean; 0 flags an empty batch.
    pub contributing: usize,
}

fn check_labels(pred: &Prediction, labels: &[ClassId]) -> Result<Vec<Option<usize>>> {
    if labels.len() != pred.n {
        return Err(Error::Shape(format!("{} labels for {} points", labels.len(), pred.n)));
    }
    labels
        .iter()
        .map(|&l| {
            if l == ClassId::UNLABELED {
                Ok(None)
            } else {
                pred.class_index(l)
                    .map(Some)
                    .ok_or_else(|| Error::InvalidClass(format!("label {l} is outside the predicted classes")))
            }
        })
        .collect()
}

/// Mean of `-log p[true]` over points not labeled UNLABELED.
pub fn cross_entropy(pred: &Prediction, labels: &[ClassId]) -> Result<f64> {
    cross_entropy_grad(pred, labels).map(|(v, _, _)| v)
}

/// Cross-entropy value, logit gradient and contributing point count.
pub fn cross_entropy_grad(pred: &Prediction, labels: &[ClassId]) -> Result<(f64, Vec<f64>, usize)> {
    let targets = check_labels(pred, labels)?;
    let m = targets.iter().flatten().count();
    let c = pred.num_classes();
    let mut grad = vec![0.0; pred.n * c];
    if m == 0 {
        return Ok((0.0, grad, 0));
    }
    let scale = 1.0 / m as f64;
    let mut sum = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let p = pred.probs(i);
        sum -= p[t].max(PROB_FLOOR).ln();
        if p[t] >= PROB_FLOOR {
            let g = &mut grad[i * c..(i + 1) * c];
            for j in 0..c {
                g[j] = scale * p[j];
            }
            g[t] -= scale;
        }
    }
    Ok((sum * scale, grad, m))
}

/// For each previous-model class, the current-model indices whose
/// probabilities are summed to form the compared slot.
fn kd_slots(
    prev: &Prediction,
    cur: &Prediction,
    variant: OutputVariant,
    taxonomy: Option<&ClassTaxonomy>,
) -> Result<Vec<Vec<usize>>> {
    let np = prev.num_classes();
    let prefix = || -> Result<()> {
        if cur.class_list.len() < np || cur.class_list[..np] != prev.class_list[..] {
            return Err(Error::Config("previous classes are not a prefix of the current classes".into()));
        }
        Ok(())
    };
    match variant {
        OutputVariant::Standard => {
            prefix()?;
            Ok((0..np).map(|a| vec![a]).collect())
        }
        OutputVariant::JoinedUnknowns => {
            prefix()?;
            let bg = prev
                .class_index(ClassId::BACKGROUND)
                .ok_or_else(|| Error::Config("joined-unknowns distillation needs a background class".into()))?;
            let mut slots: Vec<Vec<usize>> = (0..np).map(|a| vec![a]).collect();
            slots[bg].extend(np..cur.num_classes());
            Ok(slots)
        }
        OutputVariant::CoarseSum => {
            let tax = taxonomy
                .filter(|t| t.has_hierarchy())
                .ok_or_else(|| Error::Config("coarse-sum distillation needs a class hierarchy".into()))?;
            let mut slots = vec![Vec::new(); np];
            for (j, &c) in cur.class_list.iter().enumerate() {
                let mut owners = Vec::new();
                for (a, &anc) in prev.class_list.iter().enumerate() {
                    if anc == c || tax.is_ancestor(anc, c)? {
                        owners.push(a);
                    }
                }
                match owners[..] {
                    [a] => slots[a].push(j),
                    _ => {
                        return Err(Error::Hierarchy(format!(
                            "class {c} has {} ancestors among the previous classes",
                            owners.len()
                        )))
                    }
                }
            }
            Ok(slots)
        }
    }
}

fn output_kd_grad(
    prev: &Prediction,
    cur: &Prediction,
    variant: OutputVariant,
    taxonomy: Option<&ClassTaxonomy>,
    mask: Option<&[bool]>,
) -> Result<(f64, Vec<f64>)> {
    if prev.n != cur.n {
        return Err(Error::Shape(format!("{} vs {} points", prev.n, cur.n)));
    }
    let slots = kd_slots(prev, cur, variant, taxonomy)?;
    let c = cur.num_classes();
    let mut grad = vec![0.0; cur.n * c];
    let m = mask.map_or(cur.n, |k| k.iter().filter(|&&b| b).count());
    if m == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / m as f64;
    let mut sum = 0.0;
    for i in 0..cur.n {
        if mask.is_some_and(|k| !k[i]) {
            continue;
        }
        let q = prev.probs(i);
        let p = cur.probs(i);
        let g = &mut grad[i * c..(i + 1) * c];
        let mut q_active = 0.0;
        for (a, slot) in slots.iter().enumerate() {
            if q[a] == 0.0 {
                continue;
            }
            let mass: f64 = slot.iter().map(|&j| p[j]).sum();
            sum -= q[a] * mass.max(PROB_FLOOR).ln();
            if mass >= PROB_FLOOR {
                q_active += q[a];
                for &j in slot {
                    g[j] -= scale * q[a] * p[j] / mass;
                }
            }
        }
        for j in 0..c {
            g[j] += scale * q_active * p[j];
        }
    }
    Ok((sum * scale, grad))
}

/// Mean over points of the cross-entropy between the previous model's
/// distribution and the current model's, compared per `variant`.
pub fn output_kd(
    prev: &Prediction,
    cur: &Prediction,
    variant: OutputVariant,
    taxonomy: Option<&ClassTaxonomy>,
) -> Result<f64> {
    output_kd_grad(prev, cur, variant, taxonomy, None).map(|(v, _)| v)
}

/// The current model's probabilities summed into the previous model's slots.
pub fn compared_distribution(
    prev: &Prediction,
    cur: &Prediction,
    variant: OutputVariant,
    taxonomy: Option<&ClassTaxonomy>,
) -> Result<Vec<Vec<f64>>> {
    let slots = kd_slots(prev, cur, variant, taxonomy)?;
    Ok((0..cur.n)
        .map(|i| {
            let p = cur.probs(i);
            slots.iter().map(|s| s.iter().map(|&j| p[j]).sum()).collect()
        })
        .collect())
}

fn feature_kd_grad(prev: &[f64], cur: &[f64], dim: usize, norm: Norm, mask: Option<&[bool]>) -> Result<(f64, Vec<f64>)> {
    if prev.len() != cur.len() || dim == 0 || !cur.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "feature arrays of length {} and {} with dimension {dim}",
            prev.len(),
            cur.len()
        )));
    }
    let n = cur.len() / dim;
    let mut grad = vec![0.0; cur.len()];
    let m = mask.map_or(n, |k| k.iter().filter(|&&b| b).count());
    if m == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / m as f64;
    let mut sum = 0.0;
    for i in 0..n {
        if mask.is_some_and(|k| !k[i]) {
            continue;
        }
        let a = &prev[i * dim..(i + 1) * dim];
        let b = &cur[i * dim..(i + 1) * dim];
        let g = &mut grad[i * dim..(i + 1) * dim];
        match norm {
            Norm::L1 => {
                for j in 0..dim {
                    let d = b[j] - a[j];
                    sum += d.abs();
                    g[j] = if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                }
            }
            Norm::L2 => {
                let len = (0..dim).map(|j| (b[j] - a[j]).powi(2)).sum::<f64>().sqrt();
                sum += len;
                if len > 0.0 {
                    for j in 0..dim {
                        g[j] = scale * (b[j] - a[j]) / len;
                    }
                }
            }
        }
    }
    Ok((sum * scale, grad))
}

/// Mean over points of the L1 or L2 distance between feature vectors of
/// width `dim`, stored row after row.
pub fn feature_kd(prev: &[f64], cur: &[f64], dim: usize, norm: Norm) -> Result<f64> {
    feature_kd_grad(prev, cur, dim, norm, None).map(|(v, _)| v)
}

/// Cross-entropy plus `lambda` times the configured distillation term.
pub fn combined(
    cur: &Prediction,
    prev: Option<&Prediction>,
    labels: &[ClassId],
    cfg: &LossConfig,
    taxonomy: Option<&ClassTaxonomy>,
) -> Result<LossValue> {
    combined_grad(cur, prev, labels, cfg, taxonomy).map(|(v, _)| v)
}

/// [`combined`] together with its output derivatives. Distillation skips
/// UNLABELED points, like the cross-entropy term.
pub fn combined_grad(
    cur: &Prediction,
    prev: Option<&Prediction>,
    labels: &[ClassId],
    cfg: &LossConfig,
    taxonomy: Option<&ClassTaxonomy>,
) -> Result<(LossValue, OutputGrad)> {
    cfg.validate()?;
    let (ce, mut d_logits, contributing) = cross_entropy_grad(cur, labels)?;
    let prev = match (cfg.kd_mode, prev) {
        (KdMode::None, None) => None,
        (KdMode::None, Some(_)) => {
            return Err(Error::Config("a previous model was given but distillation is off".into()))
        }
        (_, None) => return Err(Error::Config("distillation needs the previous model's predictions".into())),
        (_, Some(p)) => Some(p),
    };
    let mut kd = 0.0;
    let mut d_features = None;
    if let Some(prev) = prev {
        let mask: Vec<bool> = labels.iter().map(|&l| l != ClassId::UNLABELED).collect();
        if cfg.uses_output() {
            let (v, g) = output_kd_grad(prev, cur, cfg.output_variant, taxonomy, Some(&mask))?;
            kd += v;
            for (d, gk) in d_logits.iter_mut().zip(g) {
                *d += cfg.lambda * gk;
            }
        }
        if let Some(norm) = cfg.feature_norm() {
            let dim = crate::model::FEATURE_DIM;
            if prev.features.len() != prev.n * dim || cur.features.len() != cur.n * dim {
                return Err(Error::Shape("feature distillation needs encoder features".into()));
            }
            let (v, mut g) = feature_kd_grad(&prev.features, &cur.features, dim, norm, Some(&mask))?;
            kd += v;
            g.iter_mut().for_each(|x| *x *= cfg.lambda);
            d_features = Some(g);
        }
    }
    let total = ce + cfg.lambda * kd;
    if !total.is_finite() {
        return Err(Error::Numerical(format!("loss is {total}")));
    }
    Ok((
        LossValue {
            total,
            ce_part: ce,
            kd_part: kd,
            contributing,
        },
        OutputGrad { d_logits, d_features },
    ))
}

/// Entropy of each row, with the same clamp as the losses, averaged over points.
pub fn mean_entropy(pred: &Prediction) -> f64 {
    if pred.n == 0 {
        return 0.0;
    }
    let s: f64 = (0..pred.n)
        .map(|i| {
            pred.probs(i)
                .iter()
                .filter(|&&q| q > 0.0)
                .map(|&q| -q * q.max(PROB_FLOOR).ln())
                .sum::<f64>()
        })
        .sum();
    s / pred.n as f64
}
