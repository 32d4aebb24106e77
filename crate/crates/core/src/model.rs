//! Reference per-point segmenter: a two-layer tanh encoder producing a
//! 32-dimensional feature per point, followed by an affine classifier head
//! that grows by appending rows when classes are added.
//!
//! Points are processed independently, so gradients are closed-form and a
//! batch is just a concatenation of scans.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{LabeledCloud, Point};
use crate::taxonomy::ClassId;

pub const INPUT_DIM: usize = 6;
pub const HIDDEN_DIM: usize = 64;
pub const FEATURE_DIM: usize = 32;

/// Scale of freshly initialized head rows.
pub const HEAD_INIT_SCALE: f64 = 1e-2;

/// (x, y, z, planar range, height, intensity) before standardization.
pub fn raw_features(p: &Point) -> [f64; INPUT_DIM] {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    [x, y, z, x.hypot(y), z, p.intensity as f64]
}

/// Per-feature mean and standard deviation, fixed when the model is created.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; INPUT_DIM],
    pub std: [f64; INPUT_DIM],
}

impl Standardizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; INPUT_DIM],
            std: [1.0; INPUT_DIM],
        }
    }

    pub fn fit<'a>(clouds: impl IntoIterator<Item = &'a LabeledCloud>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; INPUT_DIM];
        let mut sq = [0.0; INPUT_DIM];
        for p in clouds.into_iter().flat_map(|c| &c.points) {
            let f = raw_features(p);
            for j in 0..INPUT_DIM {
                sum[j] += f[j];
                sq[j] += f[j] * f[j];
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Data("cannot standardize an empty point set".into()));
        }
        let mut mean = [0.0; INPUT_DIM];
        let mut std = [1.0; INPUT_DIM];
        for j in 0..INPUT_DIM {
            mean[j] = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean[j] * mean[j]).max(0.0);
            std[j] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }
}

/// Standardized per-point input rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Inputs {
    pub fn from_rows(rows: &[[f64; INPUT_DIM]]) -> Result<Self> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite input feature".into()));
        }
        Ok(Self {
            n: rows.len(),
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point>, s: &Standardizer) -> Result<Self> {
        let rows: Vec<[f64; INPUT_DIM]> = points
            .into_iter()
            .map(|p| {
                let f = raw_features(p);
                std::array::from_fn(|j| (f[j] - s.mean[j]) / s.std[j])
            })
            .collect();
        Self::from_rows(&rows)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * INPUT_DIM..(i + 1) * INPUT_DIM]
    }

    pub fn concat(parts: &[&Inputs]) -> Self {
        Self {
            n: parts.iter().map(|p| p.n).sum(),
            data: parts.iter().flat_map(|p| p.data.iter().copied()).collect(),
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// All trainable parameters. Gradients and optimizer moments share the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "head_w", "head_b"];

impl Params {
    pub fn zeros(classes: usize) -> Self {
        Self {
            w1: Matrix::zeros(HIDDEN_DIM, INPUT_DIM),
            b1: vec![0.0; HIDDEN_DIM],
            w2: Matrix::zeros(FEATURE_DIM, HIDDEN_DIM),
            b2: vec![0.0; FEATURE_DIM],
            head_w: Matrix::zeros(classes, FEATURE_DIM),
            head_b: vec![0.0; classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.head_b.len())
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [&self.w1.data, &self.b1, &self.w2.data, &self.b2, &self.head_w.data, &self.head_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
            &mut self.head_w.data,
            &mut self.head_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn append_head_rows(&mut self, rows: &[[f64; FEATURE_DIM]]) {
        for r in rows {
            self.head_w.data.extend_from_slice(r);
            self.head_w.rows += 1;
            self.head_b.push(0.0);
        }
    }
}

/// Adaptive-moment optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ps = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Per-point scores over `class_list`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_list: Vec<ClassId>,
    pub n: usize,
    pub logits: Vec<f64>,
    pub softmax: Vec<f64>,
    /// Encoder output, `n x FEATURE_DIM`; empty for predictions built from probabilities.
    pub features: Vec<f64>,
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

impl Prediction {
    /// Builds a prediction from per-point logit rows.
    pub fn from_logits(class_list: Vec<ClassId>, logits: Vec<f64>) -> Result<Self> {
        let c = class_list.len();
        if c == 0 || !logits.len().is_multiple_of(c) {
            return Err(Error::Shape(format!("{} logits for {c} classes", logits.len())));
        }
        let mut softmax = vec![0.0; logits.len()];
        for (z, p) in logits.chunks_exact(c).zip(softmax.chunks_exact_mut(c)) {
            softmax_into(z, p);
        }
        Ok(Self {
            n: logits.len() / c,
            class_list,
            logits,
            softmax,
            features: Vec::new(),
        })
    }

    /// Builds a prediction directly from probability rows.
    pub fn from_probabilities(class_list: Vec<ClassId>, probs: Vec<f64>) -> Result<Self> {
        let c = class_list.len();
        if c == 0 || !probs.len().is_multiple_of(c) {
            return Err(Error::Shape(format!("{} probabilities for {c} classes", probs.len())));
        }
        Ok(Self {
            n: probs.len() / c,
            logits: probs.iter().map(|p| p.ln()).collect(),
            class_list,
            softmax: probs,
            features: Vec::new(),
        })
    }

    /// Stacks predictions over the same classes, points in argument order.
    pub fn concat(parts: &[&Prediction]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        if parts.iter().any(|p| p.class_list != first.class_list) {
            return Err(Error::Shape("predictions over different classes".into()));
        }
        Ok(Self {
            class_list: first.class_list.clone(),
            n: parts.iter().map(|p| p.n).sum(),
            logits: parts.iter().flat_map(|p| p.logits.iter().copied()).collect(),
            softmax: parts.iter().flat_map(|p| p.softmax.iter().copied()).collect(),
            features: parts.iter().flat_map(|p| p.features.iter().copied()).collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_list.len()
    }

    pub fn probs(&self, i: usize) -> &[f64] {
        let c = self.class_list.len();
        &self.softmax[i * c..(i + 1) * c]
    }

    pub fn logit_row(&self, i: usize) -> &[f64] {
        let c = self.class_list.len();
        &self.logits[i * c..(i + 1) * c]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    pub fn class_index(&self, c: ClassId) -> Option<usize> {
        self.class_list.iter().position(|&x| x == c)
    }

    /// Index of the largest logit, first on ties.
    pub fn argmax_index(&self, i: usize) -> usize {
        let row = self.logit_row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }

    pub fn argmax_labels(&self) -> Vec<ClassId> {
        (0..self.n).map(|i| self.class_list[self.argmax_index(i)]).collect()
    }
}

/// Loss derivatives with respect to the model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    /// `n x classes`, same layout as [`Prediction::logits`].
    pub d_logits: Vec<f64>,
    /// `n x FEATURE_DIM`, for losses acting on encoder features.
    pub d_features: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterState {
    pub class_list: Vec<ClassId>,
    pub standardizer: Standardizer,
    pub params: Params,
    pub optimizer: AdamState,
    pub seed: u64,
    /// Number of head expansions so far; seeds the next expansion.
    pub expansions: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SegmenterState {
    /// Fresh model: normally initialized encoder, small random head rows.
    pub fn new(class_list: Vec<ClassId>, standardizer: Standardizer, seed: u64) -> Result<Self> {
        let mut sorted = class_list.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != class_list.len() || class_list.contains(&ClassId::UNLABELED) {
            return Err(Error::InvalidClass("class list has duplicates or the unlabeled sentinel".into()));
        }
        let mut rng = stream_rng(seed, 0);
        let mut params = Params::zeros(0);
        let n1 = Normal::new(0.0, 1.0 / (INPUT_DIM as f64).sqrt()).expect("valid normal");
        params.w1.data.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
        let n2 = Normal::new(0.0, 1.0 / (HIDDEN_DIM as f64).sqrt()).expect("valid normal");
        params.w2.data.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
        let optimizer = AdamState::new(&params);
        let empty = Self {
            class_list: Vec::new(),
            standardizer,
            params,
            optimizer,
            seed,
            expansions: 0,
        };
        empty.expand_head(&class_list)
    }

    pub fn num_classes(&self) -> usize {
        self.class_list.len()
    }

    pub fn inputs(&self, cloud: &LabeledCloud) -> Result<Inputs> {
        Inputs::from_points(&cloud.points, &self.standardizer)
    }

    /// Appends one head row per new class; everything else is copied as is.
    pub fn expand_head(&self, new_classes: &[ClassId]) -> Result<Self> {
        if new_classes.is_empty() {
            return Ok(self.clone());
        }
        for (i, c) in new_classes.iter().enumerate() {
            if self.class_list.contains(c) || new_classes[..i].contains(c) {
                return Err(Error::InvalidClass(format!("class {c} is already in the head")));
            }
            if *c == ClassId::UNLABELED {
                return Err(Error::InvalidClass("unlabeled cannot be a head class".into()));
            }
        }
        let mut out = self.clone();
        let mut rng = stream_rng(self.seed, 1 + self.expansions);
        let normal = Normal::new(0.0, HEAD_INIT_SCALE).expect("valid normal");
        let rows: Vec<[f64; FEATURE_DIM]> = new_classes
            .iter()
            .map(|_| std::array::from_fn(|_| normal.sample(&mut rng)))
            .collect();
        out.params.append_head_rows(&rows);
        let zero = vec![[0.0; FEATURE_DIM]; rows.len()];
        out.optimizer.m.append_head_rows(&zero);
        out.optimizer.v.append_head_rows(&zero);
        out.class_list.extend_from_slice(new_classes);
        out.expansions += 1;
        Ok(out)
    }

    fn rows_for(&self, classes: &[ClassId]) -> Result<Vec<usize>> {
        classes
            .iter()
            .map(|c| {
                self.class_list
                    .iter()
                    .position(|x| x == c)
                    .ok_or_else(|| Error::InvalidClass(format!("class {c} is not in the head")))
            })
            .collect()
    }

    /// Encoder pass for one point: returns (hidden, feature).
    fn encode(&self, x: &[f64], hidden: &mut [f64], feature: &mut [f64]) {
        let p = &self.params;
        for (h, (w, b)) in hidden.iter_mut().zip(p.w1.data.chunks_exact(INPUT_DIM).zip(&p.b1)) {
            let mut a = *b;
            for j in 0..INPUT_DIM {
                a += w[j] * x[j];
            }
            *h = a.tanh();
        }
        for (f, (w, b)) in feature.iter_mut().zip(p.w2.data.chunks_exact(HIDDEN_DIM).zip(&p.b2)) {
            let mut a = *b;
            for j in 0..HIDDEN_DIM {
                a += w[j] * hidden[j];
            }
            *f = a.tanh();
        }
    }

    fn forward_impl(&self, inputs: &Inputs, rows: &[usize], classes: Vec<ClassId>) -> (Prediction, Vec<f64>) {
        let n = inputs.n;
        let c = rows.len();
        let mut hidden = vec![0.0; n * HIDDEN_DIM];
        let mut features = vec![0.0; n * FEATURE_DIM];
        let mut logits = vec![0.0; n * c];
        for i in 0..n {
            let h = &mut hidden[i * HIDDEN_DIM..(i + 1) * HIDDEN_DIM];
            let f = &mut features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM];
            self.encode(inputs.row(i), h, f);
            for (z, &r) in logits[i * c..(i + 1) * c].iter_mut().zip(rows) {
                let w = self.params.head_w.row(r);
                let mut a = self.params.head_b[r];
                for j in 0..FEATURE_DIM {
                    a += w[j] * f[j];
                }
                *z = a;
            }
        }
        let mut softmax = vec![0.0; n * c];
        if c > 0 {
            for (z, p) in logits.chunks_exact(c).zip(softmax.chunks_exact_mut(c)) {
                softmax_into(z, p);
            }
        }
        let pred = Prediction {
            class_list: classes,
            n,
            logits,
            softmax,
            features,
        };
        (pred, hidden)
    }

    /// Scores over the whole head.
    pub fn forward(&self, inputs: &Inputs) -> Prediction {
        let rows: Vec<usize> = (0..self.class_list.len()).collect();
        self.forward_impl(inputs, &rows, self.class_list.clone()).0
    }

    /// Scores over a subset of head classes, softmax taken over that subset.
    pub fn forward_over(&self, inputs: &Inputs, classes: &[ClassId]) -> Result<Prediction> {
        let rows = self.rows_for(classes)?;
        Ok(self.forward_impl(inputs, &rows, classes.to_vec()).0)
    }

    /// Evaluates `loss` on the prediction over `classes` and back-propagates
    /// its output derivatives to every parameter. Rows outside `classes`
    /// get zero gradient.
    pub fn gradients<L, F>(&self, inputs: &Inputs, classes: &[ClassId], loss: F) -> Result<(L, Params)>
    where
        F: FnOnce(&Prediction) -> Result<(L, f64, OutputGrad)>,
    {
        let rows = self.rows_for(classes)?;
        let (pred, hidden) = self.forward_impl(inputs, &rows, classes.to_vec());
        let (value, scalar, grad) = loss(&pred)?;
        if !scalar.is_finite() {
            return Err(Error::Numerical(format!("loss is {scalar}")));
        }
        let c = rows.len();
        let n = inputs.n;
        if grad.d_logits.len() != n * c {
            return Err(Error::Shape(format!("{} logit gradients for {n}x{c} outputs", grad.d_logits.len())));
        }
        if let Some(df) = &grad.d_features {
            if df.len() != n * FEATURE_DIM {
                return Err(Error::Shape(format!("{} feature gradients for {n} points", df.len())));
            }
        }
        let p = &self.params;
        let mut g = p.zeros_like();
        let mut d_feat = [0.0; FEATURE_DIM];
        let mut d_hidden = [0.0; HIDDEN_DIM];
        for i in 0..n {
            let f = pred.feature(i);
            let h = &hidden[i * HIDDEN_DIM..(i + 1) * HIDDEN_DIM];
            let dz = &grad.d_logits[i * c..(i + 1) * c];
            match &grad.d_features {
                Some(df) => d_feat.copy_from_slice(&df[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]),
                None => d_feat.fill(0.0),
            }
            for (&r, &d) in rows.iter().zip(dz) {
                if d == 0.0 {
                    continue;
                }
                g.head_b[r] += d;
                let w = p.head_w.row(r);
                let gw = g.head_w.row_mut(r);
                for j in 0..FEATURE_DIM {
                    gw[j] += d * f[j];
                    d_feat[j] += d * w[j];
                }
            }
            // through the feature tanh
            d_hidden.fill(0.0);
            for k in 0..FEATURE_DIM {
                let da = d_feat[k] * (1.0 - f[k] * f[k]);
                if da == 0.0 {
                    continue;
                }
                g.b2[k] += da;
                let w = p.w2.row(k);
                let gw = g.w2.row_mut(k);
                for j in 0..HIDDEN_DIM {
                    gw[j] += da * h[j];
                    d_hidden[j] += da * w[j];
                }
            }
            let x = inputs.row(i);
            for k in 0..HIDDEN_DIM {
                let da = d_hidden[k] * (1.0 - h[k] * h[k]);
                g.b1[k] += da;
                let gw = g.w1.row_mut(k);
                for j in 0..INPUT_DIM {
                    gw[j] += da * x[j];
                }
            }
        }
        Ok((value, g))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            e => e,
        })
    }

    /// JSON document with parameter arrays as base64 little-endian float64.
    pub fn to_checkpoint(&self) -> String {
        let enc = |t: &Params| -> Vec<EncodedTensor> {
            TENSOR_NAMES
                .iter()
                .zip(t.tensors())
                .map(|(name, data)| EncodedTensor {
                    name: name.to_string(),
                    len: data.len(),
                    data: encode_f64(data),
                })
                .collect()
        };
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            class_list: self.class_list.clone(),
            feature_mean: encode_f64(&self.standardizer.mean),
            feature_std: encode_f64(&self.standardizer.std),
            params: enc(&self.params),
            adam_m: enc(&self.optimizer.m),
            adam_v: enc(&self.optimizer.v),
            adam_t: self.optimizer.t,
            seed: self.seed,
            expansions: self.expansions,
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serializes") + "\n"
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "checkpoint".into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let classes = ck.class_list.len();
        let dec = |tensors: &[EncodedTensor]| -> Result<Params> {
            let mut p = Params::zeros(classes);
            if tensors.len() != TENSOR_NAMES.len() {
                return Err(Error::Config("checkpoint has the wrong number of tensors".into()));
            }
            for (slot, t) in p.tensors_mut().into_iter().zip(tensors) {
                let values = decode_f64(&t.data)?;
                if values.len() != slot.len() || t.len != slot.len() {
                    return Err(Error::Shape(format!("tensor {} has {} values, expected {}", t.name, values.len(), slot.len())));
                }
                slot.copy_from_slice(&values);
            }
            Ok(p)
        };
        let arr = |s: &str| -> Result<[f64; INPUT_DIM]> {
            decode_f64(s)?
                .try_into()
                .map_err(|_| Error::Shape("standardization constants".into()))
        };
        Ok(Self {
            class_list: ck.class_list,
            standardizer: Standardizer {
                mean: arr(&ck.feature_mean)?,
                std: arr(&ck.feature_std)?,
            },
            params: dec(&ck.params)?,
            optimizer: AdamState {
                m: dec(&ck.adam_m)?,
                v: dec(&ck.adam_v)?,
                t: ck.adam_t,
            },
            seed: ck.seed,
            expansions: ck.expansions,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "cilseg-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EncodedTensor {
    name: String,
    len: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    class_list: Vec<ClassId>,
    feature_mean: String,
    feature_std: String,
    params: Vec<EncodedTensor>,
    adam_m: Vec<EncodedTensor>,
    adam_v: Vec<EncodedTensor>,
    adam_t: u64,
    seed: u64,
    expansions: u64,
}

fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f64(text: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Config(format!("bad tensor encoding: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Config("tensor byte length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classes(n: u16) -> Vec<ClassId> {
        (1..=n).map(ClassId).collect()
    }

    fn random_inputs(n: usize, seed: u64) -> Inputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let rows: Vec<[f64; INPUT_DIM]> = (0..n).map(|_| std::array::from_fn(|_| normal.sample(&mut rng))).collect();
        Inputs::from_rows(&rows).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut m = SegmenterState::new(classes(4), Standardizer::identity(), 3).unwrap();
        m.params.head_w.data.fill(0.0);
        m.params.head_b.fill(0.0);
        let pred = m.forward(&random_inputs(5, 1));
        assert!(pred.softmax.iter().all(|&p| p == 0.25));
    }

    #[test]
    fn permutation_equivariance() {
        let m = SegmenterState::new(classes(3), Standardizer::identity(), 9).unwrap();
        let x = random_inputs(6, 2);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let rows: Vec<[f64; INPUT_DIM]> = perm.iter().map(|&i| x.row(i).try_into().unwrap()).collect();
        let px = Inputs::from_rows(&rows).unwrap();
        let a = m.forward(&x);
        let b = m.forward(&px);
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(a.logit_row(i), b.logit_row(j));
            assert_eq!(a.feature(i), b.feature(j));
        }
    }

    #[test]
    fn hand_computed_logits() {
        // one point; first hidden unit and first feature carry everything
        let mut m = SegmenterState::new(classes(2), Standardizer::identity(), 0).unwrap();
        let p = &mut m.params;
        p.w1.data.fill(0.0);
        p.w2.data.fill(0.0);
        p.head_w.data.fill(0.0);
        p.w1.data[0] = 0.5; // h0 = tanh(0.5 * x0)
        p.b1[0] = 0.1;
        p.w2.data[0] = 2.0; // f0 = tanh(2 h0 - 0.3)
        p.b2[0] = -0.3;
        p.head_w.data[0] = 1.5; // z0 = 1.5 f0 + 0.2
        p.head_w.data[FEATURE_DIM] = -1.0; // z1 = -f0 + 0.7
        p.head_b.copy_from_slice(&[0.2, 0.7]);
        let x = Inputs::from_rows(&[[0.8, 9.0, 9.0, 9.0, 9.0, 9.0]]).unwrap();
        let h0 = (0.5f64 * 0.8 + 0.1).tanh();
        let f0 = (2.0 * h0 - 0.3).tanh();
        let pred = m.forward(&x);
        assert!((pred.logits[0] - (1.5 * f0 + 0.2)).abs() < 1e-15);
        assert!((pred.logits[1] - (-f0 + 0.7)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_input_rejected() {
        assert!(Inputs::from_rows(&[[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn expand_head_copies_and_grows() {
        let m = SegmenterState::new(classes(6), Standardizer::identity(), 4).unwrap();
        assert!(m.expand_head(&[]).unwrap() == m);
        let new: Vec<_> = (7..=11).map(ClassId).collect();
        let mut e = m.expand_head(&new).unwrap();
        assert_eq!(e.num_classes(), 11);
        assert_eq!(e.params.head_w.rows, 11);
        assert_eq!(e.params.w1, m.params.w1);
        assert_eq!(&e.params.head_w.data[..6 * FEATURE_DIM], &m.params.head_w.data[..]);
        assert_eq!(e.optimizer.m.head_b.len(), 11);
        let spread: f64 = e.params.head_w.data[6 * FEATURE_DIM..].iter().map(|v| v * v).sum::<f64>()
            / (5 * FEATURE_DIM) as f64;
        assert!(spread.sqrt() < 0.02 && spread.sqrt() > 0.005);

        e.params.head_w.data[6 * FEATURE_DIM..].fill(0.0);
        let x = random_inputs(7, 5);
        let a = m.forward(&x);
        let b = e.forward(&x);
        for i in 0..7 {
            assert_eq!(a.logit_row(i), &b.logit_row(i)[..6]);
        }
        assert!(m.expand_head(&[ClassId(3)]).is_err());
    }

    #[test]
    fn restricted_forward_matches_rows() {
        let m = SegmenterState::new(classes(5), Standardizer::identity(), 4).unwrap();
        let x = random_inputs(3, 5);
        let full = m.forward(&x);
        let sub = m.forward_over(&x, &[ClassId(2), ClassId(5)]).unwrap();
        for i in 0..3 {
            assert_eq!(sub.logit_row(i), &[full.logit_row(i)[1], full.logit_row(i)[4]]);
            assert!((sub.probs(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(m.forward_over(&x, &[ClassId(9)]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = SegmenterState::new(classes(4), Standardizer::identity(), 8).unwrap();
        m.standardizer.mean[2] = 0.1 + 0.2;
        m.optimizer.t = 17;
        m.optimizer.v.b1[3] = 1.0 / 3.0;
        let text = m.to_checkpoint();
        let back = SegmenterState::from_checkpoint(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint(), text);
        let x = random_inputs(4, 1);
        assert_eq!(m.forward(&x), back.forward(&x));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Params::zeros(1);
        let mut g = Params::zeros(1);
        g.b1[0] = 3.0;
        g.b1[1] = -0.01;
        let mut opt = AdamState::new(&p);
        opt.step(&mut p, &g, 0.01, &AdamConfig::default());
        assert!((p.b1[0] + 0.01).abs() < 1e-9);
        assert!((p.b1[1] - 0.01).abs() < 1e-6);
        assert_eq!(p.b1[2], 0.0);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_argmax_consistent(seed in 0u64..1000, n in 1usize..20) {
            let m = SegmenterState::new(classes(5), Standardizer::identity(), seed).unwrap();
            let pred = m.forward(&random_inputs(n, seed + 1));
            for i in 0..n {
                prop_assert!((pred.probs(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let p = pred.probs(i);
                let best = pred.argmax_index(i);
                prop_assert!(p.iter().all(|&v| v <= p[best]));
            }
        }
    }
}
