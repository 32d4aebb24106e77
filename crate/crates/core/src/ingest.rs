//! Scan and label I/O in the SemanticKITTI binary layout, raw-label
//! remapping, and the synthetic scene generator used for desk-scale runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, ClassTaxonomy};

const POINT_BYTES: usize = 16;
const LABEL_BYTES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ScanId {
    pub sequence: String,
    pub frame: u32,
}

impl ScanId {
    pub fn new(sequence: impl Into<String>, frame: u32) -> Self {
        Self {
            sequence: sequence.into(),
            frame,
        }
    }

    /// `<sequence>_<frame>`, usable as a file stem.
    pub fn stem(&self) -> String {
        format!("{}_{:06}", self.sequence, self.frame)
    }
}

impl fmt::Display for ScanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{:06}", self.sequence, self.frame)
    }
}

/// One scan with per-point labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub id: ScanId,
    pub points: Vec<Point>,
    pub labels: Vec<ClassId>,
}

impl LabeledCloud {
    pub fn new(id: ScanId, points: Vec<Point>, labels: Vec<ClassId>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data(format!("scan {id} has no points")));
        }
        if points.len() != labels.len() {
            return Err(Error::Data(format!(
                "scan {id}: {} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()))
        {
            return Err(Error::Data(format!("scan {id}: point {i} is not finite")));
        }
        Ok(Self { id, points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Raw 16-bit dataset label to learning id.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningMap {
    map: BTreeMap<u16, ClassId>,
    strict: bool,
}

const BUNDLED_LEARNING_MAP: &str = include_str!("../data/learning_map.json");

impl LearningMap {
    pub fn new(map: BTreeMap<u16, ClassId>, strict: bool) -> Self {
        Self { map, strict }
    }

    /// Labels already hold learning ids (synthetic data, transformed labels).
    pub fn identity(taxonomy: &ClassTaxonomy) -> Self {
        let mut map: BTreeMap<u16, ClassId> = (0..=taxonomy.max_id().0).map(|v| (v, ClassId(v))).collect();
        map.insert(ClassId::UNLABELED.0, ClassId::UNLABELED);
        Self { map, strict: true }
    }

    /// Parses a JSON object of raw id (as string) to class name.
    pub fn from_json_str(text: &str, taxonomy: &ClassTaxonomy, strict: bool) -> Result<Self> {
        let raw: BTreeMap<String, String> = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("learning map"),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut map = BTreeMap::new();
        for (key, name) in raw {
            let id: u16 = key
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("learning map key {key:?} is not a 16-bit id")))?;
            map.insert(id, taxonomy.id(&name)?);
        }
        Ok(Self { map, strict })
    }

    pub fn load(path: impl AsRef<Path>, taxonomy: &ClassTaxonomy, strict: bool) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, taxonomy, strict)
    }

    /// The bundled 19-class SemanticKITTI map; names must resolve in `taxonomy`.
    pub fn semantic_kitti(taxonomy: &ClassTaxonomy, strict: bool) -> Result<Self> {
        Self::from_json_str(BUNDLED_LEARNING_MAP, taxonomy, strict)
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn set_entry(&mut self, raw: u16, id: ClassId) {
        self.map.insert(raw, id);
    }

    pub fn map(&self, raw: u16) -> Result<ClassId> {
        match self.map.get(&raw) {
            Some(&id) => Ok(id),
            None if self.strict => Err(Error::Unmapped(raw)),
            None => {
                log::warn!("raw label {raw} not in learning map; treating as unlabeled");
                Ok(ClassId::UNLABELED)
            }
        }
    }
}

/// Splits a label word into (semantic, instance).
pub fn decode_label_word(word: u32) -> (u16, u16) {
    ((word & 0xFFFF) as u16, (word >> 16) as u16)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Raw little-endian uint32 label words.
pub fn read_label_words(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() % LABEL_BYTES != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: LABEL_BYTES,
        });
    }
    Ok(bytes
        .chunks_exact(LABEL_BYTES)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads the label file and remaps semantic ids; the instance half is dropped.
pub fn read_labels(path: impl AsRef<Path>, map: &LearningMap) -> Result<Vec<ClassId>> {
    read_label_words(path)?
        .into_iter()
        .map(|w| map.map(decode_label_word(w).0))
        .collect()
}

pub fn read_points(path: impl AsRef<Path>) -> Result<Vec<Point>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() % POINT_BYTES != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: POINT_BYTES,
        });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    Ok(bytes
        .chunks_exact(POINT_BYTES)
        .map(|c| Point {
            x: f(&c[0..4]),
            y: f(&c[4..8]),
            z: f(&c[8..12]),
            intensity: f(&c[12..16]),
        })
        .collect())
}

/// Scan id from `.../sequences/<seq>/velodyne/<frame>.bin`; falls back to
/// the file stem alone.
fn scan_id_from_path(path: &Path) -> ScanId {
    let frame = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let sequence = path
        .parent()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .and_then(|s| s.to_str())
        .unwrap_or("unknown")
        .to_string();
    ScanId { sequence, frame }
}

pub fn read_scan(bin_path: impl AsRef<Path>, label_path: impl AsRef<Path>, map: &LearningMap) -> Result<LabeledCloud> {
    let bin_path = bin_path.as_ref();
    let label_path = label_path.as_ref();
    let points = read_points(bin_path)?;
    let labels = read_labels(label_path, map)?;
    if points.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} holds {} points but {} holds {} labels",
            bin_path.display(),
            points.len(),
            label_path.display(),
            labels.len()
        )));
    }
    LabeledCloud::new(scan_id_from_path(bin_path), points, labels)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Writes labels as uint32 words with a zero instance half.
pub fn write_labels(path: impl AsRef<Path>, labels: &[ClassId]) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let bytes: Vec<u8> = labels.iter().flat_map(|l| u32::from(l.0).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_points(path: impl AsRef<Path>, points: &[Point]) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let mut bytes = Vec::with_capacity(points.len() * POINT_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_scan(cloud: &LabeledCloud, bin_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<()> {
    write_points(bin_path, &cloud.points)?;
    write_labels(label_path, &cloud.labels)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanPaths {
    pub id: ScanId,
    pub bin: PathBuf,
    pub label: PathBuf,
}

pub fn scan_paths(root: &Path, id: &ScanId) -> ScanPaths {
    let seq = root.join("sequences").join(&id.sequence);
    ScanPaths {
        id: id.clone(),
        bin: seq.join("velodyne").join(format!("{:06}.bin", id.frame)),
        label: seq.join("labels").join(format!("{:06}.label", id.frame)),
    }
}

/// Lists scans of the given sequences, ordered by (sequence, frame).
pub fn enumerate_split(root: impl AsRef<Path>, groups: &[impl AsRef<str>]) -> Result<Vec<ScanPaths>> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for seq in groups {
        let seq = seq.as_ref();
        let velodyne = root.join("sequences").join(seq).join("velodyne");
        let labels = root.join("sequences").join(seq).join("labels");
        for dir in [&velodyne, &labels] {
            if !dir.is_dir() {
                return Err(Error::Data(format!("missing directory {}", dir.display())));
            }
        }
        let entries = fs::read_dir(&velodyne).map_err(|e| Error::io(&velodyne, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&velodyne, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("bin") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let frame: u32 = stem
                .parse()
                .map_err(|_| Error::Data(format!("unexpected scan file name {}", path.display())))?;
            let label = labels.join(format!("{stem}.label"));
            if !label.is_file() {
                return Err(Error::Data(format!("scan {} has no label file", path.display())));
            }
            out.push(ScanPaths {
                id: ScanId::new(seq, frame),
                bin: path,
                label,
            });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    log::info!("enumerated {} scans from {} sequences", out.len(), groups.len());
    Ok(out)
}

/// Training groups (one per step) plus the held-out validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub groups: Vec<Vec<LabeledCloud>>,
    pub validation: Vec<LabeledCloud>,
}

impl SplitDataset {
    pub fn training_scans(&self) -> impl Iterator<Item = &LabeledCloud> {
        self.groups.iter().flatten()
    }

    /// Reads real scans given one sequence list per step and a validation list.
    pub fn load_real(
        root: impl AsRef<Path>,
        groups: &[Vec<String>],
        validation: &[String],
        map: &LearningMap,
    ) -> Result<Self> {
        let root = root.as_ref();
        let read_group = |seqs: &[String]| -> Result<Vec<LabeledCloud>> {
            enumerate_split(root, seqs)?
                .iter()
                .map(|p| read_scan(&p.bin, &p.label, map))
                .collect()
        };
        Ok(Self {
            groups: groups.iter().map(|g| read_group(g)).collect::<Result<_>>()?,
            validation: read_group(validation)?,
        })
    }
}

/// Geometric primitive used to synthesize a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    /// Flat annulus on the ground plane.
    GroundRing,
    /// Axis-aligned box standing on the ground.
    Box,
    /// Vertical line cluster.
    Line,
    /// Spherical blob.
    Blob,
}

impl Primitive {
    /// Default primitive for well-known class names.
    pub fn for_name(name: &str) -> Option<Self> {
        let n = crate::taxonomy::normalize_name(name);
        let kind = match n.as_str() {
            "road" | "parking" | "sidewalk" | "other-ground" | "terrain" | "ground" | "flat" => Self::GroundRing,
            "building" | "fence" | "car" | "truck" | "other-vehicle" | "bicycle" | "motorcycle" | "construction"
            | "vehicle" | "structure" => Self::Box,
            "pole" | "trunk" | "traffic-sign" | "pole-like" => Self::Line,
            "vegetation" | "person" | "bicyclist" | "motorcyclist" | "nature" | "human" | "dynamic" => Self::Blob,
            _ => return None,
        };
        Some(kind)
    }
}

/// Synthetic dataset parameters.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub scans_per_group: usize,
    pub validation_scans: usize,
    pub points_per_scan: usize,
    pub taxonomy: ClassTaxonomy,
    /// Target fraction of points per class over the whole dataset.
    pub class_mix: BTreeMap<ClassId, f64>,
    pub primitives: BTreeMap<ClassId, Primitive>,
    /// Relative over-representation of a class in the group of its own step.
    pub skew: f64,
}

/// JSON form of [`SynthConfig`]; classes are referenced by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfigFile {
    pub seed: u64,
    pub scans_per_group: usize,
    #[serde(default)]
    pub validation_scans: Option<usize>,
    pub points_per_scan: usize,
    /// Built-in name or path.
    pub taxonomy: String,
    #[serde(default)]
    pub class_mix: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub primitives: BTreeMap<String, Primitive>,
    #[serde(default)]
    pub skew: Option<f64>,
}

pub const DEFAULT_SKEW: f64 = 4.0;

impl SynthConfigFile {
    pub fn resolve(&self) -> Result<SynthConfig> {
        let taxonomy = ClassTaxonomy::resolve(&self.taxonomy)?;
        let class_mix = match &self.class_mix {
            Some(m) => m
                .iter()
                .map(|(n, f)| Ok((taxonomy.id(n)?, *f)))
                .collect::<Result<_>>()?,
            None => SynthConfig::uniform_mix(&taxonomy),
        };
        let primitives = self
            .primitives
            .iter()
            .map(|(n, p)| Ok((taxonomy.id(n)?, *p)))
            .collect::<Result<_>>()?;
        Ok(SynthConfig {
            seed: self.seed,
            scans_per_group: self.scans_per_group,
            validation_scans: self.validation_scans.unwrap_or(self.scans_per_group),
            points_per_scan: self.points_per_scan,
            taxonomy,
            class_mix,
            primitives,
            skew: self.skew.unwrap_or(DEFAULT_SKEW),
        })
    }
}

impl SynthConfig {
    /// Uniform mix over the finest classes and default primitives.
    pub fn new(taxonomy: ClassTaxonomy, seed: u64, scans_per_group: usize, points_per_scan: usize) -> Self {
        let class_mix = Self::uniform_mix(&taxonomy);
        Self {
            seed,
            scans_per_group,
            validation_scans: scans_per_group,
            points_per_scan,
            taxonomy,
            class_mix,
            primitives: BTreeMap::new(),
            skew: DEFAULT_SKEW,
        }
    }

    pub fn uniform_mix(taxonomy: &ClassTaxonomy) -> BTreeMap<ClassId, f64> {
        let fine = ground_truth_classes(taxonomy);
        let w = 1.0 / fine.len() as f64;
        fine.iter().map(|&c| (c, w)).collect()
    }

    fn primitive_of(&self, class: ClassId) -> Option<Primitive> {
        self.primitives
            .get(&class)
            .copied()
            .or_else(|| self.taxonomy.name(class).ok().and_then(Primitive::for_name))
    }

    fn validate(&self) -> Result<()> {
        if self.scans_per_group == 0 || self.points_per_scan == 0 || self.validation_scans == 0 {
            return Err(Error::Config("scan and point counts must be at least 1".into()));
        }
        if !(self.skew.is_finite() && self.skew > 0.0) {
            return Err(Error::Config(format!("skew {} must be positive", self.skew)));
        }
        let fine = ground_truth_classes(&self.taxonomy);
        let mut total = 0.0;
        for (&c, &f) in &self.class_mix {
            if !fine.contains(&c) {
                return Err(Error::Config(format!(
                    "class {} in class_mix is not a ground-truth class",
                    self.taxonomy.name(c).unwrap_or("?")
                )));
            }
            if !(f.is_finite() && f >= 0.0) {
                return Err(Error::Config(format!("negative or non-finite fraction for class {c}")));
            }
            if f > 0.0 && self.primitive_of(c).is_none() {
                return Err(Error::Config(format!(
                    "infeasible mix: class {} has a positive fraction but no primitive",
                    self.taxonomy.name(c)?
                )));
            }
            total += f;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class_mix sums to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Classes that appear in ground truth: the finest level when a hierarchy
/// exists, otherwise every class.
pub fn ground_truth_classes(taxonomy: &ClassTaxonomy) -> Vec<ClassId> {
    if taxonomy.has_hierarchy() {
        taxonomy.steps().last().cloned().unwrap_or_default()
    } else {
        (1..=taxonomy.max_id().0).map(ClassId).collect()
    }
}

/// Group in which a class is over-represented.
fn rich_group(taxonomy: &ClassTaxonomy, class: ClassId) -> usize {
    let k = taxonomy.num_steps();
    if taxonomy.has_hierarchy() {
        let coarse = taxonomy.ancestor(class, 0).expect("fine class has a coarse ancestor");
        taxonomy.steps()[0].iter().position(|&c| c == coarse).unwrap_or(0) % k
    } else {
        taxonomy.step_of(class).unwrap_or(0)
    }
}

/// Per-group class fractions: rows sum to 1, column means equal the mix.
/// Starts from the mix boosted by `skew` in each class's own group and
/// alternately rescales rows and columns.
pub fn group_mix(config: &SynthConfig) -> Vec<BTreeMap<ClassId, f64>> {
    let g = config.taxonomy.num_steps();
    let classes: Vec<(ClassId, f64)> = config.class_mix.iter().map(|(&c, &f)| (c, f)).collect();
    let mut q: Vec<Vec<f64>> = (0..g)
        .map(|row| {
            classes
                .iter()
                .map(|&(c, f)| {
                    if rich_group(&config.taxonomy, c) == row {
                        f * config.skew
                    } else {
                        f
                    }
                })
                .collect()
        })
        .collect();
    for _ in 0..10_000 {
        for row in q.iter_mut() {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let mut worst: f64 = 0.0;
        for (j, &(_, f)) in classes.iter().enumerate() {
            let s: f64 = q.iter().map(|r| r[j]).sum();
            let target = f * g as f64;
            if s > 0.0 {
                worst = worst.max((s - target).abs());
                q.iter_mut().for_each(|r| r[j] *= target / s);
            }
        }
        if worst < 1e-14 {
            break;
        }
    }
    q.into_iter()
        .map(|row| classes.iter().map(|&(c, _)| c).zip(row).collect())
        .collect()
}

/// Splits `total` points over classes in proportion to `mix`, carrying the
/// rounding residue to the next scan so group totals stay on target.
fn allocate(mix: &BTreeMap<ClassId, f64>, total: usize, carry: &mut BTreeMap<ClassId, f64>) -> Vec<(ClassId, usize)> {
    let want: Vec<(ClassId, f64)> = mix
        .iter()
        .map(|(&c, &f)| (c, carry.get(&c).copied().unwrap_or(0.0) + f * total as f64))
        .collect();
    let mut counts: Vec<(ClassId, usize)> = want.iter().map(|&(c, w)| (c, w.max(0.0).floor() as usize)).collect();
    let assigned: usize = counts.iter().map(|(_, n)| n).sum();
    let mut order: Vec<usize> = (0..want.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = want[a].1 - counts[a].1 as f64;
        let fb = want[b].1 - counts[b].1 as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    order.retain(|&i| mix[&want[i].0] > 0.0);
    let mut remaining = total.saturating_sub(assigned);
    while remaining > 0 && !order.is_empty() {
        for &i in &order {
            if remaining == 0 {
                break;
            }
            counts[i].1 += 1;
            remaining -= 1;
        }
    }
    for (i, &(c, w)) in want.iter().enumerate() {
        carry.insert(c, w - counts[i].1 as f64);
    }
    counts.retain(|&(_, n)| n > 0);
    counts
}

const GROUND_Z: f64 = -1.73;

struct ClassStyle {
    primitive: Primitive,
    /// Rank among classes sharing the primitive.
    rank: usize,
    intensity_mean: f64,
    intensity_sd: f64,
}

fn class_styles(config: &SynthConfig) -> BTreeMap<ClassId, ClassStyle> {
    let mut per_kind: BTreeMap<Primitive, usize> = BTreeMap::new();
    let n = config.class_mix.len().max(1) as f64;
    config
        .class_mix
        .keys()
        .enumerate()
        .filter_map(|(i, &c)| {
            let primitive = config.primitive_of(c)?;
            let rank = per_kind.entry(primitive).or_insert(0);
            let style = ClassStyle {
                primitive,
                rank: *rank,
                intensity_mean: (i as f64 + 0.5) / n,
                intensity_sd: 0.25 / n,
            };
            *rank += 1;
            Some((c, style))
        })
        .collect()
}

/// Emits `count` points of one class into `points`.
fn emit_primitive(style: &ClassStyle, count: usize, rng: &mut ChaCha8Rng, points: &mut Vec<Point>) {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let r = style.rank as f64;
    let intensity = |rng: &mut ChaCha8Rng| (style.intensity_mean + style.intensity_sd * unit.sample(rng)).clamp(0.0, 1.0);
    let push = |points: &mut Vec<Point>, x: f64, y: f64, z: f64, i: f64| {
        points.push(Point {
            x: x as f32,
            y: y as f32,
            z: z as f32,
            intensity: i as f32,
        })
    };
    match style.primitive {
        Primitive::GroundRing => {
            let (r0, r1) = (3.0 + 7.0 * r, 10.0 + 7.0 * r);
            for _ in 0..count {
                let rad = rng.random_range(r0..r1);
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                let z = GROUND_Z + 0.03 * unit.sample(rng);
                push(points, rad * th.cos(), rad * th.sin(), z, intensity(rng));
            }
        }
        Primitive::Box => {
            let (len, wid, hgt) = (4.0 + 5.0 * r, 2.0 + 2.0 * r, 1.5 + 3.0 * r);
            let mut left = count;
            while left > 0 {
                let n = left.min(200);
                left -= n;
                let rad = rng.random_range(6.0..25.0);
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                let (cx, cy) = (rad * th.cos(), rad * th.sin());
                for _ in 0..n {
                    // a random point on one of the four walls or the roof
                    let (mut u, mut v) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                    let mut z = GROUND_Z + rng.random_range(0.0..hgt);
                    match rng.random_range(0..5) {
                        0 => u = -0.5,
                        1 => u = 0.5,
                        2 => v = -0.5,
                        3 => v = 0.5,
                        _ => z = GROUND_Z + hgt,
                    }
                    push(points, cx + u * len, cy + v * wid, z, intensity(rng));
                }
            }
        }
        Primitive::Line => {
            let (z0, z1) = (GROUND_Z + 1.5 * r, GROUND_Z + 1.5 * r + 3.0);
            let mut left = count;
            while left > 0 {
                let n = left.min(60);
                left -= n;
                let rad = rng.random_range(5.0..20.0);
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                let (cx, cy) = (rad * th.cos(), rad * th.sin());
                for _ in 0..n {
                    let x = cx + 0.08 * unit.sample(rng);
                    let y = cy + 0.08 * unit.sample(rng);
                    push(points, x, y, rng.random_range(z0..z1), intensity(rng));
                }
            }
        }
        Primitive::Blob => {
            let radius = 1.0 + 0.5 * r;
            let height = 0.5 + 1.5 * r;
            let mut left = count;
            while left > 0 {
                let n = left.min(150);
                left -= n;
                let rad = rng.random_range(5.0..20.0);
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                let (cx, cy, cz) = (rad * th.cos(), rad * th.sin(), GROUND_Z + height);
                for _ in 0..n {
                    let s = radius / 2.0;
                    push(
                        points,
                        cx + s * unit.sample(rng),
                        cy + s * unit.sample(rng),
                        cz + s * unit.sample(rng),
                        intensity(rng),
                    );
                }
            }
        }
    }
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed ^ (stream + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Sequence name of synthetic training group `g`.
pub fn synthetic_sequence(g: usize) -> String {
    format!("{g:02}")
}

pub const SYNTHETIC_VALIDATION_SEQUENCE: &str = "val";

fn generate_group(
    config: &SynthConfig,
    styles: &BTreeMap<ClassId, ClassStyle>,
    mix: &BTreeMap<ClassId, f64>,
    sequence: &str,
    scans: usize,
    seed: u64,
) -> Result<Vec<LabeledCloud>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut carry = BTreeMap::new();
    (0..scans)
        .map(|frame| {
            let mut points = Vec::with_capacity(config.points_per_scan);
            let mut labels = Vec::with_capacity(config.points_per_scan);
            for (class, count) in allocate(mix, config.points_per_scan, &mut carry) {
                emit_primitive(&styles[&class], count, &mut rng, &mut points);
                labels.resize(points.len(), class);
            }
            LabeledCloud::new(ScanId::new(sequence, frame as u32), points, labels)
        })
        .collect()
}

/// Deterministic synthetic dataset: one group per step plus validation.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SplitDataset> {
    config.validate()?;
    let styles = class_styles(config);
    let mixes = group_mix(config);
    let groups = mixes
        .iter()
        .enumerate()
        .map(|(g, mix)| {
            generate_group(
                config,
                &styles,
                mix,
                &synthetic_sequence(g),
                config.scans_per_group,
                derived_seed(config.seed, g as u64),
            )
        })
        .collect::<Result<_>>()?;
    let validation = generate_group(
        config,
        &styles,
        &config.class_mix,
        SYNTHETIC_VALIDATION_SEQUENCE,
        config.validation_scans,
        derived_seed(config.seed, mixes.len() as u64),
    )?;
    Ok(SplitDataset { groups, validation })
}

/// `manifest.json` of a persisted synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub config: serde_json::Value,
    pub taxonomy: String,
    pub groups: Vec<Vec<ScanId>>,
    pub validation: Vec<ScanId>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes scans in the binary layout under `dir/sequences/...` plus a manifest.
pub fn write_synthetic(dataset: &SplitDataset, config: &SynthConfig, echo: serde_json::Value, dir: impl AsRef<Path>) -> Result<SynthManifest> {
    let dir = dir.as_ref();
    for cloud in dataset.training_scans().chain(&dataset.validation) {
        let p = scan_paths(dir, &cloud.id);
        write_scan(cloud, &p.bin, &p.label)?;
    }
    let ids = |v: &[LabeledCloud]| v.iter().map(|c| c.id.clone()).collect::<Vec<_>>();
    let manifest = SynthManifest {
        seed: config.seed,
        config: echo,
        taxonomy: config.taxonomy.to_json(),
        groups: dataset.groups.iter().map(|g| ids(g)).collect(),
        validation: ids(&dataset.validation),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset written by [`write_synthetic`].
pub fn load_synthetic(dir: impl AsRef<Path>) -> Result<(SynthManifest, ClassTaxonomy, SplitDataset)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SynthManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let taxonomy = ClassTaxonomy::from_json_str(&manifest.taxonomy, &path)?;
    let map = LearningMap::identity(&taxonomy);
    let read = |ids: &[ScanId]| -> Result<Vec<LabeledCloud>> {
        ids.iter()
            .map(|id| {
                let p = scan_paths(dir, id);
                let mut cloud = read_scan(&p.bin, &p.label, &map)?;
                cloud.id = id.clone();
                Ok(cloud)
            })
            .collect()
    };
    let dataset = SplitDataset {
        groups: manifest.groups.iter().map(|g| read(g)).collect::<Result<_>>()?,
        validation: read(&manifest.validation)?,
    };
    Ok((manifest, taxonomy, dataset))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize) -> LabeledCloud {
        let points = (0..n)
            .map(|i| Point {
                x: i as f32,
                y: -(i as f32) * 0.5,
                z: 1.25,
                intensity: 0.5,
            })
            .collect();
        LabeledCloud::new(ScanId::new("00", 7), points, vec![ClassId(3); n]).unwrap()
    }

    #[test]
    fn single_record_scan() {
        let dir = tempfile::tempdir().unwrap();
        let c = cloud(1);
        let (b, l) = (dir.path().join("a.bin"), dir.path().join("a.label"));
        write_scan(&c, &b, &l).unwrap();
        assert_eq!(fs::metadata(&b).unwrap().len(), 16);
        assert_eq!(fs::metadata(&l).unwrap().len(), 4);
        let back = read_scan(&b, &l, &LearningMap::identity(&ClassTaxonomy::cil())).unwrap();
        assert_eq!(back.points, c.points);
        assert_eq!(back.labels, c.labels);
    }

    #[test]
    fn label_word_split() {
        // hand-built little-endian bytes of 0x0005_000A
        let bytes = [0x0A, 0x00, 0x05, 0x00];
        let word = u32::from_le_bytes(bytes);
        assert_eq!(decode_label_word(word), (0x000A, 0x0005));

        let dir = tempfile::tempdir().unwrap();
        let l = dir.path().join("x.label");
        fs::write(&l, bytes).unwrap();
        let map = LearningMap::identity(&ClassTaxonomy::cil());
        assert_eq!(read_labels(&l, &map).unwrap(), vec![ClassId(10)]);
    }

    #[test]
    fn truncated_scan() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("x.bin");
        fs::write(&b, [0u8; 33]).unwrap();
        assert!(matches!(read_points(&b), Err(Error::Truncated { len: 33, .. })));
    }

    #[test]
    fn size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (b, l) = (dir.path().join("a.bin"), dir.path().join("a.label"));
        write_points(&b, &cloud(2).points).unwrap();
        write_labels(&l, &[ClassId(1)]).unwrap();
        let err = read_scan(&b, &l, &LearningMap::identity(&ClassTaxonomy::cil())).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn strict_and_lenient_maps() {
        let tax = ClassTaxonomy::cil();
        let strict = LearningMap::semantic_kitti(&tax, true).unwrap();
        assert_eq!(strict.map(10).unwrap(), tax.id("car").unwrap());
        assert_eq!(strict.map(252).unwrap(), tax.id("car").unwrap());
        assert_eq!(strict.map(0).unwrap(), ClassId::UNLABELED);
        assert!(matches!(strict.map(7), Err(Error::Unmapped(7))));
        let lenient = LearningMap::semantic_kitti(&tax, false).unwrap();
        assert_eq!(lenient.map(7).unwrap(), ClassId::UNLABELED);
    }

    #[test]
    fn learning_map_covers_all_classes() {
        let tax = ClassTaxonomy::cil();
        let map = LearningMap::semantic_kitti(&tax, true).unwrap();
        let mapped: std::collections::BTreeSet<_> = map.map.values().copied().collect();
        for c in 1..=19 {
            assert!(mapped.contains(&ClassId(c)), "class {c} unreachable");
        }
    }

    #[test]
    fn enumerate_sorted_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        for (seq, frame) in [("02", 1), ("01", 3), ("01", 0)] {
            let p = scan_paths(dir.path(), &ScanId::new(seq, frame));
            write_scan(&cloud(1), &p.bin, &p.label).unwrap();
        }
        let list = enumerate_split(dir.path(), &["02", "01"]).unwrap();
        let ids: Vec<_> = list.iter().map(|p| p.id.to_string()).collect();
        assert_eq!(ids, ["01/000000", "01/000003", "02/000001"]);
        assert!(enumerate_split(dir.path(), &[] as &[&str]).unwrap().is_empty());
        assert!(enumerate_split(dir.path(), &["05"]).is_err());

        let orphan = scan_paths(dir.path(), &ScanId::new("02", 9));
        write_points(&orphan.bin, &cloud(1).points).unwrap();
        assert!(enumerate_split(dir.path(), &["02"]).is_err());
    }

    fn uniform8(seed: u64, scans: usize, points: usize) -> SynthConfig {
        SynthConfig::new(ClassTaxonomy::synth8(), seed, scans, points)
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&uniform8(5, 4, 300)).unwrap();
        let b = generate_synthetic(&uniform8(5, 4, 300)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&uniform8(6, 4, 300)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_uniform_mix_fractions() {
        // 4 groups x 5 scans x 500 points = 10 000 points
        let cfg = uniform8(1, 5, 500);
        let data = generate_synthetic(&cfg).unwrap();
        let mut counts = BTreeMap::new();
        let mut total = 0usize;
        for c in data.training_scans().chain(&data.validation) {
            total += c.len();
            for l in &c.labels {
                *counts.entry(*l).or_insert(0usize) += 1;
            }
        }
        assert_eq!(total, 10_000);
        assert_eq!(counts.len(), 8);
        for (c, n) in counts {
            let f = n as f64 / total as f64;
            assert!((0.1..=0.15).contains(&f), "class {c}: {f}");
        }
    }

    #[test]
    fn synthetic_groups_are_skewed() {
        let cfg = uniform8(2, 6, 400);
        let data = generate_synthetic(&cfg).unwrap();
        let tax = &cfg.taxonomy;
        for (g, group) in data.groups.iter().enumerate() {
            let own = group
                .iter()
                .flat_map(|c| &c.labels)
                .filter(|l| tax.step_of(**l) == Some(g))
                .count() as f64;
            let total = group.iter().map(LabeledCloud::len).sum::<usize>() as f64;
            let share = tax.steps()[g].len() as f64 / 8.0;
            assert!(own / total > share * 1.5, "group {g}: {}", own / total);
        }
    }

    #[test]
    fn synthetic_preconditions() {
        let mut cfg = uniform8(1, 0, 100);
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        cfg.scans_per_group = 1;
        cfg.class_mix.insert(ClassId(1), 0.5);
        assert!(generate_synthetic(&cfg).is_err());

        let tax = ClassTaxonomy::from_json_str(r#"{"names":["road","widget"],"steps":[["road"],["widget"]]}"#, Path::new("t")).unwrap();
        let cfg = SynthConfig::new(tax, 1, 1, 10);
        match generate_synthetic(&cfg) {
            Err(Error::Config(m)) => assert!(m.contains("widget"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synthetic_never_unlabeled() {
        let data = generate_synthetic(&uniform8(3, 3, 200)).unwrap();
        assert!(data
            .training_scans()
            .chain(&data.validation)
            .all(|c| c.labels.iter().all(|l| !l.is_sentinel())));
    }

    #[test]
    fn group_mix_marginals() {
        let cfg = uniform8(0, 1, 1);
        let q = group_mix(&cfg);
        for row in &q {
            assert!((row.values().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (c, f) in &cfg.class_mix {
            let mean = q.iter().map(|r| r[c]).sum::<f64>() / q.len() as f64;
            assert!((mean - f).abs() < 1e-12);
        }
    }

    #[test]
    fn persisted_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = uniform8(9, 2, 50);
        let data = generate_synthetic(&cfg).unwrap();
        write_synthetic(&data, &cfg, serde_json::json!({}), dir.path()).unwrap();
        let (_, tax, back) = load_synthetic(dir.path()).unwrap();
        assert_eq!(tax, cfg.taxonomy);
        assert_eq!(back, data);
    }
}
