//! Class sets, incremental step partitions and coarse-to-fine hierarchies.
//!
//! Class ids are dense: `names[i]` carries id `i + 1`. Id 0 is reserved for
//! [`ClassId::BACKGROUND`] and 255 for [`ClassId::UNLABELED`], which is never
//! a valid model output.
//!
//! A hierarchy is a list of levels, one per incremental step. Each level is a
//! total map from the finest classes (those of the last step) to the class
//! representing them at that level; the last level is the identity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic class identifier as stored in label maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
    pub const UNLABELED: ClassId = ClassId(255);

    pub fn is_sentinel(self) -> bool {
        self == Self::BACKGROUND || self == Self::UNLABELED
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ClassId::BACKGROUND => write!(f, "background"),
            ClassId::UNLABELED => write!(f, "unlabeled"),
            ClassId(v) => write!(f, "{v}"),
        }
    }
}

/// Largest number of named classes (ids 1..=254).
pub const MAX_CLASSES: usize = 254;

/// Lowercase, with `_` and spaces folded into `-`.
pub fn normalize_name(name: &str) -> String {
    name.trim()
        .chars()
        .map(|c| match c {
            '_' | ' ' => '-',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTaxonomy {
    names: Vec<String>,
    steps: Vec<Vec<ClassId>>,
    /// `levels[j][fine]` is the level-j class of a fine class.
    levels: Option<Vec<BTreeMap<ClassId, ClassId>>>,
    lookup: HashMap<String, ClassId>,
}

/// On-disk layout of a taxonomy file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyFile {
    names: Vec<String>,
    steps: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hierarchy: Option<Vec<BTreeMap<String, String>>>,
}

const CIL_NAMES: [&str; 19] = [
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "bicyclist",
    "motorcyclist",
    "road",
    "parking",
    "sidewalk",
    "other-ground",
    "building",
    "fence",
    "vegetation",
    "trunk",
    "terrain",
    "pole",
    "traffic-sign",
];

const CIL_STEP0: [&str; 6] = ["road", "parking", "sidewalk", "other-ground", "vegetation", "terrain"];
const CIL_STEP1: [&str; 5] = ["building", "fence", "trunk", "pole", "traffic-sign"];
const CIL_STEP2: [&str; 8] = [
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "bicyclist",
    "motorcyclist",
    "car",
];

/// Coarse classes, one per CIL step, and the mid-level split of each.
const C2F_COARSE: [(&str, &[&str]); 3] = [
    ("ground", &CIL_STEP0),
    ("structure", &CIL_STEP1),
    ("dynamic", &CIL_STEP2),
];
const C2F_MID: [(&str, &[&str]); 6] = [
    ("flat", &["road", "parking", "sidewalk", "other-ground"]),
    ("nature", &["vegetation", "terrain"]),
    ("construction", &["building", "fence"]),
    ("pole-like", &["trunk", "pole", "traffic-sign"]),
    ("vehicle", &["car", "bicycle", "motorcycle", "truck", "other-vehicle"]),
    ("human", &["person", "bicyclist", "motorcyclist"]),
];

/// Sequence groups of the CIL split, one per step, and the validation group.
pub const CIL_SEQUENCE_GROUPS: [&[&str]; 3] = [&["01", "02", "03"], &["04", "05", "09", "10"], &["00", "06", "07"]];
pub const CIL_VALIDATION_GROUP: &[&str] = &["08"];

const BUNDLED_CIL: &str = include_str!("../data/cil.json");
const BUNDLED_C2F: &str = include_str!("../data/c2f.json");
const BUNDLED_SYNTH8: &str = include_str!("../data/synth8.json");

impl ClassTaxonomy {
    /// Builds and validates a taxonomy from class names.
    pub fn new(
        names: Vec<String>,
        steps: Vec<Vec<String>>,
        hierarchy: Option<Vec<BTreeMap<String, String>>>,
    ) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Taxonomy("no classes".into()));
        }
        if names.len() > MAX_CLASSES {
            return Err(Error::Taxonomy(format!(
                "{} classes exceeds the maximum of {MAX_CLASSES}",
                names.len()
            )));
        }
        let mut lookup = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            let key = normalize_name(name);
            if key.is_empty() || key == "background" || key == "unlabeled" {
                return Err(Error::Taxonomy(format!("reserved or empty class name {name:?}")));
            }
            if lookup.insert(key, ClassId(i as u16 + 1)).is_some() {
                return Err(Error::Taxonomy(format!("class {name:?} listed twice in names")));
            }
        }
        let resolve = |name: &str| -> Result<ClassId> {
            lookup
                .get(&normalize_name(name))
                .copied()
                .ok_or_else(|| Error::InvalidClass(format!("unknown class name {name:?}")))
        };

        if steps.is_empty() {
            return Err(Error::Taxonomy("no steps".into()));
        }
        let mut seen: BTreeMap<ClassId, usize> = BTreeMap::new();
        let mut id_steps = Vec::with_capacity(steps.len());
        for (k, step) in steps.iter().enumerate() {
            if step.is_empty() {
                return Err(Error::Taxonomy(format!("step {k} is empty")));
            }
            let mut ids = Vec::with_capacity(step.len());
            for name in step {
                let id = resolve(name)?;
                if let Some(prev) = seen.insert(id, k) {
                    return Err(Error::Taxonomy(format!(
                        "class {name:?} appears in steps {prev} and {k}; steps must be disjoint"
                    )));
                }
                ids.push(id);
            }
            ids.sort();
            id_steps.push(ids);
        }
        if let Some(missing) = names.iter().find(|n| !seen.contains_key(&lookup[&normalize_name(n)])) {
            return Err(Error::Taxonomy(format!("class {missing:?} belongs to no step")));
        }

        let levels = match hierarchy {
            None => None,
            Some(raw) => Some(Self::build_levels(&raw, &id_steps, &names, &resolve)?),
        };

        Ok(Self {
            names,
            steps: id_steps,
            levels,
            lookup,
        })
    }

    fn build_levels(
        raw: &[BTreeMap<String, String>],
        steps: &[Vec<ClassId>],
        names: &[String],
        resolve: &dyn Fn(&str) -> Result<ClassId>,
    ) -> Result<Vec<BTreeMap<ClassId, ClassId>>> {
        if raw.len() != steps.len() {
            return Err(Error::Hierarchy(format!(
                "{} levels but {} steps; a hierarchy needs one level per step",
                raw.len(),
                steps.len()
            )));
        }
        let fine = steps.last().expect("steps checked non-empty");
        let name_of = |id: ClassId| names[id.index() - 1].as_str();
        let mut levels = Vec::with_capacity(raw.len());
        for (j, level) in raw.iter().enumerate() {
            let mut map = BTreeMap::new();
            for (from, to) in level {
                let f = resolve(from)?;
                let t = resolve(to)?;
                if !fine.contains(&f) {
                    return Err(Error::Hierarchy(format!(
                        "level {j}: {from:?} is not a class of the finest step"
                    )));
                }
                if !steps[j].contains(&t) {
                    return Err(Error::Hierarchy(format!(
                        "level {j}: {to:?} (ancestor of {from:?}) is not a class of step {j}"
                    )));
                }
                map.insert(f, t);
            }
            for &f in fine {
                if !map.contains_key(&f) {
                    return Err(Error::Hierarchy(format!(
                        "level {j}: class {:?} has no ancestor",
                        name_of(f)
                    )));
                }
            }
            let image: BTreeSet<ClassId> = map.values().copied().collect();
            if let Some(&orphan) = steps[j].iter().find(|c| !image.contains(c)) {
                return Err(Error::Hierarchy(format!(
                    "level {j}: class {:?} has no descendants",
                    name_of(orphan)
                )));
            }
            levels.push(map);
        }
        let top = levels.len() - 1;
        if let Some((f, t)) = levels[top].iter().find(|(f, t)| f != t) {
            return Err(Error::Hierarchy(format!(
                "level {top} must be the identity, but maps {:?} to {:?}",
                name_of(*f),
                name_of(*t)
            )));
        }
        // A coarser level must be a function of every finer one.
        for hi in 1..levels.len() {
            for lo in 0..hi {
                let mut implied: BTreeMap<ClassId, ClassId> = BTreeMap::new();
                for &f in fine {
                    let via = levels[hi][&f];
                    let anc = levels[lo][&f];
                    if let Some(&other) = implied.get(&via) {
                        if other != anc {
                            return Err(Error::Hierarchy(format!(
                                "level {hi} class {:?} has ancestors {:?} and {:?} at level {lo}",
                                name_of(via),
                                name_of(other),
                                name_of(anc)
                            )));
                        }
                    } else {
                        implied.insert(via, anc);
                    }
                }
            }
        }
        Ok(levels)
    }

    /// The 19-class, three-step split of SemanticKITTI.
    pub fn cil() -> Self {
        Self::new(
            owned(&CIL_NAMES),
            vec![owned(&CIL_STEP0), owned(&CIL_STEP1), owned(&CIL_STEP2)],
            None,
        )
        .expect("built-in CIL taxonomy is valid")
    }

    /// Coarse-to-fine hierarchy over the same 19 classes: 3 coarse, 6 mid, 19 fine.
    pub fn c2f() -> Self {
        let mut names = owned(&CIL_NAMES);
        names.extend(C2F_COARSE.iter().map(|(n, _)| n.to_string()));
        names.extend(C2F_MID.iter().map(|(n, _)| n.to_string()));
        let steps = vec![
            C2F_COARSE.iter().map(|(n, _)| n.to_string()).collect(),
            C2F_MID.iter().map(|(n, _)| n.to_string()).collect(),
            owned(&CIL_NAMES),
        ];
        let level = |groups: &[(&str, &[&str])]| -> BTreeMap<String, String> {
            groups
                .iter()
                .flat_map(|(parent, kids)| kids.iter().map(move |k| (k.to_string(), parent.to_string())))
                .collect()
        };
        let identity = CIL_NAMES.iter().map(|n| (n.to_string(), n.to_string())).collect();
        Self::new(names, steps, Some(vec![level(&C2F_COARSE), level(&C2F_MID), identity]))
            .expect("built-in C2F taxonomy is valid")
    }

    /// Eight-class, three-step taxonomy used by the synthetic benchmark.
    pub fn synth8() -> Self {
        Self::from_json_str(BUNDLED_SYNTH8, Path::new("synth8.json")).expect("bundled synth8 taxonomy is valid")
    }

    /// Resolves `cil`, `c2f`, `synth8` or a path to a taxonomy file.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec {
            "cil" => Self::from_json_str(BUNDLED_CIL, Path::new("cil.json")),
            "c2f" => Self::from_json_str(BUNDLED_C2F, Path::new("c2f.json")),
            "synth8" => Ok(Self::synth8()),
            path => load_taxonomy(path),
        }
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let file: TaxonomyFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::new(file.names, file.steps, file.hierarchy)
    }

    pub fn to_json(&self) -> String {
        let name = |id: &ClassId| self.names[id.index() - 1].clone();
        let file = TaxonomyFile {
            names: self.names.clone(),
            steps: self.steps.iter().map(|s| s.iter().map(name).collect()).collect(),
            hierarchy: self.levels.as_ref().map(|levels| {
                levels
                    .iter()
                    .map(|m| m.iter().map(|(f, t)| (name(f), name(t))).collect())
                    .collect()
            }),
        };
        let mut out = serde_json::to_string_pretty(&file).expect("taxonomy serializes");
        out.push('\n');
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    /// Largest valid class id.
    pub fn max_id(&self) -> ClassId {
        ClassId(self.names.len() as u16)
    }

    pub fn is_class(&self, id: ClassId) -> bool {
        id.0 >= 1 && (id.0 as usize) <= self.names.len()
    }

    pub fn name(&self, id: ClassId) -> Result<&str> {
        if id.is_sentinel() {
            return Ok(if id == ClassId::BACKGROUND { "background" } else { "unlabeled" });
        }
        if !self.is_class(id) {
            return Err(Error::InvalidClass(format!("id {id}")));
        }
        Ok(&self.names[id.index() - 1])
    }

    /// Case-insensitive lookup; `background` and `unlabeled` resolve to the sentinels.
    pub fn id(&self, name: &str) -> Result<ClassId> {
        match normalize_name(name).as_str() {
            "background" => Ok(ClassId::BACKGROUND),
            "unlabeled" => Ok(ClassId::UNLABELED),
            key => self
                .lookup
                .get(key)
                .copied()
                .ok_or_else(|| Error::InvalidClass(format!("unknown class name {name:?}"))),
        }
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[Vec<ClassId>] {
        &self.steps
    }

    pub fn step(&self, k: usize) -> Result<&[ClassId]> {
        self.steps
            .get(k)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::OutOfRange(format!("step {k} of {}", self.steps.len())))
    }

    /// Step in which a class is introduced.
    pub fn step_of(&self, id: ClassId) -> Option<usize> {
        self.steps.iter().position(|s| s.binary_search(&id).is_ok())
    }

    /// Classes introduced in steps `0..=k`.
    pub fn cumulative_classes(&self, k: usize) -> Result<BTreeSet<ClassId>> {
        if k >= self.steps.len() {
            return Err(Error::OutOfRange(format!("step {k} of {}", self.steps.len())));
        }
        Ok(self.steps[..=k].iter().flatten().copied().collect())
    }

    pub fn has_hierarchy(&self) -> bool {
        self.levels.is_some()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.as_ref().map_or(0, Vec::len)
    }

    fn levels(&self) -> Result<&[BTreeMap<ClassId, ClassId>]> {
        self.levels
            .as_deref()
            .ok_or_else(|| Error::Unsupported("taxonomy has no hierarchy".into()))
    }

    /// The level-`level` class containing `class`.
    ///
    /// `class` may belong to any level at or below `level` in the hierarchy
    /// (a coarse class has no unique finer ancestor). Sentinels map to
    /// themselves.
    pub fn ancestor(&self, class: ClassId, level: usize) -> Result<ClassId> {
        if class.is_sentinel() {
            return Ok(class);
        }
        let levels = self.levels()?;
        if level >= levels.len() {
            return Err(Error::OutOfRange(format!("level {level} of {}", levels.len())));
        }
        if !self.is_class(class) {
            return Err(Error::InvalidClass(format!("id {class}")));
        }
        let own = self.step_of(class).expect("every class belongs to a step");
        if own < level {
            return Err(Error::InvalidClass(format!(
                "{} is a level-{own} class and has no unique level-{level} refinement",
                self.names[class.index() - 1]
            )));
        }
        // Any fine descendant determines the ancestor, by composition consistency.
        let fine = levels[own]
            .iter()
            .find(|(_, &t)| t == class)
            .map(|(&f, _)| f)
            .expect("validated: every level class has a descendant");
        Ok(levels[level][&fine])
    }

    /// True when `ancestor` is `class` itself or lies above it in the hierarchy.
    pub fn is_ancestor(&self, ancestor: ClassId, class: ClassId) -> Result<bool> {
        let level = self
            .step_of(ancestor)
            .ok_or_else(|| Error::InvalidClass(format!("id {ancestor}")))?;
        match self.ancestor(class, level) {
            Ok(a) => Ok(a == ancestor),
            Err(Error::InvalidClass(_)) if self.is_class(class) => Ok(false),
            Err(e) => Err(e),
        }
    }
}

fn owned(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Reads and validates a taxonomy JSON file.
pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<ClassTaxonomy> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ClassTaxonomy::from_json_str(&text, path)
}
