//! Class prototype vectors: the auxiliary semantic information that
//! conditions the feature generator. Loaded from a text file or synthesized
//! deterministically from class names.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{ClassId, SplitConfig};
use crate::error::{GzslError, Result};
use crate::pipeline::seed::derive_seed;

/// Header line of the prototype file format.
pub const PROTO_MAGIC: &str = "GZSL-PROTO v1";

/// Map from class id to a unit-norm D-dimensional prototype vector, with the
/// seen/unseen split recorded.
#[derive(Debug, Clone)]
pub struct ClassPrototypeTable {
    dim: usize,
    entries: BTreeMap<ClassId, Vec<f64>>,
    names: BTreeMap<ClassId, String>,
    seen: BTreeSet<ClassId>,
    unseen: BTreeSet<ClassId>,
}

impl ClassPrototypeTable {
    fn build(
        dim: usize,
        entries: BTreeMap<ClassId, Vec<f64>>,
        names: BTreeMap<ClassId, String>,
        split: &SplitConfig,
    ) -> Result<Self> {
        for id in split.classes() {
            if !entries.contains_key(&id) {
                return Err(GzslError::arg(format!("missing prototype for class {id}")));
            }
        }
        Ok(ClassPrototypeTable {
            dim,
            entries,
            names,
            seen: split.seen().clone(),
            unseen: split.unseen().clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, class: ClassId) -> Option<&[f64]> {
        self.entries.get(&class).map(|v| v.as_slice())
    }

    pub fn name(&self, class: ClassId) -> Option<&str> {
        self.names.get(&class).map(|s| s.as_str())
    }

    pub fn seen(&self) -> &BTreeSet<ClassId> {
        &self.seen
    }

    pub fn unseen(&self) -> &BTreeSet<ClassId> {
        &self.unseen
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.entries.keys().copied().collect()
    }
}

fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(GzslError::arg("prototype vector has zero or invalid norm"));
    }
    for x in v {
        *x /= norm;
    }
    Ok(())
}

/// Loads a prototype file: first line `GZSL-PROTO v1`, then one line per
/// class `<class_id> <class_name> <v1> ... <vD>`. Vectors are L2-normalized
/// after load; the dimension is inferred from the first row.
pub fn load_prototypes(path: &Path, split: &SplitConfig) -> Result<ClassPrototypeTable> {
    let text = fs::read_to_string(path)?;
    let path_str = path.display().to_string();
    let parse_err = |line: usize, message: String| GzslError::Parse {
        path: path_str.clone(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == PROTO_MAGIC => {}
        Some((_, header)) => {
            return Err(parse_err(1, format!("bad header {header:?}, expected {PROTO_MAGIC:?}")))
        }
        None => return Err(parse_err(1, "empty file".to_string())),
    }

    let mut entries = BTreeMap::new();
    let mut names = BTreeMap::new();
    let mut dim = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let id: ClassId = tokens
            .next()
            .unwrap()
            .parse()
            .map_err(|_| parse_err(line_no, "class id is not an integer".to_string()))?;
        let name = tokens
            .next()
            .ok_or_else(|| parse_err(line_no, "missing class name".to_string()))?
            .to_string();
        let mut vector = Vec::new();
        for tok in tokens {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(line_no, format!("non-numeric token {tok:?}")))?;
            vector.push(v);
        }
        if vector.is_empty() {
            return Err(parse_err(line_no, "row has no vector components".to_string()));
        }
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(parse_err(
                    line_no,
                    format!("dimension mismatch: expected {d}, got {}", vector.len()),
                ))
            }
            _ => {}
        }
        normalize(&mut vector)?;
        if entries.insert(id, vector).is_some() {
            return Err(parse_err(line_no, format!("duplicate class id {id}")));
        }
        names.insert(id, name);
    }
    let dim = dim.ok_or_else(|| parse_err(1, "file has no prototype rows".to_string()))?;
    ClassPrototypeTable::build(dim, entries, names, split)
}

/// Deterministically synthesizes unit-norm prototypes, one per class, from a
/// standard normal generator keyed by `(seed, class name)`.
pub fn synthesize_prototypes(
    classes: &[(ClassId, String)],
    dim: usize,
    seed: u64,
    split: &SplitConfig,
) -> Result<ClassPrototypeTable> {
    if dim < 2 {
        return Err(GzslError::arg("prototype dimension must be at least 2"));
    }
    let mut seen_names = BTreeSet::new();
    for (_, name) in classes {
        if !seen_names.insert(name.as_str()) {
            return Err(GzslError::arg(format!("duplicate class name {name:?}")));
        }
    }
    let mut entries = BTreeMap::new();
    let mut names = BTreeMap::new();
    for (id, name) in classes {
        if entries.contains_key(id) {
            return Err(GzslError::arg(format!("duplicate class id {id}")));
        }
        entries.insert(*id, synthesize_vector(name, dim, seed)?);
        names.insert(*id, name.clone());
    }
    ClassPrototypeTable::build(dim, entries, names, split)
}

/// One synthesized prototype vector for `(seed, name, dim)`.
pub fn synthesize_vector(name: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, name));
    let mut vector: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut vector)?;
    Ok(vector)
}
