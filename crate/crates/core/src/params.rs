//! Named parameter collections and the checkpoint container.
//!
//! A checkpoint is a versioned JSON document mapping names to
//! `{shape, data}` tensors. `serde_json` is built with `float_roundtrip`,
//! so `f64` values survive a write/read cycle bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::Error;

pub const CHECKPOINT_FORMAT: &str = "cl-dialeval/checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered name → array map. Ordering is lexicographic, which keeps every
/// reduction over parameters deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Option<Array> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Array, Error> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Array::len).sum()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    /// Largest coordinate-wise absolute difference; `None` if layouts differ.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Option<f64> {
        self.same_layout(other).then(|| {
            self.entries
                .values()
                .zip(other.entries.values())
                .map(|(a, b)| a.max_abs_diff(b))
                .fold(0.0, f64::max)
        })
    }

    /// Keeps only entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Prefixes every name, e.g. `mu.` + `scorer.m`.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    /// Inverse of [`ParamSet::prefixed`] restricted to matching names.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }
}

impl FromIterator<(String, Array)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Array)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Free-form metadata (strategy, step, attachment kind, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, ParamSet>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, group: &str, params: ParamSet) -> Self {
        self.tensors.insert(group.to_string(), params);
        self
    }

    pub fn group(&self, group: &str) -> Result<&ParamSet, Error> {
        self.tensors
            .get(group)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no group {group}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected format {:?}",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_lossless(values in prop::collection::vec(-1e6f64..1e6, 1..40), tiny in -1e-300f64..1e-300) {
            let mut p = ParamSet::new();
            let n = values.len();
            p.insert("a.w", Array::vector(values).unwrap());
            p.insert("b", Array::scalar(tiny).unwrap());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ckpt.json");
            Checkpoint::new().with_group("params", p.clone()).save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            let q = back.group("params").unwrap();
            prop_assert_eq!(q, &p);
            prop_assert_eq!(q.get("a.w").unwrap().len(), n);
        }
    }

    #[test]
    fn prefix_helpers() {
        let mut p = ParamSet::new();
        p.insert("x", Array::scalar(1.0).unwrap());
        let q = p.prefixed("mu.");
        assert!(q.get("mu.x").is_some());
        assert_eq!(q.strip_prefix("mu."), p);
        assert!(q.filter_prefix("rho.").is_empty());
    }

    #[test]
    fn rejects_wrong_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut c = Checkpoint::new();
        c.format = "other".into();
        c.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
