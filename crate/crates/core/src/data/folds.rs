//! Leave-one-organ-out folds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

pub const SAMPLES_PER_ORGAN: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub organ: String,
    pub holdout: Vec<String>,
    pub train: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Fold>,
}

impl FoldSplit {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn get(&self, k: usize) -> Result<&Fold> {
        self.folds
            .get(k)
            .ok_or_else(|| Error::invalid(format!("fold {k} out of range (0..{})", self.folds.len())))
    }

    /// Fold whose hold-out contains `id`.
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.holdout.iter().any(|h| h == id))
    }

    /// Checks disjointness, organ purity and that each fold trains on the complement.
    pub fn validate(&self) -> Result<()> {
        let all: BTreeSet<&str> = self
            .folds
            .iter()
            .flat_map(|f| f.holdout.iter().map(String::as_str))
            .collect();
        let total: usize = self.folds.iter().map(|f| f.holdout.len()).sum();
        if total != all.len() {
            return Err(Error::Integrity("hold-out sets overlap".into()));
        }
        for (k, f) in self.folds.iter().enumerate() {
            if f.holdout.iter().any(|id| super::organ_of(id) != f.organ) {
                return Err(Error::Integrity(format!("fold {k} mixes organs")));
            }
            let train: BTreeSet<&str> = f.train.iter().map(String::as_str).collect();
            let expect: BTreeSet<&str> = all
                .iter()
                .copied()
                .filter(|id| !f.holdout.iter().any(|h| h == id))
                .collect();
            if train != expect || train.len() != f.train.len() {
                return Err(Error::Integrity(format!(
                    "fold {k} training set is not the complement of its hold-out"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: Self = serde_json::from_str(&text)?;
        split.validate()?;
        Ok(split)
    }
}

/// Fold `k` holds out every sample of the `k`-th organ in lexicographic order.
pub fn make_folds(samples: &[Sample]) -> Result<FoldSplit> {
    make_folds_from_ids(samples.iter().map(|s| (s.id.as_str(), s.organ.as_str())))
}

pub fn make_folds_from_ids<'a>(ids: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<FoldSplit> {
    let mut by_organ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut every = Vec::new();
    for (id, organ) in ids {
        by_organ.entry(organ).or_default().push(id);
        every.push(id);
    }
    if every.is_empty() {
        return Err(Error::invalid("no samples to split"));
    }
    for (organ, ids) in &by_organ {
        if ids.len() != SAMPLES_PER_ORGAN {
            return Err(Error::invalid(format!(
                "organ {organ} has {} samples, expected {SAMPLES_PER_ORGAN}",
                ids.len()
            )));
        }
    }
    if by_organ.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least two organs to hold one out, found {}",
            by_organ.len()
        )));
    }
    every.sort_unstable();
    let folds = by_organ
        .into_iter()
        .map(|(organ, mut holdout)| {
            holdout.sort_unstable();
            let train = every
                .iter()
                .filter(|id| !holdout.contains(id))
                .map(|s| s.to_string())
                .collect();
            Fold {
                organ: organ.to_string(),
                holdout: holdout.into_iter().map(String::from).collect(),
                train,
            }
        })
        .collect();
    Ok(FoldSplit { folds })
}
