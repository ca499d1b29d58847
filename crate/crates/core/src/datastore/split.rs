//! Listener-disjoint three-fold train/val/test partitioning.
//!
//! Listeners are shuffled once into a ring. Each fold takes a test block and
//! the following validation block starting at `fold * n / 3`; every other
//! listener trains. Block sizes are 15% of listeners (at least one each).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::Sample;
use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 3;
pub const HELD_OUT_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

/// (test, val, train) listener counts for `n` listeners.
pub fn partition_sizes(n: usize) -> (usize, usize, usize) {
    let held = ((HELD_OUT_FRACTION * n as f64).round() as usize).max(1);
    (held, held, n - 2 * held)
}

pub fn make_splits(samples: &[Sample], seed: u64) -> Result<FoldSplit> {
    let listeners: BTreeSet<&str> = samples.iter().map(|s| s.listener_id.as_str()).collect();
    let n = listeners.len();
    if n < 3 {
        return Err(Error::Domain(format!(
            "listener-disjoint splitting needs at least 3 listeners, got {n}"
        )));
    }
    let mut ring: Vec<&str> = listeners.into_iter().collect();
    ring.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_test, n_val, _) = partition_sizes(n);

    let folds = (0..NUM_FOLDS)
        .map(|f| {
            let offset = f * n / NUM_FOLDS;
            let mut role: HashMap<&str, Partition> = HashMap::with_capacity(n);
            for i in 0..n {
                let listener = ring[(offset + i) % n];
                let p = if i < n_test {
                    Partition::Test
                } else if i < n_test + n_val {
                    Partition::Val
                } else {
                    Partition::Train
                };
                role.insert(listener, p);
            }
            let mut fold = Fold {
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            for s in samples {
                let bucket = match role[s.listener_id.as_str()] {
                    Partition::Train => &mut fold.train,
                    Partition::Val => &mut fold.val,
                    Partition::Test => &mut fold.test,
                };
                bucket.push(s.sample_id.clone());
            }
            fold
        })
        .collect();
    Ok(FoldSplit { seed, folds })
}

impl FoldSplit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn fold(&self, index: usize) -> Result<&Fold> {
        self.folds.get(index).ok_or_else(|| {
            Error::Domain(format!("fold {index} out of range for {} folds", self.folds.len()))
        })
    }
}

/// Listener overlaps and coverage problems of `split` over `samples`; empty
/// when the split is valid.
pub fn split_violations(split: &FoldSplit, samples: &[Sample]) -> Vec<String> {
    let listener: HashMap<&str, &str> = samples
        .iter()
        .map(|s| (s.sample_id.as_str(), s.listener_id.as_str()))
        .collect();
    let mut problems = Vec::new();
    for (fi, fold) in split.folds.iter().enumerate() {
        let sets: Vec<BTreeSet<&str>> = [&fold.train, &fold.val, &fold.test]
            .iter()
            .map(|ids| ids.iter().filter_map(|id| listener.get(id.as_str()).copied()).collect())
            .collect();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if let Some(l) = sets[a].intersection(&sets[b]).next() {
                problems.push(format!("fold {fi}: listener {l} in partitions {a} and {b}"));
            }
        }
        let mut seen: Vec<&str> = [&fold.train, &fold.val, &fold.test]
            .iter()
            .flat_map(|ids| ids.iter().map(String::as_str))
            .collect();
        seen.sort_unstable();
        let mut all: Vec<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
        all.sort_unstable();
        if seen != all {
            problems.push(format!("fold {fi}: partitions do not cover each sample exactly once"));
        }
    }
    problems
}
