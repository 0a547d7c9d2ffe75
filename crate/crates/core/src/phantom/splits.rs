use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub num_folds: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn fold(&self, k: usize) -> Result<&Fold> {
        self.folds
            .get(k)
            .ok_or_else(|| config_err(format!("fold {k} out of range (plan has {})", self.folds.len())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(config_err(format!("split plan {} does not exist", path.display())));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Cross-validation plan: ids are shuffled into `num_folds` near-equal groups;
/// fold `k` tests on group `k`, validates on group `k + 1` and trains on the rest.
pub fn make_splits(case_ids: &[String], num_folds: usize, seed: u64) -> Result<SplitPlan> {
    if num_folds < 3 {
        return Err(config_err("at least 3 folds are needed for disjoint train/val/test"));
    }
    if case_ids.len() < num_folds {
        return Err(config_err(format!(
            "{} case ids cannot fill {num_folds} folds",
            case_ids.len()
        )));
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != case_ids.len() {
        return Err(config_err("case ids must be unique"));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = ids.len() / num_folds;
    let extra = ids.len() % num_folds;
    let mut groups = Vec::with_capacity(num_folds);
    let mut start = 0;
    for g in 0..num_folds {
        let len = base + usize::from(g < extra);
        groups.push(ids[start..start + len].to_vec());
        start += len;
    }

    let folds = (0..num_folds)
        .map(|k| {
            let val_group = (k + 1) % num_folds;
            let train = groups
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != k && *g != val_group)
                .flat_map(|(_, ids)| ids.iter().cloned())
                .collect();
            Fold { train, val: groups[val_group].clone(), test: groups[k].clone() }
        })
        .collect();
    Ok(SplitPlan { num_folds, seed, folds })
}
