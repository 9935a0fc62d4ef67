use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stratified train/validation/test partition of sample indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    /// Indexed by class; empty for classes with no samples.
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl SplitPlan {
    pub fn train_indices(&self) -> Vec<usize> {
        self.train.concat()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.val.concat()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.test.concat()
    }
}

/// Rounds `percent · n / 100` half up.
fn percent_round(n: usize, percent: usize) -> usize {
    (percent * n + 50) / 100
}

/// Held-out test count for a class of `n`.
pub fn test_count(n: usize) -> usize {
    percent_round(n, 15).max(1)
}

/// Validation count taken from the `remaining` non-test samples.
pub fn val_count(remaining: usize) -> usize {
    percent_round(remaining, 15).max(1)
}

/// Splits per class: 15% test, then 15% of the remainder for validation.
///
/// `labels[i]` is the class of sample `i`; `class_names` labels errors and
/// fixes the number of classes.
pub fn make_splits(labels: &[usize], class_names: &[String], seed: u64) -> Result<SplitPlan> {
    let k = class_names.len();
    let mut by_class = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::Label(format!("sample {i} has class index {c} but only {k} classes exist")));
        }
        by_class[c].push(i);
    }
    let mut plan = SplitPlan { seed, train: vec![Vec::new(); k], val: vec![Vec::new(); k], test: vec![Vec::new(); k] };
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::Config(format!(
                "class {} has {} samples; at least 3 are needed for a train/val/test split",
                class_names[c],
                members.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        members.shuffle(&mut rng);
        let n_test = test_count(members.len());
        let n_val = val_count(members.len() - n_test);
        plan.val[c] = members.split_off(members.len() - n_val);
        plan.test[c] = members.split_off(members.len() - n_test);
        plan.train[c] = members;
    }
    Ok(plan)
}
