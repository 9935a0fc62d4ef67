use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Augmentation;
use crate::error::{Error, Result};

/// Class-imbalance handling applied to the training set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Weights,
    #[default]
    Oversample,
    Augment,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "weights" => Ok(Self::Weights),
            "oversample" => Ok(Self::Oversample),
            "augment" => Ok(Self::Augment),
            other => Err(Error::Config(format!(
                "unknown balancing strategy {other:?} (expected weights, oversample or augment)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Weights => "weights",
            Self::Oversample => "oversample",
            Self::Augment => "augment",
        })
    }
}

/// One entry of a balanced training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainItem {
    /// Index into the underlying dataset.
    pub index: usize,
    pub weight: f32,
    pub augmentation: Option<Augmentation>,
}

/// `w_c = N / (K · n_c)` over the `K` classes present in `labels`.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Vec<f32> {
    let mut counts = vec![0usize; num_classes];
    for &c in labels {
        counts[c] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count();
    counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { (labels.len() as f64 / (present * n) as f64) as f32 })
        .collect()
}

/// Applies `strategy` to the training samples `indices` whose classes are
/// looked up in `labels`.
pub fn balance(
    strategy: Strategy,
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<Vec<TrainItem>> {
    if indices.is_empty() {
        return Err(Error::Contract("cannot balance an empty training set".into()));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for &i in indices {
        let c = *labels.get(i).ok_or_else(|| Error::Label(format!("no label for sample {i}")))?;
        if c >= num_classes {
            return Err(Error::Label(format!("class index {c} out of range for {num_classes} classes")));
        }
        by_class[c].push(i);
    }
    let plain = |index| TrainItem { index, weight: 1.0, augmentation: None };
    match strategy {
        Strategy::Weights => {
            let subset: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
            let w = class_weights(&subset, num_classes);
            Ok(indices.iter().map(|&i| TrainItem { weight: w[labels[i]], ..plain(i) }).collect())
        }
        Strategy::Oversample | Strategy::Augment => {
            let majority = by_class.iter().map(Vec::len).max().unwrap_or(0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out: Vec<TrainItem> = indices.iter().map(|&i| plain(i)).collect();
            for members in by_class.iter().filter(|m| !m.is_empty()) {
                for _ in members.len()..majority {
                    let index = members[rng.random_range(0..members.len())];
                    let augmentation = (strategy == Strategy::Augment).then(|| Augmentation {
                        rotation_deg: rng.random_range(-5.0..=5.0),
                        brightness: rng.random_range(-0.1..=0.1),
                    });
                    out.push(TrainItem { index, weight: 1.0, augmentation });
                }
            }
            Ok(out)
        }
    }
}
