use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const CI_LEVEL: f64 = 0.95;
/// Minimum sample count for a bootstrap interval.
pub const MIN_BOOTSTRAP_SAMPLES: usize = 10;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        check_pair(truth, pred)?;
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= classes || p >= classes {
                return Err(Error::Label(format!("label {} out of range for {classes} classes", t.max(p))));
            }
            counts[t][p] += 1;
        }
        Ok(Self { classes, counts })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.counts[c][c]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }
}

fn check_pair(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} true labels but {} predictions", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// A point estimate with its bootstrap interval (absent below
/// [`MIN_BOOTSTRAP_SAMPLES`]).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Overall fraction correct.
    pub accuracy: Estimate,
    /// Mean per-class recall.
    pub macro_accuracy: Estimate,
    /// Support-weighted per-class recall.
    pub weighted_accuracy: Estimate,
    pub macro_precision: Estimate,
    pub macro_recall: Estimate,
    pub macro_f1: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub ci_method: String,
    pub per_class: Vec<ClassMetrics>,
    pub aggregates: Aggregates,
    pub confusion: ConfusionMatrix,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of `class`; an undefined ratio counts as 0.
pub fn class_scores(cm: &ConfusionMatrix, class: usize) -> (f64, f64, f64) {
    let tp = cm.get(class, class);
    let p = ratio(tp, cm.predicted(class));
    let r = ratio(tp, cm.support(class));
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Classes occurring in either labelling, in ascending order.
fn observed(truth: &[usize], pred: &[usize]) -> Vec<usize> {
    truth.iter().chain(pred).copied().collect::<BTreeSet<_>>().into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Accuracy,
    MacroAccuracy,
    WeightedAccuracy,
    MacroPrecision,
    MacroRecall,
    MacroF1,
}

impl Aggregate {
    pub const ALL: [Aggregate; 6] = [
        Self::Accuracy,
        Self::MacroAccuracy,
        Self::WeightedAccuracy,
        Self::MacroPrecision,
        Self::MacroRecall,
        Self::MacroF1,
    ];
}

/// Evaluates one aggregate metric. Macro means run over the classes that
/// occur in `truth` or `pred`.
pub fn aggregate(metric: Aggregate, truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_pair(truth, pred)?;
    let classes = truth.iter().chain(pred).max().map_or(0, |m| m + 1);
    let cm = ConfusionMatrix::new(truth, pred, classes)?;
    let present = observed(truth, pred);
    let mean = |f: &dyn Fn(usize) -> f64| present.iter().map(|&c| f(c)).sum::<f64>() / present.len() as f64;
    Ok(match metric {
        Aggregate::Accuracy => cm.trace() as f64 / cm.total() as f64,
        Aggregate::MacroAccuracy | Aggregate::MacroRecall => mean(&|c| class_scores(&cm, c).1),
        Aggregate::WeightedAccuracy => {
            present.iter().map(|&c| class_scores(&cm, c).1 * cm.support(c) as f64).sum::<f64>() / cm.total() as f64
        }
        Aggregate::MacroPrecision => mean(&|c| class_scores(&cm, c).0),
        Aggregate::MacroF1 => mean(&|c| class_scores(&cm, c).2),
    })
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of `metric` over paired resamples. The
/// interval is widened if needed so that it contains the full-sample value.
pub fn bootstrap_ci(
    truth: &[usize],
    pred: &[usize],
    metric: &dyn Fn(&[usize], &[usize]) -> Result<f64>,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    check_pair(truth, pred)?;
    if truth.len() < MIN_BOOTSTRAP_SAMPLES {
        return Err(Error::Contract(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_SAMPLES} samples, got {}",
            truth.len()
        )));
    }
    if resamples == 0 || !(0.0 < level && level < 1.0) {
        return Err(Error::Config("bootstrap needs resamples > 0 and a level in (0, 1)".into()));
    }
    let point = metric(truth, pred)?;
    let n = truth.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut t, mut p) = (vec![0; n], vec![0; n]);
    let mut values = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for k in 0..n {
            let i = rng.random_range(0..n);
            t[k] = truth[i];
            p[k] = pred[i];
        }
        values.push(metric(&t, &p)?);
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = quantile(&values, alpha).min(point);
    let hi = quantile(&values, 1.0 - alpha).max(point);
    Ok((lo, hi))
}

/// Per-class scores, aggregates and bootstrap intervals. `class_names`
/// fixes the class count; predictions must lie in the same range.
pub fn classification_report(truth: &[usize], pred: &[usize], class_names: &[String], seed: u64) -> Result<MetricReport> {
    let cm = ConfusionMatrix::new(truth, pred, class_names.len())?;
    let per_class = observed(truth, pred)
        .into_iter()
        .map(|c| {
            let (precision, recall, f1) = class_scores(&cm, c);
            ClassMetrics { class: c, name: class_names[c].clone(), precision, recall, f1, support: cm.support(c) }
        })
        .collect();
    let estimate = |m: Aggregate| -> Result<Estimate> {
        let value = aggregate(m, truth, pred)?;
        let ci = if truth.len() >= MIN_BOOTSTRAP_SAMPLES {
            Some(bootstrap_ci(truth, pred, &|t, p| aggregate(m, t, p), BOOTSTRAP_RESAMPLES, CI_LEVEL, seed)?)
        } else {
            None
        };
        Ok(Estimate { value, ci })
    };
    let aggregates = Aggregates {
        accuracy: estimate(Aggregate::Accuracy)?,
        macro_accuracy: estimate(Aggregate::MacroAccuracy)?,
        weighted_accuracy: estimate(Aggregate::WeightedAccuracy)?,
        macro_precision: estimate(Aggregate::MacroPrecision)?,
        macro_recall: estimate(Aggregate::MacroRecall)?,
        macro_f1: estimate(Aggregate::MacroF1)?,
    };
    Ok(MetricReport {
        samples: truth.len(),
        ci_method: format!("percentile bootstrap, {BOOTSTRAP_RESAMPLES} paired resamples, {}% level", CI_LEVEL * 100.0),
        per_class,
        aggregates,
        confusion: cm,
    })
}
