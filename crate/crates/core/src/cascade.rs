//! Hierarchical baseline: four stage classifiers arranged over the
//! taxonomy tree (Unbroken/Broken, then A/B, then the three subtypes of
//! each group).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{FractureLabel, ParentClass};
use crate::error::{Error, Result};
use crate::metrics::{classification_report, MetricReport};
use crate::tensor::Tensor;
use crate::train::{train, EpochLog, TrainConfig, TrainOutcome};
use crate::vit::{checkpoint, ViTConfig, ViTModel};

/// Anything that maps images to a probability row per image.
pub trait StageClassifier {
    fn num_classes(&self) -> usize;
    fn predict_proba(&self, images: &[&Tensor]) -> Result<Vec<Vec<f32>>>;
}

impl StageClassifier for ViTModel {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict_proba(&self, images: &[&Tensor]) -> Result<Vec<Vec<f32>>> {
        ViTModel::predict_proba(self, images)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fracture,
    Group,
    ASubtype,
    BSubtype,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Fracture, Stage::Group, Stage::ASubtype, Stage::BSubtype];

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Stage::Fracture => &["Unbroken", "Broken"],
            Stage::Group => &["A", "B"],
            Stage::ASubtype => &["A1", "A2", "A3"],
            Stage::BSubtype => &["B1", "B2", "B3"],
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    /// Stage-local target for a leaf label, or `None` when the label does
    /// not reach this stage.
    pub fn target(self, label: FractureLabel) -> Option<usize> {
        let parent = label.parent();
        match self {
            Stage::Fracture => Some(usize::from(parent != ParentClass::Unbroken)),
            Stage::Group => match parent {
                ParentClass::Unbroken => None,
                ParentClass::A => Some(0),
                ParentClass::B => Some(1),
            },
            Stage::ASubtype => (parent == ParentClass::A).then(|| label.subtype()),
            Stage::BSubtype => (parent == ParentClass::B).then(|| label.subtype()),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Fracture => "fracture",
            Stage::Group => "group",
            Stage::ASubtype => "a_subtype",
            Stage::BSubtype => "b_subtype",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CascadeMode {
    /// Follow the argmax at every stage; output is one-hot.
    Hard,
    /// Leaf probability is the product of stage probabilities on its path.
    #[default]
    Soft,
}

impl FromStr for CascadeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hard" => Ok(CascadeMode::Hard),
            "soft" => Ok(CascadeMode::Soft),
            other => Err(Error::Config(format!("unknown cascade mode '{other}' (expected hard or soft)"))),
        }
    }
}

/// Per-image outputs of the four stages.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs {
    pub fracture: [f64; 2],
    pub group: [f64; 2],
    pub a_subtype: [f64; 3],
    pub b_subtype: [f64; 3],
}

fn first_max(p: &[f64]) -> usize {
    p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

/// Combines stage outputs into a distribution over the seven leaves,
/// indexed like [`FractureLabel::index`].
pub fn combine(s: &StageOutputs, mode: CascadeMode) -> [f64; 7] {
    let mut out = [0.0; 7];
    match mode {
        CascadeMode::Soft => {
            out[0] = s.fracture[0];
            for k in 0..3 {
                out[1 + k] = s.fracture[1] * s.group[0] * s.a_subtype[k];
                out[4 + k] = s.fracture[1] * s.group[1] * s.b_subtype[k];
            }
        }
        CascadeMode::Hard => {
            let leaf = if first_max(&s.fracture) == 0 {
                0
            } else if first_max(&s.group) == 0 {
                1 + first_max(&s.a_subtype)
            } else {
                4 + first_max(&s.b_subtype)
            };
            out[leaf] = 1.0;
        }
    }
    out
}

/// Four stage models. A stage left as `None` makes prediction fail with a
/// configuration error.
#[derive(Clone, Debug)]
pub struct Cascade<C> {
    pub stages: [Option<C>; 4],
}

impl<C: StageClassifier> Cascade<C> {
    pub fn new(stages: [Option<C>; 4]) -> Result<Self> {
        for (stage, model) in Stage::ALL.iter().zip(&stages) {
            if let Some(m) = model {
                if m.num_classes() != stage.num_classes() {
                    return Err(Error::Config(format!(
                        "stage {stage} needs {} classes, model has {}",
                        stage.num_classes(),
                        m.num_classes()
                    )));
                }
            }
        }
        Ok(Self { stages })
    }

    pub fn stage(&self, stage: Stage) -> Result<&C> {
        self.stages[stage.index()].as_ref().ok_or_else(|| Error::Config(format!("cascade stage {stage} has no model")))
    }

    pub fn stage_outputs(&self, images: &[&Tensor]) -> Result<Vec<StageOutputs>> {
        let mut rows = Vec::with_capacity(4);
        for stage in Stage::ALL {
            let p = self.stage(stage)?.predict_proba(images)?;
            if p.len() != images.len() || p.iter().any(|r| r.len() != stage.num_classes()) {
                return Err(Error::Shape(format!("stage {stage} returned malformed probabilities")));
            }
            rows.push(p);
        }
        let f = |r: &[f32], k: usize| r[k] as f64;
        Ok((0..images.len())
            .map(|i| StageOutputs {
                fracture: [f(&rows[0][i], 0), f(&rows[0][i], 1)],
                group: [f(&rows[1][i], 0), f(&rows[1][i], 1)],
                a_subtype: [f(&rows[2][i], 0), f(&rows[2][i], 1), f(&rows[2][i], 2)],
                b_subtype: [f(&rows[3][i], 0), f(&rows[3][i], 1), f(&rows[3][i], 2)],
            })
            .collect())
    }

    pub fn predict(&self, images: &[&Tensor], mode: CascadeMode) -> Result<Vec<[f64; 7]>> {
        Ok(self.stage_outputs(images)?.iter().map(|s| combine(s, mode)).collect())
    }

    /// Metric report of the cascade's argmax leaves on `indices`.
    pub fn report(
        &self,
        images: &[Tensor],
        labels: &[usize],
        indices: &[usize],
        mode: CascadeMode,
        seed: u64,
    ) -> Result<MetricReport> {
        let refs: Vec<&Tensor> = indices.iter().map(|&i| &images[i]).collect();
        let pred: Vec<usize> = self.predict(&refs, mode)?.iter().map(|d| first_max(d)).collect();
        let truth: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
        classification_report(&truth, &pred, &FractureLabel::names(), seed)
    }
}

/// Samples of `indices` that reach `stage`, paired with their stage target.
pub fn stage_subset(stage: Stage, labels: &[usize], indices: &[usize]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for &i in indices {
        if let Some(t) = stage.target(FractureLabel::from_index(labels[i])?) {
            out.push((i, t));
        }
    }
    Ok(out)
}

/// Result of training all four stages.
pub struct CascadeTraining {
    pub cascade: Cascade<ViTModel>,
    pub outcomes: Vec<(Stage, TrainOutcome)>,
}

/// Trains every stage on the ground-truth subset that reaches it. Each
/// stage uses `backbone` with the stage's class count.
pub fn train_cascade(
    backbone: &ViTConfig,
    images: &[Tensor],
    labels: &[usize],
    train_indices: &[usize],
    val_indices: &[usize],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(Stage, &EpochLog),
) -> Result<CascadeTraining> {
    let mut stages: [Option<ViTModel>; 4] = Default::default();
    let mut outcomes = Vec::with_capacity(4);
    for stage in Stage::ALL {
        let tr = stage_subset(stage, labels, train_indices)?;
        let va = stage_subset(stage, labels, val_indices)?;
        if tr.is_empty() || va.is_empty() {
            return Err(Error::Config(format!("cascade stage {stage} has no training or validation samples")));
        }
        let mut stage_labels = vec![0usize; labels.len()];
        for &(i, t) in tr.iter().chain(&va) {
            stage_labels[i] = t;
        }
        let cfg = backbone.clone().with_classes(stage.num_classes());
        let model = ViTModel::new(cfg, config.seed.wrapping_add(stage.index() as u64))?;
        let tr_idx: Vec<usize> = tr.iter().map(|p| p.0).collect();
        let va_idx: Vec<usize> = va.iter().map(|p| p.0).collect();
        log::info!("training cascade stage {stage} on {} samples", tr_idx.len());
        let out = train(model, images, &stage_labels, &tr_idx, &va_idx, config, &mut |e| on_epoch(stage, e))?;
        if let Some(msg) = &out.diverged {
            log::warn!("cascade stage {stage} diverged: {msg}");
        }
        stages[stage.index()] = Some(out.model.clone());
        outcomes.push((stage, out));
    }
    Ok(CascadeTraining { cascade: Cascade::new(stages)?, outcomes })
}

/// On-disk description: one checkpoint path per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CascadeFile {
    pub fracture: Option<PathBuf>,
    pub group: Option<PathBuf>,
    pub a_subtype: Option<PathBuf>,
    pub b_subtype: Option<PathBuf>,
}

impl CascadeFile {
    fn paths(&self) -> [&Option<PathBuf>; 4] {
        [&self.fracture, &self.group, &self.a_subtype, &self.b_subtype]
    }
}

/// Writes each stage checkpoint into `dir` plus `cascade.json` listing
/// them; returns the path of the JSON file.
pub fn save_cascade(cascade: &Cascade<ViTModel>, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut paths: [Option<PathBuf>; 4] = Default::default();
    for stage in Stage::ALL {
        let name = format!("stage_{stage}.ckpt");
        checkpoint::save(cascade.stage(stage)?, &dir.join(&name))?;
        paths[stage.index()] = Some(PathBuf::from(name));
    }
    let [fracture, group, a_subtype, b_subtype] = paths;
    let file = CascadeFile { fracture, group, a_subtype, b_subtype };
    let path = dir.join("cascade.json");
    std::fs::write(&path, serde_json::to_string_pretty(&file)?)?;
    Ok(path)
}

/// Loads a cascade file; relative checkpoint paths resolve against the
/// file's directory. Any missing stage is a configuration error.
pub fn load_cascade(path: &Path) -> Result<Cascade<ViTModel>> {
    let file: CascadeFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut stages: [Option<ViTModel>; 4] = Default::default();
    for (stage, p) in Stage::ALL.iter().zip(file.paths()) {
        let p = p.as_ref().ok_or_else(|| Error::Config(format!("cascade file lacks stage {stage}")))?;
        stages[stage.index()] = Some(checkpoint::load(&base.join(p))?);
    }
    Cascade::new(stages)
}

/// Argmax leaf of a combined distribution.
pub fn leaf(dist: &[f64; 7]) -> FractureLabel {
    FractureLabel::ALL[first_max(dist)]
}
