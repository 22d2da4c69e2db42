//! Datasets of degraded/clean image pairs: synthesis, augmentation and PNG I/O.

mod augment;
mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seed::derive;

pub use augment::{augment_flip, balance_duplicate, crop_patch, flip_horizontal, flip_vertical};
pub use io::{load_manifest_dataset, load_png, load_png_dir, read_manifest, save_png, write_dataset, ManifestEntry, CLEAN_SUFFIX, DEGRADED_SUFFIX};
pub use synth::{degrade, gen_clean, sample_spec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Derain = 0,
    Dehaze = 1,
    Denoise = 2,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Derain, Task::Dehaze, Task::Denoise];

    pub fn name(self) -> &'static str {
        match self {
            Task::Derain => "derain",
            Task::Dehaze => "dehaze",
            Task::Denoise => "denoise",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DegradationKind {
    /// Additive Gaussian noise; `sigma` on the 8-bit scale.
    Noise { sigma: f64 },
    /// Bright additive streaks; angle measured from vertical.
    Rain {
        count: usize,
        length: f64,
        angle_deg: f64,
        intensity: f64,
    },
    /// `I·t + A·(1 − t)`.
    Haze { airlight: f64, transmission: f64 },
}

impl DegradationKind {
    pub fn task(&self) -> Task {
        match self {
            DegradationKind::Noise { .. } => Task::Denoise,
            DegradationKind::Rain { .. } => Task::Derain,
            DegradationKind::Haze { .. } => Task::Dehaze,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    #[serde(flatten)]
    pub kind: DegradationKind,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self.kind {
            DegradationKind::Noise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("noise sigma must be finite and >= 0, got {sigma}"))
            }
            DegradationKind::Haze { airlight, transmission }
                if !((0.0..=1.0).contains(&airlight) && transmission > 0.0 && transmission <= 1.0) =>
            {
                bad(format!("haze needs A in [0,1] and t in (0,1], got A={airlight}, t={transmission}"))
            }
            DegradationKind::Rain { length, intensity, .. }
                if !(length >= 0.0 && (0.0..=1.0).contains(&intensity)) =>
            {
                bad(format!("rain needs length >= 0 and intensity in [0,1], got {length}, {intensity}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub task: Task,
    /// Source identifier, e.g. a file basename or `synthetic/<task>/<index>`.
    pub source: String,
    pub spec: Option<DegradationSpec>,
    /// Duplicate index assigned by [`balance_duplicate`]; 0 for originals.
    pub copy: u32,
}

impl ImagePair {
    pub fn new(degraded: Tensor<f32>, clean: Tensor<f32>, task: Task) -> Result<Self> {
        if degraded.shape() != clean.shape() {
            return Err(Error::Shape(format!(
                "pair shapes differ: {:?} vs {:?}",
                degraded.shape(),
                clean.shape()
            )));
        }
        Ok(ImagePair {
            degraded,
            clean,
            task,
            source: String::new(),
            spec: None,
            copy: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
    pub split: Split,
}

impl Dataset {
    pub fn new(pairs: Vec<ImagePair>, split: Split) -> Self {
        Dataset { pairs, split }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn task_counts(&self) -> Vec<(Task, usize)> {
        Task::ALL
            .into_iter()
            .map(|t| (t, self.pairs.iter().filter(|p| p.task == t).count()))
            .filter(|&(_, n)| n > 0)
            .collect()
    }
}

/// Value ranges the synthetic degradations are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationRanges {
    /// Assigned round-robin over the denoise pairs.
    pub noise_sigmas: Vec<f64>,
    pub rain_count: (usize, usize),
    pub rain_length: (f64, f64),
    pub rain_angle: (f64, f64),
    pub rain_intensity: (f64, f64),
    pub haze_airlight: (f64, f64),
    pub haze_transmission: (f64, f64),
}

impl Default for DegradationRanges {
    fn default() -> Self {
        DegradationRanges {
            noise_sigmas: vec![15.0, 25.0, 50.0],
            rain_count: (8, 24),
            rain_length: (4.0, 12.0),
            rain_angle: (-20.0, 20.0),
            rain_intensity: (0.3, 0.7),
            haze_airlight: (0.7, 1.0),
            haze_transmission: (0.3, 0.8),
        }
    }
}

/// Recipe for a synthetic all-in-one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataRecipe {
    pub tasks: Vec<Task>,
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Validation pairs per task, as a fraction of `n_train`; drawn from
    /// their own clean images, so the training split keeps all `n_train`.
    pub val_fraction: f64,
    pub seed: u64,
    pub degradations: DegradationRanges,
}

impl Default for DataRecipe {
    fn default() -> Self {
        DataRecipe {
            tasks: Task::ALL.to_vec(),
            size: 32,
            n_train: 200,
            n_test: 32,
            val_fraction: 0.1,
            seed: 0,
            degradations: DegradationRanges::default(),
        }
    }
}

impl DataRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidArgument("recipe lists no tasks".into()));
        }
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::InvalidArgument(format!("image size {} must be a positive multiple of 8", self.size)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!("val_fraction must be in [0,1), got {}", self.val_fraction)));
        }
        if self.degradations.noise_sigmas.is_empty() {
            return Err(Error::InvalidArgument("noise_sigmas is empty".into()));
        }
        Ok(())
    }
}

/// Train/validation/test sets for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub task: Task,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Synthesizes every task of `recipe`. Train, validation and test pairs
/// come from separate clean-image streams, so the splits are disjoint.
pub fn synthesize(recipe: &DataRecipe) -> Result<Vec<TaskSplits>> {
    recipe.validate()?;
    recipe
        .tasks
        .iter()
        .map(|&task| {
            let make = |split: Split, n: usize| -> Result<Vec<ImagePair>> {
                let base = derive(recipe.seed, &[task as u64, split as u64]);
                gen_clean(n, recipe.size, base)?
                    .into_iter()
                    .enumerate()
                    .map(|(i, clean)| {
                        let spec = sample_spec(task, &recipe.degradations, i, base);
                        let mut pair = degrade(&clean, &spec)?;
                        pair.source = format!("synthetic/{}/{}/{i:04}", task.name(), split.name());
                        Ok(pair)
                    })
                    .collect()
            };
            let n_val = (recipe.val_fraction * recipe.n_train as f64).round() as usize;
            Ok(TaskSplits {
                task,
                train: Dataset::new(make(Split::Train, recipe.n_train)?, Split::Train),
                val: Dataset::new(make(Split::Val, n_val)?, Split::Val),
                test: Dataset::new(make(Split::Test, recipe.n_test)?, Split::Test),
            })
        })
        .collect()
}

/// Balanced all-in-one sets across tasks.
pub fn combine(splits: &[TaskSplits], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let collect = |f: fn(&TaskSplits) -> &Dataset| splits.iter().map(f).cloned().collect::<Vec<_>>();
    let train = balance_duplicate(&collect(|s| &s.train), seed)?;
    let cat = |sets: Vec<Dataset>, split| Dataset::new(sets.into_iter().flat_map(|d| d.pairs).collect(), split);
    Ok((train, cat(collect(|s| &s.val), Split::Val), cat(collect(|s| &s.test), Split::Test)))
}

#[cfg(test)]
mod tests;
