//! Pipeline configuration files (strict JSON; unknown keys are rejected).

use crate::arch::ArchitectureSpec;
use crate::data::{normalize, split_train_val, LabelMode, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::DistillConfig;
use crate::presets;
use crate::prune::PruneConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PresetRef {
    pub preset: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub file: PathBuf,
}

/// Where the architecture comes from: a named preset, another JSON file, or
/// an inline spec.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ArchSource {
    Preset(PresetRef),
    File(FileRef),
    Inline(ArchitectureSpec),
}

impl ArchSource {
    pub fn resolve(&self, base_dir: &Path) -> Result<ArchitectureSpec> {
        let arch = match self {
            ArchSource::Preset(p) => presets::by_name(&p.preset)
                .ok_or_else(|| Error::Config(format!("unknown architecture preset {}", p.preset)))?,
            ArchSource::File(f) => {
                let path = if f.file.is_absolute() {
                    f.file.clone()
                } else {
                    base_dir.join(&f.file)
                };
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            ArchSource::Inline(a) => a.clone(),
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn default_val_fraction() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Seed-determined synthetic classes (smooth templates plus noise).
    Blobs {
        classes: usize,
        channels: usize,
        height: usize,
        width: usize,
        per_class: usize,
        noise_std: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
    /// CIFAR binary batches (variant inferred from the record size).
    Cifar {
        train_files: Vec<PathBuf>,
        #[serde(default)]
        test_files: Vec<PathBuf>,
        #[serde(default = "default_label_mode")]
        label_mode: CifarLabelMode,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CifarLabelMode {
    Fine,
    Coarse,
}

fn default_label_mode() -> CifarLabelMode {
    CifarLabelMode::Fine
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NormalizeConfig {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub normalize: Option<NormalizeConfig>,
    /// Pad-4 random crop + horizontal flip on training batches.
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl DataConfig {
    /// Load/generate the dataset, apply normalization, and carve the splits.
    pub fn load(&self, base_dir: &Path, seed: u64) -> Result<LabeledDataset> {
        let abs = |p: &PathBuf| -> PathBuf {
            if p.is_absolute() {
                p.clone()
            } else {
                base_dir.join(p)
            }
        };
        let mut ds = match &self.source {
            DataSource::Blobs {
                classes,
                channels,
                height,
                width,
                per_class,
                noise_std,
                test_fraction,
            } => crate::data::synthetic_blobs(
                *classes, *channels, *height, *width, *per_class, *noise_std, seed,
            )?
            .split_off_test(*test_fraction, seed)?,
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = crate::data::load_idx(&abs(train_images), &abs(train_labels))?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        let test = crate::data::load_idx(&abs(ti), &abs(tl))?;
                        train.with_test_from(test)?
                    }
                    (None, None) => train,
                    _ => {
                        return Err(Error::Config(
                            "test_images and test_labels must be given together".into(),
                        ))
                    }
                }
            }
            DataSource::Cifar {
                train_files,
                test_files,
                label_mode,
            } => {
                let mode = match label_mode {
                    CifarLabelMode::Fine => LabelMode::Fine,
                    CifarLabelMode::Coarse => LabelMode::Coarse,
                };
                let train_paths: Vec<PathBuf> = train_files.iter().map(&abs).collect();
                let train = crate::data::load_cifar_binary(&train_paths, mode)?;
                if test_files.is_empty() {
                    train
                } else {
                    let test_paths: Vec<PathBuf> = test_files.iter().map(abs).collect();
                    let test = crate::data::load_cifar_binary(&test_paths, mode)?;
                    train.with_test_from(test)?
                }
            }
        };
        if let Some(n) = &self.normalize {
            ds = normalize(ds, &n.mean, &n.std)?;
        }
        ds = split_train_val(ds, self.val_fraction, seed)?;
        ds.augment = self.augment;
        Ok(ds)
    }
}

/// Distillation section: the loss settings plus its own training schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub kd: DistillConfig,
    pub schedule: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    #[serde(default = "default_student_arch_out")]
    pub arch_out: String,
    #[serde(default = "default_census_out")]
    pub census_out: String,
}

fn default_student_arch_out() -> String {
    "student_arch.json".to_string()
}
fn default_census_out() -> String {
    "census.csv".to_string()
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            arch_out: default_student_arch_out(),
            census_out: default_census_out(),
        }
    }
}

/// Optional inputs for the verification command.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Checkpoint pair for the label-smoothness check (e.g. dense teacher
    /// and pruned teacher).
    #[serde(default)]
    pub smoothness_a: Option<PathBuf>,
    #[serde(default)]
    pub smoothness_b: Option<PathBuf>,
}

/// Top-level run configuration. Every command embeds the resolved form of
/// this struct in its output directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub arch: ArchSource,
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<StudentSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl PipelineConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        if let Some(d) = &self.distill {
            d.kd.validate()?;
            d.schedule.validate()?;
        }
        if !(0.0 < self.data.val_fraction && self.data.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0,1), got {}",
                self.data.val_fraction
            )));
        }
        Ok(())
    }

    /// Copy with the master seed pushed into every schedule.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        if let Some(t) = &mut c.train {
            t.seed = seed;
        }
        if let Some(d) = &mut c.distill {
            d.schedule.seed = seed;
        }
        c
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
