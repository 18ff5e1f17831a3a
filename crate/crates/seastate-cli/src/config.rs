//! The declarative run configuration: one TOML file with sections, merged
//! with command-line flags (flags win), then written back in full — every
//! value made concrete — as the run's `config_snapshot.toml`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seastate_core::augment::AugmentConfig;
use seastate_core::dataset::{HoldoutMode, LabelRange, Split, Strategy};
use seastate_core::error::{Error, Result};
use seastate_core::eval::LabelMapping;
use seastate_core::model::{Architecture, ArchitectureSpec, DEFAULT_VIT_HIDDEN};
use seastate_core::synth::SynthConfig;
use seastate_core::train::{OptimizerKind, PlateauConfig, TrainConfig};

pub const SNAPSHOT_FILE: &str = "config_snapshot.toml";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory all artifacts of this run land in, relative to the workdir.
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub profiling: ProfilingSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    /// Directory of an already-built dataset (input to train/evaluate/...).
    pub dir: Option<PathBuf>,
    /// Session index file (input to build-dataset). Session paths inside are
    /// relative to the index file's directory.
    pub session_index: Option<PathBuf>,
    /// Procedural generator settings (input to synth).
    pub synth: Option<SynthConfig>,
    pub strategy: Strategy,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub label_min: u8,
    pub label_max: u8,
    pub ll_offset_x: usize,
    pub ll_offset_y: usize,
    pub holdout: HoldoutMode,
    /// Acceptable per-class shortfall fraction before a build aborts.
    pub tolerance: f64,
    /// Frame rate assumed when deriving session durations from frame counts.
    pub fps: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            name: "dataset".into(),
            dir: None,
            session_index: None,
            synth: None,
            strategy: Strategy::LL,
            train: 750,
            val: 150,
            test: 150,
            seed: 17,
            crop_size: seastate_core::dataset::CROP_SIZE,
            label_min: LabelRange::NATIVE.min,
            label_max: LabelRange::NATIVE.max,
            ll_offset_x: 0,
            ll_offset_y: 0,
            holdout: HoldoutMode::TrailingFrames,
            tolerance: 0.10,
            fps: 25.0,
        }
    }
}

impl DatasetSection {
    pub fn label_range(&self) -> Result<LabelRange> {
        LabelRange::new(self.label_min, self.label_max)
    }

    pub fn targets(&self) -> seastate_core::dataset::BuildTargets {
        seastate_core::dataset::BuildTargets {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub num_classes: usize,
    /// Registry of pretrained backbone weights; the `SEASTATE_ASSET_REGISTRY`
    /// environment variable overrides this path.
    pub asset_registry: Option<PathBuf>,
    pub vit_head_width: usize,
    pub head_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            architecture: Architecture::TinySurrogate,
            num_classes: 8,
            asset_registry: None,
            vit_head_width: DEFAULT_VIT_HIDDEN,
            head_seed: 0,
        }
    }
}

/// Optional overrides of one training stage; unset fields keep the
/// architecture's protocol defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagePatch {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub keep_best: Option<bool>,
    pub stage1: StagePatch,
    pub stage2: StagePatch,
    pub plateau: Option<PlateauConfig>,
    pub augment: Option<AugmentConfig>,
}

impl TrainingSection {
    /// Resolve against the architecture's protocol defaults.
    pub fn merged(&self, spec: &ArchitectureSpec) -> TrainConfig {
        let mut cfg = TrainConfig::for_spec(spec);
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.keep_best {
            cfg.keep_best = k;
        }
        for (patch, stage) in [(&self.stage1, &mut cfg.stage1), (&self.stage2, &mut cfg.stage2)] {
            if let Some(e) = patch.epochs {
                stage.epochs = e;
            }
            if let Some(lr) = patch.lr {
                stage.lr = lr;
            }
            if let Some(o) = patch.optimizer {
                stage.optimizer = o;
            }
        }
        if let Some(p) = self.plateau {
            cfg.plateau = p;
        }
        if let Some(a) = &self.augment {
            cfg.augment = a.clone();
        }
        cfg
    }

    /// The fully resolved section the snapshot records: every field concrete.
    pub fn materialized(cfg: &TrainConfig) -> TrainingSection {
        TrainingSection {
            batch_size: Some(cfg.batch_size),
            seed: Some(cfg.seed),
            keep_best: Some(cfg.keep_best),
            stage1: StagePatch {
                epochs: Some(cfg.stage1.epochs),
                lr: Some(cfg.stage1.lr),
                optimizer: Some(cfg.stage1.optimizer),
            },
            stage2: StagePatch {
                epochs: Some(cfg.stage2.epochs),
                lr: Some(cfg.stage2.lr),
                optimizer: Some(cfg.stage2.optimizer),
            },
            plateau: Some(cfg.plateau),
            augment: Some(cfg.augment.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSection {
    pub model_min: u8,
    pub model_max: u8,
    pub dataset_min: u8,
    pub dataset_max: u8,
}

impl Default for MappingSection {
    fn default() -> Self {
        MappingSection {
            model_min: 1,
            model_max: 8,
            dataset_min: 1,
            dataset_max: 8,
        }
    }
}

impl MappingSection {
    pub fn to_mapping(self) -> Result<LabelMapping> {
        Ok(LabelMapping {
            model_range: LabelRange::new(self.model_min, self.model_max)?,
            dataset_range: LabelRange::new(self.dataset_min, self.dataset_max)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub split: Split,
    /// Foreign dataset directory for cross-dataset evaluation.
    pub foreign: Option<PathBuf>,
    /// Label-space relation between the model and the foreign dataset.
    pub mapping: Option<MappingSection>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            split: Split::Test,
            foreign: None,
            mapping: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilingSection {
    pub batch_size: usize,
    pub num_batches: usize,
    pub warmup_batches: usize,
}

impl Default for ProfilingSection {
    fn default() -> Self {
        ProfilingSection {
            batch_size: 16,
            num_batches: 8,
            warmup_batches: 2,
        }
    }
}

impl RunConfig {
    /// Parse a configuration file. Unknown keys are configuration errors that
    /// name the first offending key.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serializes")
    }

    /// Write the resolved configuration into the run directory. Every command
    /// calls this before doing any work.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_input() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.dataset.crop_size, 331);
        assert_eq!(cfg.model.num_classes, 8);
        assert_eq!(cfg.profiling.batch_size, 16);
    }

    #[test]
    fn roundtrip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.output_dir = PathBuf::from("runs/x");
        cfg.model.architecture = Architecture::Resnet101;
        cfg.training.stage2.lr = Some(2e-4);
        cfg.dataset.synth = Some(SynthConfig::default());
        cfg.evaluation.mapping = Some(MappingSection {
            model_min: 1,
            model_max: 8,
            dataset_min: 1,
            dataset_max: 4,
        });
        let text = cfg.to_toml();
        let reparsed = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, reparsed);
        // and the serialized form is stable across a second round trip
        assert_eq!(text, reparsed.to_toml());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[model]\nfrobnication_level = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frobnication_level"), "{msg}");
        assert_eq!(err.category(), seastate_core::ErrorCategory::Config);

        let err = RunConfig::parse("[training.stage2]\nlr = 1e-4\nepochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn flags_base_resolution_uses_architecture_defaults() {
        let cfg = RunConfig::parse("[training.stage2]\nepochs = 7\n").unwrap();
        let spec = seastate_core::model::spec_for(Architecture::MobilenetV2);
        let merged = cfg.training.merged(&spec);
        assert_eq!(merged.stage2.epochs, 7); // overridden
        assert_eq!(merged.batch_size, spec.batch_size); // from the spec
        assert_eq!(merged.stage1.epochs, 30); // protocol default

        let snap = TrainingSection::materialized(&merged);
        assert_eq!(snap.merged(&spec), merged);
    }
}
