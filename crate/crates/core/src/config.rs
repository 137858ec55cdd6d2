//! Declarative experiment configuration (JSON), with aggregated validation
//! and run-directory layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::{synth_splits, SynthParams};
use crate::data::{idx, Dataset, Split};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::nn::CnnSpec;
use crate::probe::ProbeConfig;
use crate::tensor::Real;
use crate::trainer::{TrainSettings, Variant};

/// Environment variable overriding `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "TSKD_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        params: SynthParams,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `n` samples of each split.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            seed: 0,
            params: SynthParams::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Vec<String> {
        match self {
            DatasetSpec::Synthetic { params, .. } => params.validate(),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut errs: Vec<String> = [train_images, train_labels, test_images, test_labels]
                    .into_iter()
                    .filter(|p| !p.is_file())
                    .map(|p| format!("dataset file {} does not exist", p.display()))
                    .collect();
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    errs.push("dataset limits must be >= 1".into());
                }
                errs
            }
        }
    }

    pub fn load<T: Real>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        match self {
            DatasetSpec::Synthetic { seed, params } => synth_splits(*seed, params),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = idx::load_idx(train_images, train_labels, Split::Train)?;
                let mut test = idx::load_idx(test_images, test_labels, Split::Test)?;
                if let Some(n) = train_limit {
                    train = train.take(*n)?;
                }
                if let Some(n) = test_limit {
                    test = test.take(*n)?;
                }
                let classes = train.classes.max(test.classes);
                train.classes = classes;
                test.classes = classes;
                Ok((train, test))
            }
        }
    }
}

/// A named architecture with optional overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks_per_stage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_strides: Option<Vec<usize>>,
}

impl ModelSection {
    pub fn named(arch: &str) -> Self {
        ModelSection {
            arch: arch.into(),
            widths: None,
            blocks_per_stage: None,
            stage_strides: None,
        }
    }

    pub fn resolve(&self, input: [usize; 3], classes: usize) -> Result<CnnSpec> {
        let mut spec = CnnSpec::by_name(&self.arch, input, classes)?;
        if let Some(w) = &self.widths {
            spec.widths = w.clone();
            if self.stage_strides.is_none() {
                spec.stage_strides = vec![2; w.len()];
            }
        }
        if let Some(b) = self.blocks_per_stage {
            spec.blocks_per_stage = b;
        }
        if let Some(s) = &self.stage_strides {
            spec.stage_strides = s.clone();
        }
        let errs = spec.validate();
        if errs.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Config(
                errs.into_iter()
                    .map(|e| format!("{}: {e}", self.arch))
                    .collect(),
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    pub dataset: DatasetSpec,
    pub teacher: ModelSection,
    pub teacher_seed: u64,
    pub teacher_train: TrainSettings,
    /// Defaults to `<output_root>/teacher/teacher.ckpt`.
    pub teacher_checkpoint: Option<PathBuf>,
    pub student: ModelSection,
    pub train: TrainSettings,
    pub distill: DistillConfig,
    pub probe: ProbeConfig,
    pub output_root: PathBuf,
    /// Overrides the `<variant>_seed<N>` run directory name.
    pub run_name: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            variant: Variant::Tskd,
            dataset: DatasetSpec::default(),
            teacher: ModelSection::named("teacher"),
            teacher_seed: 100,
            teacher_train: TrainSettings {
                epochs: 20,
                ..TrainSettings::default()
            },
            teacher_checkpoint: None,
            student: ModelSection::named("student"),
            train: TrainSettings::default(),
            distill: DistillConfig::default(),
            probe: ProbeConfig::default(),
            output_root: PathBuf::from("runs"),
            run_name: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config: {e}")]))
    }

    /// Parse `path` and apply the output-root environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(vec![format!("cannot read config {}: {e}", path.display())])
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            cfg.output_root = PathBuf::from(root);
        }
        Ok(cfg)
    }

    /// The configuration with every default made explicit.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if cfg.teacher_checkpoint.is_none() {
            cfg.teacher_checkpoint = Some(self.teacher_checkpoint_path());
        }
        cfg
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.output_root.join("teacher")
    }

    pub fn teacher_checkpoint_path(&self) -> PathBuf {
        self.teacher_checkpoint
            .clone()
            .unwrap_or_else(|| self.teacher_dir().join("teacher.ckpt"))
    }

    pub fn run_dir(&self) -> PathBuf {
        let name = self
            .run_name
            .clone()
            .unwrap_or_else(|| format!("{}_seed{}", self.variant, self.seed));
        self.output_root.join(name)
    }

    pub fn probe_dir(&self) -> PathBuf {
        self.output_root
            .join(format!("probe_seed{}", self.probe.seed))
    }

    /// Checks shared by every command.
    fn common_errors(&self) -> Vec<String> {
        let mut errs = self.dataset.validate();
        if let Some(name) = &self.run_name {
            if name.is_empty() || name.contains(['/', '\\']) || name == "teacher" {
                errs.push(format!(
                    "run_name `{name}` must be a plain directory name other than `teacher`"
                ));
            }
        }
        errs
    }

    fn model_errors(&self, section: &ModelSection) -> Vec<String> {
        match section.resolve([1, 8, 8], 2) {
            Ok(_) => Vec::new(),
            Err(Error::Config(e)) => e,
            Err(e) => vec![e.to_string()],
        }
    }

    pub fn validate_teacher(&self) -> Result<()> {
        let mut errs = self.common_errors();
        errs.extend(self.model_errors(&self.teacher));
        errs.extend(
            self.teacher_train
                .validate()
                .into_iter()
                .map(|e| format!("teacher_train: {e}")),
        );
        finish(errs)
    }

    pub fn validate_distill(&self) -> Result<()> {
        let mut errs = self.common_errors();
        errs.extend(self.model_errors(&self.student));
        errs.extend(
            self.train
                .validate()
                .into_iter()
                .map(|e| format!("train: {e}")),
        );
        errs.extend(
            self.distill
                .validate()
                .into_iter()
                .map(|e| format!("distill: {e}")),
        );
        if self.variant.uses_teacher() {
            errs.extend(self.model_errors(&self.teacher));
            let ckpt = self.teacher_checkpoint_path();
            if !ckpt.is_file() {
                errs.push(format!(
                    "variant `{}` needs a teacher checkpoint, but {} does not exist (run train-teacher first)",
                    self.variant,
                    ckpt.display()
                ));
            }
        }
        finish(errs)
    }

    pub fn validate_probe(&self) -> Result<()> {
        finish(
            self.probe
                .validate()
                .into_iter()
                .map(|e| format!("probe: {e}"))
                .collect(),
        )
    }

    /// Settings that the selected variant does not use but that differ from
    /// their defaults.
    pub fn warnings(&self) -> Vec<String> {
        let d = DistillConfig::default();
        let c = &self.distill;
        let mut ignored = Vec::new();
        let v = self.variant;
        if !v.uses_teacher() && self.teacher_checkpoint.is_some() {
            ignored.push("teacher_checkpoint");
        }
        if !v.reviews() {
            if c.lambda != d.lambda {
                ignored.push("distill.lambda");
            }
            if c.k != d.k {
                ignored.push("distill.k");
            }
            if c.delta != d.delta {
                ignored.push("distill.delta");
            }
            if c.sequence_mode != d.sequence_mode {
                ignored.push("distill.sequence_mode");
            }
            if c.detach_target != d.detach_target {
                ignored.push("distill.detach_target");
            }
            if self.train.warmup != 0 {
                ignored.push("train.warmup");
            }
            if self.train.lstm != TrainSettings::default().lstm
                || self.train.lstm_lr != TrainSettings::default().lstm_lr
            {
                ignored.push("train.lstm");
            }
        }
        if v == Variant::TskdFm && c.sequence_mode != d.sequence_mode {
            ignored.push("distill.sequence_mode (tskd_fm always uses feature maps)");
        }
        if v != Variant::Kd && (c.kd_temperature != d.kd_temperature || c.kd_alpha != d.kd_alpha) {
            ignored.push("distill.kd_temperature/kd_alpha");
        }
        if v != Variant::At && c.at_beta.is_some() {
            ignored.push("distill.at_beta");
        }
        if matches!(v, Variant::Vanilla | Variant::Kd)
            && (c.layer_pairs != d.layer_pairs || c.normalize_maps != d.normalize_maps)
        {
            ignored.push("distill.layer_pairs/normalize_maps");
        }
        ignored
            .into_iter()
            .map(|f| format!("`{f}` is ignored by variant `{v}`"))
            .collect()
    }
}

fn finish(errs: Vec<String>) -> Result<()> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}
