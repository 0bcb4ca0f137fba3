//! Experiment configuration: JSON schema, defaults, seed resolution and
//! validation.

use std::path::PathBuf;

use paddles_core::model::Architecture;
use paddles_core::noise::NoiseKind;
use paddles_core::rng::derive_seed;
use paddles_core::trainer::{AdamConfig, PaddlesSchedule, SgdConfig};
use paddles_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed. Every component seed left out of the file is derived from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub study: StudyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        n: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        dim: usize,
        k: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    TinyImages {
        n: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        #[serde(default = "default_side")]
        height: usize,
        #[serde(default = "default_side")]
        width: usize,
        k: usize,
        #[serde(default = "default_waves")]
        waves_per_class: usize,
        #[serde(default = "default_shift")]
        max_shift: usize,
        #[serde(default = "default_contrast")]
        contrast_jitter: f64,
        #[serde(default = "default_pixel_noise")]
        pixel_noise: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// A directory written by `synth-data`: `train/` and optionally `test/`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub epsilon: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Dense stages of the given widths after the (flattened) input.
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        gate_index: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
    },
    SmallCnn {
        channels: Vec<usize>,
        #[serde(default)]
        gate_index: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_t_a")]
    pub t_a: usize,
    #[serde(default = "default_t_p")]
    pub t_p: usize,
    #[serde(default)]
    pub t_0: usize,
    #[serde(default)]
    pub suffix_epochs: Vec<usize>,
    #[serde(default = "default_sgd")]
    pub sgd: SgdConfig,
    #[serde(default = "default_adam")]
    pub adam: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_a: default_t_a(),
            t_p: default_t_p(),
            t_0: 0,
            suffix_epochs: Vec::new(),
            sgd: default_sgd(),
            adam: default_adam(),
            batch_size: default_batch(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Jitter scale of the second augmentation, relative to each feature's std.
    #[serde(default = "default_sigma")]
    pub augment_sigma: f64,
    #[serde(default)]
    pub augment_seed: Option<u64>,
    /// Epochs of class-weighted training on the confident set after selection.
    #[serde(default)]
    pub refit_epochs: usize,
    /// Refit from the initial weights instead of the trained model.
    #[serde(default)]
    pub fresh_start: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { augment_sigma: default_sigma(), augment_seed: None, refit_epochs: 0, fresh_start: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudyConfig {
    #[default]
    Single,
    /// Plain, amplitude-detached and phase-detached training side by side.
    Figure1 {
        #[serde(default = "default_figure_epochs")]
        epochs: usize,
    },
    /// Plain training, the schedule without its progressive phase, and the
    /// full schedule.
    Ablation {
        #[serde(default)]
        plain_epochs: Option<usize>,
    },
    /// One single run per `(t_a, t_p)` pair; `t_p` defaults to the schedule's.
    Sweep {
        t_a: Vec<usize>,
        #[serde(default)]
        t_p: Option<Vec<usize>>,
    },
}

fn default_n_test() -> usize {
    500
}
fn default_separation() -> f64 {
    2.0
}
fn default_side() -> usize {
    8
}
fn default_waves() -> usize {
    2
}
fn default_shift() -> usize {
    1
}
fn default_contrast() -> f64 {
    0.3
}
fn default_pixel_noise() -> f64 {
    0.6
}
fn default_t_a() -> usize {
    15
}
fn default_t_p() -> usize {
    10
}
fn default_sgd() -> SgdConfig {
    SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 }
}
fn default_adam() -> AdamConfig {
    AdamConfig { lr: 1e-3, weight_decay: 0.0 }
}
fn default_batch() -> usize {
    32
}
fn default_sigma() -> f64 {
    0.05
}
fn default_figure_epochs() -> usize {
    60
}

fn invalid(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

/// Parses JSON, reporting the path of the offending key on failure.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "(root)".to_string() } else { path };
        invalid(&path, e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Component seeds after derivation from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub root: u64,
    pub dataset: u64,
    pub noise: u64,
    pub model: u64,
    pub schedule: u64,
    pub augment: u64,
}

impl ExperimentConfig {
    /// Input feature shape (without the batch axis) and class count, when
    /// the dataset is synthetic.
    fn synthetic_shape(&self) -> Option<(Vec<usize>, usize)> {
        match &self.dataset {
            DatasetConfig::Blobs { dim, k, .. } => Some((vec![*dim], *k)),
            DatasetConfig::TinyImages { height, width, k, .. } => Some((vec![1, *height, *width], *k)),
            DatasetConfig::File { .. } => None,
        }
    }

    /// Architecture for inputs of `input` shape (batch axis excluded).
    pub fn architecture(&self, input: &[usize], k: usize) -> Result<Architecture> {
        match &self.model {
            ModelConfig::Mlp { hidden, .. } => {
                let mut widths = vec![input.iter().product()];
                widths.extend_from_slice(hidden);
                Ok(Architecture::Mlp { widths, classes: k })
            }
            ModelConfig::SmallCnn { channels, .. } => {
                if input.len() != 3 {
                    return Err(invalid("model.kind", "small_cnn needs image data (channels × height × width)"));
                }
                Ok(Architecture::SmallCnn {
                    in_channels: input[0],
                    height: input[1],
                    width: input[2],
                    channels: channels.clone(),
                    classes: k,
                })
            }
        }
    }

    pub fn gate_index(&self) -> Option<usize> {
        match &self.model {
            ModelConfig::Mlp { gate_index, .. } | ModelConfig::SmallCnn { gate_index, .. } => *gate_index,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Blobs { n, dim, k, separation, .. } => {
                check(*n >= 1, "dataset.n", "must be at least 1")?;
                check(*dim >= 1, "dataset.dim", "must be at least 1")?;
                check(*k >= 2, "dataset.k", "must be at least 2")?;
                check(separation.is_finite() && *separation >= 0.0, "dataset.separation", "must be finite and non-negative")?;
            }
            DatasetConfig::TinyImages { n, height, width, k, waves_per_class, contrast_jitter, pixel_noise, .. } => {
                check(*n >= 1, "dataset.n", "must be at least 1")?;
                check(*height >= 2, "dataset.height", "must be at least 2")?;
                check(*width >= 2, "dataset.width", "must be at least 2")?;
                check(*k >= 2, "dataset.k", "must be at least 2")?;
                check(*waves_per_class >= 1, "dataset.waves_per_class", "must be at least 1")?;
                check((0.0..1.0).contains(contrast_jitter), "dataset.contrast_jitter", "must be in [0, 1)")?;
                check(pixel_noise.is_finite() && *pixel_noise >= 0.0, "dataset.pixel_noise", "must be finite and non-negative")?;
            }
            DatasetConfig::File { .. } => {
                check(self.noise.is_none(), "noise", "a dataset file already carries its noisy labels")?;
            }
        }
        if let Some(noise) = &self.noise {
            check((0.0..=1.0).contains(&noise.epsilon), "noise.epsilon", format!("{} is outside [0, 1]", noise.epsilon))?;
            check(
                noise.kind != NoiseKind::Pairflip || noise.epsilon <= 0.5,
                "noise.epsilon",
                "pairflip rates above 0.5 are not identifiable",
            )?;
            check(noise.kind != NoiseKind::None || noise.epsilon == 0.0, "noise.epsilon", "must be 0 for kind none")?;
        }
        match &self.model {
            ModelConfig::Mlp { hidden, .. } => {
                check(!hidden.is_empty(), "model.hidden", "needs at least one width")?;
                check(!hidden.contains(&0), "model.hidden", "widths must be positive")?;
            }
            ModelConfig::SmallCnn { channels, .. } => {
                check((2..=4).contains(&channels.len()), "model.channels", "needs 2 to 4 conv stages")?;
                check(!channels.contains(&0), "model.channels", "channel counts must be positive")?;
            }
        }
        let s = &self.schedule;
        check(s.t_a + s.t_p + s.t_0 >= 1, "schedule", "t_a + t_p + t_0 must be at least 1")?;
        check(s.batch_size >= 1, "schedule.batch_size", "must be at least 1")?;
        check(s.sgd.lr.is_finite() && s.sgd.lr > 0.0, "schedule.sgd.lr", "must be positive")?;
        check((0.0..1.0).contains(&s.sgd.momentum), "schedule.sgd.momentum", "must be in [0, 1)")?;
        check(s.sgd.weight_decay.is_finite() && s.sgd.weight_decay >= 0.0, "schedule.sgd.weight_decay", "must be non-negative")?;
        check(s.adam.lr.is_finite() && s.adam.lr > 0.0, "schedule.adam.lr", "must be positive")?;
        check(s.adam.weight_decay.is_finite() && s.adam.weight_decay >= 0.0, "schedule.adam.weight_decay", "must be non-negative")?;
        check(
            self.selection.augment_sigma.is_finite() && self.selection.augment_sigma >= 0.0,
            "selection.augment_sigma",
            "must be finite and non-negative",
        )?;
        match &self.study {
            StudyConfig::Single | StudyConfig::Ablation { .. } => {}
            StudyConfig::Figure1 { epochs } => check(*epochs >= 1, "study.epochs", "must be at least 1")?,
            StudyConfig::Sweep { t_a, t_p } => {
                check(!t_a.is_empty(), "study.t_a", "needs at least one value")?;
                check(t_p.as_ref().is_none_or(|v| !v.is_empty()), "study.t_p", "needs at least one value")?;
            }
        }
        if let Some((input, k)) = self.synthetic_shape() {
            self.check_against_model(&input, k)?;
        }
        Ok(())
    }

    /// Checks that depend on the model's stage count.
    pub fn check_against_model(&self, input: &[usize], k: usize) -> Result<()> {
        let arch = self.architecture(input, k)?;
        let stages = match &arch {
            Architecture::Mlp { widths, .. } => widths.len(),
            Architecture::SmallCnn { channels, height, width, .. } => {
                let pools = channels.len() - 1;
                check(*height >> pools >= 1 && *width >> pools >= 1, "model.channels", "too many poolings for the input size")?;
                check(*height >= 4 && *width >= 4, "dataset", "small_cnn needs images of at least 4×4")?;
                channels.len() + 1
            }
        };
        let j = self.gate_index().unwrap_or(stages - 2);
        check(j < stages, "model.gate_index", format!("{j} is out of range for {stages} stages"))?;
        let after = stages - j - 1;
        let suffix = &self.schedule.suffix_epochs;
        check(
            suffix.is_empty() || suffix.len() == after,
            "schedule.suffix_epochs",
            format!("has {} entries but {after} stages follow the gate", suffix.len()),
        )?;
        Ok(())
    }

    /// Fills every omitted component seed from the root seed.
    pub fn resolve_seeds(&mut self) -> Seeds {
        let root = self.seed;
        let fill = |slot: &mut Option<u64>, label: &str| *slot.get_or_insert_with(|| derive_seed(root, label));
        let dataset = match &mut self.dataset {
            DatasetConfig::Blobs { seed, .. } | DatasetConfig::TinyImages { seed, .. } => fill(seed, "dataset"),
            DatasetConfig::File { .. } => 0,
        };
        let noise = self.noise.as_mut().map_or(0, |n| fill(&mut n.seed, "noise"));
        let model = match &mut self.model {
            ModelConfig::Mlp { seed, .. } | ModelConfig::SmallCnn { seed, .. } => fill(seed, "model"),
        };
        let schedule = fill(&mut self.schedule.seed, "schedule");
        let augment = fill(&mut self.selection.augment_seed, "augment");
        Seeds { root, dataset, noise, model, schedule, augment }
    }

    /// Replaces the root seed; component seeds that were derived from the
    /// old root are derived again.
    pub fn override_seed(&mut self, root: u64) {
        let old = self.seed;
        let reset = |slot: &mut Option<u64>, label: &str| {
            if *slot == Some(derive_seed(old, label)) {
                *slot = None;
            }
        };
        match &mut self.dataset {
            DatasetConfig::Blobs { seed, .. } | DatasetConfig::TinyImages { seed, .. } => reset(seed, "dataset"),
            DatasetConfig::File { .. } => {}
        }
        if let Some(n) = self.noise.as_mut() {
            reset(&mut n.seed, "noise");
        }
        match &mut self.model {
            ModelConfig::Mlp { seed, .. } | ModelConfig::SmallCnn { seed, .. } => reset(seed, "model"),
        }
        reset(&mut self.schedule.seed, "schedule");
        reset(&mut self.selection.augment_seed, "augment");
        self.seed = root;
    }

    /// The trainer's schedule for gate index `j` (seeds must be resolved).
    pub fn paddles_schedule(&self, j: usize) -> PaddlesSchedule {
        let s = &self.schedule;
        PaddlesSchedule {
            j,
            t_a: s.t_a,
            t_p: s.t_p,
            t_0: s.t_0,
            suffix_epochs: s.suffix_epochs.clone(),
            sgd: s.sgd,
            adam: s.adam,
            batch_size: s.batch_size,
            seed: s.seed.expect("seeds resolved"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn check(ok: bool, path: &str, msg: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(invalid(path, msg))
    }
}
