//! Experiment configuration: one flat TOML file of `key = value` lines.
//!
//! Every key is optional and falls back to the default listed in
//! [`ExperimentConfig::default`]. Unknown keys are rejected. `configs/default.toml`
//! at the repository root lists the full schema with comments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, StageSpec};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::lsc::ClassifierLoss;
use crate::memory::Budget;
use crate::pod::{PodConfig, PodMode};
use crate::protocol::{ProtocolConfig, TaskSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated in memory from the `synthetic_*` keys.
    Synthetic,
    /// A dataset blob written by `podinc generate`.
    File,
    /// CIFAR-100 binary `train.bin` / `test.bin`.
    Cifar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    PerClass,
    Total,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // run
    pub output_dir: PathBuf,
    pub seed: u64,

    // schedule
    pub num_classes: usize,
    pub initial_task_size: usize,
    pub increment: usize,
    /// Shuffle the class order with `seed`; otherwise classes arrive in label order.
    pub shuffle_classes: bool,

    // backbone
    pub stage_filters: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embedding_dim: usize,

    // distillation
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub pod_mode: PodMode,
    pub squared_features: bool,
    pub normalize_pooled: bool,

    // classifier
    pub proxies_per_class: usize,
    pub delta: f64,
    pub eta_init: f64,
    pub eta_min: f64,
    pub classifier_loss: ClassifierLoss,

    // memory
    pub memory_mode: MemoryMode,
    pub memory_size: usize,

    // optimizer
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: Option<f64>,
    pub warmup_epochs: usize,
    pub balanced_finetune: bool,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,

    // dataset
    pub dataset: DatasetSource,
    /// (channels, width, height) of every image.
    pub image_shape: (usize, usize, usize),
    pub data_seed: u64,
    pub synthetic_samples_per_class: usize,
    pub synthetic_pattern_seed: u64,
    pub synthetic_noise_sigma: f64,
    pub synthetic_contrast: f64,
    pub dataset_path: Option<PathBuf>,
    pub cifar_train: Option<PathBuf>,
    pub cifar_test: Option<PathBuf>,
    /// CIFAR fine labels to keep, in order; all 100 when absent.
    pub cifar_classes: Option<Vec<usize>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let pod = PodConfig::default();
        let tr = TrainConfig::default();
        let syn = SyntheticSpec::default();
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            seed: 1,
            num_classes: 10,
            initial_task_size: 5,
            increment: 1,
            shuffle_classes: true,
            stage_filters: bb.stages.iter().map(|s| s.filters).collect(),
            blocks_per_stage: 1,
            embedding_dim: bb.embedding_dim,
            lambda_c: pod.lambda_c,
            lambda_f: pod.lambda_f,
            pod_mode: pod.mode,
            squared_features: pod.squared_features,
            normalize_pooled: pod.normalize_pooled,
            proxies_per_class: 10,
            delta: 0.6,
            eta_init: 1.0,
            eta_min: 1.0,
            classifier_loss: ClassifierLoss::NcaHinge,
            memory_mode: MemoryMode::PerClass,
            memory_size: 20,
            epochs: tr.epochs,
            batch_size: tr.batch_size,
            lr: tr.lr,
            momentum: tr.momentum,
            weight_decay: tr.weight_decay,
            grad_clip_norm: tr.grad_clip_norm,
            warmup_epochs: tr.warmup_epochs,
            balanced_finetune: tr.balanced_finetune,
            finetune_epochs: tr.finetune_epochs,
            finetune_lr: tr.finetune_lr,
            dataset: DatasetSource::Synthetic,
            image_shape: syn.image_shape,
            data_seed: 0,
            synthetic_samples_per_class: syn.samples_per_class,
            synthetic_pattern_seed: syn.pattern_seed,
            synthetic_noise_sigma: syn.noise_sigma,
            synthetic_contrast: syn.contrast,
            dataset_path: None,
            cifar_train: None,
            cifar_test: None,
            cifar_classes: None,
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(field(name, "must be positive"));
    }
    Ok(())
}

fn finite_at_least(name: &str, v: f64, min: f64) -> Result<()> {
    if !v.is_finite() || v < min {
        return Err(field(name, format!("must be finite and >= {min}, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads and validates a config file. A relative `output_dir` or data path is
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output_dir);
        for p in [&mut cfg.dataset_path, &mut cfg.cifar_train, &mut cfg.cifar_test].into_iter().flatten() {
            rebase(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(field("num_classes", "must be positive"));
        }
        positive("initial_task_size", self.initial_task_size)?;
        if self.initial_task_size > self.num_classes {
            return Err(field(
                "initial_task_size",
                format!("{} exceeds num_classes = {}", self.initial_task_size, self.num_classes),
            ));
        }
        let rest = self.num_classes - self.initial_task_size;
        if rest > 0 && (self.increment == 0 || !rest.is_multiple_of(self.increment)) {
            return Err(field(
                "increment",
                format!("{} does not divide the {rest} classes after the first task", self.increment),
            ));
        }
        if self.stage_filters.len() < 2 {
            return Err(field("stage_filters", "need at least 2 stages"));
        }
        if self.stage_filters.contains(&0) {
            return Err(field("stage_filters", "every stage needs at least one filter"));
        }
        positive("blocks_per_stage", self.blocks_per_stage)?;
        positive("embedding_dim", self.embedding_dim)?;
        finite_at_least("lambda_c", self.lambda_c, 0.0)?;
        finite_at_least("lambda_f", self.lambda_f, 0.0)?;
        positive("proxies_per_class", self.proxies_per_class)?;
        finite_at_least("delta", self.delta, 0.0)?;
        if !(self.eta_init > 0.0 && self.eta_init.is_finite()) {
            return Err(field("eta_init", format!("must be positive, got {}", self.eta_init)));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_init) {
            return Err(field("eta_min", format!("must lie in (0, eta_init], got {}", self.eta_min)));
        }
        positive("memory_size", self.memory_size)?;
        positive("epochs", self.epochs)?;
        positive("batch_size", self.batch_size)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(field("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(field("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        finite_at_least("weight_decay", self.weight_decay, 0.0)?;
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(field("grad_clip_norm", format!("must be positive, got {c}")));
            }
        }
        if self.warmup_epochs >= self.epochs {
            return Err(field("warmup_epochs", "must be smaller than epochs"));
        }
        if self.balanced_finetune {
            positive("finetune_epochs", self.finetune_epochs)?;
            if !(self.finetune_lr > 0.0 && self.finetune_lr.is_finite()) {
                return Err(field("finetune_lr", format!("must be positive, got {}", self.finetune_lr)));
            }
        }
        let (c, w, h) = self.image_shape;
        if c == 0 || w == 0 || h == 0 {
            return Err(field("image_shape", format!("degenerate {:?}", self.image_shape)));
        }
        match self.dataset {
            DatasetSource::Synthetic => {
                if self.num_classes < 2 {
                    return Err(field("num_classes", "synthetic data needs at least 2 classes"));
                }
                if self.synthetic_samples_per_class < 2 {
                    return Err(field("synthetic_samples_per_class", "must be at least 2"));
                }
                finite_at_least("synthetic_noise_sigma", self.synthetic_noise_sigma, 0.0)?;
                finite_at_least("synthetic_contrast", self.synthetic_contrast, 0.0)?;
            }
            DatasetSource::File => {
                if self.dataset_path.is_none() {
                    return Err(field("dataset_path", "required when dataset = \"file\""));
                }
            }
            DatasetSource::Cifar => {
                if self.cifar_train.is_none() {
                    return Err(field("cifar_train", "required when dataset = \"cifar\""));
                }
                if self.cifar_test.is_none() {
                    return Err(field("cifar_test", "required when dataset = \"cifar\""));
                }
                let expected = self.cifar_classes.as_ref().map_or(100, Vec::len);
                if expected != self.num_classes {
                    return Err(field(
                        "num_classes",
                        format!("{} but the CIFAR selection has {expected} classes", self.num_classes),
                    ));
                }
                if let Some(cls) = &self.cifar_classes {
                    if let Some(bad) = cls.iter().find(|&&c| c >= 100) {
                        return Err(field("cifar_classes", format!("label {bad} is not a CIFAR-100 class")));
                    }
                }
                if self.image_shape != (3, 32, 32) {
                    return Err(field("image_shape", "CIFAR images are (3, 32, 32)"));
                }
            }
        }
        self.protocol().validate()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.num_classes,
            samples_per_class: self.synthetic_samples_per_class,
            image_shape: self.image_shape,
            pattern_seed: self.synthetic_pattern_seed,
            noise_sigma: self.synthetic_noise_sigma,
            contrast: self.synthetic_contrast,
        }
    }

    pub fn schedule(&self) -> Result<TaskSchedule> {
        let shuffle_seed = if self.shuffle_classes { self.seed.wrapping_add(1) } else { 0 };
        TaskSchedule::seeded(self.num_classes, self.initial_task_size, self.increment, shuffle_seed)
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            backbone: BackboneConfig {
                input_shape: self.image_shape,
                stages: self
                    .stage_filters
                    .iter()
                    .map(|&filters| StageSpec {
                        filters,
                        blocks: self.blocks_per_stage,
                    })
                    .collect(),
                embedding_dim: self.embedding_dim,
            },
            pod: PodConfig {
                lambda_c: self.lambda_c,
                lambda_f: self.lambda_f,
                mode: self.pod_mode,
                squared_features: self.squared_features,
                normalize_pooled: self.normalize_pooled,
            },
            proxies_per_class: self.proxies_per_class,
            delta: self.delta,
            eta_init: self.eta_init,
            eta_min: self.eta_min,
            classifier_loss: self.classifier_loss,
            budget: match self.memory_mode {
                MemoryMode::PerClass => Budget::PerClass(self.memory_size),
                MemoryMode::Total => Budget::Total(self.memory_size),
            },
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                grad_clip_norm: self.grad_clip_norm,
                warmup_epochs: self.warmup_epochs,
                balanced_finetune: self.balanced_finetune,
                finetune_epochs: self.finetune_epochs,
                finetune_lr: self.finetune_lr,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.lambda_c, 3.0);
        assert_eq!(cfg.lambda_f, 1.0);
        assert_eq!(cfg.proxies_per_class, 10);
        assert_eq!(cfg.memory_size, 20);
        assert_eq!(cfg.momentum, 0.9);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_toml_str("lamda_c = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("lamda_c"), "{err}");
    }

    #[test]
    fn field_level_messages() {
        for (text, name) in [
            ("momentum = 1.5", "momentum"),
            ("lambda_c = -1.0", "lambda_c"),
            ("increment = 2", "increment"),
            ("initial_task_size = 11", "initial_task_size"),
            ("stage_filters = [8]", "stage_filters"),
            ("dataset = \"file\"", "dataset_path"),
            ("epochs = 0", "epochs"),
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap().validate().unwrap_err();
            assert!(matches!(err, Error::Config(_)));
            assert!(err.to_string().contains(name), "{text}: {err}");
        }
    }

    #[test]
    fn toml_and_json_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.pod_mode = PodMode::Gap;
        cfg.lr = 0.1 + 0.2;
        cfg.cifar_classes = Some(vec![3, 1]);
        cfg.memory_mode = MemoryMode::Total;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        let text = std::fs::read_to_string(path).unwrap();
        let mut cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        cfg.output_dir = ExperimentConfig::default().output_dir;
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn shipped_ablation_pair_differs_only_in_the_ablated_fields() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let full = ExperimentConfig::load(&dir.join("ablation_full.toml")).unwrap();
        let mut base = ExperimentConfig::load(&dir.join("ablation_baseline.toml")).unwrap();
        assert_ne!(full.output_dir, base.output_dir);
        assert_eq!((base.lambda_c, base.lambda_f, base.proxies_per_class), (0.0, 0.0, 1));
        base.output_dir = full.output_dir.clone();
        base.lambda_c = full.lambda_c;
        base.lambda_f = full.lambda_f;
        base.proxies_per_class = full.proxies_per_class;
        assert_eq!(base, full);
    }
}
