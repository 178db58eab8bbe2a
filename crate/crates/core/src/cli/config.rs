use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::evaluation::ExperimentConfig;
use crate::ingest::SlicePolicy;
use crate::isoforest::OutlierConfig;
use crate::model::{
    BackboneName, BackboneSpec, HeadConfig, Loss, Optimizer, TrainConfig, WeightsSource, DEFAULT_TRAINABLE_TAIL,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    /// Directory scanned for MINC, DICOM and PNG files.
    pub root: Option<PathBuf>,
    /// Label table joined to `root`.
    pub labels: Option<PathBuf>,
    /// Existing manifest, used instead of `root` + `labels`.
    pub manifest: Option<PathBuf>,
}

/// Training hyperparameters. Per-fold seeds come from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub loss: Loss,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            loss: t.loss,
            optimizer: t.optimizer,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(self, seed: u64) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// Everything a run depends on. Loaded from TOML; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_dir: Option<PathBuf>,
    pub seed: u64,
    pub k_folds: usize,
    pub group_by_subject: bool,
    pub backbones: Vec<BackboneName>,
    pub weights: WeightsSource,
    pub trainable_tail_layers: usize,
    pub canonical_preprocessing: bool,
    pub source: SourceConfig,
    pub slice: SlicePolicy,
    pub train: TrainSection,
    pub head: HeadConfig,
    pub isoforest: OutlierConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_dir: None,
            seed: 0,
            k_folds: 5,
            group_by_subject: true,
            backbones: vec![
                BackboneName::MobileNetV2,
                BackboneName::ResNet50V2,
                BackboneName::ResNet101V2,
                BackboneName::Xception,
            ],
            weights: WeightsSource::Imagenet,
            trainable_tail_layers: DEFAULT_TRAINABLE_TAIL,
            canonical_preprocessing: false,
            source: SourceConfig::default(),
            slice: SlicePolicy::default(),
            train: TrainSection::default(),
            head: HeadConfig::default(),
            isoforest: OutlierConfig::default(),
        }
    }
}

/// Pipeline stages, in execution order. Each stage's fingerprint covers its
/// own settings and those of every earlier stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Convert,
    Outliers,
    Evaluate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Convert => "convert",
            Stage::Outliers => "outliers",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// `p` resolved against `base`, with `.` components dropped.
pub(crate) fn absolute(base: &Path, p: &Path) -> PathBuf {
    let joined = base.join(p);
    std::path::absolute(&joined).unwrap_or(joined)
}

impl RunConfig {
    /// Parses TOML; relative paths are taken relative to `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.absolutize(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn absolutize(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                *v = absolute(base, v);
            }
        };
        fix(&mut self.run_dir);
        fix(&mut self.source.root);
        fix(&mut self.source.labels);
        fix(&mut self.source.manifest);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        if self.k_folds < 2 {
            return bad(format!("k_folds = {}: need at least 2", self.k_folds));
        }
        if self.backbones.is_empty() {
            return bad("backbones: list at least one backbone".into());
        }
        let s = &self.source;
        if s.manifest.is_some() && (s.root.is_some() || s.labels.is_some()) {
            return bad("source: give either `manifest` or `root` + `labels`, not both".into());
        }
        if s.root.is_some() != s.labels.is_some() {
            return bad("source: `root` and `labels` go together".into());
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.slice.validate().map_err(wrap)?;
        self.isoforest.validate().map_err(wrap)?;
        self.head.validate().map_err(wrap)?;
        self.train.to_train_config(0).validate().map_err(wrap)
    }

    pub fn backbone_specs(&self) -> Vec<BackboneSpec> {
        self.backbones
            .iter()
            .map(|&name| BackboneSpec {
                name,
                weights: self.weights,
                trainable_tail_layers: self.trainable_tail_layers,
                canonical_preprocessing: self.canonical_preprocessing,
            })
            .collect()
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            backbones: self.backbone_specs(),
            head: self.head,
            train: self.train.to_train_config(self.seed),
            k_folds: self.k_folds,
            seed: self.seed,
            group_by_subject: self.group_by_subject,
        }
    }

    fn stage_value(&self, stage: Stage) -> serde_json::Value {
        let mut v = serde_json::json!({
            "source": self.source,
            "slice": self.slice,
        });
        let m = v.as_object_mut().unwrap();
        if stage >= Stage::Outliers {
            m.insert("seed".into(), self.seed.into());
            m.insert("isoforest".into(), serde_json::json!(self.isoforest));
        }
        if stage >= Stage::Evaluate {
            for (k, val) in [
                ("k_folds", serde_json::json!(self.k_folds)),
                ("group_by_subject", serde_json::json!(self.group_by_subject)),
                ("backbones", serde_json::json!(self.backbones)),
                ("weights", serde_json::json!(self.weights)),
                ("trainable_tail_layers", serde_json::json!(self.trainable_tail_layers)),
                ("canonical_preprocessing", serde_json::json!(self.canonical_preprocessing)),
                ("train", serde_json::json!(self.train)),
                ("head", serde_json::json!(self.head)),
            ] {
                m.insert(k.into(), val);
            }
        }
        v
    }

    /// SHA-256 over the settings `stage` depends on; `run_dir` never counts.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let bytes = serde_json::to_vec(&self.stage_value(stage)).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn hash(&self) -> String {
        self.stage_hash(Stage::Evaluate)
    }

    /// The earliest stage whose settings differ from `other`.
    pub fn first_difference(&self, other: &RunConfig) -> Option<Stage> {
        [Stage::Convert, Stage::Outliers, Stage::Evaluate]
            .into_iter()
            .find(|&s| self.stage_hash(s) != other.stage_hash(s))
    }

    /// Snapshot stored in reports.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(m) = v.as_object_mut() {
            m.remove("run_dir");
        }
        v
    }
}

pub fn write_resolved(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text = format!("# config hash {}\n{}", cfg.hash(), cfg.to_toml()?);
    fs::write(path, text).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text, Path::new("/")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(back.isoforest.contamination, 114.0 / 2102.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("sed = 3\n", Path::new("/")).unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n", Path::new("/")).is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 4\nbackbones = [\"Stub\"]\n[train]\nepochs = 2\n[source]\nroot = \"data\"\nlabels = \"data/labels.csv\"\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.source.root.as_deref(), Some(Path::new("/base/data")));
        cfg.validate().unwrap();
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        cfg.isoforest.contamination = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.k_folds = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.source.root = Some("x".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_hashes() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.epochs = 3;
        assert_eq!(a.first_difference(&b), Some(Stage::Evaluate));
        b.isoforest.n_trees = 7;
        assert_eq!(a.first_difference(&b), Some(Stage::Outliers));
        let mut c = a.clone();
        c.run_dir = Some("/elsewhere".into());
        assert_eq!(a.first_difference(&c), None);
    }
}
