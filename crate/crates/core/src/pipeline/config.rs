use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labeling::{Augmenter, LabelConfig, RainyRule};
use crate::nn::{ArchConfig, OptimizerConfig, Precision};
use crate::objectives::LossConfig;
use crate::patching::PatchConfig;
use crate::synth::{SplitCounts, SynthConfig};
use crate::verify::{AbsentClass, Aggregation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory holding `manifest.json` and the field files.
    pub dir: PathBuf,
    pub synth: SynthConfig,
    pub counts: SplitCounts,
    pub exclude_winter: bool,
    /// Fraction of training samples used to fit normalization statistics.
    pub norm_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            synth: SynthConfig::default(),
            counts: SplitCounts { train: 200, val: 20, test: 50 },
            exclude_winter: true,
            norm_fraction: 1.0,
        }
    }
}

impl DataConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Overrides the optimizer learning rate for this stage.
    pub lr: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { mask_ratio: 0.75, epochs: 20, batch: 8, lr: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Pretrained,
    Scratch,
}

/// Second target `y*` of the mixed loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// `y* = y`, so the loss is plain weighted cross-entropy.
    Onehot,
    /// Probabilistic density labels.
    Pdl,
    /// Uniform label smoothing with the same α.
    Smooth,
}

impl LabelMode {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown labeling kind {s:?} (onehot|pdl|smooth)")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            LabelMode::Onehot => "onehot",
            LabelMode::Pdl => "pdl",
            LabelMode::Smooth => "smooth",
        }
    }
}

/// How the fine-tuning set is drawn from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingSpec {
    /// Training split as is.
    None,
    /// Rainy / non-rainy days in a fixed proportion.
    Rainy {
        #[serde(default = "default_rainy_fraction")]
        fraction: f64,
        #[serde(default)]
        rule: RainyRule,
    },
    /// Drop samples until the no-rain pixel fraction reaches `target`.
    Under {
        #[serde(default = "default_target")]
        target: f64,
    },
    /// Add augmented samples until the no-rain pixel fraction reaches `target`.
    Over {
        #[serde(default = "default_target")]
        target: f64,
    },
}

fn default_rainy_fraction() -> f64 {
    0.8
}

fn default_target() -> f64 {
    0.8
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec::Rainy { fraction: default_rainy_fraction(), rule: RainyRule::default() }
    }
}

impl SamplingSpec {
    /// `none`, `rainy`, `under` or `over` with default parameters.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SamplingSpec::None),
            "rainy" => Ok(SamplingSpec::default()),
            "under" => Ok(SamplingSpec::Under { target: default_target() }),
            "over" => Ok(SamplingSpec::Over { target: default_target() }),
            _ => Err(Error::Config(format!("unknown sampling mode {s:?} (none|rainy|under|over)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplingSpec::None => "none",
            SamplingSpec::Rainy { .. } => "rainy",
            SamplingSpec::Under { .. } => "under",
            SamplingSpec::Over { .. } => "over",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: Option<f64>,
    pub init: InitMode,
    /// Pre-trained checkpoint used when `init` is `pretrained`.
    pub checkpoint: Option<PathBuf>,
    pub labels: LabelMode,
    pub sampling: SamplingSpec,
    pub augmenter: Augmenter,
    pub freeze_encoder: bool,
    pub freeze_offsets: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mask_ratio: 0.25,
            epochs: 20,
            batch: 8,
            lr: None,
            init: InitMode::Pretrained,
            checkpoint: None,
            labels: LabelMode::Pdl,
            sampling: SamplingSpec::default(),
            augmenter: Augmenter::default(),
            freeze_encoder: false,
            freeze_offsets: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: String,
    pub aggregation: Aggregation,
    pub absent_class: AbsentClass,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { split: "test".into(), aggregation: Aggregation::Pooled, absent_class: AbsentClass::One }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub patch: PatchConfig,
    pub labels: LabelConfig,
    pub loss: LossConfig,
    /// Stage widths, depths and block pattern. Input shape, class count
    /// and patch size are taken from the data, label and patch sections.
    pub arch: ArchConfig,
    pub optimizer: OptimizerConfig,
    pub precision: Precision,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    /// Where checkpoints and reports go.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            data: DataConfig::default(),
            patch: PatchConfig::default(),
            labels: LabelConfig::default(),
            loss: LossConfig::default(),
            arch: ArchConfig::default(),
            optimizer: OptimizerConfig::default(),
            precision: Precision::F64,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn ratio_ok(name: &str, r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} {r} outside [0, 1]")))
    }
}

impl ExperimentConfig {
    /// Parses JSON; any schema problem is a config error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.dir);
        fix(&mut self.out_dir);
        if let Some(c) = self.finetune.checkpoint.as_mut() {
            fix(c);
        }
    }

    /// Architecture with shape fields filled from the other sections.
    pub fn effective_arch(&self) -> ArchConfig {
        ArchConfig {
            n_vars: self.data.synth.n_vars,
            height: self.data.synth.height,
            width: self.data.synth.width,
            n_classes: self.labels.n_classes(),
            patch: self.patch,
            ..self.arch.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfgerr = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.data.synth.validate().map_err(cfgerr)?;
        self.labels.validate().map_err(cfgerr)?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.effective_arch().validate().map_err(cfgerr)?;
        ratio_ok("pretrain mask ratio", self.pretrain.mask_ratio)?;
        ratio_ok("finetune mask ratio", self.finetune.mask_ratio)?;
        if !(self.data.norm_fraction > 0.0 && self.data.norm_fraction <= 1.0) {
            return Err(Error::Config(format!("norm fraction {} outside (0, 1]", self.data.norm_fraction)));
        }
        if self.pretrain.batch == 0 || self.finetune.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for lr in [self.pretrain.lr, self.finetune.lr].into_iter().flatten() {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate {lr} must be finite and non-negative")));
            }
        }
        match self.finetune.sampling {
            SamplingSpec::Rainy { fraction, .. } => ratio_ok("rainy fraction", fraction)?,
            SamplingSpec::Under { target } | SamplingSpec::Over { target } => ratio_ok("no-rain target", target)?,
            SamplingSpec::None => {}
        }
        if !self.loss.class_weights.is_empty() && self.loss.class_weights.len() != self.labels.n_classes() {
            return Err(Error::Config(format!(
                "{} class weights for {} classes",
                self.loss.class_weights.len(),
                self.labels.n_classes()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
        let a = c.effective_arch();
        assert_eq!((a.n_vars, a.height, a.width, a.n_classes), (8, 96, 64, 3));
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = ExperimentConfig::from_json(r#"{"seed": 3, "pretrain": {"epochs": 2, "batch": 4}}"#).unwrap();
        let b = ExperimentConfig::from_json(r#"{"pretrain": {"batch": 4, "epochs": 2}, "seed": 3}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn config_errors() {
        for bad in [
            r#"{"pretrain": {"mask_ratio": 1.5}}"#,
            r#"{"loss": {"beta": -0.1}}"#,
            r#"{"labels": {"thresholds": [10, 0.1]}}"#,
            r#"{"arch": {"pattern": "AAB"}}"#,
            r#"{"finetune": {"sampling": {"mode": "sideways"}}}"#,
            r#"{"finetune": {"batch": 0}}"#,
            r#"{"seed": "x"}"#,
            r#"{"loss": {"class_weights": [1, 1]}}"#,
        ] {
            let e = ExperimentConfig::from_json(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!(LabelMode::parse("pdl").unwrap(), LabelMode::Pdl);
        assert!(LabelMode::parse("soft").is_err());
        assert_eq!(SamplingSpec::parse("under").unwrap().name(), "under");
        let s: SamplingSpec = serde_json::from_str(r#"{"mode": "rainy"}"#).unwrap();
        assert_eq!(s, SamplingSpec::default());
    }
}
