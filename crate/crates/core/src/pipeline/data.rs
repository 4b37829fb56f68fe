use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LabelMode, SamplingSpec};
use crate::error::{Error, Result};
use crate::gridio::{grouping_from_names, read_grid, zscore_apply, zscore_fit_sampled, DatasetManifest, GridField, Grouping, NormStats};
use crate::labeling::{
    label_field, resample_pixel_ratio_in_memory, sample_rainy_days_in_memory, Augmenter, LabelConfig, LabelKind,
    LabelTensor, Sample, SamplingMode,
};
use crate::nn::{ArchConfig, Fmap};
use crate::rng::mix;
use crate::synth::RainField;

/// Normalization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub grouping: Grouping,
    pub stats: Vec<NormStats>,
}

impl Normalizer {
    pub fn apply(&self, field: &GridField) -> Result<GridField> {
        zscore_apply(field, &self.stats, &self.grouping)
    }
}

/// Samples ready for the network: normalized inputs and raw truth.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub ids: Vec<String>,
    pub inputs: Vec<Fmap>,
    pub truths: Vec<RainField>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Manifest of the configured dataset with the winter filter applied.
pub fn load_manifest(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(&cfg.data.manifest_path())?;
    let m = if cfg.data.exclude_winter { m.without_winter()? } else { m };
    m.check_paths()?;
    Ok(m)
}

pub fn split(manifest: &DatasetManifest, tag: &str) -> Result<DatasetManifest> {
    let s = manifest.split(tag);
    if s.is_empty() {
        return Err(Error::Argument(format!("split {tag:?} has no samples")));
    }
    Ok(s)
}

/// Reads files once per path.
#[derive(Default)]
struct FieldCache {
    grids: HashMap<PathBuf, GridField>,
}

impl FieldCache {
    fn get(&mut self, path: &PathBuf) -> Result<&GridField> {
        if !self.grids.contains_key(path) {
            let g = read_grid(path)?;
            self.grids.insert(path.clone(), g);
        }
        Ok(&self.grids[path])
    }

    fn truth(&mut self, path: &PathBuf) -> Result<RainField> {
        RainField::from_grid(self.get(path)?)
    }
}

pub fn fit_normalizer(train: &DatasetManifest, fraction: f64, seed: u64) -> Result<Normalizer> {
    let mut raw = Vec::with_capacity(train.len());
    for e in &train.entries {
        raw.push(read_grid(&e.input_path)?);
    }
    let first = raw.first().ok_or_else(|| Error::Argument("no training samples to normalize".into()))?;
    let grouping = grouping_from_names(first);
    let stats = zscore_fit_sampled(&raw, &grouping, fraction, seed)?;
    Ok(Normalizer { grouping, stats })
}

fn to_fmap(g: &GridField) -> Fmap {
    Fmap { c: g.n_vars, h: g.height, w: g.width, data: g.to_f64() }
}

/// Loads, normalizes and (for resampled entries) augments every sample.
pub fn prepare(manifest: &DatasetManifest, norm: &Normalizer, augmenter: &Augmenter, arch: &ArchConfig) -> Result<Prepared> {
    let mut cache = FieldCache::default();
    let mut out = Prepared::default();
    for e in &manifest.entries {
        let input = norm.apply(cache.get(&e.input_path)?)?;
        if (input.n_vars, input.height, input.width) != (arch.n_vars, arch.height, arch.width) {
            return Err(Error::Validation(format!(
                "{}: field {}x{}x{} does not match model input {}x{}x{}",
                e.sample_id, input.n_vars, input.height, input.width, arch.n_vars, arch.height, arch.width
            )));
        }
        let mut sample = Sample { input, truth: cache.truth(&e.truth_path)? };
        if let Some(aug) = &e.augment {
            let partner = match &aug.partner {
                Some(p) => Some(Sample { input: norm.apply(cache.get(&p.input_path)?)?, truth: cache.truth(&p.truth_path)? }),
                None => None,
            };
            sample = augmenter.apply(&sample, aug.op, aug.seed, partner.as_ref())?;
        }
        out.ids.push(e.sample_id.clone());
        out.inputs.push(to_fmap(&sample.input));
        out.truths.push(sample.truth);
    }
    Ok(out)
}

/// Applies the configured fine-tuning sampling to the training manifest.
pub fn resample_train(train: &DatasetManifest, cfg: &ExperimentConfig, seed: u64) -> Result<DatasetManifest> {
    let spec = cfg.finetune.sampling;
    if spec == SamplingSpec::None {
        return Ok(train.clone());
    }
    let mut cache = FieldCache::default();
    let truths: Vec<RainField> = train.entries.iter().map(|e| cache.truth(&e.truth_path)).collect::<Result<_>>()?;
    let seed = mix(&[seed, 0x5a4d]);
    Ok(match spec {
        SamplingSpec::None => unreachable!(),
        SamplingSpec::Rainy { fraction, rule } => {
            sample_rainy_days_in_memory(train, &truths, fraction, rule, &cfg.labels, seed)?
        }
        SamplingSpec::Under { target } => {
            resample_pixel_ratio_in_memory(train, &truths, target, SamplingMode::Under, &cfg.labels, &cfg.finetune.augmenter, seed)?.0
        }
        SamplingSpec::Over { target } => {
            resample_pixel_ratio_in_memory(train, &truths, target, SamplingMode::Over, &cfg.labels, &cfg.finetune.augmenter, seed)?.0
        }
    })
}

/// One-hot targets `y` and second targets `y*`.
pub fn targets(truths: &[RainField], cfg: &LabelConfig, mode: LabelMode) -> Result<(Vec<LabelTensor>, Vec<LabelTensor>)> {
    let mut y = Vec::with_capacity(truths.len());
    let mut ys = Vec::with_capacity(truths.len());
    for t in truths {
        let hot = label_field(t, cfg, LabelKind::OneHot)?;
        let star = match mode {
            LabelMode::Onehot => hot.clone(),
            LabelMode::Pdl => label_field(t, cfg, LabelKind::Density)?,
            LabelMode::Smooth => label_field(t, cfg, LabelKind::Smoothed)?,
        };
        y.push(hot);
        ys.push(star);
    }
    Ok((y, ys))
}
