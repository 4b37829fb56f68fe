//! Rainfall → class labels: one-hot bins and probabilistic density labels,
//! plus the dataset-level sampling and augmentation used against class
//! imbalance.
//!
//! Bins are half-open with the lower edge inclusive: with thresholds
//! `[0.1, 10]` the classes are `[0, 0.1)`, `[0.1, 10)` and `[10, 100)`.
//!
//! Inside a bin `[lo, hi)` below the top class, the density label puts
//! `(1-α)ρ + α/N` on the bin, `(1-α)(1-ρ) + α/N` on the next class up and
//! `α/N` everywhere else, where `ρ = (hi-γ)/(hi-lo)` and `lo = 0` for the
//! first bin. The top class gets `(1-α) + α/N`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridio::{read_grid, DatasetManifest, GridField, ManifestEntry};
use crate::rng::{keyed, Stream};
use crate::synth::{RainField, RAIN_MAX};

/// Where the mass `(1-α)(1-ρ)` left over by the bin class goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdlComplement {
    /// To the next class up.
    #[default]
    Adjacent,
    /// Nowhere; the vector is rescaled to sum to one instead.
    Renormalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    pub thresholds: Vec<f64>,
    pub alpha: f64,
    pub complement: PdlComplement,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig { thresholds: vec![0.1, 10.0], alpha: 0.0, complement: PdlComplement::Adjacent }
    }
}

impl LabelConfig {
    pub fn new(thresholds: Vec<f64>, alpha: f64) -> Result<Self> {
        let cfg = LabelConfig { thresholds, alpha, ..Default::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_classes(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes() < 2 {
            return Err(Error::Argument("number of classes must be at least 2".into()));
        }
        let t = &self.thresholds;
        if !(t[0] > 0.0) || !(t[t.len() - 1] < RAIN_MAX as f64) {
            return Err(Error::Argument(format!("thresholds {t:?} must lie in (0, 100)")));
        }
        if t.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::Argument(format!("thresholds {t:?} must be strictly ascending")));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Argument(format!("alpha {} outside [0, 1)", self.alpha)));
        }
        Ok(())
    }

    /// Class index of a rainfall value; no domain check.
    pub fn class_of(&self, gamma: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= gamma)
    }

    /// Inclusive lower edge of a class bin.
    pub fn lower_bound(&self, class: usize) -> f64 {
        if class == 0 {
            0.0
        } else {
            self.thresholds[class - 1]
        }
    }

    fn check_gamma(&self, gamma: f64) -> Result<()> {
        if !(0.0..RAIN_MAX as f64).contains(&gamma) {
            return Err(Error::Domain(format!("rainfall {gamma} outside [0, 100)")));
        }
        Ok(())
    }
}

pub fn one_hot(gamma: f64, cfg: &LabelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    cfg.check_gamma(gamma)?;
    let mut y = vec![0.0; cfg.n_classes()];
    y[cfg.class_of(gamma)] = 1.0;
    Ok(y)
}

pub fn pdl(gamma: f64, cfg: &LabelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    cfg.check_gamma(gamma)?;
    let mut y = vec![0.0; cfg.n_classes()];
    pdl_into(gamma, cfg, &mut y);
    Ok(y)
}

/// [`pdl`] without validation, writing into `out` (length `N`).
pub(crate) fn pdl_into(gamma: f64, cfg: &LabelConfig, out: &mut [f64]) {
    let n = out.len();
    let alpha = cfg.alpha;
    let floor = alpha / n as f64;
    out.fill(floor);
    let i = cfg.class_of(gamma);
    if i == n - 1 {
        out[i] = (1.0 - alpha) + floor;
        return;
    }
    let lo = cfg.lower_bound(i);
    let hi = cfg.thresholds[i];
    let rho = (hi - gamma) / (hi - lo);
    out[i] = (1.0 - alpha) * rho + floor;
    match cfg.complement {
        PdlComplement::Adjacent => out[i + 1] = (1.0 - alpha) * (1.0 - rho) + floor,
        PdlComplement::Renormalize => {
            let s: f64 = out.iter().sum();
            out.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Traditional label smoothing: `(1-α)·onehot + α/N`.
pub(crate) fn smoothed_into(gamma: f64, cfg: &LabelConfig, out: &mut [f64]) {
    let floor = cfg.alpha / out.len() as f64;
    out.fill(floor);
    out[cfg.class_of(gamma)] += 1.0 - cfg.alpha;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    OneHot,
    Density,
    /// Uniform label smoothing, kept for comparison with density labels.
    Smoothed,
}

/// Per-pixel class probabilities, `c × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTensor {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub probs: Vec<f64>,
    pub kind: LabelKind,
}

impl LabelTensor {
    pub fn pixel(&self, idx: usize) -> impl Iterator<Item = f64> + '_ {
        let plane = self.height * self.width;
        (0..self.classes).map(move |c| self.probs[c * plane + idx])
    }

    /// Largest per-pixel deviation of the class sum from one.
    pub fn simplex_error(&self) -> f64 {
        (0..self.height * self.width)
            .map(|i| (self.pixel(i).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn label_field(field: &RainField, cfg: &LabelConfig, kind: LabelKind) -> Result<LabelTensor> {
    cfg.validate()?;
    field.validate()?;
    let n = cfg.n_classes();
    let plane = field.height * field.width;
    let mut probs = vec![0.0; n * plane];
    let mut buf = vec![0.0; n];
    for (idx, &g) in field.gamma.iter().enumerate() {
        let g = g as f64;
        match kind {
            LabelKind::OneHot => {
                buf.fill(0.0);
                buf[cfg.class_of(g)] = 1.0;
            }
            LabelKind::Density => pdl_into(g, cfg, &mut buf),
            LabelKind::Smoothed => smoothed_into(g, cfg, &mut buf),
        }
        for (c, &p) in buf.iter().enumerate() {
            probs[c * plane + idx] = p;
        }
    }
    Ok(LabelTensor { classes: n, height: field.height, width: field.width, probs, kind })
}

/// Class mass fractions over all pixels of all tensors.
pub fn proportions(labels: &[LabelTensor]) -> Result<Vec<f64>> {
    let first = labels.first().ok_or_else(|| Error::Argument("no label tensors".into()))?;
    let c = first.classes;
    let mut mass = vec![0.0; c];
    let mut pixels = 0usize;
    for l in labels {
        if l.classes != c {
            return Err(Error::Argument(format!("class count {} != {c}", l.classes)));
        }
        let plane = l.height * l.width;
        for (k, m) in mass.iter_mut().enumerate() {
            *m += l.probs[k * plane..(k + 1) * plane].iter().sum::<f64>();
        }
        pixels += plane;
    }
    Ok(mass.into_iter().map(|m| m / pixels as f64).collect())
}

/// Proportion report with columns `class, one_hot_frac, density_frac`.
pub fn write_proportions_csv(path: &Path, one_hot: &[f64], density: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "one_hot_frac", "density_frac"])?;
    for (c, (a, b)) in one_hot.iter().zip(density).enumerate() {
        w.write_record([c.to_string(), a.to_string(), b.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RainyRule {
    /// A day is rainy when at least this fraction of pixels exceeds the
    /// first threshold.
    pub min_frac: f64,
}

impl Default for RainyRule {
    fn default() -> Self {
        RainyRule { min_frac: 0.01 }
    }
}

impl RainyRule {
    pub fn is_rainy(&self, truth: &RainField, cfg: &LabelConfig) -> bool {
        let tau0 = cfg.thresholds[0];
        let wet = truth.gamma.iter().filter(|&&g| g as f64 > tau0).count();
        wet as f64 >= self.min_frac * truth.gamma.len() as f64
    }
}

/// Picks `count_rainy` indices from `rainy` and the rest of `total` from
/// `dry`, without replacement while a stratum lasts.
fn draw_strata(
    rainy: &[usize],
    dry: &[usize],
    total: usize,
    rainy_fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    let want_rainy = (rainy_fraction * total as f64).round() as usize;
    let want_dry = total - want_rainy;
    let mut out = Vec::with_capacity(total);
    for (k, (pool, want, name)) in
        [(rainy, want_rainy, "rainy"), (dry, want_dry, "non-rainy")].into_iter().enumerate()
    {
        if want == 0 {
            continue;
        }
        if pool.is_empty() {
            return Err(Error::Sampling(format!("{want} {name} samples requested, none available")));
        }
        let mut rng = keyed(seed, Stream::Sampling, &[k as u64]);
        let mut shuffled = pool.to_vec();
        shuffled.shuffle(&mut rng);
        for j in 0..want {
            if j < shuffled.len() {
                out.push(shuffled[j]);
            } else {
                out.push(pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    Ok(out)
}

fn duplicate_id(base: &str, seen: &mut std::collections::HashMap<String, usize>) -> String {
    let n = seen.entry(base.to_string()).or_insert(0);
    *n += 1;
    if *n == 1 {
        base.to_string()
    } else {
        format!("{base}~dup{}", *n - 1)
    }
}

fn load_truths(manifest: &DatasetManifest) -> Result<Vec<RainField>> {
    manifest.entries.iter().map(|e| RainField::from_grid(&read_grid(&e.truth_path)?)).collect()
}

/// Rainy/non-rainy stratified resampling keeping the manifest size.
/// Repeated picks get `~dupK` id suffixes.
pub fn sample_rainy_days_in_memory(
    manifest: &DatasetManifest,
    truths: &[RainField],
    rainy_fraction: f64,
    rule: RainyRule,
    cfg: &LabelConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&rainy_fraction) {
        return Err(Error::Argument(format!("rainy fraction {rainy_fraction} outside [0, 1]")));
    }
    let (rainy, dry): (Vec<usize>, Vec<usize>) =
        (0..truths.len()).partition(|&i| rule.is_rainy(&truths[i], cfg));
    let picks = draw_strata(&rainy, &dry, manifest.len(), rainy_fraction, seed)?;
    let mut seen = Default::default();
    let entries = picks
        .into_iter()
        .map(|i| {
            let mut e = manifest.entries[i].clone();
            e.sample_id = duplicate_id(&e.sample_id, &mut seen);
            e
        })
        .collect();
    Ok(DatasetManifest { entries })
}

pub fn sample_rainy_days(
    manifest: &DatasetManifest,
    rainy_fraction: f64,
    rule: RainyRule,
    cfg: &LabelConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    let truths = load_truths(manifest)?;
    sample_rainy_days_in_memory(manifest, &truths, rainy_fraction, rule, cfg, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Under,
    Over,
}

/// Allowed deviation of the achieved no-rain pixel fraction from the target.
pub const RATIO_TOLERANCE: f64 = 0.02;

fn no_rain_count(t: &RainField, cfg: &LabelConfig) -> usize {
    let tau0 = cfg.thresholds[0];
    t.gamma.iter().filter(|&&g| (g as f64) < tau0).count()
}

/// Pixel-level no-rain fraction of a set of truth fields.
pub fn no_rain_fraction(truths: &[RainField], cfg: &LabelConfig) -> f64 {
    let dry: usize = truths.iter().map(|t| no_rain_count(t, cfg)).sum();
    let all: usize = truths.iter().map(|t| t.gamma.len()).sum();
    dry as f64 / all as f64
}

const OVERSAMPLE_OPS: [AugmentOp; 5] = [
    AugmentOp::FlipH,
    AugmentOp::FlipV,
    AugmentOp::Resize,
    AugmentOp::Mixup,
    AugmentOp::GaussianNoise,
];

/// Drops samples (`Under`) or adds augmented duplicates (`Over`) until the
/// pixel-level no-rain fraction is within [`RATIO_TOLERANCE`] of the
/// target. Returns the new manifest and the achieved fraction.
pub fn resample_pixel_ratio_in_memory(
    manifest: &DatasetManifest,
    truths: &[RainField],
    target_no_rain_frac: f64,
    mode: SamplingMode,
    cfg: &LabelConfig,
    augmenter: &Augmenter,
    seed: u64,
) -> Result<(DatasetManifest, f64)> {
    if !(0.0..=1.0).contains(&target_no_rain_frac) {
        return Err(Error::Argument(format!("target {target_no_rain_frac} outside [0, 1]")));
    }
    if truths.is_empty() || truths.len() != manifest.len() {
        return Err(Error::Argument("truth fields must match a non-empty manifest".into()));
    }
    let dry: Vec<f64> = truths.iter().map(|t| no_rain_count(t, cfg) as f64).collect();
    let size: Vec<f64> = truths.iter().map(|t| t.gamma.len() as f64).collect();
    let mut dry_sum: f64 = dry.iter().sum();
    let mut size_sum: f64 = size.iter().sum();
    let current = dry_sum / size_sum;
    if (current - target_no_rain_frac).abs() <= RATIO_TOLERANCE {
        return Ok((manifest.clone(), current));
    }
    let too_dry = current > target_no_rain_frac;
    // candidates ordered so the first ones move the fraction fastest
    let mut order: Vec<usize> = (0..truths.len()).collect();
    order.shuffle(&mut keyed(seed, Stream::Sampling, &[99]));
    order.sort_by(|&a, &b| {
        let (fa, fb) = (dry[a] / size[a], dry[b] / size[b]);
        let ord = fa.partial_cmp(&fb).unwrap();
        // under+too_dry drops the driest; over+too_dry copies the wettest
        match (mode, too_dry) {
            (SamplingMode::Under, true) | (SamplingMode::Over, false) => ord.reverse(),
            _ => ord,
        }
    });
    let crossed = |d: f64, s: f64| {
        let f = d / s;
        if too_dry { f <= target_no_rain_frac } else { f >= target_no_rain_frac }
    };
    let mut best = (current - target_no_rain_frac).abs();
    match mode {
        SamplingMode::Under => {
            let mut dropped = vec![false; truths.len()];
            for &i in &order {
                if truths.len() - dropped.iter().filter(|&&d| d).count() <= 1 {
                    break;
                }
                let (nd, ns) = (dry_sum - dry[i], size_sum - size[i]);
                let f = nd / ns;
                if crossed(nd, ns) && (f - target_no_rain_frac).abs() > best {
                    break;
                }
                // a sample moving the fraction the wrong way ends the useful candidates
                if too_dry == (dry[i] / size[i] < current) {
                    break;
                }
                dropped[i] = true;
                dry_sum = nd;
                size_sum = ns;
                best = (f - target_no_rain_frac).abs();
                if crossed(nd, ns) {
                    break;
                }
            }
            let achieved = dry_sum / size_sum;
            if (achieved - target_no_rain_frac).abs() > RATIO_TOLERANCE {
                return Err(Error::Sampling(format!(
                    "under-sampling reached no-rain fraction {achieved:.4}, target {target_no_rain_frac}"
                )));
            }
            let entries = manifest
                .entries
                .iter()
                .zip(&dropped)
                .filter(|(_, &d)| !d)
                .map(|(e, _)| e.clone())
                .collect();
            Ok((DatasetManifest { entries }, achieved))
        }
        SamplingMode::Over => {
            let useful: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&i| too_dry == (dry[i] / size[i] < target_no_rain_frac))
                .collect();
            if useful.is_empty() {
                return Err(Error::Sampling(format!(
                    "no sample can move no-rain fraction {current:.4} toward {target_no_rain_frac}"
                )));
            }
            let mut entries = manifest.entries.clone();
            let mut seen = std::collections::HashMap::new();
            for e in &entries {
                seen.insert(e.sample_id.clone(), 1usize);
            }
            let limit = 20 * truths.len();
            let mut k = 0usize;
            while k < limit {
                let i = useful[k % useful.len()];
                let op = OVERSAMPLE_OPS[k % OVERSAMPLE_OPS.len()];
                let aug_seed = crate::rng::mix(&[seed, k as u64]);
                let partner = (op == AugmentOp::Mixup)
                    .then(|| useful[(k + 1) % useful.len()]);
                let sample_truth = &truths[i];
                let t = augmenter.apply_truth(
                    sample_truth,
                    op,
                    aug_seed,
                    partner.map(|p| &truths[p]),
                )?;
                let (nd, ns) = (dry_sum + no_rain_count(&t, cfg) as f64, size_sum + t.gamma.len() as f64);
                let f = nd / ns;
                if crossed(nd, ns) && (f - target_no_rain_frac).abs() > best {
                    break;
                }
                let mut e = manifest.entries[i].clone();
                e.sample_id = duplicate_id(&e.sample_id, &mut seen);
                e.augment = Some(AugmentSpec {
                    op,
                    seed: aug_seed,
                    partner: partner.map(|p| manifest.entries[p].clone().into()),
                });
                entries.push(e);
                dry_sum = nd;
                size_sum = ns;
                best = (f - target_no_rain_frac).abs();
                k += 1;
                if crossed(nd, ns) {
                    break;
                }
            }
            let achieved = dry_sum / size_sum;
            if (achieved - target_no_rain_frac).abs() > RATIO_TOLERANCE {
                return Err(Error::Sampling(format!(
                    "over-sampling reached no-rain fraction {achieved:.4}, target {target_no_rain_frac}"
                )));
            }
            Ok((DatasetManifest { entries }, achieved))
        }
    }
}

pub fn resample_pixel_ratio(
    manifest: &DatasetManifest,
    target_no_rain_frac: f64,
    mode: SamplingMode,
    cfg: &LabelConfig,
    augmenter: &Augmenter,
    seed: u64,
) -> Result<(DatasetManifest, f64)> {
    let truths = load_truths(manifest)?;
    resample_pixel_ratio_in_memory(manifest, &truths, target_no_rain_frac, mode, cfg, augmenter, seed)
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    FlipH,
    FlipV,
    Resize,
    Mixup,
    GaussianNoise,
}

/// Mixup partner reference stored in a manifest entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartnerRef {
    pub sample_id: String,
    pub input_path: std::path::PathBuf,
    pub truth_path: std::path::PathBuf,
}

impl From<ManifestEntry> for PartnerRef {
    fn from(e: ManifestEntry) -> Self {
        PartnerRef { sample_id: e.sample_id, input_path: e.input_path, truth_path: e.truth_path }
    }
}

/// Augmentation recorded on an over-sampled manifest entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub op: AugmentOp,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<PartnerRef>,
}

/// A forecast input paired with its observed rainfall.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: GridField,
    pub truth: RainField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmenter {
    /// Std of the noise added to forecast channels (normalized units).
    pub noise_sigma: f64,
    pub resize_range: (f64, f64),
    /// Shape of the symmetric Beta distribution for the mixup weight.
    pub mixup_beta: f64,
}

impl Default for Augmenter {
    fn default() -> Self {
        Augmenter { noise_sigma: 0.1, resize_range: (0.75, 1.25), mixup_beta: 0.2 }
    }
}

fn flip_plane<T: Copy>(plane: &mut [T], h: usize, w: usize, horizontal: bool) {
    if horizontal {
        for r in 0..h {
            plane[r * w..(r + 1) * w].reverse();
        }
    } else {
        for r in 0..h / 2 {
            for c in 0..w {
                plane.swap(r * w + c, (h - 1 - r) * w + c);
            }
        }
    }
}

/// Nearest-neighbour zoom about the grid centre; pixels mapped from
/// outside the source are zero.
fn resize_plane(plane: &[f32], h: usize, w: usize, factor: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    for r in 0..h {
        let sy = ((r as f64 + 0.5 - cy) / factor + cy).floor();
        if sy < 0.0 || sy >= h as f64 {
            continue;
        }
        for c in 0..w {
            let sx = ((c as f64 + 0.5 - cx) / factor + cx).floor();
            if sx < 0.0 || sx >= w as f64 {
                continue;
            }
            out[r * w + c] = plane[sy as usize * w + sx as usize];
        }
    }
    out
}

impl Augmenter {
    pub fn resize_factor(&self, seed: u64) -> f64 {
        let (lo, hi) = self.resize_range;
        keyed(seed, Stream::Augment, &[1]).random_range(lo..=hi)
    }

    pub fn mixup_lambda(&self, seed: u64) -> f64 {
        let beta = Beta::new(self.mixup_beta, self.mixup_beta).expect("positive beta shape");
        beta.sample(&mut keyed(seed, Stream::Augment, &[2]))
    }

    pub fn apply(&self, sample: &Sample, op: AugmentOp, seed: u64, partner: Option<&Sample>) -> Result<Sample> {
        let (h, w) = (sample.truth.height, sample.truth.width);
        if sample.input.height != h || sample.input.width != w {
            return Err(Error::Argument("input and truth grids differ".into()));
        }
        let mut out = sample.clone();
        match op {
            AugmentOp::FlipH | AugmentOp::FlipV => {
                let horizontal = op == AugmentOp::FlipH;
                for v in 0..out.input.n_vars {
                    flip_plane(out.input.plane_mut(v), h, w, horizontal);
                }
                flip_plane(&mut out.truth.gamma, h, w, horizontal);
            }
            AugmentOp::Resize => {
                out = resize_sample(sample, self.resize_factor(seed))?;
            }
            AugmentOp::Mixup => {
                let partner = partner
                    .ok_or_else(|| Error::Argument("mixup requires a partner sample".into()))?;
                out = mixup_samples(sample, partner, self.mixup_lambda(seed))?;
            }
            AugmentOp::GaussianNoise => {
                out = add_noise(sample, self.noise_sigma, seed);
            }
        }
        Ok(out)
    }

    /// Effect of an augmentation on the truth field alone.
    pub fn apply_truth(
        &self,
        truth: &RainField,
        op: AugmentOp,
        seed: u64,
        partner: Option<&RainField>,
    ) -> Result<RainField> {
        let (h, w) = (truth.height, truth.width);
        let mut t = truth.clone();
        match op {
            AugmentOp::FlipH => flip_plane(&mut t.gamma, h, w, true),
            AugmentOp::FlipV => flip_plane(&mut t.gamma, h, w, false),
            AugmentOp::Resize => t.gamma = resize_plane(&truth.gamma, h, w, self.resize_factor(seed)),
            AugmentOp::Mixup => {
                let p = partner.ok_or_else(|| Error::Argument("mixup requires a partner sample".into()))?;
                let lambda = self.mixup_lambda(seed);
                t.gamma = mix_values(&truth.gamma, &p.gamma, lambda);
            }
            AugmentOp::GaussianNoise => {}
        }
        Ok(t)
    }
}

pub fn augment(sample: &Sample, op: AugmentOp, seed: u64, partner: Option<&Sample>) -> Result<Sample> {
    Augmenter::default().apply(sample, op, seed, partner)
}

/// Zooms every channel and the truth by `factor`, then crops or pads back
/// to the original grid.
pub fn resize_sample(sample: &Sample, factor: f64) -> Result<Sample> {
    if !(factor > 0.0) {
        return Err(Error::Argument(format!("resize factor {factor} must be positive")));
    }
    let (h, w) = (sample.truth.height, sample.truth.width);
    let mut out = sample.clone();
    for v in 0..out.input.n_vars {
        let resized = resize_plane(sample.input.plane(v), h, w, factor);
        out.input.plane_mut(v).copy_from_slice(&resized);
    }
    out.truth.gamma = resize_plane(&sample.truth.gamma, h, w, factor);
    Ok(out)
}

fn mix_values(a: &[f32], b: &[f32], lambda: f64) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| (lambda * x as f64 + (1.0 - lambda) * y as f64) as f32).collect()
}

/// `λ·a + (1-λ)·b` on every channel and on the truth.
pub fn mixup_samples(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    if a.input.values.len() != b.input.values.len() || a.truth.gamma.len() != b.truth.gamma.len() {
        return Err(Error::Argument("mixup partners differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("mixup weight {lambda} outside [0, 1]")));
    }
    let mut out = a.clone();
    out.input.values = mix_values(&a.input.values, &b.input.values, lambda);
    out.truth.gamma = mix_values(&a.truth.gamma, &b.truth.gamma, lambda);
    Ok(out)
}

/// Gaussian noise on the forecast channels; the truth is untouched.
pub fn add_noise(sample: &Sample, sigma: f64, seed: u64) -> Sample {
    let mut out = sample.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let mut rng = keyed(seed, Stream::Augment, &[3]);
        for v in out.input.values.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
        }
    }
    out
}
