//! Synthetic stand-in for a regional NWP archive and its rainfall analysis.
//!
//! Truth rainfall is a superposition of smooth elliptical blobs with
//! heavy-tailed peak intensities. The forecast displaces the truth, damps
//! its extremes and perturbs it with smooth multiplicative noise; the
//! remaining forecast channels are smooth covariates partially correlated
//! with the (undisplaced) truth.

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridio::{ensure_dir, write_grid, DatasetManifest, GridField, ManifestEntry};
use crate::rng::{keyed, Stream};

/// Upper bound (exclusive) of the rainfall domain, mm/h.
pub const RAIN_MAX: f32 = 100.0;
/// Largest representable rainfall value.
pub const RAIN_CEIL: f32 = 99.99;
/// Heavy-rain threshold used by the forecast bias model, mm/h.
pub const HEAVY: f32 = 10.0;

/// Names and physical scales of the forecast channels after `rain`.
/// (name, mean, std, sign of correlation with rainfall)
const COVARIATES: [(&str, f64, f64, f64); 15] = [
    ("rh850", 70.0, 15.0, 1.0),
    ("t850", 285.0, 3.0, -1.0),
    ("u850", 2.0, 5.0, 1.0),
    ("v850", 3.0, 5.0, 1.0),
    ("z850", 1450.0, 30.0, -1.0),
    ("rh500", 50.0, 20.0, 1.0),
    ("t500", 262.0, 3.0, -1.0),
    ("u500", 10.0, 8.0, 1.0),
    ("v500", 1.0, 6.0, 1.0),
    ("z500", 5750.0, 60.0, -1.0),
    ("slp", 1008.0, 6.0, -1.0),
    ("t2", 297.0, 3.0, -1.0),
    ("u10", 1.0, 3.0, 1.0),
    ("v10", 1.5, 3.0, 1.0),
    ("z100", 16600.0, 80.0, -1.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasConfig {
    pub shift_rows: i32,
    pub shift_cols: i32,
    /// Fraction of the excess above 10 mm removed from the forecast.
    pub extreme_damping: f64,
    /// Std of the smooth multiplicative noise on forecast rainfall.
    pub noise_std: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig { shift_rows: 2, shift_cols: 3, extreme_damping: 0.5, noise_std: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub n_vars: usize,
    pub seed: u64,
    /// Expected number of rain blobs per field (Poisson mean).
    pub rain_blob_rate: f64,
    /// Pareto shape of blob peak intensities; smaller is heavier-tailed.
    pub intensity_tail: f64,
    /// Pareto scale (minimum peak), mm/h.
    pub intensity_scale: f64,
    /// Blob radius range in pixels (std of the Gaussian profile).
    pub blob_radius: (f64, f64),
    /// Correlation of the first covariate with smoothed truth rainfall.
    pub covariate_corr: f64,
    pub bias: BiasConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 96,
            width: 64,
            n_vars: 8,
            seed: 2024,
            rain_blob_rate: 1.4,
            intensity_tail: 0.9,
            intensity_scale: 1.0,
            blob_radius: (3.0, 7.0),
            covariate_corr: 0.8,
            bias: BiasConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return fail("grid dimensions must be positive".into());
        }
        if self.n_vars == 0 || self.n_vars > COVARIATES.len() + 1 {
            return fail(format!("n_vars must be in 1..={}", COVARIATES.len() + 1));
        }
        if !(0.0..=1.0).contains(&self.bias.extreme_damping) {
            return fail("extreme_damping must lie in [0, 1]".into());
        }
        if !(self.bias.noise_std >= 0.0) {
            return fail("noise_std must be non-negative".into());
        }
        if !(self.rain_blob_rate >= 0.0) || !(self.intensity_tail > 0.0) || !(self.intensity_scale > 0.0) {
            return fail("blob rate, tail and scale must be positive".into());
        }
        let (lo, hi) = self.blob_radius;
        if !(lo > 0.0 && hi >= lo) {
            return fail("blob_radius must satisfy 0 < lo <= hi".into());
        }
        if !(0.0..=1.0).contains(&self.covariate_corr) {
            return fail("covariate_corr must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn var_names(&self) -> Vec<String> {
        std::iter::once("rain".to_string())
            .chain(COVARIATES.iter().map(|c| c.0.to_string()))
            .take(self.n_vars)
            .collect()
    }
}

/// Observed rainfall rate, mm/h, each value in `[0, 100)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RainField {
    pub height: usize,
    pub width: usize,
    pub gamma: Vec<f32>,
}

impl RainField {
    pub fn new(height: usize, width: usize, gamma: Vec<f32>) -> Result<Self> {
        let f = RainField { height, width, gamma };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.len() != self.height * self.width {
            return Err(Error::Validation("rain field shape mismatch".into()));
        }
        if let Some(v) = self.gamma.iter().find(|v| !(0.0..RAIN_MAX).contains(*v)) {
            return Err(Error::Validation(format!("rainfall {v} outside [0, 100)")));
        }
        Ok(())
    }

    pub fn to_grid(&self) -> GridField {
        GridField {
            n_vars: 1,
            height: self.height,
            width: self.width,
            var_names: vec!["qpe".into()],
            values: self.gamma.clone(),
        }
    }

    pub fn from_grid(g: &GridField) -> Result<Self> {
        if g.n_vars != 1 {
            return Err(Error::Validation(format!("rain field needs 1 variable, got {}", g.n_vars)));
        }
        RainField::new(g.height, g.width, g.values.clone())
    }

    pub fn heavy_count(&self) -> usize {
        self.gamma.iter().filter(|&&v| v > HEAVY).count()
    }
}

/// Smooth zero-mean, unit-variance random field: white noise on a coarse
/// lattice, bilinearly interpolated.
fn smooth_noise<R: Rng>(rng: &mut R, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let ch = h / cell + 2;
    let cw = w / cell + 2;
    let coarse: Vec<f64> =
        (0..ch * cw).map(|_| rand_distr::StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let y = r as f64 / cell as f64;
        let (y0, fy) = (y.floor() as usize, y.fract());
        for c in 0..w {
            let x = c as f64 / cell as f64;
            let (x0, fx) = (x.floor() as usize, x.fract());
            let at = |yy: usize, xx: usize| coarse[yy * cw + xx];
            out[r * w + c] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    standardize(&mut out);
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 0.0 };
    for x in v.iter_mut() {
        *x = (*x - mean) * scale;
    }
}

/// Separable box blur with edge clamping, applied `passes` times.
fn box_blur(src: &[f64], h: usize, w: usize, radius: usize, passes: usize) -> Vec<f64> {
    let mut cur = src.to_vec();
    let mut tmp = vec![0.0; h * w];
    let norm = 1.0 / (2 * radius + 1) as f64;
    for _ in 0..passes {
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    let cc = (c as isize + d).clamp(0, w as isize - 1) as usize;
                    s += cur[r * w + cc];
                }
                tmp[r * w + c] = s * norm;
            }
        }
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    let rr = (r as isize + d).clamp(0, h as isize - 1) as usize;
                    s += tmp[rr * w + c];
                }
                cur[r * w + c] = s * norm;
            }
        }
    }
    cur
}

pub fn gen_truth(cfg: &SynthConfig, sample_index: u64) -> Result<RainField> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = keyed(cfg.seed, Stream::Truth, &[sample_index]);
    let mut field = vec![0.0f64; h * w];
    let n_blobs = if cfg.rain_blob_rate > 0.0 {
        Poisson::new(cfg.rain_blob_rate).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    let (rlo, rhi) = cfg.blob_radius;
    for _ in 0..n_blobs {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let sy = rng.random_range(rlo..=rhi);
        let sx = rng.random_range(rlo..=rhi);
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        let peak = cfg.intensity_scale * u.powf(-1.0 / cfg.intensity_tail);
        let reach = 4.0;
        let r0 = (cy - reach * sy).floor().max(0.0) as usize;
        let r1 = ((cy + reach * sy).ceil() as usize).min(h);
        let c0 = (cx - reach * sx).floor().max(0.0) as usize;
        let c1 = ((cx + reach * sx).ceil() as usize).min(w);
        for r in r0..r1 {
            let dy = (r as f64 + 0.5 - cy) / sy;
            for c in c0..c1 {
                let dx = (c as f64 + 0.5 - cx) / sx;
                field[r * w + c] += peak * (-0.5 * (dy * dy + dx * dx)).exp();
            }
        }
    }
    let gamma = field.into_iter().map(|v| (v as f32).clamp(0.0, RAIN_CEIL)).collect();
    RainField::new(h, w, gamma)
}

fn shift_zero_fill(src: &[f32], h: usize, w: usize, dr: i32, dc: i32) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for r in 0..h as i64 {
        let sr = r - dr as i64;
        if sr < 0 || sr >= h as i64 {
            continue;
        }
        for c in 0..w as i64 {
            let sc = c - dc as i64;
            if sc < 0 || sc >= w as i64 {
                continue;
            }
            out[(r * w as i64 + c) as usize] = src[(sr * w as i64 + sc) as usize];
        }
    }
    out
}

pub fn gen_forecast(truth: &RainField, cfg: &SynthConfig, sample_index: u64) -> Result<GridField> {
    cfg.validate()?;
    truth.validate()?;
    let (h, w) = (truth.height, truth.width);
    let b = &cfg.bias;
    let shifted = shift_zero_fill(&truth.gamma, h, w, b.shift_rows, b.shift_cols);
    let below_heavy = f32::from_bits(HEAVY.to_bits() - 1) as f64;
    let noise = if b.noise_std > 0.0 {
        let mut rng = keyed(cfg.seed, Stream::ForecastNoise, &[sample_index]);
        smooth_noise(&mut rng, h, w, 8)
    } else {
        vec![0.0; h * w]
    };
    let mut values = Vec::with_capacity(cfg.n_vars * h * w);
    for (i, &s) in shifted.iter().enumerate() {
        let s = s as f64;
        let mut v = s * (1.0 + b.noise_std * noise[i]).max(0.0);
        // noise never creates heavy rain; only the bias below removes it
        if s < HEAVY as f64 {
            v = v.min(below_heavy);
        }
        if v >= HEAVY as f64 {
            v = HEAVY as f64 + (v - HEAVY as f64) * (1.0 - b.extreme_damping);
        }
        values.push((v as f32).clamp(0.0, RAIN_CEIL));
    }

    if cfg.n_vars > 1 {
        let truth64: Vec<f64> = truth.gamma.iter().map(|&v| (v as f64).ln_1p()).collect();
        for (k, &(_, mean, std, sign)) in COVARIATES.iter().take(cfg.n_vars - 1).enumerate() {
            let mut base = box_blur(&truth64, h, w, 1 + k % 3, 2);
            standardize(&mut base);
            let corr = cfg.covariate_corr * (1.0 - 0.06 * k as f64);
            let mut rng = keyed(cfg.seed, Stream::Covariate, &[sample_index, k as u64]);
            let g = smooth_noise(&mut rng, h, w, 6 + 2 * (k % 4));
            let resid = (1.0 - corr * corr).max(0.0).sqrt();
            values.extend(
                base.iter()
                    .zip(&g)
                    .map(|(&x, &n)| (mean + std * (sign * corr * x + resid * n)) as f32),
            );
        }
    }
    GridField::new(cfg.var_names(), h, w, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Synthetic valid time for a sample; walks day by day through the
/// March–November season, skipping winter.
pub fn synthetic_timestamp(sample_index: u64) -> String {
    let mut date = NaiveDate::from_ymd_opt(2020, 6, 1).unwrap();
    let mut left = sample_index;
    while left > 0 {
        date += Duration::days(1);
        if !matches!(date.month(), 12 | 1 | 2) {
            left -= 1;
        }
    }
    format!("{}T18:00:00", date.format("%Y-%m-%d"))
}

/// Writes truth + forecast pairs under `out_dir` and returns the manifest
/// (also saved as `manifest.json`, with paths relative to `out_dir`).
pub fn gen_dataset(cfg: &SynthConfig, counts: SplitCounts, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::Argument("split counts must be positive".into()));
    }
    ensure_dir(out_dir)?;
    let splits = [("train", counts.train), ("val", counts.val), ("test", counts.test)];
    let mut relative = DatasetManifest::default();
    let mut index = 0u64;
    for (tag, count) in splits {
        for _ in 0..count {
            let id = format!("s{index:05}");
            let truth = gen_truth(cfg, index)?;
            let forecast = gen_forecast(&truth, cfg, index)?;
            let input_name = format!("{id}.input.sslg");
            let truth_name = format!("{id}.truth.sslg");
            write_grid(&forecast, &out_dir.join(&input_name))?;
            write_grid(&truth.to_grid(), &out_dir.join(&truth_name))?;
            relative.entries.push(ManifestEntry {
                sample_id: id,
                input_path: input_name.into(),
                truth_path: truth_name.into(),
                timestamp: synthetic_timestamp(index),
                split: tag.to_string(),
                augment: None,
            });
            index += 1;
        }
    }
    relative.save(&out_dir.join("manifest.json"))?;
    let mut resolved = relative;
    resolved.resolve(out_dir);
    Ok(resolved)
}

/// Pearson correlation of two equally long series.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(gen_truth(&cfg, 11).unwrap(), gen_truth(&cfg, 11).unwrap());
        assert_ne!(gen_truth(&cfg, 11).unwrap(), gen_truth(&cfg, 12).unwrap());
    }

    #[test]
    fn zero_blob_rate_gives_dry_field() {
        let cfg = SynthConfig { rain_blob_rate: 0.0, ..Default::default() };
        assert!(gen_truth(&cfg, 3).unwrap().gamma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heavy_fraction_matches_target_band() {
        let cfg = SynthConfig::default();
        let (mut heavy, mut rain, mut total) = (0usize, 0usize, 0usize);
        for i in 0..1000 {
            let t = gen_truth(&cfg, i).unwrap();
            heavy += t.gamma.iter().filter(|&&v| v >= 10.0).count();
            rain += t.gamma.iter().filter(|&&v| (0.1..10.0).contains(&v)).count();
            total += t.gamma.len();
        }
        let heavy = heavy as f64 / total as f64;
        let rain = rain as f64 / total as f64;
        assert!((0.002..=0.010).contains(&heavy), "heavy fraction {heavy}");
        assert!((0.05..=0.15).contains(&rain), "rain fraction {rain}");
    }

    #[test]
    fn unbiased_forecast_reproduces_truth() {
        let cfg = SynthConfig {
            bias: BiasConfig { shift_rows: 0, shift_cols: 0, extreme_damping: 0.0, noise_std: 0.0 },
            ..Default::default()
        };
        for i in 0..20 {
            let t = gen_truth(&cfg, i).unwrap();
            let f = gen_forecast(&t, &cfg, i).unwrap();
            assert_eq!(f.plane(0), &t.gamma[..]);
        }
    }

    #[test]
    fn full_damping_caps_at_ten() {
        let cfg = SynthConfig {
            bias: BiasConfig { extreme_damping: 1.0, ..Default::default() },
            ..Default::default()
        };
        for i in 0..50 {
            let t = gen_truth(&cfg, i).unwrap();
            let f = gen_forecast(&t, &cfg, i).unwrap();
            assert!(f.plane(0).iter().all(|&v| v <= 10.0));
        }
    }

    #[test]
    fn forecast_never_has_more_heavy_rain() {
        let cfg = SynthConfig::default();
        for i in 0..200 {
            let t = gen_truth(&cfg, i).unwrap();
            let f = gen_forecast(&t, &cfg, i).unwrap();
            let fh = f.plane(0).iter().filter(|&&v| v > HEAVY).count();
            assert!(fh <= t.heavy_count(), "sample {i}: {fh} > {}", t.heavy_count());
            assert!(f.plane(0).iter().all(|v| (0.0..RAIN_MAX).contains(v)));
        }
    }

    #[test]
    fn forecast_correlation_in_band() {
        let cfg = SynthConfig::default();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for i in 0..100 {
            let t = gen_truth(&cfg, i).unwrap();
            let f = gen_forecast(&t, &cfg, i).unwrap();
            a.extend(t.gamma.iter().map(|&v| v as f64));
            b.extend(f.plane(0).iter().map(|&v| v as f64));
        }
        let r = pearson(&a, &b);
        assert!((0.5..=0.9).contains(&r), "correlation {r}");
    }

    #[test]
    fn covariates_track_rainfall() {
        let cfg = SynthConfig::default();
        let (mut rain, mut rh) = (Vec::new(), Vec::new());
        for i in 0..30 {
            let t = gen_truth(&cfg, i).unwrap();
            let f = gen_forecast(&t, &cfg, i).unwrap();
            rain.extend(t.gamma.iter().map(|&v| (v as f64).ln_1p()));
            rh.extend(f.plane(1).iter().map(|&v| v as f64));
        }
        assert!(pearson(&rain, &rh) > 0.3);
        assert_eq!(cfg.var_names()[..3], ["rain", "rh850", "t850"]);
    }

    #[test]
    fn dataset_ids_and_files_are_deterministic() {
        let cfg = SynthConfig { height: 16, width: 16, ..Default::default() };
        let counts = SplitCounts { train: 10, val: 2, test: 2 };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = gen_dataset(&cfg, counts, d1.path()).unwrap();
        gen_dataset(&cfg, counts, d2.path()).unwrap();
        assert_eq!(m1.len(), 14);
        m1.validate().unwrap();
        let n_split: usize = ["train", "val", "test"].iter().map(|s| m1.split(s).len()).sum();
        assert_eq!(n_split, 14);
        for e in &m1.entries {
            let name = e.input_path.file_name().unwrap();
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b);
        }
        let loaded = DatasetManifest::load(&d1.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, m1);
        assert_eq!(loaded.without_winter().unwrap().len(), 14);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SynthConfig {
            bias: BiasConfig { extreme_damping: 1.5, ..Default::default() },
            ..Default::default()
        };
        assert!(matches!(gen_truth(&cfg, 0), Err(Error::Config(_))));
    }
}
