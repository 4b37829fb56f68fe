//! Browser bindings for the demo page in `www/`.
//!
//! Each exported function has a plain Rust twin so it can be tested natively.

use sslpdl_core::labeling::{label_field, pdl, LabelConfig, LabelKind};
use sslpdl_core::patching::{make_mask, masked_pixels, PatchConfig};
use sslpdl_core::synth::{gen_forecast, gen_truth, SynthConfig};
use sslpdl_core::Result;
use wasm_bindgen::prelude::*;

fn js(e: sslpdl_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Class probabilities along `steps` rain rates spread log-uniformly over
/// `[lo, hi]`; row-major `steps × classes`, rain rate first in each row.
pub fn pdl_curve_rs(thresholds: &[f64], alpha: f64, lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    let cfg = LabelConfig::new(thresholds.to_vec(), alpha)?;
    let (a, b) = (lo.max(1e-3).ln(), hi.max(lo.max(1e-3)).ln());
    let mut out = Vec::with_capacity(steps * (cfg.n_classes() + 1));
    for i in 0..steps {
        let t = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
        let gamma = (a + t * (b - a)).exp();
        out.push(gamma);
        out.extend(pdl(gamma, &cfg)?);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn pdl_curve(thresholds: Vec<f64>, alpha: f64, lo: f64, hi: f64, steps: usize) -> std::result::Result<Vec<f64>, JsError> {
    pdl_curve_rs(&thresholds, alpha, lo, hi, steps).map_err(js)
}

/// A synthetic sample with its labels.
#[wasm_bindgen]
pub struct RainSample {
    height: usize,
    width: usize,
    rain: Vec<f32>,
    covariate: Vec<f32>,
    classes: Vec<u8>,
    heavy_density: Vec<f32>,
}

#[wasm_bindgen]
impl RainSample {
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    /// Observed rain rate, mm/h.
    pub fn rain(&self) -> Vec<f32> {
        self.rain.clone()
    }

    /// First forecast variable (the rain covariate).
    pub fn covariate(&self) -> Vec<f32> {
        self.covariate.clone()
    }

    /// One-hot class per pixel.
    pub fn classes(&self) -> Vec<u8> {
        self.classes.clone()
    }

    /// Density-label probability of the top class.
    pub fn heavy_density(&self) -> Vec<f32> {
        self.heavy_density.clone()
    }
}

pub fn rain_sample_rs(seed: u64, index: u64, alpha: f64) -> Result<RainSample> {
    let synth = SynthConfig { seed, ..SynthConfig::default() };
    let truth = gen_truth(&synth, index)?;
    let forecast = gen_forecast(&truth, &synth, index)?;
    let cfg = LabelConfig::new(vec![0.1, 10.0], alpha)?;
    let hot = label_field(&truth, &cfg, LabelKind::OneHot)?;
    let dens = label_field(&truth, &cfg, LabelKind::Density)?;
    let plane = truth.height * truth.width;
    let top = cfg.n_classes() - 1;
    let classes = (0..plane)
        .map(|i| (0..cfg.n_classes()).find(|&c| hot.probs[c * plane + i] == 1.0).unwrap_or(0) as u8)
        .collect();
    Ok(RainSample {
        height: truth.height,
        width: truth.width,
        covariate: forecast.plane(0).to_vec(),
        rain: truth.gamma,
        classes,
        heavy_density: dens.probs[top * plane..].iter().map(|&p| p as f32).collect(),
    })
}

#[wasm_bindgen]
pub fn rain_sample(seed: u64, index: u64, alpha: f64) -> std::result::Result<RainSample, JsError> {
    rain_sample_rs(seed, index, alpha).map_err(js)
}

/// Masked-pixel flags (1 = hidden) for an `n × h × w` field,
/// variable-major.
pub fn mask_pixels_rs(n: usize, h: usize, w: usize, q: usize, p: usize, ratio: f64, seed: u64) -> Result<Vec<u8>> {
    let cfg = PatchConfig { q, p };
    cfg.check(n, h, w)?;
    let mask = make_mask(cfg.n_tokens(n, h, w), ratio, seed)?;
    Ok(masked_pixels(&mask, &cfg, n, h, w)?.into_iter().map(u8::from).collect())
}

#[wasm_bindgen]
pub fn mask_pixels(n: usize, h: usize, w: usize, q: usize, p: usize, ratio: f64, seed: u64) -> std::result::Result<Vec<u8>, JsError> {
    mask_pixels_rs(n, h, w, q, p, ratio, seed).map_err(js)
}
