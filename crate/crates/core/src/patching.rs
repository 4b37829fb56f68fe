//! Non-overlapping 3D patch tokens and structure-agnostic random masking.
//!
//! A token is a `q × p × p` block (channels × rows × cols) flattened in
//! that order, so its length is `d = q·p²`. Tokens are numbered row-major
//! over (channel group, patch row, patch column).

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridio::GridField;
use crate::rng::{keyed, Stream};

/// Value written into masked pixels. Inputs are z-scored, so this is the
/// climatological mean.
pub const MASK_FILL: f32 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Channels per patch.
    pub q: usize,
    /// Spatial side of a patch.
    pub p: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { q: 2, p: 16 }
    }
}

impl PatchConfig {
    pub fn token_dim(&self) -> usize {
        self.q * self.p * self.p
    }

    pub fn check(&self, n: usize, h: usize, w: usize) -> Result<()> {
        if self.q == 0 || self.p == 0 {
            return Err(Error::Argument("patch sizes must be positive".into()));
        }
        if n % self.q != 0 || h % self.p != 0 || w % self.p != 0 {
            return Err(Error::Argument(format!(
                "patch {}x{}x{} does not tile field {n}x{h}x{w}",
                self.q, self.p, self.p
            )));
        }
        Ok(())
    }

    pub fn n_tokens(&self, n: usize, h: usize, w: usize) -> usize {
        n * h * w / self.token_dim()
    }

    /// Flat field index of every token element, token-major.
    pub fn gather_index(&self, n: usize, h: usize, w: usize) -> Result<Vec<usize>> {
        self.check(n, h, w)?;
        let (q, p) = (self.q, self.p);
        let (groups, prow, pcol) = (n / q, h / p, w / p);
        let mut idx = Vec::with_capacity(n * h * w);
        for g in 0..groups {
            for pr in 0..prow {
                for pc in 0..pcol {
                    for ch in 0..q {
                        for r in 0..p {
                            let row = pr * p + r;
                            let base = ((g * q + ch) * h + row) * w + pc * p;
                            idx.extend(base..base + p);
                        }
                    }
                }
            }
        }
        Ok(idx)
    }
}

/// `n_tokens × dim` row-major token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub n_tokens: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TokenMatrix {
    pub fn token(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

pub fn tokenize(x: &GridField, cfg: &PatchConfig) -> Result<TokenMatrix> {
    let idx = cfg.gather_index(x.n_vars, x.height, x.width)?;
    Ok(TokenMatrix {
        n_tokens: cfg.n_tokens(x.n_vars, x.height, x.width),
        dim: cfg.token_dim(),
        data: idx.iter().map(|&i| x.values[i]).collect(),
    })
}

/// Inverse of [`tokenize`]. Variable names default to `v0..`.
pub fn detokenize(
    tokens: &TokenMatrix,
    cfg: &PatchConfig,
    n: usize,
    h: usize,
    w: usize,
) -> Result<GridField> {
    let idx = cfg.gather_index(n, h, w)?;
    if tokens.dim != cfg.token_dim()
        || tokens.n_tokens != cfg.n_tokens(n, h, w)
        || tokens.data.len() != idx.len()
    {
        return Err(Error::Argument(format!(
            "{} tokens of length {} do not fit {n}x{h}x{w} with patch {cfg:?}",
            tokens.n_tokens, tokens.dim
        )));
    }
    let mut values = vec![0.0f32; n * h * w];
    for (&i, &v) in idx.iter().zip(&tokens.data) {
        values[i] = v;
    }
    Ok(GridField { n_vars: n, height: h, width: w, var_names: (0..n).map(|i| format!("v{i}")).collect(), values })
}

/// Indices of masked tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub total: usize,
    pub ratio: f64,
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Per-token flag, `true` when masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.total];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }
}

/// Number of tokens masked at a given ratio.
pub fn mask_count(n_tokens: usize, ratio: f64) -> usize {
    ((ratio * n_tokens as f64).round() as usize).min(n_tokens)
}

/// Uniform draw of `round(ratio·n_tokens)` tokens without replacement.
pub fn make_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let k = mask_count(n_tokens, ratio);
    let mut indices = sample(&mut keyed(seed, Stream::Mask, &[n_tokens as u64]), n_tokens, k).into_vec();
    indices.sort_unstable();
    Ok(MaskSet { total: n_tokens, ratio, indices, seed })
}

/// Per-pixel flag, `true` where the pixel belongs to a masked patch.
pub fn masked_pixels(mask: &MaskSet, cfg: &PatchConfig, n: usize, h: usize, w: usize) -> Result<Vec<bool>> {
    if mask.total != cfg.n_tokens(n, h, w) {
        return Err(Error::Argument(format!(
            "mask over {} tokens, field has {}",
            mask.total,
            cfg.n_tokens(n, h, w)
        )));
    }
    let idx = cfg.gather_index(n, h, w)?;
    let d = cfg.token_dim();
    let mut out = vec![false; n * h * w];
    for &t in &mask.indices {
        for &i in &idx[t * d..(t + 1) * d] {
            out[i] = true;
        }
    }
    Ok(out)
}

pub fn apply_mask(x: &GridField, mask: &MaskSet, cfg: &PatchConfig) -> Result<GridField> {
    let flags = masked_pixels(mask, cfg, x.n_vars, x.height, x.width)?;
    let mut out = x.clone();
    for (v, &m) in out.values.iter_mut().zip(&flags) {
        if m {
            *v = MASK_FILL;
        }
    }
    Ok(out)
}
