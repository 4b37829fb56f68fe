//! Gridded multivariate fields: the `SSLG` binary format, z-score
//! normalization and center cropping.
//!
//! On-disk layout (all integers little-endian):
//!
//! | offset | size        | content                                   |
//! |--------|-------------|-------------------------------------------|
//! | 0      | 4           | magic `SSLG`                              |
//! | 4      | 4           | format version (`u32`)                    |
//! | 8      | 12          | `n`, `h`, `w` (`u32` each)                |
//! | 20     | 4·n·h·w     | `f32` values in (var, row, col) order     |
//! | ...    | 4 + L       | `u32` block length `L`, then the names    |
//!
//! The trailing name block holds, for each variable, a `u32` byte length
//! followed by that many bytes of UTF-8.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};

pub const GRID_MAGIC: &[u8; 4] = b"SSLG";
pub const GRID_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// Standard deviations below this are treated as zero variance.
pub const ZERO_VARIANCE: f64 = 1e-8;

/// An `n × h × w` stack of real-valued variables.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub n_vars: usize,
    pub height: usize,
    pub width: usize,
    pub var_names: Vec<String>,
    pub values: Vec<f32>,
}

impl GridField {
    pub fn new(
        var_names: Vec<String>,
        height: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let field = GridField { n_vars: var_names.len(), height, width, var_names, values };
        field.validate()?;
        Ok(field)
    }

    pub fn zeros(var_names: Vec<String>, height: usize, width: usize) -> Self {
        let n = var_names.len();
        GridField { n_vars: n, height, width, var_names, values: vec![0.0; n * height * width] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.var_names.len() != self.n_vars {
            return Err(Error::Validation(format!(
                "{} variable names for {} variables",
                self.var_names.len(),
                self.n_vars
            )));
        }
        if self.n_vars * self.height * self.width != self.values.len() {
            return Err(Error::Validation(format!(
                "shape {}x{}x{} does not match {} values",
                self.n_vars,
                self.height,
                self.width,
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at flat index {i}")));
        }
        Ok(())
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, var: usize, row: usize, col: usize) -> usize {
        (var * self.height + row) * self.width + col
    }

    pub fn plane(&self, var: usize) -> &[f32] {
        let len = self.plane_len();
        &self.values[var * len..(var + 1) * len]
    }

    pub fn plane_mut(&mut self, var: usize) -> &mut [f32] {
        let len = self.plane_len();
        &mut self.values[var * len..(var + 1) * len]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Per-group normalization statistics. A group is a variable at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub group_key: String,
    pub mean: f64,
    pub std: f64,
}

/// Variable index → group key. Variables with the same name at different
/// vertical levels must carry distinct keys.
pub type Grouping = Vec<String>;

/// Default grouping: each variable name is its own group.
pub fn grouping_from_names(field: &GridField) -> Grouping {
    field.var_names.clone()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Forecast input (`n` channels).
    pub input_path: PathBuf,
    /// Observed rainfall (single channel).
    pub truth_path: PathBuf,
    pub timestamp: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<crate::labeling::AugmentSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id {}", e.sample_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, tag: &str) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.iter().filter(|e| e.split == tag).cloned().collect(),
        }
    }

    /// Drops December, January and February samples.
    pub fn without_winter(&self) -> Result<DatasetManifest> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let ts = chrono::NaiveDateTime::parse_from_str(&e.timestamp, "%Y-%m-%dT%H:%M:%S")
                .map_err(|err| {
                    Error::Validation(format!("bad timestamp {:?}: {err}", e.timestamp))
                })?;
            if !matches!(chrono::Datelike::month(&ts), 12 | 1 | 2) {
                entries.push(e.clone());
            }
        }
        Ok(DatasetManifest { entries })
    }

    /// Resolves relative paths against `base`.
    pub fn resolve(&mut self, base: &Path) {
        for e in &mut self.entries {
            if e.input_path.is_relative() {
                e.input_path = base.join(&e.input_path);
            }
            if e.truth_path.is_relative() {
                e.truth_path = base.join(&e.truth_path);
            }
        }
    }

    pub fn check_paths(&self) -> Result<()> {
        let missing: Vec<String> = self
            .entries
            .iter()
            .flat_map(|e| [&e.input_path, &e.truth_path])
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::io(
                missing.join(", "),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing data files"),
            ))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        if let Some(dir) = path.parent() {
            m.resolve(dir);
        }
        Ok(m)
    }
}

pub fn encode_grid(field: &GridField) -> Vec<u8> {
    let names: Vec<u8> = field
        .var_names
        .iter()
        .flat_map(|s| {
            let mut b = (s.len() as u32).to_le_bytes().to_vec();
            b.extend_from_slice(s.as_bytes());
            b
        })
        .collect();
    let mut out = Vec::with_capacity(HEADER_LEN + field.values.len() * 4 + 4 + names.len());
    out.extend_from_slice(GRID_MAGIC);
    for v in [GRID_VERSION, field.n_vars as u32, field.height as u32, field.width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &field.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    out.extend_from_slice(&names);
    out
}

pub fn write_grid(field: &GridField, path: &Path) -> Result<()> {
    field.validate()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_grid(field)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<GridField> {
    let corrupt = |msg: String| Error::Corruption { path: path.to_path_buf(), msg };
    if bytes.len() < 4 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::Format { path: path.to_path_buf(), msg: "bad magic".into() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("header truncated at {} bytes", bytes.len())));
    }
    let version = u32_at(bytes, 4);
    if version != GRID_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported version {version}"),
        });
    }
    let (n, h, w) =
        (u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize);
    let count = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| corrupt("dimension overflow".into()))?;
    let payload_end = HEADER_LEN + count * 4;
    if bytes.len() < payload_end + 4 {
        return Err(corrupt(format!(
            "payload truncated: need {} bytes, have {}",
            payload_end + 4,
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..payload_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let block_len = u32_at(bytes, payload_end) as usize;
    let block = bytes
        .get(payload_end + 4..payload_end + 4 + block_len)
        .ok_or_else(|| corrupt("name block truncated".into()))?;
    let mut var_names = Vec::with_capacity(n);
    let mut at = 0;
    while at < block.len() {
        if at + 4 > block.len() {
            return Err(corrupt("name length truncated".into()));
        }
        let len = u32_at(block, at) as usize;
        let raw = block.get(at + 4..at + 4 + len).ok_or_else(|| corrupt("name truncated".into()))?;
        let name = std::str::from_utf8(raw).map_err(|e| corrupt(format!("name not utf-8: {e}")))?;
        var_names.push(name.to_string());
        at += 4 + len;
    }
    let field = GridField { n_vars: n, height: h, width: w, var_names, values };
    field.validate()?;
    Ok(field)
}

pub fn read_grid(path: &Path) -> Result<GridField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, path)
}

/// Population mean and standard deviation per group over every pixel of
/// every sample.
pub fn zscore_fit(samples: &[GridField], grouping: &[String]) -> Result<Vec<NormStats>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("zscore_fit needs at least one sample".into()))?;
    if grouping.len() != first.n_vars {
        return Err(Error::Argument(format!(
            "grouping covers {} variables, field has {}",
            grouping.len(),
            first.n_vars
        )));
    }
    if samples.iter().any(|s| s.n_vars != first.n_vars) {
        return Err(Error::Argument("samples disagree on variable count".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (var, key) in grouping.iter().enumerate() {
        groups.entry(key.as_str()).or_default().push(var);
    }
    let mut stats = Vec::with_capacity(groups.len());
    for (key, vars) in groups {
        let planes = || samples.iter().flat_map(|s| vars.iter().map(move |&v| s.plane(v)));
        let count: usize = planes().map(|p| p.len()).sum();
        let sum: f64 = planes().flat_map(|p| p.iter()).map(|&v| v as f64).sum();
        let mean = sum / count as f64;
        let ss: f64 = planes()
            .flat_map(|p| p.iter())
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum();
        stats.push(NormStats { group_key: key.to_string(), mean, std: (ss / count as f64).sqrt() });
    }
    Ok(stats)
}

/// Fits on a seeded random subset holding `fraction` of the samples
/// (at least one).
pub fn zscore_fit_sampled(
    samples: &[GridField],
    grouping: &[String],
    fraction: f64,
    seed: u64,
) -> Result<Vec<NormStats>> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Argument(format!("sample fraction {fraction} outside (0, 1]")));
    }
    if fraction >= 1.0 || samples.is_empty() {
        return zscore_fit(samples, grouping);
    }
    let k = ((samples.len() as f64 * fraction).round() as usize).clamp(1, samples.len());
    let mut idx = sample(&mut keyed(seed, Stream::NormSubset, &[]), samples.len(), k).into_vec();
    idx.sort_unstable();
    let subset: Vec<GridField> = idx.into_iter().map(|i| samples[i].clone()).collect();
    zscore_fit(&subset, grouping)
}

pub fn zscore_apply(field: &GridField, stats: &[NormStats], grouping: &[String]) -> Result<GridField> {
    if grouping.len() != field.n_vars {
        return Err(Error::Argument(format!(
            "grouping covers {} variables, field has {}",
            grouping.len(),
            field.n_vars
        )));
    }
    let mut out = field.clone();
    for (var, key) in grouping.iter().enumerate() {
        let s = stats
            .iter()
            .find(|s| &s.group_key == key)
            .ok_or_else(|| Error::Argument(format!("no normalization stats for group {key}")))?;
        let plane = out.plane_mut(var);
        if s.std < ZERO_VARIANCE {
            plane.fill(0.0);
        } else {
            for v in plane.iter_mut() {
                *v = ((*v as f64 - s.mean) / s.std) as f32;
            }
        }
    }
    Ok(out)
}

pub fn center_crop(field: &GridField, target_h: usize, target_w: usize) -> Result<GridField> {
    if target_h > field.height || target_w > field.width {
        return Err(Error::Argument(format!(
            "crop {target_h}x{target_w} exceeds source {}x{}",
            field.height, field.width
        )));
    }
    let (r0, c0) = crop_offsets(field.height, field.width, target_h, target_w);
    let mut values = Vec::with_capacity(field.n_vars * target_h * target_w);
    for v in 0..field.n_vars {
        for r in r0..r0 + target_h {
            let start = field.index(v, r, c0);
            values.extend_from_slice(&field.values[start..start + target_w]);
        }
    }
    Ok(GridField {
        n_vars: field.n_vars,
        height: target_h,
        width: target_w,
        var_names: field.var_names.clone(),
        values,
    })
}

/// Row and column offsets used by [`center_crop`].
pub fn crop_offsets(h: usize, w: usize, target_h: usize, target_w: usize) -> (usize, usize) {
    ((h - target_h) / 2, (w - target_w) / 2)
}

pub(crate) fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(n: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> GridField {
        let names = (0..n).map(|i| format!("v{i}")).collect();
        GridField::new(names, h, w, (0..n * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn header_is_twenty_bytes() {
        let f = field(2, 3, 4, |i| i as f32);
        let bytes = encode_grid(&f);
        assert_eq!(&bytes[..4], b"SSLG");
        assert_eq!(u32_at(&bytes, 8), 2);
        assert_eq!(u32_at(&bytes, 12), 3);
        assert_eq!(u32_at(&bytes, 16), 4);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), 0.0);
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1.0);
    }

    #[test]
    fn payload_size_for_paper_grid() {
        let f = GridField::zeros((0..16).map(|i| format!("v{i}")).collect(), 224, 128);
        let bytes = encode_grid(&f);
        let names_block = bytes.len() - HEADER_LEN - 1_835_008;
        assert_eq!(16 * 224 * 128 * 4, 1_835_008);
        assert_eq!(names_block, 4 + 16 * (4 + 2) + 6);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.sslg");
        let f = field(3, 5, 7, |i| (i as f32).sin() * 1e3);
        write_grid(&f, &path).unwrap();
        assert_eq!(read_grid(&path).unwrap(), f);
    }

    #[test]
    fn rejects_bad_magic() {
        let f = field(1, 2, 2, |i| i as f32);
        let mut bytes = encode_grid(&f);
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode_grid(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn rejects_truncated_payload() {
        let f = field(2, 4, 4, |i| i as f32);
        let bytes = encode_grid(&f);
        let err = decode_grid(&bytes[..HEADER_LEN + 40], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Corruption { .. }), "{err}");
    }

    #[test]
    fn rejects_non_finite_values() {
        let f = field(1, 2, 2, |i| i as f32);
        let mut bytes = encode_grid(&f);
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_grid(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn zscore_of_one_two_three() {
        let f = field(1, 1, 3, |i| (i + 1) as f32);
        let s = zscore_fit(&[f], &["g".to_string()]).unwrap();
        assert_eq!(s[0].mean, 2.0);
        assert!((s[0].std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s[0].std - 0.81650).abs() < 1e-5);
    }

    #[test]
    fn zscore_constant_group() {
        let f = field(1, 1, 3, |_| 5.0);
        let g = vec!["g".to_string()];
        let s = zscore_fit(&[f.clone()], &g).unwrap();
        assert_eq!((s[0].mean, s[0].std), (5.0, 0.0));
        let z = zscore_apply(&f, &s, &g).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn levels_are_separate_groups() {
        let f = field(2, 2, 2, |i| if i < 4 { 1.0 + i as f32 } else { 100.0 * i as f32 });
        let g = vec!["t@850".to_string(), "t@500".to_string()];
        let s = zscore_fit(&[f], &g).unwrap();
        assert_eq!(s.len(), 2);
        assert_ne!(s[0].mean, s[1].mean);
    }

    #[test]
    fn zscore_apply_definition_and_missing_group() {
        let f = field(1, 1, 1, |_| 3.0);
        let g = vec!["g".to_string()];
        let s = vec![NormStats { group_key: "g".into(), mean: 2.0, std: 1.0 }];
        assert_eq!(zscore_apply(&f, &s, &g).unwrap().values, vec![1.0]);
        assert!(matches!(zscore_apply(&f, &[], &g), Err(Error::Argument(_))));
        assert!(matches!(zscore_fit(&[], &g), Err(Error::Argument(_))));
    }

    #[test]
    fn normalized_fitting_set_is_standard() {
        let samples: Vec<GridField> = (0..4)
            .map(|s| field(3, 6, 5, |i| ((i * 7 + s * 13) % 17) as f32 * (1.0 + s as f32)))
            .collect();
        let g: Grouping = vec!["a".into(), "b".into(), "a".into()];
        let stats = zscore_fit(&samples, &g).unwrap();
        let normed: Vec<GridField> =
            samples.iter().map(|s| zscore_apply(s, &stats, &g).unwrap()).collect();
        let again = zscore_fit(&normed, &g).unwrap();
        for s in again {
            assert!(s.mean.abs() < 1e-6, "{s:?}");
            assert!((s.std - 1.0).abs() < 1e-6, "{s:?}");
        }
    }

    #[test]
    fn crop_offsets_for_paper_sizes() {
        assert_eq!(crop_offsets(253, 149, 224, 128), (14, 10));
        let f = field(1, 253, 149, |i| i as f32);
        let c = center_crop(&f, 224, 128).unwrap();
        assert_eq!(c.values[0], f.values[f.index(0, 14, 10)]);
    }

    #[test]
    fn crop_small_and_identity() {
        let f = field(1, 4, 4, |i| i as f32);
        let c = center_crop(&f, 2, 2).unwrap();
        assert_eq!(c.values, vec![5.0, 6.0, 9.0, 10.0]);
        assert_eq!(center_crop(&f, 4, 4).unwrap(), f);
        assert!(matches!(center_crop(&f, 5, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn winter_filter() {
        let entry = |id: &str, ts: &str| ManifestEntry {
            sample_id: id.into(),
            input_path: "a".into(),
            truth_path: "b".into(),
            timestamp: ts.into(),
            split: "train".into(),
            augment: None,
        };
        let m = DatasetManifest {
            entries: vec![
                entry("a", "2021-01-03T00:00:00"),
                entry("b", "2021-07-03T00:00:00"),
                entry("c", "2021-12-31T23:00:00"),
            ],
        };
        let kept = m.without_winter().unwrap();
        assert_eq!(kept.entries.len(), 1);
        assert_eq!(kept.entries[0].sample_id, "b");
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            n in 1usize..4, h in 1usize..6, w in 1usize..6,
            seed in any::<u32>(),
        ) {
            let f = field(n, h, w, |i| f32::from_bits(
                (seed as u64 * 2654435761 + i as u64 * 40503) as u32 & 0x7f7f_ffff,
            ));
            let bytes = encode_grid(&f);
            let back = decode_grid(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(encode_grid(&back), bytes);
            prop_assert!(back.values.iter().zip(&f.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn crop_to_source_size_is_idempotent(h in 1usize..8, w in 1usize..8) {
            let f = field(2, h, w, |i| i as f32);
            prop_assert_eq!(center_crop(&f, h, w).unwrap(), f);
        }
    }
}
