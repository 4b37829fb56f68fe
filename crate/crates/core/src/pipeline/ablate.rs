use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, InitMode, LabelMode, SamplingSpec};
use super::run::{evaluate, finetune, pretrain, FinetuneStart};
use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::rng::mix;

/// Values to sweep per axis. Axes left empty keep the base config value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub rho_pre: Vec<f64>,
    pub rho_ft: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sampling: Vec<String>,
    pub labels: Vec<String>,
    pub init: Vec<InitMode>,
    pub freeze_offsets: Vec<bool>,
}

impl Sweep {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("sweep: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Cartesian product in axis order, last axis fastest.
    pub fn cells(&self, base: &ExperimentConfig) -> Result<Vec<Cell>> {
        fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        for s in &self.sampling {
            SamplingSpec::parse(s)?;
        }
        for l in &self.labels {
            LabelMode::parse(l)?;
        }
        let ft = &base.finetune;
        let mut out = Vec::new();
        for &rho_pre in &or(&self.rho_pre, base.pretrain.mask_ratio) {
            for &rho_ft in &or(&self.rho_ft, ft.mask_ratio) {
                for &alpha in &or(&self.alpha, base.labels.alpha) {
                    for &beta in &or(&self.beta, base.loss.beta) {
                        for sampling in &or(&self.sampling, ft.sampling.name().to_string()) {
                            for labels in &or(&self.labels, ft.labels.name().to_string()) {
                                for &init in &or(&self.init, ft.init) {
                                    for &freeze_offsets in &or(&self.freeze_offsets, ft.freeze_offsets) {
                                        out.push(Cell {
                                            rho_pre,
                                            rho_ft,
                                            alpha,
                                            beta,
                                            sampling: sampling.clone(),
                                            labels: labels.clone(),
                                            init,
                                            freeze_offsets,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub rho_pre: f64,
    pub rho_ft: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sampling: String,
    pub labels: String,
    pub init: InitMode,
    pub freeze_offsets: bool,
}

fn hash_u64(v: &impl Serialize) -> u64 {
    let text = serde_json::to_string(v).expect("serializes");
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl Cell {
    pub fn seed(&self, base: u64) -> u64 {
        mix(&[base, hash_u64(self)])
    }

    /// Base config with this cell's values.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        c.seed = self.seed(base.seed);
        c.pretrain.mask_ratio = self.rho_pre;
        c.finetune.mask_ratio = self.rho_ft;
        c.labels.alpha = self.alpha;
        c.loss.beta = self.beta;
        let keep = c.finetune.sampling;
        c.finetune.sampling = SamplingSpec::parse(&self.sampling)?;
        if keep.name() == self.sampling {
            c.finetune.sampling = keep;
        }
        c.finetune.labels = LabelMode::parse(&self.labels)?;
        c.finetune.init = self.init;
        c.finetune.freeze_offsets = self.freeze_offsets;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: Cell,
    pub seed: u64,
    /// `(threshold, csi)` pairs.
    pub csi: Vec<(f64, f64)>,
    pub miou: f64,
    pub first_loss: f64,
    pub last_loss: f64,
    pub runtime_s: f64,
    pub error: Option<String>,
}

fn pretrain_key(rho: f64) -> u64 {
    rho.to_bits()
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, cache: &mut HashMap<u64, std::result::Result<Checkpoint, String>>) -> Result<AblationRow> {
    let start = match cell.init {
        InitMode::Scratch => FinetuneStart::Scratch,
        InitMode::Pretrained => {
            let ck = cache.entry(pretrain_key(cell.rho_pre)).or_insert_with(|| {
                let mut pc = cfg.clone();
                pc.seed = mix(&[cfg.seed, pretrain_key(cell.rho_pre)]);
                pretrain(&pc, None).map(|(ck, _)| ck).map_err(|e| e.to_string())
            });
            match ck {
                Ok(ck) => FinetuneStart::Pretrained(ck.clone()),
                Err(e) => return Err(Error::Training { step: 0, msg: format!("pre-training failed: {e}") }),
            }
        }
    };
    let (model, ft) = finetune(cfg, start)?;
    let report = evaluate(&model, cfg, &cfg.eval.split)?;
    let m = report.metrics.expect("evaluation fills metrics");
    Ok(AblationRow {
        cell: cell.clone(),
        seed: cfg.seed,
        csi: m.thresholds.iter().map(|t| (t.threshold, t.scores.csi)).collect(),
        miou: m.miou,
        first_loss: ft.epoch_losses.first().copied().unwrap_or(f64::NAN),
        last_loss: ft.epoch_losses.last().copied().unwrap_or(f64::NAN),
        runtime_s: 0.0,
        error: None,
    })
}

/// Runs every cell; failures are recorded in their row.
pub fn ablate(base: &ExperimentConfig, sweep: &Sweep) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let cells = sweep.cells(base)?;
    let mut cache = HashMap::new();
    let mut rows = Vec::with_capacity(cells.len());
    for (k, cell) in cells.iter().enumerate() {
        let t0 = Instant::now();
        log::info!("cell {}/{}: {}", k + 1, cells.len(), serde_json::to_string(cell)?);
        let seed = cell.seed(base.seed);
        let outcome = cell.apply(base).and_then(|cfg| run_cell(&cfg, cell, &mut cache));
        let mut row = outcome.unwrap_or_else(|e| AblationRow {
            cell: cell.clone(),
            seed,
            csi: base.labels.thresholds.iter().map(|&t| (t, f64::NAN)).collect(),
            miou: f64::NAN,
            first_loss: f64::NAN,
            last_loss: f64::NAN,
            runtime_s: 0.0,
            error: Some(e.to_string()),
        });
        row.runtime_s = t0.elapsed().as_secs_f64();
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let taus: Vec<f64> = rows.first().map(|r| r.csi.iter().map(|c| c.0).collect()).unwrap_or_default();
    let mut header: Vec<String> =
        ["rho_pre", "rho_ft", "alpha", "beta", "sampling", "labels", "init", "freeze_offsets", "seed"].map(String::from).to_vec();
    header.extend(taus.iter().map(|t| format!("csi_{t}")));
    header.extend(["miou", "first_loss", "last_loss", "runtime_s", "error"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let c = &r.cell;
        let init = match c.init {
            InitMode::Pretrained => "pretrained",
            InitMode::Scratch => "scratch",
        };
        let mut rec = vec![
            c.rho_pre.to_string(),
            c.rho_ft.to_string(),
            c.alpha.to_string(),
            c.beta.to_string(),
            c.sampling.clone(),
            c.labels.clone(),
            init.to_string(),
            c.freeze_offsets.to_string(),
            r.seed.to_string(),
        ];
        rec.extend(r.csi.iter().map(|c| c.1.to_string()));
        rec.extend([r.miou, r.first_loss, r.last_loss, r.runtime_s].map(|v| v.to_string()));
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn save_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    crate::gridio::ensure_dir(path.parent().unwrap_or(Path::new(".")))?;
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ablation_csv(rows, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_follow_axis_order_and_defaults() {
        let base = ExperimentConfig::default();
        let sweep = Sweep::from_json(r#"{"alpha": [0, 0.1, 0.3]}"#).unwrap();
        let cells = sweep.cells(&base).unwrap();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells.iter().map(|c| c.alpha).collect::<Vec<_>>(), vec![0.0, 0.1, 0.3]);
        assert!(cells.iter().all(|c| c.rho_pre == 0.75 && c.beta == 0.25 && c.labels == "pdl"));

        let grid = Sweep::from_json(r#"{"beta": [0, 1], "init": ["scratch", "pretrained"]}"#).unwrap();
        let cells = grid.cells(&base).unwrap();
        let order: Vec<(f64, InitMode)> = cells.iter().map(|c| (c.beta, c.init)).collect();
        assert_eq!(
            order,
            vec![(0.0, InitMode::Scratch), (0.0, InitMode::Pretrained), (1.0, InitMode::Scratch), (1.0, InitMode::Pretrained)]
        );
    }

    #[test]
    fn cell_seeds_depend_on_params_only() {
        let base = ExperimentConfig::default();
        let cells = Sweep::from_json(r#"{"beta": [0, 1]}"#).unwrap().cells(&base).unwrap();
        assert_ne!(cells[0].seed(7), cells[1].seed(7));
        assert_eq!(cells[0].seed(7), cells[0].clone().seed(7));
        assert_ne!(cells[0].seed(7), cells[0].seed(8));
    }

    #[test]
    fn bad_sweeps_are_config_errors() {
        let base = ExperimentConfig::default();
        for bad in [r#"{"gamma": [1]}"#, r#"{"sampling": ["sideways"]}"#, r#"{"labels": ["soft"]}"#] {
            let e = Sweep::from_json(bad).and_then(|s| s.cells(&base)).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
        let cell = &Sweep::from_json(r#"{"rho_ft": [1.5]}"#).unwrap().cells(&base).unwrap()[0];
        assert_eq!(cell.apply(&base).unwrap_err().exit_code(), 2);
    }
}
