use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LabelMode};
use super::data::{self, Normalizer, Prepared};
use crate::error::{Error, Result};
use crate::labeling::{proportions, LabelTensor};
use crate::nn::{Checkpoint, Fmap, Head, ParamStore, TinyNet, TrainState};
use crate::objectives::{rec_loss_grad, seg_loss_grad};
use crate::patching::{make_mask, masked_pixels, PatchConfig, MASK_FILL};
use crate::rng::{keyed, mix, Stream};
use crate::verify::{Evaluator, MetricReport};

const PRETRAIN_TAG: u64 = 1;
const FINETUNE_TAG: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stage: String,
    pub config_hash: String,
    /// Mean training loss of each epoch run in this invocation.
    pub epoch_losses: Vec<f64>,
    /// Optimizer steps taken so far, including resumed ones.
    pub steps: u64,
    pub train_samples: usize,
    pub metrics: Option<MetricReport>,
    pub wall_clock_s: f64,
    pub warnings: Vec<String>,
}

impl RunReport {
    fn new(stage: &str, cfg: &ExperimentConfig) -> Self {
        RunReport {
            stage: stage.into(),
            config_hash: cfg.hash(),
            epoch_losses: Vec::new(),
            steps: 0,
            train_samples: 0,
            metrics: None,
            wall_clock_s: 0.0,
            warnings: Vec::new(),
        }
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::gridio::ensure_dir(path.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// What a checkpoint carries besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub config: ExperimentConfig,
    pub norm: Normalizer,
}

impl CheckpointMeta {
    pub fn of(ck: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
    }
}

fn checkpoint(stage: &str, cfg: &ExperimentConfig, norm: &Normalizer, state: TrainState) -> Result<Checkpoint> {
    let meta = CheckpointMeta { stage: stage.into(), config: cfg.clone(), norm: norm.clone() };
    Ok(Checkpoint { arch: cfg.effective_arch(), meta: serde_json::to_value(meta)?, state })
}

/// Zeroes the masked patches of `x`; returns the pixel flags and patch count.
fn mask_input(x: &Fmap, patch: &PatchConfig, ratio: f64, seed: u64) -> Result<(Fmap, Vec<bool>, usize)> {
    let mask = make_mask(patch.n_tokens(x.c, x.h, x.w), ratio, seed)?;
    let flags = masked_pixels(&mask, patch, x.c, x.h, x.w)?;
    let mut out = x.clone();
    for (v, &m) in out.data.iter_mut().zip(&flags) {
        if m {
            *v = MASK_FILL as f64;
        }
    }
    Ok((out, flags, mask.len()))
}

struct Schedule<'a> {
    epochs: usize,
    batch: usize,
    seed: u64,
    tag: u64,
    lr: Option<f64>,
    /// Parameters whose gradients are zeroed.
    frozen: Option<&'a [bool]>,
}

#[cfg(feature = "parallel")]
fn batch_grads<F>(idx: &[usize], f: &F) -> Vec<Result<(f64, ParamStore)>>
where
    F: Fn(usize) -> Result<(f64, ParamStore)> + Sync,
{
    use rayon::prelude::*;
    idx.par_iter().map(|&i| f(i)).collect()
}

#[cfg(not(feature = "parallel"))]
fn batch_grads<F>(idx: &[usize], f: &F) -> Vec<Result<(f64, ParamStore)>>
where
    F: Fn(usize) -> Result<(f64, ParamStore)>,
{
    idx.iter().map(|&i| f(i)).collect()
}

/// Mini-batch loop. `sample_grad(params, i, epoch)` gives the loss and
/// gradient of sample `i`. Resumes from `state.step`.
fn run_epochs<F>(state: &mut TrainState, cfg: &ExperimentConfig, n: usize, sch: &Schedule, sample_grad: F) -> Result<Vec<f64>>
where
    F: Fn(&ParamStore, usize, u64) -> Result<(f64, ParamStore)> + Sync,
{
    let spe = n.div_ceil(sch.batch) as u64;
    if state.step % spe != 0 {
        return Err(Error::Checkpoint(format!("step {} is not on an epoch boundary ({spe} steps per epoch)", state.step)));
    }
    let mut opt = cfg.optimizer.clone();
    if let Some(lr) = sch.lr {
        opt.lr = lr;
    }
    let start = (state.step / spe) as usize;
    let mut losses = Vec::new();
    for epoch in start..sch.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut keyed(sch.seed, Stream::Shuffle, &[sch.tag, epoch as u64]));
        let mut total = 0.0;
        for idx in order.chunks(sch.batch) {
            let b = idx.len() as f64;
            let loss = state.train_step(&opt, cfg.precision, |ps| {
                let results = batch_grads(idx, &|i| sample_grad(ps, i, epoch as u64));
                let mut grads = ps.zeros_like();
                let mut loss = 0.0;
                for r in results {
                    let (l, g) = r?;
                    loss += l;
                    grads.add_scaled(&g, 1.0);
                }
                grads.scale(1.0 / b);
                if let Some(frozen) = sch.frozen {
                    for (t, &f) in grads.tensors.iter_mut().zip(frozen) {
                        if f {
                            t.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                }
                Ok((loss / b, grads))
            })?;
            total += loss * b;
        }
        let mean = total / n as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok(losses)
}

fn train_data(cfg: &ExperimentConfig) -> Result<(crate::gridio::DatasetManifest, Normalizer)> {
    let manifest = data::load_manifest(cfg)?;
    let train = data::split(&manifest, "train")?;
    let norm = data::fit_normalizer(&train, cfg.data.norm_fraction, cfg.seed)?;
    Ok((train, norm))
}

/// Masked reconstruction pre-training. `resume` continues a saved run.
pub fn pretrain(cfg: &ExperimentConfig, resume: Option<Checkpoint>) -> Result<(Checkpoint, RunReport)> {
    let t0 = Instant::now();
    cfg.validate()?;
    let arch = cfg.effective_arch();
    let net = TinyNet::new(&arch)?;
    let mut report = RunReport::new("pretrain", cfg);
    let (train, norm) = train_data(cfg)?;
    let mut state = match resume {
        Some(ck) => {
            ck.expect_arch(&arch)?;
            net.check_params(&ck.state.params)?;
            ck.state
        }
        None => TrainState::new(net.init_params(cfg.seed), cfg.seed),
    };
    let set = data::prepare(&train, &norm, &cfg.finetune.augmenter, &arch)?;
    report.train_samples = set.len();
    let ratio = cfg.pretrain.mask_ratio;
    if ratio == 0.0 {
        report.warn("pre-training mask ratio is 0: the reconstruction loss is identically zero".into());
    }
    let sch = Schedule {
        epochs: cfg.pretrain.epochs,
        batch: cfg.pretrain.batch,
        seed: cfg.seed,
        tag: PRETRAIN_TAG,
        lr: cfg.pretrain.lr,
        frozen: None,
    };
    report.epoch_losses = run_epochs(&mut state, cfg, set.len(), &sch, |ps, i, epoch| {
        let x = &set.inputs[i];
        let (xm, flags, n_masked) = mask_input(x, &cfg.patch, ratio, mix(&[cfg.seed, PRETRAIN_TAG, epoch, i as u64]))?;
        net.loss_and_grad(ps, &xm, Head::Rec, |pred| rec_loss_grad(pred, x, &flags, n_masked))
    })?;
    report.steps = state.step;
    report.wall_clock_s = t0.elapsed().as_secs_f64();
    Ok((checkpoint("pretrain", cfg, &norm, state)?, report))
}

/// Starting point of fine-tuning.
#[derive(Debug, Clone)]
pub enum FinetuneStart {
    Scratch,
    /// Weights from pre-training; optimizer moments are reset.
    Pretrained(Checkpoint),
    /// Continues an earlier fine-tuning run.
    Resume(Checkpoint),
}

/// Segmentation fine-tuning on the (re)sampled training split.
pub fn finetune(cfg: &ExperimentConfig, start: FinetuneStart) -> Result<(Checkpoint, RunReport)> {
    let t0 = Instant::now();
    cfg.validate()?;
    let arch = cfg.effective_arch();
    let net = TinyNet::new(&arch)?;
    let mut report = RunReport::new("finetune", cfg);
    let (train, fitted) = train_data(cfg)?;
    if let FinetuneStart::Pretrained(ck) | FinetuneStart::Resume(ck) = &start {
        ck.expect_arch(&arch)?;
        net.check_params(&ck.state.params)?;
    }
    let (mut state, norm) = match start {
        FinetuneStart::Scratch => (TrainState::new(net.init_params(cfg.seed), cfg.seed), fitted),
        FinetuneStart::Pretrained(ck) => {
            let norm = CheckpointMeta::of(&ck)?.norm;
            (TrainState::new(ck.state.params, cfg.seed), norm)
        }
        FinetuneStart::Resume(ck) => {
            let norm = CheckpointMeta::of(&ck)?.norm;
            (ck.state, norm)
        }
    };
    let sampled = data::resample_train(&train, cfg, cfg.seed)?;
    let set = data::prepare(&sampled, &norm, &cfg.finetune.augmenter, &arch)?;
    report.train_samples = set.len();
    let (y, ystar) = data::targets(&set.truths, &cfg.labels, cfg.finetune.labels)?;
    let props = proportions(&y)?;
    let w = cfg.loss.weights(arch.n_classes, Some(&props))?;
    if props.iter().any(|&p| p == 0.0) {
        report.warn(format!("a class is absent from the fine-tuning set (proportions {props:?})"));
    }
    let ft = &cfg.finetune;
    let frozen = net.param_mask(|name| {
        (ft.freeze_encoder && TinyNet::is_encoder_param(name)) || (ft.freeze_offsets && TinyNet::is_offset_param(name))
    });
    let sch = Schedule {
        epochs: ft.epochs,
        batch: ft.batch,
        seed: cfg.seed,
        tag: FINETUNE_TAG,
        lr: ft.lr,
        frozen: frozen.iter().any(|&f| f).then_some(&frozen[..]),
    };
    let beta = cfg.loss.beta;
    report.epoch_losses = run_epochs(&mut state, cfg, set.len(), &sch, |ps, i, epoch| {
        let seed = mix(&[cfg.seed, FINETUNE_TAG, epoch, i as u64]);
        let (xm, _, _) = mask_input(&set.inputs[i], &cfg.patch, ft.mask_ratio, seed)?;
        net.loss_and_grad(ps, &xm, Head::Seg, |z| seg_loss_grad(z, &y[i], &ystar[i], beta, &w))
    })?;
    report.steps = state.step;
    report.wall_clock_s = t0.elapsed().as_secs_f64();
    Ok((checkpoint("finetune", cfg, &norm, state)?, report))
}

/// Class with the largest logit; ties go to the lower class.
pub fn argmax_classes(logits: &Fmap) -> Vec<usize> {
    let plane = logits.h * logits.w;
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..logits.c {
                if logits.data[c * plane + i] > logits.data[best * plane + i] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn predict_all(net: &TinyNet, ps: &ParamStore, set: &Prepared) -> Result<Vec<Vec<usize>>> {
    use rayon::prelude::*;
    set.inputs.par_iter().map(|x| Ok(argmax_classes(&net.forward(ps, x, Head::Seg)?))).collect()
}

#[cfg(not(feature = "parallel"))]
fn predict_all(net: &TinyNet, ps: &ParamStore, set: &Prepared) -> Result<Vec<Vec<usize>>> {
    set.inputs.iter().map(|x| Ok(argmax_classes(&net.forward(ps, x, Head::Seg)?))).collect()
}

/// Unmasked inference on `split` and verification against the truth.
pub fn evaluate(ck: &Checkpoint, cfg: &ExperimentConfig, split: &str) -> Result<RunReport> {
    let t0 = Instant::now();
    let arch = cfg.effective_arch();
    ck.expect_arch(&arch)?;
    let net = TinyNet::new(&arch)?;
    net.check_params(&ck.state.params)?;
    let norm = CheckpointMeta::of(ck)?.norm;
    let manifest = data::load_manifest(cfg)?;
    let entries = data::split(&manifest, split)?;
    let set = data::prepare(&entries, &norm, &cfg.finetune.augmenter, &arch)?;
    let preds = predict_all(&net, &ck.state.params, &set)?;
    let mut ev = Evaluator::new(&cfg.labels)?;
    for (p, t) in preds.iter().zip(&set.truths) {
        ev.add(p, t)?;
    }
    let mut report = RunReport::new("evaluate", cfg);
    report.steps = ck.state.step;
    report.metrics = Some(ev.report(cfg.eval.aggregation, cfg.eval.absent_class));
    report.wall_clock_s = t0.elapsed().as_secs_f64();
    Ok(report)
}

/// Class proportions of the training split under one-hot and the chosen labels.
pub fn label_proportions(cfg: &ExperimentConfig, mode: LabelMode) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let manifest = data::load_manifest(cfg)?;
    let train = data::split(&manifest, "train")?;
    let truths = train
        .entries
        .iter()
        .map(|e| crate::synth::RainField::from_grid(&crate::gridio::read_grid(&e.truth_path)?))
        .collect::<Result<Vec<_>>>()?;
    let (y, ystar): (Vec<LabelTensor>, Vec<LabelTensor>) = data::targets(&truths, &cfg.labels, mode)?;
    Ok((proportions(&y)?, proportions(&ystar)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_dataset;

    fn small(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_json(
            r#"{
              "seed": 3,
              "data": {"synth": {"height": 32, "width": 32, "n_vars": 4}, "counts": {"train": 8, "val": 2, "test": 3}},
              "patch": {"q": 2, "p": 8},
              "arch": {"widths": [4, 8], "depths": [1, 1], "pattern": "AB", "decoder_width": 4},
              "pretrain": {"epochs": 2, "batch": 3},
              "finetune": {"epochs": 2, "batch": 3, "sampling": {"mode": "none"}}
            }"#,
        )
        .unwrap();
        cfg.data.dir = dir.join("data");
        gen_dataset(&cfg.data.synth, cfg.data.counts, &cfg.data.dir).unwrap();
        cfg
    }

    #[test]
    fn pretrain_is_deterministic_and_resumable() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(tmp.path());
        let (a, ra) = pretrain(&cfg, None).unwrap();
        let (b, rb) = pretrain(&cfg, None).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        assert_eq!(ra.steps, 6);

        let mut one = cfg.clone();
        one.pretrain.epochs = 1;
        let (half, _) = pretrain(&one, None).unwrap();
        let (resumed, r) = pretrain(&cfg, Some(half)).unwrap();
        assert_eq!(resumed.state, a.state);
        assert_eq!(r.epoch_losses, ra.epoch_losses[1..]);
    }

    #[test]
    fn zero_pretrain_ratio_warns() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        cfg.pretrain.mask_ratio = 0.0;
        let (_, r) = pretrain(&cfg, None).unwrap();
        assert!(r.epoch_losses.iter().all(|&l| l == 0.0));
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn finetune_paths_and_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(tmp.path());
        let (ck, _) = pretrain(&cfg, None).unwrap();
        let (m, r) = finetune(&cfg, FinetuneStart::Pretrained(ck.clone())).unwrap();
        assert_eq!(r.train_samples, 8);
        let (m2, _) = finetune(&cfg, FinetuneStart::Pretrained(ck.clone())).unwrap();
        assert_eq!(m.state, m2.state);
        let e1 = evaluate(&m, &cfg, "test").unwrap();
        let e2 = evaluate(&m, &cfg, "test").unwrap();
        assert_eq!(e1.metrics, e2.metrics);
        assert_eq!(e1.metrics.unwrap().samples, 3);

        let (s, _) = finetune(&cfg, FinetuneStart::Scratch).unwrap();
        assert_ne!(s.state.params, m.state.params);

        let mut wide = cfg.clone();
        wide.arch.widths = vec![4, 12];
        assert!(matches!(finetune(&wide, FinetuneStart::Pretrained(ck.clone())), Err(Error::Checkpoint(_))));
        assert!(matches!(evaluate(&m, &cfg, "nowhere"), Err(Error::Argument(_))));
    }

    #[test]
    fn frozen_offsets_stay_zero() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small(tmp.path());
        cfg.finetune.freeze_offsets = true;
        let (m, _) = finetune(&cfg, FinetuneStart::Scratch).unwrap();
        for (s, t) in m.state.params.specs.iter().zip(&m.state.params.tensors) {
            if TinyNet::is_offset_param(&s.name) {
                assert!(t.iter().all(|&v| v == 0.0), "{}", s.name);
            }
        }
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        let z = Fmap::from_vec(3, 1, 2, vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_classes(&z), vec![0, 1]);
    }
}
