//! Thresholded contingency tables, CSI-family scores and class IoU.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::LabelConfig;
use crate::synth::RainField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ContingencyTable {
    pub fn zero(threshold: f64) -> Self {
        ContingencyTable { threshold, tp: 0, fp: 0, fn_: 0, tn: 0 }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    #[inline]
    pub fn record(&mut self, pred_event: bool, obs_event: bool) {
        match (pred_event, obs_event) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&self, other: &ContingencyTable) -> Result<ContingencyTable> {
        if self.threshold != other.threshold {
            return Err(Error::Argument(format!(
                "cannot merge tables at {} and {}",
                self.threshold, other.threshold
            )));
        }
        Ok(ContingencyTable {
            threshold: self.threshold,
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub csi: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Ratios with the 0/0 → 0 convention.
pub fn scores(t: &ContingencyTable) -> Scores {
    let (tp, fp, fn_) = (t.tp as f64, t.fp as f64, t.fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Scores {
        csi: ratio(tp, tp + fp + fn_),
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}

/// What a prediction field holds.
#[derive(Debug, Clone, Copy)]
pub enum Prediction<'a> {
    /// Class index per pixel.
    Classes(&'a [usize]),
    /// Rainfall amount per pixel.
    Rain(&'a [f32]),
}

impl Prediction<'_> {
    fn len(&self) -> usize {
        match self {
            Prediction::Classes(c) => c.len(),
            Prediction::Rain(r) => r.len(),
        }
    }
}

/// Events are `value ≥ τ`; a class is an event when its lower bin edge is.
pub fn contingency(pred: Prediction, obs: &RainField, tau: f64, cfg: &LabelConfig) -> Result<ContingencyTable> {
    if pred.len() != obs.gamma.len() {
        return Err(Error::Argument(format!(
            "prediction has {} pixels, observation {}",
            pred.len(),
            obs.gamma.len()
        )));
    }
    let mut t = ContingencyTable::zero(tau);
    match pred {
        Prediction::Classes(classes) => {
            if !cfg.thresholds.contains(&tau) {
                return Err(Error::Argument(format!("{tau} is not a configured threshold {:?}", cfg.thresholds)));
            }
            let event: Vec<bool> = (0..cfg.n_classes()).map(|c| cfg.lower_bound(c) >= tau).collect();
            for (&c, &g) in classes.iter().zip(&obs.gamma) {
                let e = *event
                    .get(c)
                    .ok_or_else(|| Error::Argument(format!("class {c} outside [0, {})", event.len())))?;
                t.record(e, g as f64 >= tau);
            }
        }
        Prediction::Rain(values) => {
            for (&v, &g) in values.iter().zip(&obs.gamma) {
                t.record(v as f64 >= tau, g as f64 >= tau);
            }
        }
    }
    Ok(t)
}

/// Treatment of classes absent from both prediction and observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClass {
    /// Counts as a perfect IoU of 1.
    #[default]
    One,
    /// Left out of the mean.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassIoUTable {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl ClassIoUTable {
    pub fn zero(classes: usize) -> Self {
        ClassIoUTable { intersection: vec![0; classes], union: vec![0; classes] }
    }

    pub fn classes(&self) -> usize {
        self.intersection.len()
    }

    pub fn merge(&self, other: &ClassIoUTable) -> Result<ClassIoUTable> {
        if self.classes() != other.classes() {
            return Err(Error::Argument(format!(
                "cannot merge IoU tables over {} and {} classes",
                self.classes(),
                other.classes()
            )));
        }
        Ok(ClassIoUTable {
            intersection: self.intersection.iter().zip(&other.intersection).map(|(a, b)| a + b).collect(),
            union: self.union.iter().zip(&other.union).map(|(a, b)| a + b).collect(),
        })
    }

    /// Per-class IoU, `None` for classes absent on both sides.
    pub fn ious(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn miou(&self, absent: AbsentClass) -> f64 {
        let ious = self.ious();
        let vals: Vec<f64> = match absent {
            AbsentClass::One => ious.iter().map(|v| v.unwrap_or(1.0)).collect(),
            AbsentClass::Exclude => ious.iter().flatten().copied().collect(),
        };
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }
}

pub fn iou_table(pred: &[usize], obs: &[usize], classes: usize) -> Result<ClassIoUTable> {
    if pred.len() != obs.len() {
        return Err(Error::Argument(format!("{} predicted vs {} observed pixels", pred.len(), obs.len())));
    }
    let mut t = ClassIoUTable::zero(classes);
    for (&p, &o) in pred.iter().zip(obs) {
        if p >= classes || o >= classes {
            return Err(Error::Argument(format!("class {} outside [0, {classes})", p.max(o))));
        }
        if p == o {
            t.intersection[p] += 1;
            t.union[p] += 1;
        } else {
            t.union[p] += 1;
            t.union[o] += 1;
        }
    }
    Ok(t)
}

/// Mean IoU and per-class IoUs (absent classes reported as 1).
pub fn miou(pred: &[usize], obs: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    let t = iou_table(pred, obs, classes)?;
    Ok((t.miou(AbsentClass::One), t.ious().iter().map(|v| v.unwrap_or(1.0)).collect()))
}

/// How scores are combined over samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Scores of the summed tables.
    #[default]
    Pooled,
    /// Mean of per-sample scores.
    PerSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub threshold: f64,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregation: Aggregation,
    pub samples: usize,
    pub thresholds: Vec<ThresholdScores>,
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    pub tables: Vec<ContingencyTable>,
}

impl MetricReport {
    pub fn csi_at(&self, tau: f64) -> Option<f64> {
        self.thresholds.iter().find(|t| t.threshold == tau).map(|t| t.scores.csi)
    }

    /// Columns `threshold,csi,f1,precision,recall` plus a final `miou` row.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "csi", "f1", "precision", "recall"])?;
        for t in &self.thresholds {
            let s = t.scores;
            w.write_record([t.threshold, s.csi, s.f1, s.precision, s.recall].map(|v| v.to_string()))?;
        }
        w.write_record(["miou".to_string(), self.miou.to_string(), String::new(), String::new(), String::new()])?;
        w.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        let f = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        self.write_csv(f)?;
        std::fs::write(json_path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(json_path, e))
    }
}

/// Streams per-sample class predictions into pooled tables and
/// per-sample scores.
#[derive(Debug, Clone)]
pub struct Evaluator {
    cfg: LabelConfig,
    pooled: Vec<ContingencyTable>,
    iou: ClassIoUTable,
    per_sample: Vec<(Vec<Scores>, ClassIoUTable)>,
}

impl Evaluator {
    pub fn new(cfg: &LabelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Evaluator {
            cfg: cfg.clone(),
            pooled: cfg.thresholds.iter().map(|&t| ContingencyTable::zero(t)).collect(),
            iou: ClassIoUTable::zero(cfg.n_classes()),
            per_sample: Vec::new(),
        })
    }

    pub fn add(&mut self, pred: &[usize], obs: &RainField) -> Result<()> {
        let obs_class: Vec<usize> = obs.gamma.iter().map(|&g| self.cfg.class_of(g as f64)).collect();
        let iou = iou_table(pred, &obs_class, self.cfg.n_classes())?;
        let mut sc = Vec::with_capacity(self.pooled.len());
        for t in &mut self.pooled {
            let s = contingency(Prediction::Classes(pred), obs, t.threshold, &self.cfg)?;
            sc.push(scores(&s));
            *t = t.merge(&s)?;
        }
        self.iou = self.iou.merge(&iou)?;
        self.per_sample.push((sc, iou));
        Ok(())
    }

    pub fn tables(&self) -> &[ContingencyTable] {
        &self.pooled
    }

    pub fn iou(&self) -> &ClassIoUTable {
        &self.iou
    }

    pub fn report(&self, aggregation: Aggregation, absent: AbsentClass) -> MetricReport {
        let n = self.per_sample.len();
        let thresholds = match aggregation {
            Aggregation::Pooled => self.pooled.iter().map(|t| ThresholdScores { threshold: t.threshold, scores: scores(t) }).collect(),
            Aggregation::PerSample => self
                .pooled
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let mut m = Scores::default();
                    for (s, _) in &self.per_sample {
                        m.csi += s[k].csi;
                        m.precision += s[k].precision;
                        m.recall += s[k].recall;
                        m.f1 += s[k].f1;
                    }
                    let d = n.max(1) as f64;
                    let scores = Scores { csi: m.csi / d, precision: m.precision / d, recall: m.recall / d, f1: m.f1 / d };
                    ThresholdScores { threshold: t.threshold, scores }
                })
                .collect(),
        };
        let miou = match aggregation {
            Aggregation::Pooled => self.iou.miou(absent),
            Aggregation::PerSample => {
                self.per_sample.iter().map(|(_, t)| t.miou(absent)).sum::<f64>() / n.max(1) as f64
            }
        };
        MetricReport {
            aggregation,
            samples: n,
            thresholds,
            miou,
            class_iou: self.iou.ious(),
            tables: self.pooled.clone(),
        }
    }
}
