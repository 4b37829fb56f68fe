use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Heavy-ball momentum for SGD.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, momentum: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Storage precision of parameters between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub const ENV: &'static str = "SSLPDL_PRECISION";

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got {other:?}"))),
        }
    }

    /// Reads `SSLPDL_PRECISION`, defaulting to 64-bit.
    pub fn from_env() -> Result<Self> {
        match std::env::var(Self::ENV) {
            Ok(v) => Self::parse(&v),
            Err(_) => Ok(Precision::F64),
        }
    }
}

/// Parameters plus optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ParamStore, seed: u64) -> Self {
        let m = params.zeros_like();
        let v = params.zeros_like();
        TrainState { params, m, v, step: 0, seed }
    }

    /// Applies one update from `grads`.
    pub fn apply(&mut self, cfg: &OptimizerConfig, grads: &ParamStore, precision: Precision) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::Training { step: self.step, msg: "non-finite gradient".into() });
        }
        self.step += 1;
        let t = self.step as i32;
        match cfg.kind {
            OptimizerKind::Adam => {
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                for (((p, m), v), g) in self
                    .params
                    .tensors
                    .iter_mut()
                    .zip(self.m.tensors.iter_mut())
                    .zip(self.v.tensors.iter_mut())
                    .zip(&grads.tensors)
                {
                    for i in 0..p.len() {
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                for ((p, m), g) in self.params.tensors.iter_mut().zip(self.m.tensors.iter_mut()).zip(&grads.tensors) {
                    for i in 0..p.len() {
                        m[i] = cfg.momentum * m[i] + g[i];
                        p[i] -= cfg.lr * m[i];
                    }
                }
            }
        }
        if precision == Precision::F32 {
            self.params.round_to_f32();
        }
        if !self.params.all_finite() {
            return Err(Error::Training { step: self.step, msg: "parameters became non-finite".into() });
        }
        Ok(())
    }

    /// Evaluates `loss_grad` at the current parameters and applies the update.
    pub fn train_step(
        &mut self,
        cfg: &OptimizerConfig,
        precision: Precision,
        loss_grad: impl FnOnce(&ParamStore) -> Result<(f64, ParamStore)>,
    ) -> Result<f64> {
        let (loss, grads) = loss_grad(&self.params)?;
        if !loss.is_finite() {
            return Err(Error::Training { step: self.step, msg: format!("loss is {loss}") });
        }
        self.apply(cfg, &grads, precision)?;
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, ParamSpec};

    fn scalar(p: f64) -> TrainState {
        let spec = ParamSpec { name: "p".into(), shape: vec![1], init: Init::Zeros };
        let mut ps = ParamStore::init(&[spec], 0);
        ps.tensors[0][0] = p;
        TrainState::new(ps, 0)
    }

    fn half_square(ps: &ParamStore) -> Result<(f64, ParamStore)> {
        let p = ps.tensors[0][0];
        let mut g = ps.zeros_like();
        g.tensors[0][0] = p;
        Ok((0.5 * p * p, g))
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = scalar(1.0);
        let cfg = OptimizerConfig { lr: 0.1, ..OptimizerConfig::default() };
        let loss = s.train_step(&cfg, Precision::F64, half_square).unwrap();
        assert_eq!(loss, 0.5);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.params.tensors[0][0] - want).abs() < 1e-15);
        assert!((s.params.tensors[0][0] - 0.9).abs() < 1e-6);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_lr_and_determinism() {
        let mut s = scalar(1.0);
        let cfg = OptimizerConfig { lr: 0.0, ..OptimizerConfig::default() };
        s.train_step(&cfg, Precision::F64, half_square).unwrap();
        assert_eq!(s.params.tensors[0][0], 1.0);
        let cfg = OptimizerConfig::default();
        let (mut a, mut b) = (scalar(0.3), scalar(0.3));
        for _ in 0..5 {
            a.train_step(&cfg, Precision::F64, half_square).unwrap();
            b.train_step(&cfg, Precision::F64, half_square).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_and_failures() {
        let mut s = scalar(2.0);
        let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, lr: 0.25, ..OptimizerConfig::default() };
        s.train_step(&cfg, Precision::F64, half_square).unwrap();
        assert_eq!(s.params.tensors[0][0], 1.5);
        let err = s
            .train_step(&cfg, Precision::F64, |ps| Ok((f64::NAN, ps.zeros_like())))
            .unwrap_err();
        assert!(matches!(err, Error::Training { step: 1, .. }));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn f32_rounding_and_env_parse() {
        let mut s = scalar(1.0);
        let cfg = OptimizerConfig { lr: 0.1, ..OptimizerConfig::default() };
        s.train_step(&cfg, Precision::F32, half_square).unwrap();
        let p = s.params.tensors[0][0];
        assert_eq!(p, p as f32 as f64);
        assert_eq!(Precision::parse("F32").unwrap(), Precision::F32);
        assert!(matches!(Precision::parse("f16"), Err(Error::Config(_))));
    }
}
