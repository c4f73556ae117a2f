//! Adam training loop and finite-difference gradient checks.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::TinyModel;
use super::precise::{self, Dd, Selection};
use super::scene::{rng_from, TokenFeatures};
use crate::error::{Error, Result};
use crate::loss::{LossKind, LossParams};
use crate::targets::TargetSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Both gradients below this count as agreeing.
pub const ZERO_GRAD: f64 = 1e-12;

/// One training example: token features and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: TokenFeatures,
    pub targets: TargetSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub params: LossParams,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: TinyModel,
    /// Loss before each update.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for ((w, g), (m, v)) in theta.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Trains on one sample per step, visiting samples in a seeded shuffle that
/// is redrawn every epoch.
pub fn train(mut model: TinyModel, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutput> {
    if cfg.steps == 0 {
        return Err(Error::InvalidParameter("steps must be at least 1".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate {}", cfg.lr)));
    }
    if data.is_empty() {
        return Err(Error::InvalidParameter("no training samples".into()));
    }
    let mut rng = rng_from(cfg.seed, 20);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = Adam::new(model.n_params());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step % data.len() == 0 {
            order.shuffle(&mut rng);
        }
        let s = &data[order[step % data.len()]];
        if model.theta.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged(step));
        }
        let (loss, grad) = model.loss_and_grad(&s.features, &s.targets, cfg.loss, &cfg.params)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(step));
        }
        curve.push(loss);
        adam.step(&mut model.theta, &grad, cfg.lr);
    }
    Ok(TrainOutput { model, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradPair {
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: LossKind,
    pub trials: usize,
    pub max_rel_err: f64,
    /// The pair with the largest relative error.
    pub worst: Option<GradPair>,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − n| / max(|a|, |n|)`, or 0 when both are below [`ZERO_GRAD`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_GRAD {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the model's analytic gradient with central differences on
/// `trials` randomly chosen parameters. The differenced loss values come
/// from the double-double evaluator in [`super::precise`], with the loss's
/// sample selection frozen at the unperturbed weights.
pub fn gradcheck(
    model: &TinyModel,
    sample: &Sample,
    kind: LossKind,
    params: &LossParams,
    trials: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let (_, grad) = model.loss_and_grad(&sample.features, &sample.targets, kind, params)?;
    gradcheck_against(model, sample, kind, params, &grad, trials, seed)
}

/// Like [`gradcheck`] but against a caller-supplied gradient.
pub fn gradcheck_against(
    model: &TinyModel,
    sample: &Sample,
    kind: LossKind,
    params: &LossParams,
    analytic: &[f64],
    trials: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    if analytic.len() != model.n_params() {
        return Err(Error::ShapeError("gradient length differs from the parameter count".into()));
    }
    let z = model.forward(&sample.features)?;
    let sel = Selection::at(kind, &z, &sample.targets, params)?;
    let mut rng = rng_from(seed, 30);
    let mut probe = model.clone();
    let mut report = GradcheckReport {
        loss: kind,
        trials,
        max_rel_err: 0.0,
        worst: None,
    };
    let eval = |m: &TinyModel| precise::model_loss(m, &sample.features, &sample.targets, kind, params, &sel);
    for _ in 0..trials {
        let p = rng.random_range(0..model.n_params());
        let w = model.theta[p];
        let (wu, wd) = (w + FD_STEP, w - FD_STEP);
        probe.theta[p] = wu;
        let up = eval(&probe)?;
        probe.theta[p] = wd;
        let down = eval(&probe)?;
        probe.theta[p] = w;
        // the realised step, exact in f64
        let numeric = ((up - down) / Dd::new(wu - wd)).to_f64();
        let rel_err = relative_error(analytic[p], numeric);
        if report.worst.is_none() || rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst = Some(GradPair {
                param: p,
                analytic: analytic[p],
                numeric,
                rel_err,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlab::experiment::gradcheck_case;
    use crate::targets::{Task, TaskSlice};

    fn config(lr: f64) -> TrainConfig {
        TrainConfig {
            loss: LossKind::Ntpm,
            params: LossParams::with_k(4),
            steps: 6,
            lr,
            seed: 3,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (model, sample) = gradcheck_case(0).unwrap();
        let out = train(model.clone(), &[sample.clone(), sample], &config(0.0)).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.curve.len(), 6);
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let (model, sample) = gradcheck_case(2).unwrap();
        let data = [sample];
        let a = train(model.clone(), &data, &config(0.05)).unwrap();
        let b = train(model, &data, &config(0.05)).unwrap();
        assert_eq!(a, b);
        assert!(a.curve.last().unwrap() < &a.curve[0]);
    }

    #[test]
    fn rejects_bad_configs() {
        let (model, sample) = gradcheck_case(0).unwrap();
        let data = [sample];
        let mut cfg = config(0.1);
        cfg.steps = 0;
        assert!(train(model.clone(), &data, &cfg).is_err());
        assert!(train(model.clone(), &data, &config(f64::NAN)).is_err());
        assert!(train(model, &[], &config(0.1)).is_err());
    }

    #[test]
    fn overflowing_weights_diverge() {
        let (model, sample) = gradcheck_case(0).unwrap();
        let err = train(model, &[sample], &config(1e308)).unwrap_err();
        assert!(matches!(err, Error::Diverged(s) if s > 0), "{err:?}");
    }

    #[test]
    fn gradcheck_passes_on_linear_ntpm() {
        let (model, sample) = gradcheck_case(0).unwrap();
        let r = gradcheck(&model, &sample, LossKind::Ntpm, &LossParams::with_k(32), 30, 1).unwrap();
        assert!(r.passed(1e-6), "{r:?}");
        assert_eq!(r.trials, 30);
    }

    #[test]
    fn invalid_only_tokens_have_zero_gradients() {
        let (model, sample) = gradcheck_case(0).unwrap();
        let (w, h) = (sample.targets.grid_w(), sample.targets.grid_h());
        let n = w * h;
        let targets = TargetSet::from_parts(
            w,
            h,
            vec![TaskSlice::new(Task::Semantic, (0..model.vocab_size as u32).collect())],
            vec![vec![]; n],
            vec![None; n],
            vec![vec![false]; n],
        )
        .unwrap();
        let sample = Sample { targets, ..sample };
        let (_, g) = model.loss_and_grad(&sample.features, &sample.targets, LossKind::RawBce, &LossParams::default()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let r = gradcheck(&model, &sample, LossKind::RawBce, &LossParams::default(), 10, 0).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
        assert!(r.passed(1e-6));
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (model, sample) = gradcheck_case(3).unwrap();
        let params = LossParams::default();
        let (_, mut g) = model.loss_and_grad(&sample.features, &sample.targets, LossKind::Focal, &params).unwrap();
        g.iter_mut().for_each(|v| *v *= 1.1);
        let r = gradcheck_against(&model, &sample, LossKind::Focal, &params, &g, 10, 0).unwrap();
        assert!(r.max_rel_err > 1e-2, "{r:?}");
        assert!(gradcheck_against(&model, &sample, LossKind::Focal, &params, &g[1..], 1, 0).is_err());
    }

    #[test]
    fn relative_error_rules() {
        assert_eq!(relative_error(1e-13, -1e-13), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(0.0, 1e-3), 1.0);
    }
}
