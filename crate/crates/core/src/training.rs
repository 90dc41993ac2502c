//! Auto-regressive pretraining: forecast the horizon segment from the input
//! window under `MSE + TrendLoss`.
//!
//! TrendLoss compares first-order differences along time:
//!
//! ```text
//! trend = lambda / (T - 1) * sum_{t, d} (dT[t, d] - dP[t, d])^2
//! ```
//!
//! It is divided by `T - 1` only, not by the channel count `D`, so for fixed
//! `lambda` its weight relative to the MSE grows with `D`.
//!
//! Routing is straight-through: the top-K choice is recomputed on every
//! forward pass and gradients reach the router only through the softmax
//! weights of the selected gates.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamStore, Tape, Var};
use crate::datamodel::Window;
use crate::error::{Error, Result};
use crate::model::{difference_operator, FusionPathformer, Routing};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Bias-corrected adaptive moments.
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// TrendLoss strength.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; absent means no clipping.
    pub grad_clip: Option<f64>,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            learning_rate: 3e-3,
            epochs: 12,
            batch_size: 16,
            seed: 0,
            grad_clip: None,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            errs.push(format!("train.lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 {
            errs.push("train.epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                errs.push(format!("train.grad_clip must be positive, got {c}"));
            }
        }
        errs
    }
}

/// Loss components; `trend` already includes `lambda`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub trend: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(mse: f64, trend: f64) -> Self {
        Self {
            mse,
            trend,
            total: mse + trend,
        }
    }

    fn is_finite(&self) -> bool {
        self.mse.is_finite() && self.trend.is_finite() && self.total.is_finite()
    }
}

/// Evaluation loss after `epoch` optimizer passes; epoch 0 is the initial model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

fn check_same_shape(pred: &Mat, target: &Mat) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(
            "loss operands",
            format!("{:?}", pred.dim()),
            format!("{:?}", target.dim()),
        ));
    }
    Ok(())
}

/// Mean of squared differences over all `T * D` entries.
pub fn mse_loss(pred: &Mat, target: &Mat) -> Result<f64> {
    check_same_shape(pred, target)?;
    if pred.is_empty() {
        return Err(Error::shape("loss operands", "nonempty", "empty"));
    }
    let sum: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// TrendLoss with strength `lambda`.
pub fn trend_loss(pred: &Mat, target: &Mat, lambda: f64) -> Result<f64> {
    check_same_shape(pred, target)?;
    let t = pred.nrows();
    if t < 2 {
        return Err(Error::shape("trend loss length", ">= 2", t));
    }
    let mut sum = 0.0;
    for r in 1..t {
        for c in 0..pred.ncols() {
            let dt = target[[r, c]] - target[[r - 1, c]];
            let dp = pred[[r, c]] - pred[[r - 1, c]];
            sum += (dt - dp) * (dt - dp);
        }
    }
    Ok(lambda * sum / (t - 1) as f64)
}

pub fn loss_breakdown(pred: &Mat, target: &Mat, lambda: f64) -> Result<LossBreakdown> {
    Ok(LossBreakdown::new(
        mse_loss(pred, target)?,
        trend_loss(pred, target, lambda)?,
    ))
}

/// Records `MSE + TrendLoss` of `pred` against a constant target.
/// Returns `(mse, trend, total)` nodes.
pub fn loss_graph(tape: &mut Tape, pred: Var, target: &Mat, lambda: f64) -> Result<(Var, Var, Var)> {
    check_same_shape(tape.value(pred), target)?;
    let (t, d) = target.dim();
    if t < 2 {
        return Err(Error::shape("trend loss length", ">= 2", t));
    }
    let target = tape.constant(target.clone());
    let resid = tape.sub(pred, target);
    let mse = tape.sum_squares(resid, 1.0 / (t * d) as f64);
    // Differences are linear, so dP - dT is the difference of the residual.
    let dres = tape.left_mul(Arc::new(difference_operator(t)), resid);
    let trend = tape.sum_squares(dres, lambda / (t - 1) as f64);
    let total = tape.add(mse, trend);
    Ok((mse, trend, total))
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v)[[0, 0]]
}

/// Loss of one window and its gradient with respect to every parameter.
pub fn loss_and_gradients(
    model: &FusionPathformer,
    window: &Window,
    lambda: f64,
    routing: Routing<'_>,
) -> Result<(LossBreakdown, Vec<Mat>)> {
    let mut tape = Tape::new();
    let g = model.build_graph(&mut tape, &window.input, routing)?;
    let (mse, trend, total) = loss_graph(&mut tape, g.pred, &window.target, lambda)?;
    let loss = LossBreakdown {
        mse: scalar(&tape, mse),
        trend: scalar(&tape, trend),
        total: scalar(&tape, total),
    };
    let grads = tape.backward(total, model.params());
    Ok((loss, grads))
}

/// Loss of one window without computing gradients.
pub fn window_loss(
    model: &FusionPathformer,
    window: &Window,
    lambda: f64,
    routing: Routing<'_>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let g = model.build_graph(&mut tape, &window.input, routing)?;
    let (mse, trend, total) = loss_graph(&mut tape, g.pred, &window.target, lambda)?;
    Ok(LossBreakdown {
        mse: scalar(&tape, mse),
        trend: scalar(&tape, trend),
        total: scalar(&tape, total),
    })
}

/// Mean loss over `windows` with deterministic routing.
pub fn evaluate_loss(model: &FusionPathformer, windows: &[Window], lambda: f64) -> Result<LossBreakdown> {
    if windows.is_empty() {
        return Err(Error::Dataset("no windows to evaluate".into()));
    }
    let losses: Vec<LossBreakdown> = windows
        .par_iter()
        .map(|w| window_loss(model, w, lambda, Routing::Inference))
        .collect::<Result<_>>()?;
    let n = losses.len() as f64;
    let (mse, trend) = losses.iter().fold((0.0, 0.0), |(m, t), l| (m + l.mse, t + l.trend));
    Ok(LossBreakdown::new(mse / n, trend / n))
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

/// Optimizer with its per-parameter state.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: Optimizer,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, params: &ParamStore) -> Self {
        Self {
            kind,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update. A zero learning rate leaves parameters untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Mat], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        match self.kind {
            Optimizer::Sgd => {
                if lr == 0.0 {
                    return;
                }
                for (p, g) in params.values_mut().iter_mut().zip(grads) {
                    p.scaled_add(-lr, g);
                }
            }
            Optimizer::Adam => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                for ((g, m), v) in grads.iter().zip(&mut self.m).zip(&mut self.v) {
                    ndarray::Zip::from(m).and(v).and(g).for_each(|m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    });
                }
                if lr == 0.0 {
                    return;
                }
                for ((p, m), v) in params.values_mut().iter_mut().zip(&self.m).zip(&self.v) {
                    ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

/// Router noise for one window: `M x L` standard normals scaled by `std`.
fn router_noise(rng: &mut impl Rng, modalities: usize, gates: usize, std: f64) -> Vec<Vec<f64>> {
    (0..modalities)
        .map(|_| (0..gates).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn check_windows(model: &FusionPathformer, windows: &[Window]) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::Dataset("no training windows".into()));
    }
    let cfg = model.config();
    let expected = (cfg.window_len, cfg.input_dims());
    for w in windows {
        if w.input.dim() != expected || w.target.dim() != expected {
            return Err(Error::shape(
                "training window (input and horizon)",
                format!("{expected:?}"),
                format!("{:?} / {:?}", w.input.dim(), w.target.dim()),
            ));
        }
    }
    Ok(())
}

/// Pretrains `model` on `windows` and returns the loss history, one entry per
/// epoch plus the initial model at epoch 0.
///
/// Per-window gradients of a batch are computed in parallel and summed in
/// batch order, so results do not depend on the thread count. On a
/// non-finite loss the parameters are restored to the end of the last
/// finite epoch and [`Error::Diverged`] is returned.
pub fn train_representation(
    model: &mut FusionPathformer,
    windows: &[Window],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLoss>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    check_windows(model, windows)?;

    let initial = evaluate_loss(model, windows, cfg.lambda)?;
    if !initial.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            loss: initial.total,
        });
    }
    let mut history = vec![EpochLoss {
        epoch: 0,
        loss: initial,
    }];
    let mut last_good = model.params().values().to_vec();
    let mut opt = OptimizerState::new(cfg.optimizer, model.params());
    let (n_mod, n_gates) = (model.config().modalities.len(), model.config().patch_sizes.len());
    let noise_std = model.config().router_noise;

    let diverged = |model: &mut FusionPathformer, last_good: &[Mat], epoch, step, loss| {
        model.params_mut().values_mut().clone_from_slice(last_good);
        Error::Diverged { epoch, step, loss }
    };

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut seed::stream(cfg.seed, &format!("train.shuffle.{epoch}")),
        );
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = seed::stream(cfg.seed, &format!("train.noise.{epoch}.{step}"));
            let noise: Vec<Vec<Vec<f64>>> = batch
                .iter()
                .map(|_| router_noise(&mut rng, n_mod, n_gates, noise_std))
                .collect();
            let results: Vec<Result<(LossBreakdown, Vec<Mat>)>> = batch
                .par_iter()
                .zip(noise.par_iter())
                .map(|(&i, n)| {
                    let routing = if noise_std > 0.0 {
                        Routing::Noisy(n)
                    } else {
                        Routing::Inference
                    };
                    loss_and_gradients(model, &windows[i], cfg.lambda, routing)
                })
                .collect();

            let mut grads = model.params().zeros_like();
            let mut total = 0.0;
            for r in results {
                let (loss, g) = match r {
                    Ok(v) => v,
                    Err(Error::NonFinite { .. }) => return Err(diverged(model, &last_good, epoch, step, f64::NAN)),
                    Err(e) => return Err(e),
                };
                total += loss.total;
                for (acc, g) in grads.iter_mut().zip(&g) {
                    *acc += g;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * scale));
            let grad_finite = grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !total.is_finite() || !grad_finite {
                return Err(diverged(model, &last_good, epoch, step, total * scale));
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            opt.step(model.params_mut(), &grads, cfg.learning_rate);
        }
        let loss = match evaluate_loss(model, windows, cfg.lambda) {
            Ok(l) if l.is_finite() => l,
            Ok(l) => return Err(diverged(model, &last_good, epoch, 0, l.total)),
            Err(Error::NonFinite { .. }) => return Err(diverged(model, &last_good, epoch, 0, f64::NAN)),
            Err(e) => return Err(e),
        };
        log::info!(
            "epoch {epoch}: mse {} trend {} total {}",
            loss.mse,
            loss.trend,
            loss.total
        );
        history.push(EpochLoss { epoch, loss });
        last_good = model.params().values().to_vec();
    }
    Ok(history)
}

/// Loss history as a tab-separated table.
pub fn render_loss_log(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch\tmse\ttrend\ttotal\n");
    for h in history {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", h.epoch, h.loss.mse, h.loss.trend, h.loss.total);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub lambda: f64,
    /// Central-difference step.
    pub eps: f64,
    /// Parameter groups to check; `None` checks all of them.
    pub groups: Option<Vec<String>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            eps: 1e-6,
            groups: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub n_params: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("group\tn_params\trel_error\tmax_abs_error\n");
        for g in &self.groups {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", g.group, g.n_params, g.rel_error, g.max_abs_error);
        }
        out
    }
}

/// Compares backpropagated gradients with central finite differences.
///
/// The routing selection is taken from an inference pass on `window` and held
/// fixed for every evaluation, so the loss is smooth in all parameters.
pub fn grad_check(model: &FusionPathformer, window: &Window, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let gates: Vec<Vec<usize>> = model
        .represent(&window.input)?
        .decisions
        .into_iter()
        .map(|d| d.gates)
        .collect();
    let routing = Routing::Frozen(&gates);
    let (_, analytic) = loss_and_gradients(model, window, opts.lambda, routing)?;

    let mut probe = model.clone();
    let ids: Vec<_> = model.params().ids().collect();
    let mut groups: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for id in ids {
        let group = model.params().group(id).to_string();
        if opts.groups.as_ref().is_some_and(|g| !g.contains(&group)) {
            continue;
        }
        let entry = match groups.iter().position(|(g, _, _)| *g == group) {
            Some(i) => i,
            None => {
                groups.push((group, Vec::new(), Vec::new()));
                groups.len() - 1
            }
        };
        let shape = model.params().get(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.params().get(id)[[r, c]];
                probe.params_mut().get_mut(id)[[r, c]] = orig + opts.eps;
                let up = window_loss(&probe, window, opts.lambda, routing)?.total;
                probe.params_mut().get_mut(id)[[r, c]] = orig - opts.eps;
                let down = window_loss(&probe, window, opts.lambda, routing)?.total;
                probe.params_mut().get_mut(id)[[r, c]] = orig;
                groups[entry].1.push(analytic[id.0][[r, c]]);
                groups[entry].2.push((up - down) / (2.0 * opts.eps));
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::config("grad check selected no parameter groups"));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(GradCheckReport {
        groups: groups
            .into_iter()
            .map(|(group, a, n)| {
                let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
                GroupError {
                    n_params: a.len(),
                    rel_error: norm(&diff) / norm(&a).max(norm(&n)).max(1e-8),
                    max_abs_error: diff.iter().fold(0.0, |m, d| m.max(d.abs())),
                    group,
                }
            })
            .collect(),
    })
}

/// Moving average of the total loss over `width` consecutive epochs.
pub fn smoothed_totals(history: &[EpochLoss], width: usize) -> Vec<f64> {
    let totals: Vec<f64> = history.iter().map(|h| h.loss.total).collect();
    totals
        .windows(width.max(1))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}
