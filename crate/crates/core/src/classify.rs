//! Window classifiers for POD1..POD3: featurization with or without the
//! learned representation, undersampling, splitting and two linear models.
//!
//! The split is subject-dependent by default: windows of one patient can land
//! in both train and test, which leaks patient identity into the test score.
//! `split_subject_independent` keeps every patient on one side and gives the
//! honest estimate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::Window;
use crate::error::{Error, Result};
use crate::model::FusionPathformer;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Logistic,
    Svm,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 2] = [ClassifierKind::Logistic, ClassifierKind::Svm];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Logistic => "logistic",
            ClassifierKind::Svm => "svm",
        }
    }

    /// Default decision threshold on [`score`].
    pub fn default_threshold(self) -> f64 {
        match self {
            ClassifierKind::Logistic => 0.5,
            ClassifierKind::Svm => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub label: bool,
    pub patient_id: String,
    /// 1, 2 or 3.
    pub pod_index: usize,
}

/// One feature row per window: channel means over time without a model, the
/// representation `h` with one.
pub fn window_features(windows: &[Window], model: Option<&FusionPathformer>) -> Result<Vec<Vec<f64>>> {
    match model {
        None => {
            let d = windows.first().map_or(0, |w| w.input.ncols());
            windows
                .iter()
                .map(|w| {
                    if w.input.ncols() != d || w.input.nrows() == 0 {
                        return Err(Error::shape("window channels", d, w.input.ncols()));
                    }
                    let t = w.input.nrows() as f64;
                    Ok(w.input.columns().into_iter().map(|c| c.sum() / t).collect())
                })
                .collect()
        }
        Some(m) => windows
            .par_iter()
            .map(|w| m.represent(&w.input).map(|r| r.h.to_vec()))
            .collect(),
    }
}

/// Attaches the POD label at `pod_index` to precomputed feature rows.
pub fn label_features(features: &[Vec<f64>], windows: &[Window], pod_index: usize) -> Result<Vec<FeatureVector>> {
    if !(1..=3).contains(&pod_index) {
        return Err(Error::config(format!("pod_index must be 1, 2 or 3, got {pod_index}")));
    }
    if features.len() != windows.len() {
        return Err(Error::shape("feature rows", windows.len(), features.len()));
    }
    Ok(features
        .iter()
        .zip(windows)
        .map(|(f, w)| FeatureVector {
            values: f.clone(),
            label: w.labels.get(pod_index),
            patient_id: w.patient_id.clone(),
            pod_index,
        })
        .collect())
}

pub fn featurize(windows: &[Window], model: Option<&FusionPathformer>, pod_index: usize) -> Result<Vec<FeatureVector>> {
    label_features(&window_features(windows, model)?, windows, pod_index)
}

fn class_counts(data: &[FeatureVector]) -> (usize, usize) {
    let pos = data.iter().filter(|f| f.label).count();
    (pos, data.len() - pos)
}

/// Subsamples the majority class without replacement down to the minority
/// count. The kept items stay in their input order.
pub fn undersample(data: &[FeatureVector], seed: u64) -> Result<Vec<FeatureVector>> {
    let (pos, neg) = class_counts(data);
    if pos == 0 || neg == 0 {
        return Err(Error::Dataset(format!(
            "cannot balance a single-class dataset ({pos} positive, {neg} negative)"
        )));
    }
    let majority = pos > neg;
    let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == majority).collect();
    idx.shuffle(&mut seed::stream(seed, "undersample"));
    idx.truncate(pos.min(neg));
    let mut keep = vec![false; data.len()];
    for i in idx {
        keep[i] = true;
    }
    Ok(data
        .iter()
        .zip(keep)
        .filter(|(f, k)| *k || f.label != majority)
        .map(|(f, _)| f.clone())
        .collect())
}

/// Train and test indices into the split window list, each ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `n` items into per-class test quotas that sum to `round(n * f)`,
/// handing leftover units to the largest fractional remainders.
fn stratified_quotas(class_sizes: &[usize], fraction: f64) -> Vec<usize> {
    let n: usize = class_sizes.iter().sum();
    let total = (n as f64 * fraction).round() as usize;
    let exact: Vec<f64> = class_sizes.iter().map(|&c| c as f64 * fraction).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(quotas.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if quotas[c] < class_sizes[c] {
            quotas[c] += 1;
            left -= 1;
        }
    }
    quotas
}

fn check_fraction(test_fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config(format!(
            "test_fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    Ok(())
}

/// Assigns whole groups to test by stratified quota; `groups[g]` lists the
/// window indices of group `g` and `labels[g]` its stratum.
fn split_groups(groups: &[Vec<usize>], labels: &[bool], test_fraction: f64, seed: u64, label: &str) -> Result<Split> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (g, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(g);
    }
    let mut test = Vec::new();
    let mut train = Vec::new();
    if test_fraction > 0.0 {
        let sizes = [by_class[0].len(), by_class[1].len()];
        let quotas = stratified_quotas(&sizes, test_fraction);
        for c in 0..2 {
            if sizes[c] > 0 && (quotas[c] == 0 || quotas[c] == sizes[c]) {
                return Err(Error::Dataset(format!(
                    "too few items to stratify: class {c} has {} of which {} would go to test",
                    sizes[c], quotas[c]
                )));
            }
        }
        let mut rng = seed::stream(seed, label);
        for c in 0..2 {
            let mut members = by_class[c].clone();
            members.shuffle(&mut rng);
            for (k, g) in members.into_iter().enumerate() {
                if k < quotas[c] {
                    test.extend(&groups[g]);
                } else {
                    train.extend(&groups[g]);
                }
            }
        }
    } else {
        train = groups.iter().flatten().copied().collect();
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

/// Window-level split stratified by the POD1 label.
pub fn split_subject_dependent(windows: &[Window], test_fraction: f64, seed: u64) -> Result<Split> {
    check_fraction(test_fraction)?;
    if windows.is_empty() {
        return Err(Error::Dataset("no windows to split".into()));
    }
    let groups: Vec<Vec<usize>> = (0..windows.len()).map(|i| vec![i]).collect();
    let labels: Vec<bool> = windows.iter().map(|w| w.labels.get(1)).collect();
    split_groups(&groups, &labels, test_fraction, seed, "split/windows")
}

/// Patient-level split stratified by the POD1 label: no patient appears on
/// both sides.
pub fn split_subject_independent(windows: &[Window], test_fraction: f64, seed: u64) -> Result<Split> {
    check_fraction(test_fraction)?;
    if windows.is_empty() {
        return Err(Error::Dataset("no windows to split".into()));
    }
    let mut patients: BTreeMap<&str, (Vec<usize>, bool)> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        patients
            .entry(&w.patient_id)
            .or_insert_with(|| (Vec::new(), w.labels.get(1)))
            .0
            .push(i);
    }
    let (groups, labels): (Vec<Vec<usize>>, Vec<bool>) = patients.into_values().unzip();
    split_groups(&groups, &labels, test_fraction, seed, "split/patients")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub kind: ClassifierKind,
    pub l2: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LinearModel {
    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    fn affine(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::shape("feature dimension", self.weights.len(), x.len()));
        }
        Ok(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-m))` without overflow.
fn log_loss(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// Probability for logistic models, signed margin for SVMs.
pub fn score(model: &LinearModel, x: &[f64]) -> Result<f64> {
    let z = model.affine(x)?;
    Ok(match model.kind {
        ClassifierKind::Logistic => sigmoid(z),
        ClassifierKind::Svm => z,
    })
}

pub fn scores(model: &LinearModel, data: &[FeatureVector]) -> Result<Vec<f64>> {
    data.iter().map(|f| score(model, &f.values)).collect()
}

/// Positive when the score is at least the threshold (the kind's default if
/// `None`), so boundary points are positive.
pub fn predict(model: &LinearModel, data: &[FeatureVector], threshold: Option<f64>) -> Result<Vec<bool>> {
    let th = threshold.unwrap_or(model.kind.default_threshold());
    Ok(scores(model, data)?.into_iter().map(|s| s >= th).collect())
}

fn check_training_set(data: &[FeatureVector], l2: f64) -> Result<usize> {
    if !(l2 > 0.0 && l2.is_finite()) {
        return Err(Error::config(format!("l2 must be positive, got {l2}")));
    }
    let d = data
        .first()
        .ok_or_else(|| Error::Dataset("empty training set".into()))?
        .values
        .len();
    for f in data {
        if f.values.len() != d {
            return Err(Error::shape("feature dimension", d, f.values.len()));
        }
        if f.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!(
                "non-finite feature for patient {}",
                f.patient_id
            )));
        }
    }
    let (pos, neg) = class_counts(data);
    if pos == 0 || neg == 0 {
        return Err(Error::Dataset("training set has a single class".into()));
    }
    Ok(d)
}

const LOGISTIC_TOL: f64 = 1e-6;
const LOGISTIC_MAX_ITER: usize = 100;
/// KKT violation tolerance of the SVM dual.
pub const SVM_TOL: f64 = 1e-9;

/// Fits an L2-regularized linear classifier; the bias is not penalized.
///
/// * logistic: `mean log(1 + exp(-y z)) + l2 |w|^2 / 2` by damped Newton,
///   stopping when the gradient norm falls below 1e-6;
/// * svm: `mean max(0, 1 - y z) + l2 |w|^2 / 2` through its dual with
///   `C = 1 / (n l2)`, solved by SMO with maximal-violating-pair selection
///   until the KKT gap is below [`SVM_TOL`].
///
/// Both solvers are deterministic. If the iteration cap is hit the model is
/// returned with `converged = false` and a warning is logged.
pub fn train_linear(data: &[FeatureVector], kind: ClassifierKind, l2: f64) -> Result<LinearModel> {
    let d = check_training_set(data, l2)?;
    let model = match kind {
        ClassifierKind::Logistic => train_logistic(data, d, l2),
        ClassifierKind::Svm => train_svm(data, d, l2),
    };
    if !model.converged {
        log::warn!(
            "{} did not converge in {} iterations (l2 = {l2})",
            kind.as_str(),
            model.iterations
        );
    }
    if model.weights.iter().any(|w| !w.is_finite()) || !model.bias.is_finite() {
        return Err(Error::Dataset(format!(
            "{} produced non-finite parameters",
            kind.as_str()
        )));
    }
    Ok(model)
}

/// Regularized mean log-loss; `theta = [w, b]`.
pub fn logistic_objective(data: &[FeatureVector], theta: &[f64], l2: f64) -> f64 {
    let d = theta.len() - 1;
    let mean = data
        .iter()
        .map(|f| {
            let z: f64 = f.values.iter().zip(theta).map(|(x, w)| x * w).sum::<f64>() + theta[d];
            log_loss(if f.label { z } else { -z })
        })
        .sum::<f64>()
        / data.len() as f64;
    mean + 0.5 * l2 * theta[..d].iter().map(|w| w * w).sum::<f64>()
}

fn train_logistic(data: &[FeatureVector], d: usize, l2: f64) -> LinearModel {
    let n = data.len() as f64;
    let x = DMatrix::from_fn(data.len(), d + 1, |i, j| if j < d { data[i].values[j] } else { 1.0 });
    let y = DVector::from_iterator(data.len(), data.iter().map(|f| if f.label { 1.0 } else { -1.0 }));
    let mut theta = DVector::<f64>::zeros(d + 1);
    let mut reg = DVector::from_element(d + 1, l2);
    reg[d] = 0.0;
    let mut f_cur = logistic_objective(data, theta.as_slice(), l2);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < LOGISTIC_MAX_ITER {
        let z = &x * &theta;
        // d/dz of log(1 + exp(-y z)) is -y * sigmoid(-y z).
        let r = DVector::from_iterator(z.len(), z.iter().zip(y.iter()).map(|(z, y)| -y * sigmoid(-y * z) / n));
        let grad = x.transpose() * &r + reg.component_mul(&theta);
        if grad.norm() < LOGISTIC_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let curv = DVector::from_iterator(z.len(), z.iter().map(|z| sigmoid(*z) * (1.0 - sigmoid(*z)) / n));
        let mut hess = x.transpose() * DMatrix::from_diagonal(&curv) * &x;
        for j in 0..d {
            hess[(j, j)] += l2;
        }
        hess[(d, d)] += 1e-12;
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => hess.lu().solve(&grad).unwrap_or_else(|| grad.clone()),
        };
        // Backtracking keeps every iterate a descent step.
        let slope = grad.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            let f_new = logistic_objective(data, cand.as_slice(), l2);
            if f_new <= f_cur - 1e-4 * t * slope || t < 1e-10 {
                if f_new <= f_cur {
                    theta = cand;
                    f_cur = f_new;
                }
                break;
            }
            t *= 0.5;
        }
        if t < 1e-10 {
            break;
        }
    }
    LinearModel {
        weights: theta.as_slice()[..d].to_vec(),
        bias: theta[d],
        kind: ClassifierKind::Logistic,
        l2,
        converged,
        iterations,
    }
}

/// Regularized mean hinge loss.
pub fn svm_objective(data: &[FeatureVector], weights: &[f64], bias: f64, l2: f64) -> f64 {
    let mean = data
        .iter()
        .map(|f| {
            let z: f64 = f.values.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() + bias;
            let y = if f.label { 1.0 } else { -1.0 };
            (1.0 - y * z).max(0.0)
        })
        .sum::<f64>()
        / data.len() as f64;
    mean + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

fn train_svm(data: &[FeatureVector], d: usize, l2: f64) -> LinearModel {
    let n = data.len();
    let c = 1.0 / (n as f64 * l2);
    let y: Vec<f64> = data.iter().map(|f| if f.label { 1.0 } else { -1.0 }).collect();
    let x = Array2::from_shape_fn((n, d), |(i, j)| data[i].values[j]);
    let gram = x.dot(&x.t());
    let q = |i: usize, j: usize| y[i] * y[j] * gram[[i, j]];

    // Dual: min 1/2 a'Qa - 1'a, 0 <= a <= C, y'a = 0. grad = Qa - 1.
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let max_iter = 1000 * n.max(100);
    let mut iterations = 0;
    let mut converged = false;
    let up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);
    while iterations < max_iter {
        let (mut i, mut g_max) = (usize::MAX, f64::NEG_INFINITY);
        let (mut j, mut g_min) = (usize::MAX, f64::INFINITY);
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(alpha[t], y[t]) && v > g_max {
                i = t;
                g_max = v;
            }
            if low(alpha[t], y[t]) && v < g_min {
                j = t;
                g_min = v;
            }
        }
        if i == usize::MAX || j == usize::MAX || g_max - g_min < SVM_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        // Move along y_i e_i - y_j e_j, which keeps y'a fixed.
        let curvature = (q(i, i) + q(j, j) - 2.0 * y[i] * y[j] * q(i, j)).max(1e-12);
        let mut step = (g_max - g_min) / curvature;
        let room = |a: f64, dir: f64| if dir > 0.0 { c - a } else { a };
        step = step.min(room(alpha[i], y[i])).min(room(alpha[j], -y[j]));
        let (old_i, old_j) = (alpha[i], alpha[j]);
        alpha[i] = (old_i + y[i] * step).clamp(0.0, c);
        alpha[j] = (old_j - y[j] * step).clamp(0.0, c);
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    let mut weights = vec![0.0; d];
    for t in 0..n {
        if alpha[t] != 0.0 {
            for (w, v) in weights.iter_mut().zip(x.row(t)) {
                *w += alpha[t] * y[t] * v;
            }
        }
    }
    // Bias from free support vectors, else the midpoint of the feasible range.
    let free: Vec<f64> = (0..n)
        .filter(|&t| alpha[t] > 1e-12 * c && alpha[t] < c * (1.0 - 1e-12))
        .map(|t| -y[t] * grad[t])
        .collect();
    let bias = if free.is_empty() {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(alpha[t], y[t]) {
                lo = lo.max(v);
            }
            if low(alpha[t], y[t]) {
                hi = hi.min(v);
            }
        }
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            (false, true) => hi,
            _ => 0.0,
        }
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    LinearModel {
        weights,
        bias,
        kind: ClassifierKind::Svm,
        l2,
        converged,
        iterations,
    }
}

/// Tab-separated feature table: patient, POD index, label, then features.
pub fn render_features(data: &[FeatureVector]) -> String {
    let d = data.first().map_or(0, |f| f.values.len());
    let mut out = String::from("patient_id\tpod_index\tlabel");
    for j in 0..d {
        let _ = write!(out, "\tf{j}");
    }
    out.push('\n');
    for f in data {
        let _ = write!(out, "{}\t{}\t{}", f.patient_id, f.pod_index, u8::from(f.label));
        for v in &f.values {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests;
