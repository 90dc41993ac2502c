//! In-memory cascade: windows, split, standardization, pretraining,
//! classifiers and metrics, plus the lambda and period sweeps.

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{
    label_features, predict, scores, split_subject_dependent, split_subject_independent, train_linear, undersample,
    window_features, ClassifierKind, FeatureVector, LinearModel, Split,
};
use crate::datamodel::{slide_cohort, MultiModalRecord, Window};
use crate::error::{Error, Result};
use crate::eval::{period_label, Featurization, MetricReport, MetricRow};
use crate::model::{FusionPathformer, ModelConfig};
use crate::preprocessing::{preprocess_cohort, PreprocessConfig, RangeTable, Standardizer};
use crate::seed::derive_seed;
use crate::training::{train_representation, EpochLoss, LossBreakdown, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Step between window starts, in samples after downsampling. The horizon
    /// has the same length as the input window.
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { stride: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub l2: f64,
    pub kinds: Vec<ClassifierKind>,
    pub test_fraction: f64,
    /// Split by patient instead of by window.
    pub subject_independent: bool,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            l2: 1.0,
            kinds: ClassifierKind::ALL.to_vec(),
            test_fraction: 0.2,
            subject_independent: false,
        }
    }
}

/// Everything a run needs besides the records themselves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub preprocess: PreprocessConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classify: ClassifyConfig,
    pub seed: u64,
}

impl Settings {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.preprocess.validate();
        errs.extend(self.model.validate());
        errs.extend(self.train.validate());
        if self.window.stride == 0 {
            errs.push("window.stride must be >= 1".into());
        }
        let c = &self.classify;
        if !(c.l2 > 0.0 && c.l2.is_finite()) {
            errs.push(format!("classify.l2 must be positive, got {}", c.l2));
        }
        if c.kinds.is_empty() {
            errs.push("classify.kinds must not be empty".into());
        }
        if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
            errs.push(format!(
                "classify.test_fraction must lie in (0, 1), got {}",
                c.test_fraction
            ));
        }
        errs
    }

    /// Seed of a named stage, derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Overwrites the model and training seeds with their global-seed streams.
    pub fn resolve_seeds(&mut self) {
        self.model.seed = self.stage_seed("model");
        self.train.seed = self.stage_seed("train");
    }
}

/// Standardized windows with their split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub windows: Vec<Window>,
    pub split: Split,
    pub standardizer: Standardizer,
}

impl Prepared {
    pub fn train_windows(&self) -> Vec<Window> {
        self.split.train.iter().map(|&i| self.windows[i].clone()).collect()
    }

    pub fn test_windows(&self) -> Vec<Window> {
        self.split.test.iter().map(|&i| self.windows[i].clone()).collect()
    }
}

/// Windows every record (horizon = window length) and splits them.
pub fn window_and_split(processed: &[MultiModalRecord], s: &Settings) -> Result<(Vec<Window>, Split)> {
    if processed.is_empty() {
        return Err(Error::Dataset("no processed records".into()));
    }
    let t = s.model.window_len;
    let windows = slide_cohort(processed, t, t, s.window.stride)?;
    let seed = s.stage_seed("split");
    let split = if s.classify.subject_independent {
        split_subject_independent(&windows, s.classify.test_fraction, seed)?
    } else {
        split_subject_dependent(&windows, s.classify.test_fraction, seed)?
    };
    Ok((windows, split))
}

/// Standardizes windows with statistics of the training inputs.
pub fn standardize(windows: &[Window], split: &Split) -> Result<Prepared> {
    let train: Vec<&Array2<f64>> = split.train.iter().map(|&i| &windows[i].input).collect();
    let standardizer = Standardizer::fit(train)?;
    Ok(Prepared {
        windows: standardizer.apply_windows(windows)?,
        split: split.clone(),
        standardizer,
    })
}

pub fn prepare(processed: &[MultiModalRecord], s: &Settings) -> Result<Prepared> {
    let (windows, split) = window_and_split(processed, s)?;
    standardize(&windows, &split)
}

/// Rebuilds the prepared windows from a stored split and standardizer.
pub fn restore(
    processed: &[MultiModalRecord],
    s: &Settings,
    split: Split,
    standardizer: Standardizer,
) -> Result<Prepared> {
    let t = s.model.window_len;
    let windows = slide_cohort(processed, t, t, s.window.stride)?;
    if let Some(&bad) = split.train.iter().chain(&split.test).find(|&&i| i >= windows.len()) {
        return Err(Error::Dataset(format!(
            "stored split refers to window {bad} but the cohort has {} windows",
            windows.len()
        )));
    }
    Ok(Prepared {
        windows: standardizer.apply_windows(&windows)?,
        split,
        standardizer,
    })
}

/// Builds a model from `s.model` and pretrains it on the training windows.
pub fn pretrain(prep: &Prepared, s: &Settings) -> Result<(FusionPathformer, Vec<EpochLoss>)> {
    let mut model = FusionPathformer::new(s.model.clone())?;
    let history = train_representation(&mut model, &prep.train_windows(), &s.train)?;
    Ok((model, history))
}

/// One fitted linear model with its feature standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedClassifier {
    pub pod_index: usize,
    pub featurization: Featurization,
    pub scaler: Standardizer,
    pub model: LinearModel,
}

fn to_matrix(features: &[Vec<f64>]) -> Array2<f64> {
    let d = features.first().map_or(0, |f| f.len());
    Array2::from_shape_fn((features.len(), d), |(i, j)| features[i][j])
}

fn from_matrix(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn features_for(
    prep: &Prepared,
    idx: &[usize],
    model: &FusionPathformer,
    featurization: Featurization,
) -> Result<(Vec<Window>, Vec<Vec<f64>>)> {
    let windows: Vec<Window> = idx.iter().map(|&i| prep.windows[i].clone()).collect();
    let m = match featurization {
        Featurization::Without => None,
        Featurization::With => Some(model),
    };
    let f = window_features(&windows, m)?;
    Ok((windows, f))
}

/// Fits one classifier per (POD index, kind, featurization) on the training
/// split: features are z-scored with training statistics and the classes
/// balanced by undersampling before fitting.
pub fn fit_classifiers(prep: &Prepared, model: &FusionPathformer, s: &Settings) -> Result<Vec<TrainedClassifier>> {
    let mut jobs = Vec::new();
    for featurization in Featurization::ALL {
        let (windows, raw) = features_for(prep, &prep.split.train, model, featurization)?;
        let scaler = Standardizer::fit([&to_matrix(&raw)])?;
        let scaled = from_matrix(&scaler.apply(&to_matrix(&raw))?);
        for pod in 1..=3 {
            let data = label_features(&scaled, &windows, pod)?;
            let seed = s.stage_seed(&format!("undersample/pod{pod}/{}", featurization.as_str()));
            let balanced = undersample(&data, seed)?;
            for &kind in &s.classify.kinds {
                jobs.push((pod, featurization, kind, scaler.clone(), balanced.clone()));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(pod_index, featurization, kind, scaler, data)| {
            Ok(TrainedClassifier {
                pod_index,
                featurization,
                scaler,
                model: train_linear(&data, kind, s.classify.l2)?,
            })
        })
        .collect()
}

/// Scores the test split with every classifier; rows are sorted.
pub fn evaluate(prep: &Prepared, model: &FusionPathformer, classifiers: &[TrainedClassifier]) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(classifiers.len());
    for featurization in Featurization::ALL {
        let selected: Vec<&TrainedClassifier> = classifiers
            .iter()
            .filter(|c| c.featurization == featurization)
            .collect();
        if selected.is_empty() {
            continue;
        }
        let (windows, raw) = features_for(prep, &prep.split.test, model, featurization)?;
        for c in selected {
            let scaled = from_matrix(&c.scaler.apply(&to_matrix(&raw))?);
            let data: Vec<FeatureVector> = label_features(&scaled, &windows, c.pod_index)?;
            let labels: Vec<bool> = data.iter().map(|f| f.label).collect();
            let sc = scores(&c.model, &data)?;
            let preds = predict(&c.model, &data, None)?;
            rows.push(MetricRow::compute(
                c.pod_index,
                c.model.kind,
                featurization,
                &labels,
                &sc,
                &preds,
            )?);
        }
    }
    Ok(MetricReport { rows }.sorted())
}

/// Result of a full run on processed records.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub prepared: Prepared,
    pub model: FusionPathformer,
    pub history: Vec<EpochLoss>,
    pub classifiers: Vec<TrainedClassifier>,
    pub report: MetricReport,
}

pub fn run(processed: &[MultiModalRecord], s: &Settings) -> Result<RunOutput> {
    let errs = s.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let prepared = prepare(processed, s)?;
    let (model, history) = pretrain(&prepared, s)?;
    let classifiers = fit_classifiers(&prepared, &model, s)?;
    let report = evaluate(&prepared, &model, &classifiers)?;
    Ok(RunOutput {
        prepared,
        model,
        history,
        classifiers,
        report,
    })
}

/// Metrics of one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub period: String,
    pub final_loss: LossBreakdown,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    pub fn render(&self) -> String {
        let mut out = String::from(
            "lambda\tperiod\tindicator\tmodel\trepresentation\tsensitivity\tspecificity\tyouden\tauroc\tauprc\tfinal_mse\tfinal_trend\n",
        );
        for p in &self.points {
            for r in &p.report.rows {
                let _ = writeln!(
                    out,
                    "{}\t{}\tPOD{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    p.lambda,
                    p.period,
                    r.pod_index,
                    r.kind.as_str(),
                    r.featurization.as_str(),
                    r.sensitivity,
                    r.specificity,
                    r.youden,
                    r.auroc,
                    r.auprc,
                    p.final_loss.mse,
                    p.final_loss.trend
                );
            }
        }
        out
    }
}

fn point(processed: &[MultiModalRecord], s: &Settings) -> Result<SweepPoint> {
    let out = run(processed, s)?;
    Ok(SweepPoint {
        lambda: s.train.lambda,
        period: period_label(s.model.window_len, s.preprocess.downsample_interval),
        final_loss: out.history.last().map(|h| h.loss).unwrap_or_default(),
        report: out.report,
    })
}

/// Reruns pretraining and classification for each TrendLoss strength on the
/// same processed cohort, split and seeds.
pub fn sweep_lambda(processed: &[MultiModalRecord], s: &Settings, lambdas: &[f64]) -> Result<SweepTable> {
    if lambdas.is_empty() {
        return Err(Error::config("lambda grid is empty"));
    }
    let points = lambdas
        .par_iter()
        .map(|&lambda| {
            let mut g = s.clone();
            g.train.lambda = lambda;
            point(processed, &g)
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable { points })
}

/// Varies the prediction period by re-preprocessing the raw cohort at each
/// downsampling interval while keeping the window length fixed.
pub fn sweep_period(
    raw: &[MultiModalRecord],
    ranges: &RangeTable,
    s: &Settings,
    intervals: &[f64],
) -> Result<SweepTable> {
    if intervals.is_empty() {
        return Err(Error::config("period grid is empty"));
    }
    let points = intervals
        .par_iter()
        .map(|&interval| {
            let mut g = s.clone();
            g.preprocess.downsample_interval = interval;
            let (processed, _) = preprocess_cohort(raw, ranges, &g.preprocess)?;
            point(&processed, &g)
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable { points })
}

#[cfg(test)]
mod tests;
