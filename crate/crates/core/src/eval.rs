//! Metrics, report tables and embedding export.
//!
//! AUROC is the Mann-Whitney statistic with tied pairs counted half. AUPRC is
//! the step-wise sum `sum (R_k - R_{k-1}) P_k` over a descending-score sweep
//! in which equal scores form one threshold block.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::classify::ClassifierKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(labels: &[bool], predictions: &[bool]) -> Result<ConfusionCounts> {
    if labels.len() != predictions.len() {
        return Err(Error::shape("predictions", labels.len(), predictions.len()));
    }
    let mut c = ConfusionCounts::default();
    for (&l, &p) in labels.iter().zip(predictions) {
        match (l, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `TP / (TP + FN)`.
pub fn sensitivity(c: &ConfusionCounts) -> Result<f64> {
    if c.tp + c.fn_ == 0 {
        return Err(Error::Metric {
            metric: "sensitivity",
            reason: "no positive samples".into(),
        });
    }
    Ok(c.tp as f64 / (c.tp + c.fn_) as f64)
}

/// `TN / (TN + FP)`.
pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    if c.tn + c.fp == 0 {
        return Err(Error::Metric {
            metric: "specificity",
            reason: "no negative samples".into(),
        });
    }
    Ok(c.tn as f64 / (c.tn + c.fp) as f64)
}

pub fn youden_index(sensitivity: f64, specificity: f64) -> f64 {
    sensitivity + specificity - 1.0
}

pub fn youden(c: &ConfusionCounts) -> Result<f64> {
    Ok(youden_index(sensitivity(c)?, specificity(c)?))
}

fn check_scores(metric: &'static str, labels: &[bool], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::shape("scores", labels.len(), scores.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric {
            metric,
            reason: "non-finite score".into(),
        });
    }
    let pos = labels.iter().filter(|l| **l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, ties in input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Probability that a random positive outscores a random negative, ties half.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_scores("auroc", labels, scores)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric {
            metric: "auroc",
            reason: format!("needs both classes ({pos} positive, {neg} negative)"),
        });
    }
    // Walk blocks of equal score from the top; each positive beats every
    // negative below its block and ties with those inside it.
    let order = descending(scores);
    let mut wins = 0.0;
    let mut neg_below = neg as f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0.0, 0.0);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1.0;
            } else {
                n += 1.0;
            }
            j += 1;
        }
        neg_below -= n;
        wins += p * neg_below + 0.5 * p * n;
        i = j;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise area under the precision-recall curve.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, _) = check_scores("auprc", labels, scores)?;
    if pos == 0 {
        return Err(Error::Metric {
            metric: "auprc",
            reason: "no positive samples".into(),
        });
    }
    let order = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Featurization {
    /// Channel means over the window.
    Without,
    /// Representation `h` from the pretrained model.
    With,
}

impl Featurization {
    pub const ALL: [Featurization; 2] = [Featurization::Without, Featurization::With];

    pub fn as_str(self) -> &'static str {
        match self {
            Featurization::Without => "without",
            Featurization::With => "with",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub pod_index: usize,
    pub kind: ClassifierKind,
    pub featurization: Featurization,
    pub sensitivity: f64,
    pub specificity: f64,
    pub youden: f64,
    pub auroc: f64,
    pub auprc: f64,
}

impl MetricRow {
    /// Computes every metric from test labels, scores and thresholded predictions.
    pub fn compute(
        pod_index: usize,
        kind: ClassifierKind,
        featurization: Featurization,
        labels: &[bool],
        scores: &[f64],
        predictions: &[bool],
    ) -> Result<Self> {
        let c = confusion(labels, predictions)?;
        let (sens, spec) = (sensitivity(&c)?, specificity(&c)?);
        Ok(Self {
            pod_index,
            kind,
            featurization,
            sensitivity: sens,
            specificity: spec,
            youden: youden_index(sens, spec),
            auroc: auroc(labels, scores)?,
            auprc: auprc(labels, scores)?,
        })
    }
}

pub const METRIC_HEADER: &str = "indicator\tmodel\trepresentation\tsensitivity\tspecificity\tyouden\tauroc\tauprc";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Rows ordered by indicator, model and featurization.
    pub fn sorted(mut self) -> Self {
        self.rows.sort_by_key(|a| (a.pod_index, a.kind, a.featurization));
        self
    }

    pub fn get(&self, pod_index: usize, kind: ClassifierKind, featurization: Featurization) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.pod_index == pod_index && r.kind == kind && r.featurization == featurization)
    }

    /// Tab-separated table with a header row.
    pub fn render(&self) -> String {
        let mut out = String::from(METRIC_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "POD{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.pod_index,
                r.kind.as_str(),
                r.featurization.as_str(),
                r.sensitivity,
                r.specificity,
                r.youden,
                r.auroc,
                r.auprc
            );
        }
        out
    }

    /// Parses the output of [`MetricReport::render`], skipping `#` comment lines.
    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            source_name: "metric report".into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
        match lines.next() {
            Some((_, h)) if h == METRIC_HEADER => {}
            other => return Err(err(other.map_or(1, |(i, _)| i + 1), "missing metric header".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(err(i + 1, format!("expected 8 fields, found {}", f.len())));
            }
            let pod_index = f[0]
                .strip_prefix("POD")
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| err(i + 1, format!("bad indicator '{}'", f[0])))?;
            let kind = match f[1] {
                "logistic" => ClassifierKind::Logistic,
                "svm" => ClassifierKind::Svm,
                other => return Err(err(i + 1, format!("bad model '{other}'"))),
            };
            let featurization = match f[2] {
                "with" => Featurization::With,
                "without" => Featurization::Without,
                other => return Err(err(i + 1, format!("bad representation '{other}'"))),
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(i + 1, format!("bad number '{s}'")));
            rows.push(MetricRow {
                pod_index,
                kind,
                featurization,
                sensitivity: num(f[3])?,
                specificity: num(f[4])?,
                youden: num(f[5])?,
                auroc: num(f[6])?,
                auprc: num(f[7])?,
            });
        }
        Ok(Self { rows })
    }
}

/// Human label for a prediction period of `window_len` samples spaced
/// `interval_seconds` apart, e.g. `30min` or `45s`.
pub fn period_label(window_len: usize, interval_seconds: f64) -> String {
    let secs = window_len as f64 * interval_seconds;
    if secs >= 60.0 && (secs / 60.0).fract() == 0.0 {
        format!("{}min", secs / 60.0)
    } else {
        format!("{secs}s")
    }
}

/// Principal axes of a data set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `k x d`, one unit-norm component per row, by descending variance.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    /// Fits `k` components. Each component's largest-magnitude loading is
    /// made positive (first such index on ties).
    pub fn fit(data: &Array2<f64>, k: usize) -> Result<Self> {
        let (n, d) = data.dim();
        if k == 0 || k > d {
            return Err(Error::config(format!("PCA needs 1..={d} components, got {k}")));
        }
        if n < k {
            return Err(Error::Dataset(format!(
                "PCA with {k} components needs at least {k} rows, got {n}"
            )));
        }
        let mean = data.mean_axis(Axis(0)).expect("n >= 1");
        let centered = data - &mean;
        let denom = (n.max(2) - 1) as f64;
        let cov = centered.t().dot(&centered) / denom;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Array2::zeros((k, d));
        let mut explained = Vec::with_capacity(k);
        for (r, &c) in order.iter().take(k).enumerate() {
            let v = eig.eigenvectors.column(c);
            let pivot = (0..d).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                components[[r, j]] = sign * v[j];
            }
            explained.push(eig.eigenvalues[c].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            explained_variance: explained,
        })
    }

    pub fn transform(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.mean.len() {
            return Err(Error::shape("PCA input width", self.mean.len(), data.ncols()));
        }
        Ok((data - &self.mean).dot(&self.components.t()))
    }

    pub fn inverse_transform(&self, coords: &Array2<f64>) -> Array2<f64> {
        coords.dot(&self.components) + &self.mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    None,
    Pca2d,
}

/// Tab-separated embedding table: patient, POD1..POD3 labels, then either the
/// raw components `h0..` or `pc1, pc2`.
pub fn export_embeddings(
    patient_ids: &[String],
    labels: &[[bool; 3]],
    embeddings: &Array2<f64>,
    projection: Projection,
) -> Result<String> {
    let n = embeddings.nrows();
    if patient_ids.len() != n || labels.len() != n {
        return Err(Error::shape(
            "embedding metadata",
            n,
            patient_ids.len().min(labels.len()),
        ));
    }
    let (values, names): (Array2<f64>, Vec<String>) = match projection {
        Projection::None => (
            embeddings.clone(),
            (0..embeddings.ncols()).map(|j| format!("h{j}")).collect(),
        ),
        Projection::Pca2d => {
            let pca = Pca::fit(embeddings, 2)?;
            (pca.transform(embeddings)?, vec!["pc1".into(), "pc2".into()])
        }
    };
    let mut out = String::from("patient_id\tpod1\tpod2\tpod3");
    for name in &names {
        let _ = write!(out, "\t{name}");
    }
    out.push('\n');
    for (i, row) in values.rows().into_iter().enumerate() {
        let l = labels[i];
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}",
            patient_ids[i],
            u8::from(l[0]),
            u8::from(l[1]),
            u8::from(l[2])
        );
        for v in row {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    Ok(out)
}
