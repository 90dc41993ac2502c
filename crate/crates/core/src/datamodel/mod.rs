//! Patient records, fixed-length windows, the synthetic cohort generator and
//! the on-disk cohort format.

mod io;
mod synth;

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{parse_record, read_cohort, read_record, render_record, write_cohort, write_record, RECORD_MAGIC};
pub use synth::{default_modalities, synth_generate, ChannelProfile, SynthConfig};

/// One acquisition source: a named group of `dims` channels sampled every
/// `native_resolution` seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dims: usize,
    pub native_resolution: f64,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, dims: usize, native_resolution: f64) -> Self {
        Self {
            name: name.into(),
            dims,
            native_resolution,
        }
    }

    /// Channel identifiers, `<modality>.<index>`.
    pub fn channel_ids(&self) -> impl Iterator<Item = String> + '_ {
        (0..self.dims).map(move |j| format!("{}.{}", self.name, j))
    }
}

/// Checks a list of modalities, returning every violation found.
pub fn validate_modalities(specs: &[ModalitySpec]) -> Vec<String> {
    let mut errs = Vec::new();
    if specs.is_empty() {
        errs.push("at least one modality is required".to_string());
    }
    for (i, m) in specs.iter().enumerate() {
        if m.name.is_empty() || m.name.contains(char::is_whitespace) {
            errs.push(format!("modality {i}: name must be non-empty without whitespace"));
        }
        if m.dims == 0 {
            errs.push(format!("modality {}: dims must be >= 1", m.name));
        }
        if !(m.native_resolution > 0.0 && m.native_resolution.is_finite()) {
            errs.push(format!("modality {}: native_resolution must be > 0", m.name));
        }
        if specs[..i].iter().any(|o| o.name == m.name) {
            errs.push(format!("modality name {} is not unique", m.name));
        }
    }
    errs
}

/// Total channel count `D` across modalities.
pub fn total_dims(specs: &[ModalitySpec]) -> usize {
    specs.iter().map(|m| m.dims).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PatientType {
    TypeI,
    TypeIi,
    Unclassified,
}

impl PatientType {
    pub fn as_str(self) -> &'static str {
        match self {
            PatientType::TypeI => "TYPE_I",
            PatientType::TypeIi => "TYPE_II",
            PatientType::Unclassified => "UNCLASSIFIED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "TYPE_I" => Some(PatientType::TypeI),
            "TYPE_II" => Some(PatientType::TypeIi),
            "UNCLASSIFIED" => Some(PatientType::Unclassified),
            _ => None,
        }
    }
}

/// POD indicators for postoperative days 1 to 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PodLabels(pub [bool; 3]);

impl PodLabels {
    /// Label for `pod` in `1..=3`.
    pub fn get(&self, pod: usize) -> bool {
        self.0[pod - 1]
    }
}

pub const POD_INDICES: [usize; 3] = [1, 2, 3];

/// Channel data of one modality. Missing samples are `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityData {
    pub spec: ModalitySpec,
    /// Time of the first sample, seconds.
    pub offset_seconds: f64,
    /// `samples x dims`.
    pub values: Array2<f64>,
}

impl ModalityData {
    pub fn new(spec: ModalitySpec, values: Array2<f64>) -> Result<Self> {
        if values.ncols() != spec.dims {
            return Err(Error::shape("modality values", spec.dims, values.ncols()));
        }
        Ok(Self {
            spec,
            offset_seconds: 0.0,
            values,
        })
    }

    pub fn with_offset(mut self, offset_seconds: f64) -> Self {
        self.offset_seconds = offset_seconds;
        self
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Seconds covered, counting each sample as holding for one resolution step.
    pub fn span_seconds(&self) -> f64 {
        self.len() as f64 * self.spec.native_resolution
    }
}

/// One patient's multi-modal time series.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalRecord {
    pub patient_id: String,
    pub modalities: Vec<ModalityData>,
    /// One mask per modality, same shape as its values.
    pub anomaly_mask: Vec<Array2<bool>>,
    pub labels: PodLabels,
    pub patient_type: PatientType,
}

impl MultiModalRecord {
    /// Builds a record with an all-clear anomaly mask.
    pub fn new(patient_id: impl Into<String>, modalities: Vec<ModalityData>, labels: PodLabels) -> Self {
        let anomaly_mask = modalities
            .iter()
            .map(|m| Array2::from_elem(m.values.raw_dim(), false))
            .collect();
        Self {
            patient_id: patient_id.into(),
            modalities,
            anomaly_mask,
            labels,
            patient_type: PatientType::Unclassified,
        }
    }

    pub fn specs(&self) -> Vec<ModalitySpec> {
        self.modalities.iter().map(|m| m.spec.clone()).collect()
    }

    pub fn channel_ids(&self) -> Vec<String> {
        self.modalities.iter().flat_map(|m| m.spec.channel_ids()).collect()
    }

    pub fn total_dims(&self) -> usize {
        self.modalities.iter().map(|m| m.spec.dims).sum()
    }

    /// Common length when every modality has the same number of samples.
    pub fn aligned_len(&self) -> Option<usize> {
        let first = self.modalities.first()?.len();
        self.modalities.iter().all(|m| m.len() == first).then_some(first)
    }

    /// Checks mask shapes against data shapes.
    pub fn check_shapes(&self) -> Result<()> {
        if self.anomaly_mask.len() != self.modalities.len() {
            return Err(Error::shape(
                "anomaly mask count",
                self.modalities.len(),
                self.anomaly_mask.len(),
            ));
        }
        for (m, mask) in self.modalities.iter().zip(&self.anomaly_mask) {
            if m.values.dim() != mask.dim() {
                return Err(Error::shape(
                    "anomaly mask",
                    format!("{:?}", m.values.dim()),
                    format!("{:?}", mask.dim()),
                ));
            }
        }
        Ok(())
    }

    /// Concatenates all modalities column-wise into a `T x D` matrix.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.aligned_len().is_none() {
            return Err(Error::EmptyCohort {
                patient: self.patient_id.clone(),
                detail: "modalities are not aligned to a common length".into(),
            });
        }
        let views: Vec<_> = self.modalities.iter().map(|m| m.values.view()).collect();
        concatenate(Axis(1), &views).map_err(|e| Error::shape("record matrix", "aligned modalities", e))
    }

    pub fn has_missing(&self) -> bool {
        self.modalities.iter().any(|m| m.values.iter().any(|v| !v.is_finite()))
    }
}

/// A training sample: an input segment followed by the forecast target.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// `window_len x D`.
    pub input: Array2<f64>,
    /// `horizon_len x D`, immediately after `input`.
    pub target: Array2<f64>,
    pub labels: PodLabels,
    pub patient_id: String,
    pub start_index: usize,
}

/// Number of windows `slide_windows` yields for the given geometry.
pub fn window_count(record_len: usize, window_len: usize, horizon_len: usize, stride: usize) -> usize {
    let span = window_len + horizon_len;
    if stride == 0 || record_len < span {
        0
    } else {
        (record_len - span) / stride + 1
    }
}

/// Cuts a preprocessed record into windows ordered by start index.
pub fn slide_windows(
    record: &MultiModalRecord,
    window_len: usize,
    horizon_len: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if window_len == 0 || stride == 0 {
        return Err(Error::config("window_len and stride must be >= 1"));
    }
    let data = record.to_matrix()?;
    if let Some((r, c)) = data.indexed_iter().find(|(_, v)| !v.is_finite()).map(|(i, _)| i) {
        return Err(Error::NonFinite {
            location: "slide_windows",
            row: r,
            col: c,
        });
    }
    let len = data.nrows();
    let n = window_count(len, window_len, horizon_len, stride);
    if n == 0 {
        return Err(Error::EmptyCohort {
            patient: record.patient_id.clone(),
            detail: format!("length {len} < window {window_len} + horizon {horizon_len}"),
        });
    }
    Ok((0..n)
        .map(|i| {
            let start = i * stride;
            Window {
                input: data.slice(s![start..start + window_len, ..]).to_owned(),
                target: data
                    .slice(s![start + window_len..start + window_len + horizon_len, ..])
                    .to_owned(),
                labels: record.labels,
                patient_id: record.patient_id.clone(),
                start_index: start,
            }
        })
        .collect())
}

/// Windows every record of a cohort, in record order.
pub fn slide_cohort(
    records: &[MultiModalRecord],
    window_len: usize,
    horizon_len: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(slide_windows(r, window_len, horizon_len, stride)?);
    }
    Ok(out)
}
