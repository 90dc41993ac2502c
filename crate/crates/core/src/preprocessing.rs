//! Record cleaning and resampling.
//!
//! The chain runs in a fixed order: sanity check, patient typing, anomaly
//! repair (TYPE I only), linear interpolation, alignment to a common grid,
//! downsampling and exponential smoothing. Standardization is fitted later on
//! the training windows only, see [`Standardizer`].

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{MultiModalRecord, PatientType, Window};
use crate::error::{Error, Result};

/// Acceptable closed interval `[lo, hi]` per channel id (`<modality>.<index>`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RangeTable {
    pub ranges: BTreeMap<String, [f64; 2]>,
}

impl RangeTable {
    /// Ranges for the default synthetic modalities (vital signs, hemodynamics, aEEG).
    pub fn default_table() -> Self {
        let ranges = [
            ("vitals.0", [20.0, 220.0]), // heart rate, bpm
            ("vitals.1", [30.0, 43.0]),  // temperature, degC
            ("vitals.2", [2.0, 60.0]),   // respiratory rate, /min
            ("hemo.0", [20.0, 180.0]),   // mean arterial pressure, mmHg
            ("hemo.1", [-5.0, 40.0]),    // central venous pressure, mmHg
            ("aeeg.0", [0.0, 200.0]),    // upper margin, uV
            ("aeeg.1", [0.0, 40.0]),     // lower margin, uV
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self { ranges }
    }

    /// Parses a TOML table of `"<channel>" = [lo, hi]` entries.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: RangeTable = toml::from_str(text).map_err(|e| Error::config(format!("range table: {e}")))?;
        let errs = table.validate();
        if errs.is_empty() {
            Ok(table)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Vec<String> {
        self.ranges
            .iter()
            .filter(|(_, [lo, hi])| !(lo < hi))
            .map(|(k, [lo, hi])| format!("range for {k}: lo {lo} must be < hi {hi}"))
            .collect()
    }

    pub fn get(&self, channel: &str) -> Result<(f64, f64)> {
        self.ranges
            .get(channel)
            .map(|[lo, hi]| (*lo, *hi))
            .ok_or_else(|| Error::MissingRange {
                channel: channel.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Anomalous fraction above which a patient is TYPE II.
    pub type2_threshold: f64,
    /// Common grid spacing, seconds.
    pub base_resolution: f64,
    /// Spacing after downsampling, seconds; a multiple of `base_resolution`.
    pub downsample_interval: f64,
    pub smoothing_alpha: f64,
    /// Centered window length (timestamps) for the dynamic mean repair.
    pub repair_window: usize,
    /// Keep TYPE II patients in the processed cohort.
    pub include_type2: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            type2_threshold: 0.10,
            base_resolution: 1.0,
            downsample_interval: 10.0,
            smoothing_alpha: 0.3,
            repair_window: 61,
            include_type2: false,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.type2_threshold > 0.0 && self.type2_threshold < 1.0) {
            errs.push("preprocess.type2_threshold must lie in (0, 1)".into());
        }
        if !(self.base_resolution > 0.0) {
            errs.push("preprocess.base_resolution must be > 0".into());
        }
        if !(self.downsample_interval >= self.base_resolution) {
            errs.push("preprocess.downsample_interval must be >= base_resolution".into());
        } else if self.downsample_factor().is_none() {
            errs.push("preprocess.downsample_interval must be a whole multiple of base_resolution".into());
        }
        if !(self.smoothing_alpha > 0.0 && self.smoothing_alpha <= 1.0) {
            errs.push("preprocess.smoothing_alpha must lie in (0, 1]".into());
        }
        if self.repair_window == 0 {
            errs.push("preprocess.repair_window must be >= 1".into());
        }
        errs
    }

    pub fn downsample_factor(&self) -> Option<usize> {
        whole_ratio(self.downsample_interval, self.base_resolution)
    }
}

fn whole_ratio(a: f64, b: f64) -> Option<usize> {
    let k = (a / b).round();
    (k >= 1.0 && (a / b - k).abs() < 1e-9).then_some(k as usize)
}

/// Marks values outside their channel's closed range, and non-finite values.
pub fn sanity_check(record: &MultiModalRecord, ranges: &RangeTable) -> Result<Vec<Array2<bool>>> {
    record
        .modalities
        .iter()
        .map(|m| {
            let bounds: Vec<(f64, f64)> = m.spec.channel_ids().map(|c| ranges.get(&c)).collect::<Result<_>>()?;
            Ok(Array2::from_shape_fn(m.values.raw_dim(), |(t, c)| {
                let v = m.values[[t, c]];
                let (lo, hi) = bounds[c];
                !(v.is_finite() && v >= lo && v <= hi)
            }))
        })
        .collect()
}

pub fn anomaly_fraction(mask: &[Array2<bool>]) -> Result<f64> {
    let total: usize = mask.iter().map(|m| m.len()).sum();
    if total == 0 {
        return Err(Error::Dataset("cannot type an empty record".into()));
    }
    let flagged: usize = mask.iter().map(|m| m.iter().filter(|b| **b).count()).sum();
    Ok(flagged as f64 / total as f64)
}

/// TYPE II iff the anomalous fraction strictly exceeds `threshold`.
pub fn classify_patient_type(mask: &[Array2<bool>], threshold: f64) -> Result<PatientType> {
    Ok(if anomaly_fraction(mask)? > threshold {
        PatientType::TypeIi
    } else {
        PatientType::TypeI
    })
}

/// Replaces each masked value by the mean of the unmasked values of the same
/// channel in a centered window of `window` timestamps. Values with no
/// unmasked neighbour become missing. Unmasked values are never changed.
pub fn repair_anomalies(record: &MultiModalRecord, mask: &[Array2<bool>], window: usize) -> Result<MultiModalRecord> {
    if mask.len() != record.modalities.len() {
        return Err(Error::shape("repair mask", record.modalities.len(), mask.len()));
    }
    let before = (window.max(1) - 1) / 2;
    let after = window.max(1) / 2;
    let mut out = record.clone();
    for ((m, mk), om) in record.modalities.iter().zip(mask).zip(out.modalities.iter_mut()) {
        if m.values.dim() != mk.dim() {
            return Err(Error::shape(
                "repair mask",
                format!("{:?}", m.values.dim()),
                format!("{:?}", mk.dim()),
            ));
        }
        let n = m.len();
        for c in 0..m.spec.dims {
            for t in (0..n).filter(|&t| mk[[t, c]]) {
                let lo = t.saturating_sub(before);
                let hi = (t + after).min(n - 1);
                let (sum, count) = (lo..=hi)
                    .filter(|&u| !mk[[u, c]])
                    .fold((0.0, 0usize), |(s, k), u| (s + m.values[[u, c]], k + 1));
                om.values[[t, c]] = if count > 0 { sum / count as f64 } else { f64::NAN };
            }
        }
    }
    for om in &mut out.anomaly_mask {
        om.fill(false);
    }
    Ok(out)
}

/// Fills missing values by straight lines between observed neighbours and
/// extends the first/last observation over leading/trailing gaps.
pub fn interpolate_missing(record: &MultiModalRecord) -> Result<MultiModalRecord> {
    let mut out = record.clone();
    for m in &mut out.modalities {
        let ids: Vec<String> = m.spec.channel_ids().collect();
        for (c, mut col) in m.values.axis_iter_mut(Axis(1)).enumerate() {
            let observed: Vec<usize> = (0..col.len()).filter(|&t| col[t].is_finite()).collect();
            let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
                if col.is_empty() {
                    continue;
                }
                return Err(Error::Unrecoverable {
                    channel: ids[c].clone(),
                });
            };
            for t in 0..first {
                col[t] = col[first];
            }
            for t in last + 1..col.len() {
                col[t] = col[last];
            }
            for pair in observed.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                let (va, vb) = (col[a], col[b]);
                for t in a + 1..b {
                    let f = (t - a) as f64 / (b - a) as f64;
                    col[t] = va + f * (vb - va);
                }
            }
        }
    }
    Ok(out)
}

/// Resamples every modality onto a common grid of `base_resolution` seconds
/// covering the span shared by all modalities; each grid point holds the
/// latest native sample at or before it.
pub fn align_temporal(record: &MultiModalRecord, base_resolution: f64) -> Result<MultiModalRecord> {
    let start = record
        .modalities
        .iter()
        .map(|m| m.offset_seconds)
        .fold(f64::NEG_INFINITY, f64::max);
    let end = record
        .modalities
        .iter()
        .map(|m| m.offset_seconds + m.span_seconds())
        .fold(f64::INFINITY, f64::min);
    if record.modalities.is_empty() || !(end > start) {
        return Err(Error::NoOverlap {
            patient: record.patient_id.clone(),
        });
    }
    let n = ((end - start) / base_resolution + 1e-9).floor() as usize;
    if n == 0 {
        return Err(Error::NoOverlap {
            patient: record.patient_id.clone(),
        });
    }
    let mut out = record.clone();
    for ((m, mask), (om, omask)) in record
        .modalities
        .iter()
        .zip(&record.anomaly_mask)
        .zip(out.modalities.iter_mut().zip(out.anomaly_mask.iter_mut()))
    {
        let source: Vec<usize> = (0..n)
            .map(|k| {
                let t = start + k as f64 * base_resolution - m.offset_seconds;
                ((t / m.spec.native_resolution + 1e-9).floor() as usize).min(m.len() - 1)
            })
            .collect();
        om.values = m.values.select(Axis(0), &source);
        *omask = mask.select(Axis(0), &source);
        om.spec.native_resolution = base_resolution;
        om.offset_seconds = start;
    }
    Ok(out)
}

/// Keeps every `interval / resolution`-th sample of an aligned record,
/// dropping an incomplete tail.
pub fn downsample(record: &MultiModalRecord, interval: f64) -> Result<MultiModalRecord> {
    let len = record
        .aligned_len()
        .ok_or_else(|| Error::config("downsample needs an aligned record"))?;
    let res = record.modalities[0].spec.native_resolution;
    let k = whole_ratio(interval, res).ok_or_else(|| {
        Error::config(format!(
            "interval {interval} is not a whole multiple of resolution {res}"
        ))
    })?;
    let rows: Vec<usize> = (0..len / k).map(|i| i * k).collect();
    let mut out = record.clone();
    for (m, mask) in out.modalities.iter_mut().zip(out.anomaly_mask.iter_mut()) {
        m.values = m.values.select(Axis(0), &rows);
        *mask = mask.select(Axis(0), &rows);
        m.spec.native_resolution = interval;
    }
    Ok(out)
}

/// `s_0 = x_0`, `s_t = alpha * x_t + (1 - alpha) * s_{t-1}` per channel.
pub fn exp_smooth(record: &MultiModalRecord, alpha: f64) -> Result<MultiModalRecord> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::config(format!("smoothing alpha {alpha} outside (0, 1]")));
    }
    let mut out = record.clone();
    for m in &mut out.modalities {
        for mut col in m.values.axis_iter_mut(Axis(1)) {
            for t in 1..col.len() {
                col[t] = alpha * col[t] + (1.0 - alpha) * col[t - 1];
            }
        }
    }
    Ok(out)
}

/// Per-patient record of what the chain did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub patient_id: String,
    pub anomaly_fraction: f64,
    pub patient_type: PatientType,
    pub repaired: usize,
    pub unrepairable: usize,
    pub interpolated: usize,
    pub aligned_len: usize,
    pub final_len: usize,
    pub excluded: bool,
}

fn count_missing(record: &MultiModalRecord) -> usize {
    record
        .modalities
        .iter()
        .map(|m| m.values.iter().filter(|v| !v.is_finite()).count())
        .sum()
}

/// Runs the full chain on one record.
pub fn preprocess_record(
    record: &MultiModalRecord,
    ranges: &RangeTable,
    cfg: &PreprocessConfig,
) -> Result<(MultiModalRecord, AuditEntry)> {
    record.check_shapes()?;
    let mask = sanity_check(record, ranges)?;
    let fraction = anomaly_fraction(&mask)?;
    let patient_type = classify_patient_type(&mask, cfg.type2_threshold)?;
    let mut current = record.clone();
    current.anomaly_mask = mask.clone();
    let mut repaired = 0;
    let mut unrepairable = 0;
    if patient_type == PatientType::TypeI {
        let flagged: usize = mask.iter().map(|m| m.iter().filter(|b| **b).count()).sum();
        current = repair_anomalies(&current, &mask, cfg.repair_window)?;
        unrepairable = count_missing(&current);
        repaired = flagged - unrepairable;
    }
    let interpolated = count_missing(&current);
    current = interpolate_missing(&current)?;
    current = align_temporal(&current, cfg.base_resolution)?;
    let aligned_len = current.aligned_len().unwrap_or(0);
    current = downsample(&current, cfg.downsample_interval)?;
    current = exp_smooth(&current, cfg.smoothing_alpha)?;
    current.anomaly_mask = sanity_check(&current, ranges)?;
    current.patient_type = patient_type;
    if current.has_missing() {
        return Err(Error::Dataset(format!(
            "patient {}: missing values survived preprocessing",
            record.patient_id
        )));
    }
    let audit = AuditEntry {
        patient_id: record.patient_id.clone(),
        anomaly_fraction: fraction,
        patient_type,
        repaired,
        unrepairable,
        interpolated,
        aligned_len,
        final_len: current.aligned_len().unwrap_or(0),
        excluded: patient_type == PatientType::TypeIi && !cfg.include_type2,
    };
    Ok((current, audit))
}

/// Processes every record in parallel. Returns kept records and the full
/// audit, both ordered by patient id.
pub fn preprocess_cohort(
    records: &[MultiModalRecord],
    ranges: &RangeTable,
    cfg: &PreprocessConfig,
) -> Result<(Vec<MultiModalRecord>, Vec<AuditEntry>)> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut results: Vec<(MultiModalRecord, AuditEntry)> = records
        .par_iter()
        .map(|r| preprocess_record(r, ranges, cfg))
        .collect::<Result<_>>()?;
    results.sort_by(|a, b| a.0.patient_id.cmp(&b.0.patient_id));
    let audit = results.iter().map(|(_, a)| a.clone()).collect();
    let kept = results
        .into_iter()
        .filter(|(_, a)| !a.excluded)
        .map(|(r, _)| r)
        .collect();
    Ok((kept, audit))
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-12;

impl Standardizer {
    /// Fits on the rows of all `data` matrices (population standard deviation).
    pub fn fit<'a>(data: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        let mut n = 0usize;
        let mats: Vec<&Array2<f64>> = data.into_iter().collect();
        for m in &mats {
            let s = m.sum_axis(Axis(0));
            sum = Some(match sum {
                Some(acc) if acc.len() == s.len() => acc + s,
                Some(acc) => return Err(Error::shape("standardizer", acc.len(), s.len())),
                None => s,
            });
            n += m.nrows();
        }
        let mean = sum.ok_or_else(|| Error::Dataset("standardizer needs training data".into()))? / n.max(1) as f64;
        for m in &mats {
            let d = (*m - &mean).mapv(|v| v * v).sum_axis(Axis(0));
            sq = Some(match sq {
                Some(acc) => acc + d,
                None => d,
            });
        }
        if n == 0 {
            return Err(Error::Dataset("standardizer needs at least one row".into()));
        }
        let std = sq.unwrap_or_default().mapv(|v| (v / n as f64).sqrt());
        for (c, s) in std.iter().enumerate() {
            if *s < MIN_STD {
                warn!("channel {c} has zero variance in the training split; it will be mapped to zeros");
            }
        }
        Ok(Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn apply(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.mean.len() {
            return Err(Error::shape("standardize", self.mean.len(), data.ncols()));
        }
        let mut out = data.clone();
        for (c, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, sd) = (self.mean[c], self.std[c]);
            if sd < MIN_STD {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| (v - mu) / sd);
            }
        }
        Ok(out)
    }

    /// Standardizes inputs and targets of every window.
    pub fn apply_windows(&self, windows: &[Window]) -> Result<Vec<Window>> {
        windows
            .iter()
            .map(|w| {
                Ok(Window {
                    input: self.apply(&w.input)?,
                    target: self.apply(&w.target)?,
                    ..w.clone()
                })
            })
            .collect()
    }

    /// Fits on the inputs of the given training windows.
    pub fn fit_windows(windows: &[Window]) -> Result<Self> {
        Self::fit(windows.iter().map(|w| &w.input))
    }
}

#[cfg(test)]
pub(crate) fn single_modality(name: &str, res: f64, values: Array2<f64>) -> crate::datamodel::ModalityData {
    use crate::datamodel::{ModalityData, ModalitySpec};
    let spec = ModalitySpec::new(name, values.ncols(), res);
    ModalityData::new(spec, values).expect("column count matches spec")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ModalityData, PodLabels};
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    fn record(mods: Vec<ModalityData>) -> MultiModalRecord {
        MultiModalRecord::new("P1", mods, PodLabels([true, false, false]))
    }

    fn col(values: &[f64]) -> MultiModalRecord {
        let a = Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap();
        record(vec![single_modality("x", 1.0, a)])
    }

    fn table(lo: f64, hi: f64) -> RangeTable {
        RangeTable {
            ranges: [("x.0".to_string(), [lo, hi])].into_iter().collect(),
        }
    }

    fn values(r: &MultiModalRecord) -> Vec<f64> {
        r.modalities[0].values.column(0).to_vec()
    }

    #[test]
    fn in_range_values_are_clear_and_bounds_are_inclusive() {
        let r = col(&[0.0, 5.0, 10.0]);
        let mask = sanity_check(&r, &table(0.0, 10.0)).unwrap();
        assert!(mask[0].iter().all(|b| !b));
        let mask = sanity_check(&col(&[10.0 + 1e-9, f64::NAN, 3.0]), &table(0.0, 10.0)).unwrap();
        assert_eq!(mask[0].column(0).to_vec(), vec![true, true, false]);
    }

    #[test]
    fn missing_channel_named_in_error() {
        let r = record(vec![single_modality("y", 1.0, array![[1.0]])]);
        assert!(
            matches!(sanity_check(&r, &table(0.0, 1.0)), Err(Error::MissingRange { ref channel }) if channel == "y.0")
        );
    }

    #[test]
    fn injected_fraction_is_recovered() {
        let mut rng = crate::seed::rng(11);
        let n = 1000;
        let mut data = Array2::from_shape_fn((n, 3), |_| rng.random_range(0.0..10.0));
        let mut positions = rand::seq::index::sample(&mut rng, 3 * n, 210).into_vec();
        positions.sort();
        for p in &positions {
            data[[p / 3, p % 3]] = if p % 2 == 0 { 11.0 } else { -1.0 };
        }
        let r = record(vec![single_modality("x", 1.0, data)]);
        let t = RangeTable {
            ranges: (0..3).map(|c| (format!("x.{c}"), [0.0, 10.0])).collect(),
        };
        let mask = sanity_check(&r, &t).unwrap();
        assert_eq!(anomaly_fraction(&mask).unwrap(), 0.07);
    }

    #[test]
    fn type_threshold_is_strict() {
        let mask = |k: usize| vec![Array2::from_shape_fn((100, 1), |(t, _)| t < k)];
        assert_eq!(classify_patient_type(&mask(11), 0.10).unwrap(), PatientType::TypeIi);
        assert_eq!(classify_patient_type(&mask(10), 0.10).unwrap(), PatientType::TypeI);
        assert_eq!(classify_patient_type(&mask(0), 0.10).unwrap(), PatientType::TypeI);
        assert!(classify_patient_type(&[Array2::from_elem((0, 1), false)], 0.1).is_err());
    }

    #[test]
    fn repair_uses_neighbour_mean() {
        let r = col(&[1.0, 999.0, 3.0]);
        let mask = sanity_check(&r, &table(0.0, 10.0)).unwrap();
        assert_eq!(values(&repair_anomalies(&r, &mask, 3).unwrap()), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn fully_anomalous_channel_fails_at_interpolation() {
        let r = col(&[99.0, 98.0, 97.0]);
        let mask = sanity_check(&r, &table(0.0, 10.0)).unwrap();
        let repaired = repair_anomalies(&r, &mask, 3).unwrap();
        assert!(values(&repaired).iter().all(|v| v.is_nan()));
        assert!(
            matches!(interpolate_missing(&repaired), Err(Error::Unrecoverable { ref channel }) if channel == "x.0")
        );
    }

    #[test]
    fn repair_leaves_no_anomaly_and_keeps_clean_values() {
        let mut rng = crate::seed::rng(5);
        let n = 400;
        let orig = Array2::from_shape_fn((n, 2), |_| rng.random_range(0.0..10.0));
        let mut data = orig.clone();
        let hits = rand::seq::index::sample(&mut rng, 2 * n, 40).into_vec();
        for p in &hits {
            data[[p / 2, p % 2]] = 50.0;
        }
        let r = record(vec![single_modality("x", 1.0, data)]);
        let t = RangeTable {
            ranges: (0..2).map(|c| (format!("x.{c}"), [0.0, 10.0])).collect(),
        };
        let mask = sanity_check(&r, &t).unwrap();
        let fixed = repair_anomalies(&r, &mask, 61).unwrap();
        let recheck = sanity_check(&fixed, &t).unwrap();
        assert!(recheck[0].iter().all(|b| !b));
        for ((t_, c), v) in orig.indexed_iter() {
            if !mask[0][[t_, c]] {
                assert_eq!(fixed.modalities[0].values[[t_, c]], *v);
            }
        }
    }

    #[test]
    fn interpolation_hand_cases() {
        assert_eq!(
            values(&interpolate_missing(&col(&[1.0, f64::NAN, 3.0])).unwrap()),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            values(&interpolate_missing(&col(&[f64::NAN, 5.0, f64::NAN])).unwrap()),
            vec![5.0, 5.0, 5.0]
        );
    }

    #[test]
    fn linear_signal_recovered_exactly() {
        let mut rng = crate::seed::rng(2);
        let n = 200;
        let line: Vec<f64> = (0..n).map(|t| 0.25 * t as f64 - 3.0).collect();
        let mut gappy = line.clone();
        for v in gappy.iter_mut().skip(1).take(n - 2) {
            if rng.random_bool(0.3) {
                *v = f64::NAN;
            }
        }
        let out = values(&interpolate_missing(&col(&gappy)).unwrap());
        for (a, b) in out.iter().zip(&line) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hold_resampling_of_coarse_modality() {
        let fine = single_modality("f", 1.0, Array2::from_shape_fn((10, 1), |(t, _)| t as f64));
        let coarse = single_modality("c", 5.0, array![[7.0], [9.0]]);
        let out = align_temporal(&record(vec![fine, coarse]), 1.0).unwrap();
        assert_eq!(out.aligned_len(), Some(10));
        assert_eq!(
            out.modalities[1].values.column(0).to_vec(),
            vec![7.0, 7.0, 7.0, 7.0, 7.0, 9.0, 9.0, 9.0, 9.0, 9.0]
        );
    }

    #[test]
    fn disjoint_spans_rejected() {
        let a = single_modality("a", 1.0, array![[1.0], [2.0]]);
        let b = single_modality("b", 1.0, array![[1.0]]).with_offset(5.0);
        assert!(matches!(
            align_temporal(&record(vec![a, b]), 1.0),
            Err(Error::NoOverlap { .. })
        ));
    }

    #[test]
    fn aligned_length_matches_brute_force_grid() {
        let mut rng = crate::seed::rng(9);
        for _ in 0..50 {
            let mods: Vec<_> = (0..3)
                .map(|i| {
                    let res = [1.0, 2.0, 5.0, 10.0][rng.random_range(0..4)];
                    let n = rng.random_range(3..40);
                    single_modality(&format!("m{i}"), res, Array2::from_shape_fn((n, 1), |(t, _)| t as f64))
                })
                .collect();
            let r = record(mods.clone());
            let out = align_temporal(&r, 1.0).unwrap();
            // brute force: walk second by second while every modality still has a sample
            let mut len = 0;
            while mods
                .iter()
                .all(|m| ((len as f64) / m.spec.native_resolution).floor() < m.len() as f64)
            {
                len += 1;
            }
            assert_eq!(out.aligned_len(), Some(len));
            for (m, om) in mods.iter().zip(&out.modalities) {
                for s in 0..len {
                    let idx = (s as f64 / m.spec.native_resolution).floor() as usize;
                    assert_eq!(om.values[[s, 0]], m.values[[idx, 0]]);
                }
            }
        }
    }

    #[test]
    fn smoothing_cases() {
        assert_eq!(
            values(&exp_smooth(&col(&[0.0, 2.0, 2.0]), 0.5).unwrap()),
            vec![0.0, 1.0, 1.5]
        );
        let x = [3.0, -1.0, 4.5];
        assert_eq!(values(&exp_smooth(&col(&x), 1.0).unwrap()), x.to_vec());
        assert_eq!(values(&exp_smooth(&col(&[2.5; 6]), 0.3).unwrap()), vec![2.5; 6]);
        assert!(exp_smooth(&col(&x), 0.0).is_err());
    }

    #[test]
    fn downsample_drops_tail() {
        let r = col(&(0..25).map(|v| v as f64).collect::<Vec<_>>());
        let d = downsample(&r, 10.0).unwrap();
        assert_eq!(values(&d), vec![0.0, 10.0]);
        assert_eq!(d.modalities[0].spec.native_resolution, 10.0);
    }

    #[test]
    fn standardizer_uses_training_stats() {
        let train = array![[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]];
        let s = Standardizer::fit([&train]).unwrap();
        let z = s.apply(&train).unwrap();
        let c0 = z.column(0);
        let mean = c0.mean().unwrap();
        let sd = (c0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
        assert!(z.column(1).iter().all(|v| *v == 0.0));

        let test = array![[10.0, 1.0], [12.0, 2.0]];
        let with_train = s.apply(&test).unwrap();
        let with_self = Standardizer::fit([&test]).unwrap().apply(&test).unwrap();
        assert_ne!(with_train, with_self);
        assert_eq!(with_train[[0, 0]], (10.0 - 3.0) / (8.0f64 / 3.0).sqrt());
    }

    #[test]
    fn range_table_toml() {
        let t = RangeTable::from_toml_str("\"hemo.0\" = [20.0, 180.0]\n\"x.1\" = [0, 1]\n").unwrap();
        assert_eq!(t.get("hemo.0").unwrap(), (20.0, 180.0));
        assert!(RangeTable::from_toml_str("\"a.0\" = [3.0, 1.0]\n\"b.0\" = [2, 2]").is_err());
    }

    #[test]
    fn config_validation_lists_everything() {
        let cfg = PreprocessConfig {
            type2_threshold: 1.5,
            smoothing_alpha: 0.0,
            repair_window: 0,
            downsample_interval: 0.5,
            ..PreprocessConfig::default()
        };
        assert_eq!(cfg.validate().len(), 4);
    }

    fn gappy_record(seed: u64) -> MultiModalRecord {
        let mut rng = crate::seed::rng(seed);
        let mk = |name: &str, res: f64, n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut v = Array2::from_shape_fn((n, 2), |_| rng.random_range(1.0..9.0));
            for x in v.iter_mut() {
                if rng.random_bool(0.1) {
                    *x = f64::NAN;
                }
            }
            single_modality(name, res, v)
        };
        record(vec![
            mk("a", 1.0, 120, &mut rng),
            mk("b", 2.0, 55, &mut rng),
            mk("c", 5.0, 26, &mut rng),
        ])
    }

    proptest! {
        #[test]
        fn interpolation_and_alignment_idempotent(seed in 0u64..500) {
            let r = gappy_record(seed);
            let once = interpolate_missing(&r).unwrap();
            prop_assert_eq!(&interpolate_missing(&once).unwrap(), &once);
            let aligned = align_temporal(&once, 1.0).unwrap();
            prop_assert_eq!(&align_temporal(&aligned, 1.0).unwrap(), &aligned);
        }

        #[test]
        fn full_chain_leaves_only_finite_values(seed in 0u64..200) {
            let r = gappy_record(seed);
            let t = RangeTable {
                ranges: ["a", "b", "c"].iter().flat_map(|m| (0..2).map(move |c| (format!("{m}.{c}"), [0.0, 8.5]))).collect(),
            };
            let cfg = PreprocessConfig { downsample_interval: 2.0, include_type2: true, ..PreprocessConfig::default() };
            let (out, audit) = preprocess_record(&r, &t, &cfg).unwrap();
            prop_assert!(out.modalities.iter().all(|m| m.values.iter().all(|v| v.is_finite())));
            prop_assert_eq!(audit.final_len, 55);
        }
    }

    #[test]
    fn rerunning_chain_is_a_no_op_without_smoothing() {
        let r = gappy_record(1);
        let t = RangeTable {
            ranges: ["a", "b", "c"]
                .iter()
                .flat_map(|m| (0..2).map(move |c| (format!("{m}.{c}"), [0.0, 10.0])))
                .collect(),
        };
        let cfg = PreprocessConfig {
            smoothing_alpha: 1.0,
            downsample_interval: 2.0,
            ..PreprocessConfig::default()
        };
        let (once, _) = preprocess_record(&r, &t, &cfg).unwrap();
        let (twice, _) = preprocess_record(&once, &t, &cfg).unwrap();
        assert_eq!(once.modalities, twice.modalities);
    }
}
