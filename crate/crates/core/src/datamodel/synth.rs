//! Deterministic synthetic cohort standing in for clinical recordings.
//!
//! Every channel is `baseline + scale * (amplitude * e_t + r_t + drift_t)` on a
//! 1-second grid, where `e_t` is fast unit-variance AR(1) noise and `r_t` a
//! sinusoidal rhythm of standard deviation 0.5 (period 10 to 40 minutes) whose period and
//! phase are drawn once per channel and shared by every patient, so it is
//! forecastable but carries no patient identity. Positive patients
//! get `amplitude = 1 + 0.5 * separability` and a slow sinusoidal drift of
//! height `0.5 * separability` with a random phase per channel; negatives have
//! `amplitude = 1` and no drift. The grid is then sampled at each modality's
//! native resolution, and a fraction of samples is deleted or replaced by
//! out-of-range values.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{validate_modalities, ModalityData, ModalitySpec, MultiModalRecord, PodLabels};
use crate::error::{Error, Result};
use crate::seed;

const AR_COEF: f64 = 0.9;
/// Period range of the shared rhythm in seconds.
const RHYTHM_PERIOD: std::ops::Range<f64> = 600.0..2400.0;
const RHYTHM_STD: f64 = 0.5;
/// Magnitude of injected out-of-range values, in channel scale units.
const ANOMALY_OFFSET: f64 = 80.0;

/// Physical baseline and fluctuation scale of one channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub baseline: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub positive_fraction: f64,
    pub modalities: Vec<ModalitySpec>,
    /// One profile per channel in modality order; empty means unit profiles.
    pub profiles: Vec<ChannelProfile>,
    /// Class-difference amplitude.
    pub separability: f64,
    pub seed: u64,
    pub length_seconds: usize,
    pub missing_fraction: f64,
    pub anomaly_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let (modalities, profiles) = default_modalities();
        Self {
            n_patients: 40,
            positive_fraction: 0.5,
            modalities,
            profiles,
            separability: 2.0,
            seed: 0,
            length_seconds: 3 * 3600,
            missing_fraction: 0.02,
            anomaly_fraction: 0.02,
        }
    }
}

/// Vital signs, hemodynamics and aEEG trend channels at mixed resolutions.
pub fn default_modalities() -> (Vec<ModalitySpec>, Vec<ChannelProfile>) {
    let p = |baseline, scale| ChannelProfile { baseline, scale };
    (
        vec![
            // heart rate, temperature, respiratory rate
            ModalitySpec::new("vitals", 3, 2.0),
            // mean arterial pressure, central venous pressure
            ModalitySpec::new("hemo", 2, 5.0),
            // aEEG upper and lower margin amplitude
            ModalitySpec::new("aeeg", 2, 1.0),
        ],
        vec![
            p(80.0, 6.0),
            p(36.8, 0.2),
            p(18.0, 1.5),
            p(80.0, 5.0),
            p(8.0, 1.0),
            p(25.0, 2.0),
            p(6.0, 0.5),
        ],
    )
}

impl SynthConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = validate_modalities(&self.modalities);
        if self.n_patients < 2 {
            errs.push("synth.n_patients must be >= 2".into());
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            errs.push(format!(
                "synth.positive_fraction must lie in (0, 1), got {}",
                self.positive_fraction
            ));
        }
        if !(self.separability >= 0.0 && self.separability.is_finite()) {
            errs.push("synth.separability must be >= 0".into());
        }
        if self.length_seconds == 0 {
            errs.push("synth.length_seconds must be >= 1".into());
        }
        for (name, f) in [
            ("missing_fraction", self.missing_fraction),
            ("anomaly_fraction", self.anomaly_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                errs.push(format!("synth.{name} must lie in [0, 1)"));
            }
        }
        let d: usize = self.modalities.iter().map(|m| m.dims).sum();
        if !self.profiles.is_empty() && self.profiles.len() != d {
            errs.push(format!(
                "synth.profiles has {} entries for {d} channels",
                self.profiles.len()
            ));
        }
        errs
    }

    fn profile(&self, channel: usize) -> ChannelProfile {
        self.profiles.get(channel).copied().unwrap_or(ChannelProfile {
            baseline: 0.0,
            scale: 1.0,
        })
    }
}

/// Generates the cohort described by `cfg`. Identical configs give identical output.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<MultiModalRecord>> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let labels = assign_labels(cfg);
    let mut rng = seed::stream(cfg.seed, "synth/rhythm");
    let n_channels: usize = cfg.modalities.iter().map(|m| m.dims).sum();
    let rhythm: Vec<(f64, f64)> = (0..n_channels)
        .map(|_| {
            (
                rng.random_range(RHYTHM_PERIOD),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    (0..cfg.n_patients)
        .map(|i| generate_patient(cfg, i, labels[i], &rhythm))
        .collect()
}

/// Exact positive count for POD1; POD2 and POD3 swap a few positives with
/// negatives so the indicators are correlated but not identical.
fn assign_labels(cfg: &SynthConfig) -> Vec<PodLabels> {
    let n = cfg.n_patients;
    let n_pos = ((n as f64 * cfg.positive_fraction).round() as usize).clamp(1, n - 1);
    let mut rng = seed::stream(cfg.seed, "synth/labels");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut pod1 = vec![false; n];
    for &i in &order[..n_pos] {
        pod1[i] = true;
    }
    let swap = |base: &[bool], count: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut out = base.to_vec();
        let mut pos: Vec<usize> = (0..n).filter(|&i| base[i]).collect();
        let mut neg: Vec<usize> = (0..n).filter(|&i| !base[i]).collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        let k = count.min(pos.len()).min(neg.len());
        for j in 0..k {
            out[pos[j]] = false;
            out[neg[j]] = true;
        }
        out
    };
    let pod2 = swap(&pod1, (n as f64 * 0.05).ceil() as usize, &mut rng);
    let pod3 = swap(&pod1, (n as f64 * 0.10).ceil() as usize, &mut rng);
    (0..n).map(|i| PodLabels([pod1[i], pod2[i], pod3[i]])).collect()
}

fn generate_patient(
    cfg: &SynthConfig,
    index: usize,
    labels: PodLabels,
    rhythm: &[(f64, f64)],
) -> Result<MultiModalRecord> {
    let mut rng = seed::stream(cfg.seed, &format!("synth/patient/{index}"));
    let positive = labels.get(1);
    let len = cfg.length_seconds;
    let (amplitude, drift_height) = if positive {
        (1.0 + 0.5 * cfg.separability, 0.5 * cfg.separability)
    } else {
        (1.0, 0.0)
    };
    let innovation = (1.0 - AR_COEF * AR_COEF).sqrt();

    let mut channel = 0;
    let mut modalities = Vec::with_capacity(cfg.modalities.len());
    for spec in &cfg.modalities {
        let res = spec.native_resolution;
        let n_samples = (len as f64 / res).floor() as usize;
        let mut values = Array2::<f64>::zeros((n_samples, spec.dims));
        for j in 0..spec.dims {
            let profile = cfg.profile(channel);
            let (r_period, r_phase) = rhythm[channel];
            channel += 1;
            let period = 3600.0 * rng.random_range(1.0..2.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut e: f64 = StandardNormal.sample(&mut rng);
            let mut grid = Vec::with_capacity(len);
            for t in 0..len {
                let z: f64 = StandardNormal.sample(&mut rng);
                e = AR_COEF * e + innovation * z;
                let drift = drift_height * (std::f64::consts::TAU * t as f64 / period + phase).sin();
                let r = RHYTHM_STD
                    * std::f64::consts::SQRT_2
                    * (std::f64::consts::TAU * t as f64 / r_period + r_phase).sin();
                grid.push(profile.baseline + profile.scale * (amplitude * e + r + drift));
            }
            for i in 0..n_samples {
                let t = ((i as f64 * res).floor() as usize).min(len - 1);
                let u: f64 = rng.random();
                values[[i, j]] = if u < cfg.missing_fraction {
                    f64::NAN
                } else if u < cfg.missing_fraction + cfg.anomaly_fraction {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    profile.baseline + sign * ANOMALY_OFFSET * profile.scale
                } else {
                    grid[t]
                };
            }
        }
        modalities.push(ModalityData::new(spec.clone(), values)?);
    }
    Ok(MultiModalRecord::new(format!("P{index:04}"), modalities, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, separability: f64) -> SynthConfig {
        SynthConfig {
            n_patients: 6,
            length_seconds: 600,
            seed,
            separability,
            ..SynthConfig::default()
        }
    }

    fn bits(records: &[MultiModalRecord]) -> Vec<u64> {
        records
            .iter()
            .flat_map(|r| r.modalities.iter().flat_map(|m| m.values.iter().map(|v| v.to_bits())))
            .collect()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_generate(&small(3, 2.0)).unwrap();
        let b = synth_generate(&small(3, 2.0)).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(
            a.iter().map(|r| r.labels).collect::<Vec<_>>(),
            b.iter().map(|r| r.labels).collect::<Vec<_>>()
        );
        let c = synth_generate(&small(4, 2.0)).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn rejects_degenerate_positive_fraction() {
        for f in [0.0, 1.0, -0.2] {
            let cfg = SynthConfig {
                positive_fraction: f,
                ..small(0, 1.0)
            };
            assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn labels_are_correlated_but_distinct() {
        let cfg = SynthConfig {
            n_patients: 40,
            length_seconds: 10,
            ..SynthConfig::default()
        };
        let recs = synth_generate(&cfg).unwrap();
        let count = |pod| recs.iter().filter(|r| r.labels.get(pod)).count();
        assert_eq!(count(1), 20);
        assert_eq!(count(2), 20);
        let agree = |pod| recs.iter().filter(|r| r.labels.get(1) == r.labels.get(pod)).count();
        assert!(agree(2) < 40 && agree(2) >= 32);
        assert!(agree(3) < agree(2));
    }

    #[test]
    fn native_resolutions_set_sample_counts_and_corruption_present() {
        let cfg = SynthConfig {
            n_patients: 4,
            length_seconds: 1000,
            missing_fraction: 0.05,
            anomaly_fraction: 0.05,
            ..SynthConfig::default()
        };
        let recs = synth_generate(&cfg).unwrap();
        let lens: Vec<_> = recs[0].modalities.iter().map(|m| m.len()).collect();
        assert_eq!(lens, vec![500, 200, 1000]);
        let total: usize = recs
            .iter()
            .flat_map(|r| r.modalities.iter())
            .map(|m| m.values.len())
            .sum();
        let missing: usize = recs
            .iter()
            .flat_map(|r| r.modalities.iter())
            .map(|m| m.values.iter().filter(|v| v.is_nan()).count())
            .sum();
        let frac = missing as f64 / total as f64;
        assert!((frac - 0.05).abs() < 0.015, "missing fraction {frac}");
    }

    #[test]
    fn positives_fluctuate_more() {
        let cfg = SynthConfig {
            n_patients: 10,
            length_seconds: 2000,
            missing_fraction: 0.0,
            anomaly_fraction: 0.0,
            ..SynthConfig::default()
        };
        let recs = synth_generate(&cfg).unwrap();
        let sd = |r: &MultiModalRecord| {
            let col = r.modalities[2].values.column(0);
            let m = col.mean().unwrap();
            (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt()
        };
        let (pos, neg): (Vec<_>, Vec<_>) = recs.iter().partition(|r| r.labels.get(1));
        let min_pos = pos.iter().map(|r| sd(r)).fold(f64::INFINITY, f64::min);
        let max_neg = neg.iter().map(|r| sd(r)).fold(0.0, f64::max);
        assert!(min_pos > max_neg);
    }
}
