use super::*;
use crate::datamodel::{synth_generate, SynthConfig};

fn small_settings() -> Settings {
    let mut s = Settings {
        model: ModelConfig {
            d_e: 8,
            patch_sizes: vec![5, 15],
            top_k: 1,
            n_heads: 1,
            d_ff: 16,
            window_len: 30,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        window: WindowConfig { stride: 15 },
        seed: 3,
        ..Settings::default()
    };
    s.resolve_seeds();
    s
}

fn raw_cohort() -> Vec<MultiModalRecord> {
    synth_generate(&SynthConfig {
        n_patients: 8,
        length_seconds: 2400,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn processed(s: &Settings) -> Vec<MultiModalRecord> {
    preprocess_cohort(&raw_cohort(), &RangeTable::default_table(), &s.preprocess)
        .unwrap()
        .0
}

#[test]
fn run_produces_twelve_sorted_rows_deterministically() {
    let s = small_settings();
    let p = processed(&s);
    let a = run(&p, &s).unwrap();
    assert_eq!(a.report.rows.len(), 12);
    assert_eq!(a.classifiers.len(), 12);
    for r in &a.report.rows {
        assert_eq!(r.youden, r.sensitivity + r.specificity - 1.0);
    }
    let b = run(&p, &s).unwrap();
    assert_eq!(a.report.render(), b.report.render());
    assert_eq!(a.history, b.history);
}

#[test]
fn standardization_uses_training_windows_only() {
    let s = small_settings();
    let prep = prepare(&processed(&s), &s).unwrap();
    let train = prep.train_windows();
    let d = train[0].input.ncols();
    for c in 0..d {
        let vals: Vec<f64> = train.iter().flat_map(|w| w.input.column(c).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
    }
    assert!(prep.split.test.iter().all(|i| !prep.split.train.contains(i)));
}

#[test]
fn restore_reproduces_prepared_windows() {
    let s = small_settings();
    let p = processed(&s);
    let prep = prepare(&p, &s).unwrap();
    let back = restore(&p, &s, prep.split.clone(), prep.standardizer.clone()).unwrap();
    assert_eq!(back.windows, prep.windows);
    let mut bad = prep.split.clone();
    bad.test.push(prep.windows.len());
    assert!(matches!(
        restore(&p, &s, bad, prep.standardizer.clone()),
        Err(Error::Dataset(_))
    ));
}

#[test]
fn single_point_lambda_sweep_equals_plain_run() {
    let s = small_settings();
    let p = processed(&s);
    let plain = run(&p, &s).unwrap();
    let sweep = sweep_lambda(&p, &s, &[s.train.lambda]).unwrap();
    assert_eq!(sweep.points.len(), 1);
    assert_eq!(sweep.points[0].report, plain.report);
}

#[test]
fn lambda_sweep_rows_and_zero_trend() {
    let s = small_settings();
    let sweep = sweep_lambda(&processed(&s), &s, &[0.0, 5e-4]).unwrap();
    assert_eq!(sweep.points[0].final_loss.trend, 0.0);
    assert!(sweep.points[1].final_loss.trend > 0.0);
    let table = sweep.render();
    assert_eq!(table.lines().count(), 1 + 2 * 12);
    assert!(table.lines().skip(1).take(12).all(|l| l.starts_with("0\t5min\t")));
    assert!(table.lines().skip(13).all(|l| l.starts_with("0.0005\t5min\t")));
}

#[test]
fn period_sweep_labels_follow_interval() {
    let s = small_settings();
    let sweep = sweep_period(&raw_cohort(), &RangeTable::default_table(), &s, &[5.0, 10.0]).unwrap();
    let labels: Vec<&str> = sweep.points.iter().map(|p| p.period.as_str()).collect();
    assert_eq!(labels, ["150s", "5min"]);
}

#[test]
fn settings_validation_collects_all_sections() {
    let mut s = small_settings();
    s.window.stride = 0;
    s.classify.l2 = 0.0;
    s.classify.kinds.clear();
    s.train.epochs = 0;
    s.model.top_k = 9;
    let errs = s.validate();
    assert_eq!(errs.len(), 5, "{errs:?}");
    assert!(matches!(run(&processed(&small_settings()), &s), Err(Error::Config(e)) if e.len() == 5));
}
