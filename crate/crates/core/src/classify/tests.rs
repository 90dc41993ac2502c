use super::*;
use crate::autograd::Mat;
use crate::datamodel::{ModalitySpec, PodLabels};
use crate::model::ModelConfig;
use proptest::prelude::*;
use rand::Rng;

fn fv(values: Vec<f64>, label: bool) -> FeatureVector {
    FeatureVector {
        values,
        label,
        patient_id: "P".into(),
        pod_index: 1,
    }
}

fn window(input: Mat, pod1: bool, patient: &str) -> Window {
    Window {
        target: input.clone(),
        input,
        labels: PodLabels([pod1, !pod1, pod1]),
        patient_id: patient.into(),
        start_index: 0,
    }
}

fn labelled_windows(n_pos: usize, n_neg: usize) -> Vec<Window> {
    (0..n_pos + n_neg)
        .map(|i| window(Mat::zeros((2, 1)), i < n_pos, &format!("P{}", i / 4)))
        .collect()
}

fn random_dataset(seed: u64, n: usize, d: usize, shift: f64) -> Vec<FeatureVector> {
    let mut rng = crate::seed::rng(seed);
    (0..n)
        .map(|i| {
            let label = i % 2 == 0;
            let off = if label { shift } else { -shift };
            fv((0..d).map(|_| rng.random_range(-1.0..1.0) + off).collect(), label)
        })
        .collect()
}

#[test]
fn featurize_without_model() {
    let w = window(Mat::from_elem((5, 3), 2.5), true, "P1");
    let f = featurize(&[w], None, 1).unwrap();
    assert_eq!(f[0].values, vec![2.5; 3]);
    assert!(f[0].label);

    let mut rng = crate::seed::rng(4);
    let input = Mat::from_shape_fn((7, 4), |_| rng.random_range(-3.0..3.0));
    let w = window(input.clone(), false, "P2");
    let f = featurize(std::slice::from_ref(&w), None, 2).unwrap();
    for c in 0..4 {
        let mut acc = 0.0;
        for r in 0..7 {
            acc += input[[r, c]];
        }
        assert!((f[0].values[c] - acc / 7.0).abs() < 1e-12);
    }
    assert!(f[0].label, "POD2 label is the negation of POD1 here");
    assert!(featurize(&[w], None, 4).is_err());
}

#[test]
fn featurize_with_model_delegates_to_represent() {
    let cfg = ModelConfig {
        d_e: 4,
        patch_sizes: vec![2, 4],
        top_k: 1,
        n_heads: 1,
        d_ff: 4,
        window_len: 4,
        modalities: vec![ModalitySpec::new("a", 2, 1.0)],
        router_noise: 0.0,
        seed: 1,
    };
    let model = FusionPathformer::new(cfg).unwrap();
    let mut rng = crate::seed::rng(5);
    let input = Mat::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
    let f = featurize(&[window(input.clone(), true, "P1")], Some(&model), 1).unwrap();
    assert_eq!(f[0].values, model.represent(&input).unwrap().h.to_vec());
    assert!(featurize(&[window(Mat::zeros((5, 2)), true, "P1")], Some(&model), 1).is_err());
}

#[test]
fn undersample_cases() {
    let balanced: Vec<FeatureVector> = (0..20).map(|i| fv(vec![i as f64], i < 10)).collect();
    assert_eq!(undersample(&balanced, 1).unwrap(), balanced);

    let skewed: Vec<FeatureVector> = (0..40).map(|i| fv(vec![i as f64], i < 30)).collect();
    let out = undersample(&skewed, 1).unwrap();
    assert_eq!(class_counts(&out), (10, 10));
    assert_eq!(out, undersample(&skewed, 1).unwrap());
    assert_ne!(out, undersample(&skewed, 2).unwrap());

    let single: Vec<FeatureVector> = (0..5).map(|i| fv(vec![i as f64], true)).collect();
    assert!(matches!(undersample(&single, 0), Err(Error::Dataset(_))));
}

proptest! {
    #[test]
    fn undersample_is_balanced_subset(pos in 1usize..40, neg in 1usize..40, seed in 0u64..1000) {
        let data: Vec<FeatureVector> = (0..pos + neg).map(|i| fv(vec![i as f64], i % (pos + neg) < pos)).collect();
        let out = undersample(&data, seed).unwrap();
        let m = pos.min(neg);
        prop_assert_eq!(class_counts(&out), (m, m));
        // Items are unique by value, so a strictly increasing walk proves a subset in order.
        let ids: Vec<f64> = out.iter().map(|f| f.values[0]).collect();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(out.iter().all(|f| data[f.values[0] as usize] == *f));
    }

    #[test]
    fn subject_dependent_split_is_stratified(pos in 2usize..60, neg in 2usize..60, frac in 0.05f64..0.6, seed in 0u64..1000) {
        let windows = labelled_windows(pos, neg);
        let n = pos + neg;
        let Ok(split) = split_subject_dependent(&windows, frac, seed) else {
            return Ok(());
        };
        prop_assert_eq!(split.test.len(), (n as f64 * frac).round() as usize);
        let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let test_pos = split.test.iter().filter(|&&i| windows[i].labels.get(1)).count() as f64;
        let expected = split.test.len() as f64 * pos as f64 / n as f64;
        prop_assert!((test_pos - expected).abs() <= 1.0, "{} vs {}", test_pos, expected);
    }
}

#[test]
fn split_cases() {
    let windows = labelled_windows(50, 50);
    let all = split_subject_dependent(&windows, 0.0, 3).unwrap();
    assert_eq!(all.train, (0..100).collect::<Vec<_>>());
    assert!(all.test.is_empty());

    let s = split_subject_dependent(&windows, 0.2, 3).unwrap();
    assert_eq!(s.test.len(), 20);
    assert_eq!(s, split_subject_dependent(&windows, 0.2, 3).unwrap());
    assert_ne!(s, split_subject_dependent(&windows, 0.2, 4).unwrap());

    assert!(matches!(
        split_subject_dependent(&labelled_windows(1, 9), 0.2, 0),
        Err(Error::Dataset(_))
    ));
    assert!(split_subject_dependent(&windows, 1.0, 0).is_err());
}

#[test]
fn subject_independent_split_keeps_patients_whole() {
    // Four windows per patient, 10 positive and 10 negative patients.
    let windows: Vec<Window> = (0..80)
        .map(|i| window(Mat::zeros((2, 1)), (i / 4) % 2 == 0, &format!("P{:02}", i / 4)))
        .collect();
    let s = split_subject_independent(&windows, 0.2, 9).unwrap();
    assert_eq!(s.test.len(), 16);
    let test_patients: std::collections::BTreeSet<_> = s.test.iter().map(|&i| &windows[i].patient_id).collect();
    assert!(s.train.iter().all(|&i| !test_patients.contains(&windows[i].patient_id)));
    assert_eq!(test_patients.len(), 4);
}

#[test]
fn separable_pair_fits_both_kinds() {
    let data = vec![fv(vec![1.0, 0.5], true), fv(vec![-1.0, -0.5], false)];
    for kind in ClassifierKind::ALL {
        let m = train_linear(&data, kind, 1e-3).unwrap();
        assert!(m.converged);
        assert_eq!(predict(&m, &data, None).unwrap(), vec![true, false], "{kind:?}");
    }
}

#[test]
fn weight_norm_shrinks_with_l2() {
    let data = random_dataset(11, 60, 3, 0.4);
    for kind in ClassifierKind::ALL {
        let norms: Vec<f64> = [1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0]
            .iter()
            .map(|&l2| train_linear(&data, kind, l2).unwrap().weight_norm())
            .collect();
        assert!(norms.windows(2).all(|w| w[1] <= w[0]), "{kind:?}: {norms:?}");
    }
}

#[test]
fn mirrored_data_gives_zero_logistic_bias() {
    let half = random_dataset(12, 20, 3, 0.3);
    let mut data = half.clone();
    data.extend(half.iter().map(|f| fv(f.values.iter().map(|v| -v).collect(), !f.label)));
    let m = train_linear(&data, ClassifierKind::Logistic, 0.1).unwrap();
    assert!(m.bias.abs() < 1e-6, "bias {}", m.bias);
}

#[test]
fn logistic_reaches_stationary_point() {
    let data = random_dataset(13, 50, 4, 0.2);
    let m = train_linear(&data, ClassifierKind::Logistic, 0.05).unwrap();
    let mut theta = m.weights.clone();
    theta.push(m.bias);
    let f0 = logistic_objective(&data, &theta, 0.05);
    let zero = vec![0.0; 5];
    assert!(f0 <= logistic_objective(&data, &zero, 0.05));
    // Central differences of the objective vanish at the optimum.
    for j in 0..5 {
        let (mut a, mut b) = (theta.clone(), theta.clone());
        a[j] += 1e-5;
        b[j] -= 1e-5;
        let g = (logistic_objective(&data, &a, 0.05) - logistic_objective(&data, &b, 0.05)) / 2e-5;
        assert!(g.abs() < 1e-6, "coordinate {j}: {g}");
    }
}

#[test]
fn svm_is_a_primal_minimum() {
    let data = random_dataset(14, 40, 3, 0.3);
    let l2 = 0.1;
    let m = train_linear(&data, ClassifierKind::Svm, l2).unwrap();
    assert!(m.converged);
    let best = svm_objective(&data, &m.weights, m.bias, l2);
    let mut rng = crate::seed::rng(15);
    for _ in 0..500 {
        let scale = rng.random_range(1e-4..1e-1);
        let w: Vec<f64> = m
            .weights
            .iter()
            .map(|w| w + scale * rng.random_range(-1.0..1.0))
            .collect();
        let b = m.bias + scale * rng.random_range(-1.0..1.0);
        assert!(svm_objective(&data, &w, b, l2) >= best - 1e-9);
    }
}

#[test]
fn svm_labels_survive_feature_scaling() {
    let data = random_dataset(16, 30, 2, 1.5);
    let base = predict(&train_linear(&data, ClassifierKind::Svm, 1e-6).unwrap(), &data, None).unwrap();
    assert_eq!(base, data.iter().map(|f| f.label).collect::<Vec<_>>());
    for s in [0.1, 3.0, 40.0] {
        let scaled: Vec<FeatureVector> = data
            .iter()
            .map(|f| fv(f.values.iter().map(|v| v * s).collect(), f.label))
            .collect();
        let m = train_linear(&scaled, ClassifierKind::Svm, 1e-6).unwrap();
        assert_eq!(predict(&m, &scaled, None).unwrap(), base, "scale {s}");
    }
}

#[test]
fn scoring_conventions() {
    let zero = LinearModel {
        weights: vec![0.0; 3],
        bias: 0.0,
        kind: ClassifierKind::Logistic,
        l2: 1.0,
        converged: true,
        iterations: 0,
    };
    let pts = random_dataset(17, 6, 3, 0.0);
    assert!(scores(&zero, &pts).unwrap().iter().all(|s| *s == 0.5));
    let svm = LinearModel {
        kind: ClassifierKind::Svm,
        ..zero.clone()
    };
    assert!(predict(&svm, &pts, None).unwrap().iter().all(|p| *p));
    assert!(score(&svm, &[1.0]).is_err());

    let mut rng = crate::seed::rng(18);
    let model = LinearModel {
        weights: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
        bias: 0.3,
        kind: ClassifierKind::Svm,
        ..zero
    };
    for p in &pts {
        let dot =
            model.weights[0] * p.values[0] + model.weights[1] * p.values[1] + model.weights[2] * p.values[2] + 0.3;
        assert!((score(&model, &p.values).unwrap() - dot).abs() < 1e-12);
    }
}

#[test]
fn classify_stage_is_deterministic() {
    let data = random_dataset(19, 41, 3, 0.2);
    let run = || {
        let balanced = undersample(&data, 7).unwrap();
        ClassifierKind::ALL.map(|k| train_linear(&balanced, k, 1.0).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn training_input_checks() {
    let data = random_dataset(20, 4, 2, 0.0);
    assert!(train_linear(&data, ClassifierKind::Svm, 0.0).is_err());
    let one_class: Vec<FeatureVector> = data.iter().map(|f| fv(f.values.clone(), true)).collect();
    assert!(train_linear(&one_class, ClassifierKind::Logistic, 1.0).is_err());
    let mut bad = data.clone();
    bad[0].values[0] = f64::NAN;
    assert!(train_linear(&bad, ClassifierKind::Logistic, 1.0).is_err());
}

#[test]
fn feature_table_layout() {
    let t = render_features(&[fv(vec![1.5, -2.0], true)]);
    assert_eq!(t, "patient_id\tpod_index\tlabel\tf0\tf1\nP\t1\t1\t1.5\t-2\n");
}
