//! Statistical checks of the synthetic generator against independent
//! oracles: a nearest-class-mean probe and direct moment estimates.

use rollingq::linalg::{Matrix, Rng};
use rollingq::synth::{self, perturb, PerturbMode, Sample, SyntheticSpec};
use rollingq::Modality;

fn token_mean(tokens: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; tokens.cols()];
    for i in 0..tokens.rows() {
        for (m, x) in mean.iter_mut().zip(tokens.row(i)) {
            *m += x / tokens.rows() as f64;
        }
    }
    mean
}

/// Fits class centroids of the per-sample token mean on `fit` and returns
/// nearest-centroid accuracy on `score`.
fn probe_accuracy(fit: &[Sample], score: &[Sample], m: Modality, classes: usize) -> f64 {
    let d = fit[0].raw(m).cols();
    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for s in fit {
        for (c, x) in centroids[s.label].iter_mut().zip(token_mean(s.raw(m))) {
            *c += x;
        }
        counts[s.label] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|x| *x /= (*n).max(1) as f64);
    }
    let correct = score
        .iter()
        .filter(|s| {
            let x = token_mean(s.raw(m));
            let dist = |c: &Vec<f64>| c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes)
                .min_by(|&i, &j| dist(&centroids[i]).total_cmp(&dist(&centroids[j])))
                .unwrap();
            best == s.label
        })
        .count();
    correct as f64 / score.len() as f64
}

fn spec(s_a: f64, s_v: f64) -> SyntheticSpec {
    SyntheticSpec {
        s_a,
        s_v,
        train_size: 1000,
        test_size: 1000,
        seed: 42,
        ..SyntheticSpec::default()
    }
}

#[test]
fn signal_free_modality_probes_at_chance() {
    let sp = spec(1.5, 0.0);
    let data = synth::generate(&sp).unwrap();
    let chance = 1.0 / sp.classes as f64;
    let acc_v = probe_accuracy(&data.train, &data.test, Modality::V, sp.classes);
    assert!((acc_v - chance).abs() <= 0.05, "v probe {acc_v}");
    let acc_a = probe_accuracy(&data.train, &data.test, Modality::A, sp.classes);
    assert!(acc_a > 0.9, "a probe {acc_a}");
}

#[test]
fn full_replacement_removes_label_information() {
    let sp = spec(1.5, 0.5);
    let data = synth::generate(&sp).unwrap();
    let mut rng = Rng::new(9);
    let noisy: Vec<Sample> = data
        .test
        .iter()
        .map(|s| perturb(s, Modality::A, 1.0, PerturbMode::Replace, &mut rng).unwrap())
        .collect();
    let acc = probe_accuracy(&data.train, &noisy, Modality::A, sp.classes);
    assert!((acc - 0.25).abs() <= 0.05, "probe on replaced tokens {acc}");
}

#[test]
fn additive_half_level_has_quarter_variance() {
    let sp = spec(1.5, 0.5);
    let data = synth::generate(&sp).unwrap();
    let mut rng = Rng::new(10);
    let (mut ratio_sum, mut entries) = (0.0, 0usize);
    for s in data.test.iter().take(400) {
        let noisy = perturb(s, Modality::A, 0.5, PerturbMode::Additive, &mut rng).unwrap();
        for i in 0..s.raw_a.rows() {
            let row = s.raw_a.row(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            for (x, y) in row.iter().zip(noisy.raw_a.row(i)) {
                ratio_sum += (y - x).powi(2) / var;
                entries += 1;
            }
        }
    }
    assert!(entries >= 10_000);
    let msd = ratio_sum / entries as f64;
    assert!((msd - 0.25).abs() <= 0.025, "mean squared deviation / variance = {msd}");
}

#[test]
fn equal_strengths_are_symmetric_across_modalities() {
    let sp = SyntheticSpec {
        s_a: 1.0,
        s_v: 1.0,
        train_size: 8000,
        test_size: 1,
        ..SyntheticSpec::default()
    };
    let data = synth::generate(&sp).unwrap();
    let protos = synth::prototypes(&sp);
    // per class, the mean token projected on its own prototype estimates the
    // strength of each modality
    for c in 0..sp.classes {
        let members: Vec<&Sample> = data.train.iter().filter(|s| s.label == c).collect();
        let strength = |m: Modality| {
            members
                .iter()
                .map(|s| {
                    let mean = token_mean(s.raw(m));
                    mean.iter().zip(protos[m.index()][c].iter()).map(|(x, p)| x * p).sum::<f64>()
                })
                .sum::<f64>()
                / members.len() as f64
        };
        let (a, v) = (strength(Modality::A), strength(Modality::V));
        assert!((a - v).abs() < 0.05, "class {c}: {a} vs {v}");
    }
}

#[test]
fn labels_are_balanced_at_scale() {
    let sp = SyntheticSpec {
        train_size: 10_000,
        test_size: 1,
        len_a: 1,
        len_v: 1,
        ..SyntheticSpec::default()
    };
    let data = synth::generate(&sp).unwrap();
    let mut counts = vec![0usize; sp.classes];
    for s in &data.train {
        counts[s.label] += 1;
    }
    for n in counts {
        assert!((n as f64 / 10_000.0 - 0.25).abs() <= 0.02);
    }
}

#[test]
fn swap_probability_controls_informative_modality() {
    let sp = SyntheticSpec {
        sample_varying_prob: 0.3,
        train_size: 4000,
        test_size: 1,
        ..SyntheticSpec::default()
    };
    let data = synth::generate(&sp).unwrap();
    let swapped = data
        .train
        .iter()
        .filter(|s| s.informative == synth::Informative::V)
        .count() as f64
        / 4000.0;
    assert!((swapped - 0.3).abs() < 0.03, "{swapped}");
}
