//! Analyses of a trained fusion model and their plain-text exports.
//!
//! `diagnostics.csv` columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `epoch` | zero-based epoch index |
//! | `score_a`, `score_v` | mean attention mass per modality on the eval split |
//! | `air` | mean of `cos(q, k̂a) − cos(q, k̂v)` on the eval split |
//! | `alpha` | blend weight when the controller rotated, empty otherwise |
//! | `rotation_applied` | `1` when the query was rotated this epoch |
//! | `cos_a`, `cos_v` | mean query/average-key cosine per modality |
//! | `key_norm_a`, `key_norm_v` | mean average-key L2 norm per modality |
//! | `key_norm_log_ratio` | `ln(key_norm_a / key_norm_v)` |
//! | `grad_norm_a`, `grad_norm_v` | mean per-batch encoder gradient L2 norm |
//! | `train_loss` | mean batch loss |
//! | `test_accuracy` | accuracy on the eval split |
//!
//! Optional fields are written as empty cells.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::{AblationMode, Modality};
use crate::linalg::{cosine_similarity, pearson, Rng};
use crate::model::{argmax, FusionClassifier, ModelParams};
use crate::rollingq::ControllerEvent;
use crate::synth::{perturb, PerturbMode, Sample};

pub const CSV_COLUMNS: [&str; 15] = [
    "epoch",
    "score_a",
    "score_v",
    "air",
    "alpha",
    "rotation_applied",
    "cos_a",
    "cos_v",
    "key_norm_a",
    "key_norm_v",
    "key_norm_log_ratio",
    "grad_norm_a",
    "grad_norm_v",
    "train_loss",
    "test_accuracy",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub epoch: usize,
    pub score_a: f64,
    pub score_v: f64,
    pub air: f64,
    pub alpha: Option<f64>,
    pub rotation_applied: bool,
    pub cos_a: f64,
    pub cos_v: f64,
    pub key_norm_a: f64,
    pub key_norm_v: f64,
    pub key_norm_log_ratio: f64,
    pub grad_norm_a: Option<f64>,
    pub grad_norm_v: Option<f64>,
    pub train_loss: Option<f64>,
    pub test_accuracy: f64,
}

impl DiagnosticsRecord {
    pub fn score(&self, m: Modality) -> f64 {
        match m {
            Modality::A => self.score_a,
            Modality::V => self.score_v,
        }
    }

    /// Field invariants; a violation is reported as a named invariant error.
    pub fn check(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.score_a) || !in_unit(self.score_v) {
            return Err(Error::Invariant(format!(
                "epoch {}: score sums ({}, {}) outside [0, 1]",
                self.epoch, self.score_a, self.score_v
            )));
        }
        if (self.score_a + self.score_v - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!(
                "epoch {}: score sums add to {}",
                self.epoch,
                self.score_a + self.score_v
            )));
        }
        if !(-2.0..=2.0).contains(&self.air) {
            return Err(Error::Invariant(format!("epoch {}: AIR {} outside [-2, 2]", self.epoch, self.air)));
        }
        if !in_unit(self.test_accuracy) {
            return Err(Error::Invariant(format!(
                "epoch {}: accuracy {} outside [0, 1]",
                self.epoch, self.test_accuracy
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScatterRow {
    pub sample_id: usize,
    pub modality: Modality,
    pub cosine: f64,
    pub key_norm: f64,
    pub is_noise: bool,
}

/// Per-sample average-key geometry: one row per (sample, modality).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScatterDump {
    pub rows: Vec<ScatterRow>,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub record: DiagnosticsRecord,
    pub scatter: ScatterDump,
}

fn check_nonempty(eval_set: &[Sample]) -> Result<()> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    Ok(())
}

fn scatter_rows(model: &ModelParams, samples: &[Sample], is_noise: bool, rows: &mut Vec<ScatterRow>) -> Result<()> {
    for (id, s) in samples.iter().enumerate() {
        let fwd = model.forward(&s.raw_a, &s.raw_v, AblationMode::None)?;
        for m in Modality::BOTH {
            let k = fwd.trace.average_key(m);
            rows.push(ScatterRow {
                sample_id: id,
                modality: m,
                cosine: cosine_similarity(&fwd.trace.query, &k)?,
                key_norm: k.norm(),
                is_noise,
            });
        }
    }
    Ok(())
}

/// Forward-only pass over `eval_set` with no ablation. Training-only fields
/// of the record (`alpha`, gradient norms, loss) are left empty.
pub fn snapshot(model: &ModelParams, eval_set: &[Sample]) -> Result<Snapshot> {
    check_nonempty(eval_set)?;
    let n = eval_set.len() as f64;
    let mut sums = [0.0f64; 2];
    let mut cos = [0.0f64; 2];
    let mut norms = [0.0f64; 2];
    let mut air = 0.0;
    let mut correct = 0usize;
    let mut rows = Vec::with_capacity(2 * eval_set.len());
    for (id, s) in eval_set.iter().enumerate() {
        let fwd = model.forward(&s.raw_a, &s.raw_v, AblationMode::None)?;
        if fwd.predicted_class() == s.label {
            correct += 1;
        }
        let mut c = [0.0f64; 2];
        for m in Modality::BOTH {
            let i = m.index();
            let k = fwd.trace.average_key(m);
            c[i] = cosine_similarity(&fwd.trace.query, &k)?;
            let kn = k.norm();
            sums[i] += fwd.trace.score_sum(m);
            cos[i] += c[i];
            norms[i] += kn;
            rows.push(ScatterRow {
                sample_id: id,
                modality: m,
                cosine: c[i],
                key_norm: kn,
                is_noise: false,
            });
        }
        air += c[0] - c[1];
    }
    let record = DiagnosticsRecord {
        epoch: 0,
        score_a: sums[0] / n,
        score_v: sums[1] / n,
        air: (air / n).clamp(-2.0, 2.0),
        alpha: None,
        rotation_applied: false,
        cos_a: cos[0] / n,
        cos_v: cos[1] / n,
        key_norm_a: norms[0] / n,
        key_norm_v: norms[1] / n,
        key_norm_log_ratio: (norms[0] / norms[1]).ln(),
        grad_norm_a: None,
        grad_norm_v: None,
        train_loss: None,
        test_accuracy: correct as f64 / n,
    };
    Ok(Snapshot {
        record,
        scatter: ScatterDump { rows },
    })
}

/// Scatter rows for `eval_set` followed by rows for copies whose `modality`
/// was replaced by noise; the latter are flagged `is_noise`.
pub fn noise_scatter(model: &ModelParams, eval_set: &[Sample], modality: Modality, rng: &mut Rng) -> Result<ScatterDump> {
    check_nonempty(eval_set)?;
    let mut rows = Vec::with_capacity(4 * eval_set.len());
    scatter_rows(model, eval_set, false, &mut rows)?;
    let noised = eval_set
        .iter()
        .map(|s| perturb(s, modality, 1.0, PerturbMode::Replace, rng))
        .collect::<Result<Vec<_>>>()?;
    let start = rows.len();
    scatter_rows(model, &noised, true, &mut rows)?;
    for r in &mut rows[start..] {
        r.is_noise = r.modality == modality;
    }
    Ok(ScatterDump { rows })
}

/// Accuracy and the mean attention mass of one modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub mean_score: f64,
}

pub fn evaluate_set(
    model: &impl FusionClassifier,
    samples: &[Sample],
    modality: Modality,
    mode: AblationMode,
) -> Result<EvalSummary> {
    check_nonempty(samples)?;
    let (mut correct, mut mass) = (0usize, 0.0);
    for s in samples {
        let e = model.evaluate(&s.raw_a, &s.raw_v, mode)?;
        if argmax(&e.logits) == s.label {
            correct += 1;
        }
        mass += e.score_sum(modality);
    }
    let n = samples.len() as f64;
    Ok(EvalSummary {
        accuracy: correct as f64 / n,
        mean_score: mass / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRow {
    pub level: f64,
    pub accuracy: f64,
    pub mean_score: f64,
}

/// Accuracy and attention mass of `modality` after corrupting it at each
/// level. Level `i` uses the child stream `rng.fork(i)`.
pub fn noise_response(
    model: &impl FusionClassifier,
    eval_set: &[Sample],
    modality: Modality,
    levels: &[f64],
    mode: PerturbMode,
    rng: &Rng,
) -> Result<Vec<NoiseRow>> {
    check_nonempty(eval_set)?;
    levels
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            if !(0.0..=1.0).contains(&level) {
                return Err(Error::InvalidArgument(format!("noise level {level} outside [0, 1]")));
            }
            let mut r = rng.fork(i as u64);
            let noisy = eval_set
                .iter()
                .map(|s| perturb(s, modality, level, mode, &mut r))
                .collect::<Result<Vec<_>>>()?;
            let e = evaluate_set(model, &noisy, modality, AblationMode::None)?;
            Ok(NoiseRow {
                level,
                accuracy: e.accuracy,
                mean_score: e.mean_score,
            })
        })
        .collect()
}

/// Pearson correlation between a clean-input indicator (1 clean, 0 noise)
/// and the attention mass `modality` receives, over every sample of
/// `eval_set` once clean and once with `modality` replaced by noise.
pub fn noise_attention_correlation(
    model: &impl FusionClassifier,
    eval_set: &[Sample],
    modality: Modality,
    rng: &mut Rng,
) -> Result<f64> {
    if eval_set.len() < 50 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 50 samples, got {}",
            eval_set.len()
        )));
    }
    let mut clean = Vec::with_capacity(2 * eval_set.len());
    let mut mass = Vec::with_capacity(2 * eval_set.len());
    for s in eval_set {
        let e = model.evaluate(&s.raw_a, &s.raw_v, AblationMode::None)?;
        clean.push(1.0);
        mass.push(e.score_sum(modality));
    }
    for s in eval_set {
        let noisy = perturb(s, modality, 1.0, PerturbMode::Replace, rng)?;
        let e = model.evaluate(&noisy.raw_a, &noisy.raw_v, AblationMode::None)?;
        clean.push(0.0);
        mass.push(e.score_sum(modality));
    }
    pearson(&clean, &mass)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuagRow {
    pub mode: AblationMode,
    pub accuracy: f64,
}

/// Accuracy under `none`, `mask_a`, `mask_v` and `block_average`. Also
/// re-verifies that block averaging kept every modality's mass.
pub fn quag_ablation(model: &impl FusionClassifier, eval_set: &[Sample]) -> Result<Vec<QuagRow>> {
    check_nonempty(eval_set)?;
    for (i, s) in eval_set.iter().enumerate() {
        let plain = model.evaluate(&s.raw_a, &s.raw_v, AblationMode::None)?;
        let avg = model.evaluate(&s.raw_a, &s.raw_v, AblationMode::BlockAverage)?;
        let drift = (plain.score_sums.0 - avg.score_sums.0)
            .abs()
            .max((plain.score_sums.1 - avg.score_sums.1).abs());
        if drift > 1e-12 {
            return Err(Error::Invariant(format!("block average moved mass by {drift} on sample {i}")));
        }
    }
    AblationMode::ALL
        .iter()
        .map(|&mode| {
            let e = evaluate_set(model, eval_set, Modality::A, mode)?;
            Ok(QuagRow {
                mode,
                accuracy: e.accuracy,
            })
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn records_to_csv(records: &[DiagnosticsRecord]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.score_a,
            r.score_v,
            r.air,
            opt(r.alpha),
            u8::from(r.rotation_applied),
            r.cos_a,
            r.cos_v,
            r.key_norm_a,
            r.key_norm_v,
            r.key_norm_log_ratio,
            opt(r.grad_norm_a),
            opt(r.grad_norm_v),
            opt(r.train_loss),
            r.test_accuracy,
        );
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<DiagnosticsRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty diagnostics table".into()))?;
    if header != CSV_COLUMNS.join(",") {
        return Err(Error::Parse(format!("unexpected header '{header}'")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |c: &str| Error::Parse(format!("row {}: bad {c}", i + 1));
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != CSV_COLUMNS.len() {
                return Err(Error::Parse(format!("row {}: {} cells", i + 1, cells.len())));
            }
            let f = |j: usize| cells[j].parse::<f64>().map_err(|_| bad(CSV_COLUMNS[j]));
            let o = |j: usize| -> Result<Option<f64>> {
                if cells[j].is_empty() {
                    Ok(None)
                } else {
                    f(j).map(Some)
                }
            };
            Ok(DiagnosticsRecord {
                epoch: cells[0].parse().map_err(|_| bad("epoch"))?,
                score_a: f(1)?,
                score_v: f(2)?,
                air: f(3)?,
                alpha: o(4)?,
                rotation_applied: match cells[5] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad("rotation_applied")),
                },
                cos_a: f(6)?,
                cos_v: f(7)?,
                key_norm_a: f(8)?,
                key_norm_v: f(9)?,
                key_norm_log_ratio: f(10)?,
                grad_norm_a: o(11)?,
                grad_norm_v: o(12)?,
                train_loss: o(13)?,
                test_accuracy: f(14)?,
            })
        })
        .collect()
}

pub fn scatter_to_csv(scatter: &ScatterDump) -> String {
    let mut out = String::from("sample_id,modality,cosine,key_norm,is_noise\n");
    for r in &scatter.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.sample_id,
            r.modality,
            r.cosine,
            r.key_norm,
            u8::from(r.is_noise)
        );
    }
    out
}

/// Free-form context written into the run summary.
#[derive(Clone, Debug, Default)]
pub struct SummaryInfo {
    /// Effective configuration as `key = value` pairs.
    pub config: Vec<(String, String)>,
    pub events: Vec<ControllerEvent>,
    pub rotations_used: usize,
    pub extra: Vec<(String, String)>,
}

pub fn summary_text(records: &[DiagnosticsRecord], info: &SummaryInfo) -> String {
    let mut out = String::from("[config]\n");
    for (k, v) in &info.config {
        let _ = writeln!(out, "{k} = {v}");
    }
    out.push_str("\n[final]\n");
    if let Some(r) = records.last() {
        let _ = writeln!(out, "epoch = {}", r.epoch);
        let _ = writeln!(out, "test_accuracy = {}", r.test_accuracy);
        let _ = writeln!(out, "air = {}", r.air);
        let _ = writeln!(out, "score_a = {}", r.score_a);
        let _ = writeln!(out, "score_v = {}", r.score_v);
        let _ = writeln!(out, "key_norm_log_ratio = {}", r.key_norm_log_ratio);
    }
    let _ = writeln!(out, "rotations_used = {}", info.rotations_used);
    for (k, v) in &info.extra {
        let _ = writeln!(out, "{k} = {v}");
    }
    out.push_str("\n[controller]\n");
    out.push_str("# epoch air alpha rotation_applied\n");
    for e in &info.events {
        let _ = writeln!(out, "{} {} {} {}", e.epoch, e.air, opt(e.alpha), u8::from(e.rotation_applied));
    }
    out
}

/// Paths written by [`export`].
#[derive(Clone, Debug)]
pub struct ExportPaths {
    pub table: PathBuf,
    pub summary: PathBuf,
    pub scatter: PathBuf,
}

/// Writes `diagnostics.csv`, `summary.txt` and `scatter.csv` into `dir`.
pub fn export(dir: &Path, records: &[DiagnosticsRecord], scatter: &ScatterDump, info: &SummaryInfo) -> Result<ExportPaths> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("nothing to export".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ExportPaths {
        table: dir.join("diagnostics.csv"),
        summary: dir.join("summary.txt"),
        scatter: dir.join("scatter.csv"),
    };
    let write = |p: &Path, s: String| std::fs::write(p, s).map_err(|e| Error::io(p, e));
    write(&paths.table, records_to_csv(records))?;
    write(&paths.summary, summary_text(records, info))?;
    write(&paths.scatter, scatter_to_csv(scatter))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Matrix, Vector};
    use crate::model::Evaluation;

    fn record(epoch: usize) -> DiagnosticsRecord {
        DiagnosticsRecord {
            epoch,
            score_a: 0.7,
            score_v: 0.30000000000000004,
            air: 0.123456789,
            alpha: if epoch % 2 == 0 { Some(0.1) } else { None },
            rotation_applied: epoch % 2 == 0,
            cos_a: 0.5,
            cos_v: 0.376543211,
            key_norm_a: 1.25,
            key_norm_v: 2.0 / 3.0,
            key_norm_log_ratio: (1.25f64 / (2.0 / 3.0)).ln(),
            grad_norm_a: Some(1e-7),
            grad_norm_v: None,
            train_loss: Some(1.0 / 7.0),
            test_accuracy: 0.5,
        }
    }

    #[test]
    fn csv_round_trip_and_schema() {
        let records: Vec<_> = (0..4).map(record).collect();
        let text = records_to_csv(&records);
        for line in text.lines() {
            assert_eq!(line.split(',').count(), CSV_COLUMNS.len());
        }
        assert_eq!(records_from_csv(&text).unwrap(), records);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn record_invariants() {
        assert!(record(0).check().is_ok());
        let mut r = record(0);
        r.score_v = 0.5;
        assert!(matches!(r.check(), Err(Error::Invariant(_))));
        let mut r = record(0);
        r.air = 2.5;
        assert!(r.check().is_err());
    }

    /// Attends with a fixed mass to `a`, or with `clean`/`noisy` mass
    /// depending on whether `a`'s tokens look like the original data.
    struct MassModel {
        clean: f64,
        noisy: f64,
    }

    impl FusionClassifier for MassModel {
        fn evaluate(&self, raw_a: &Matrix, _raw_v: &Matrix, _mode: AblationMode) -> Result<Evaluation> {
            // clean tokens in these tests are exactly 1.0 everywhere
            let is_clean = raw_a.as_slice().iter().all(|&x| x == 1.0);
            let m = if is_clean { self.clean } else { self.noisy };
            Ok(Evaluation {
                logits: Vector::new(vec![1.0, 0.0]),
                score_sums: (m, 1.0 - m),
            })
        }
    }

    fn ones(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                raw_a: Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(),
                raw_v: Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
                label: i % 2,
                informative: crate::synth::Informative::A,
            })
            .collect()
    }

    #[test]
    fn constant_attention_has_zero_variance() {
        // the model ignores its input, so attention mass never varies
        struct Constant;
        impl FusionClassifier for Constant {
            fn evaluate(&self, _: &Matrix, _: &Matrix, _: AblationMode) -> Result<Evaluation> {
                Ok(Evaluation {
                    logits: Vector::new(vec![0.0, 1.0]),
                    score_sums: (0.4, 0.6),
                })
            }
        }
        let err = noise_attention_correlation(&Constant, &ones(60), Modality::A, &mut Rng::new(0)).unwrap_err();
        assert_eq!(err.to_string(), "zero variance");
    }

    #[test]
    fn separated_attention_correlates_perfectly() {
        let mut samples = ones(60);
        for s in &mut samples {
            s.raw_a = Matrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        }
        // rows are constant so replacement at level 1 gives exact zeros
        let model = MassModel { clean: 0.9, noisy: 0.1 };
        let c = noise_attention_correlation(&model, &samples, Modality::A, &mut Rng::new(0)).unwrap();
        assert!((c - 1.0).abs() < 1e-12, "{c}");
    }

    #[test]
    fn correlation_needs_fifty_samples() {
        let model = MassModel { clean: 0.9, noisy: 0.1 };
        assert!(noise_attention_correlation(&model, &ones(49), Modality::A, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn noise_level_zero_matches_clean_evaluation() {
        let model = MassModel { clean: 0.8, noisy: 0.3 };
        let samples = ones(10);
        let rows = noise_response(&model, &samples, Modality::A, &[0.0], PerturbMode::Additive, &Rng::new(1)).unwrap();
        let clean = evaluate_set(&model, &samples, Modality::A, AblationMode::None).unwrap();
        assert_eq!(rows[0].accuracy, clean.accuracy);
        assert_eq!(rows[0].mean_score, clean.mean_score);
    }

    #[test]
    fn export_is_byte_stable_and_reports_bad_paths() {
        let records: Vec<_> = (0..3).map(record).collect();
        let scatter = ScatterDump {
            rows: vec![ScatterRow {
                sample_id: 0,
                modality: Modality::V,
                cosine: -0.25,
                key_norm: 3.5,
                is_noise: true,
            }],
        };
        let info = SummaryInfo {
            config: vec![("train.lr".into(), "0.5".into())],
            ..SummaryInfo::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = export(&dir.path().join("one"), &records, &scatter, &info).unwrap();
        let p2 = export(&dir.path().join("two"), &records, &scatter, &info).unwrap();
        for (a, b) in [(&p1.table, &p2.table), (&p1.summary, &p2.summary), (&p1.scatter, &p2.scatter)] {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = export(&blocker.join("sub"), &records, &scatter, &info).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(export(dir.path(), &[], &scatter, &info).is_err());
    }
}
