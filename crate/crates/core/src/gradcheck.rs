//! Central finite-difference checks of the full model gradient.
//!
//! Relative error of an entry is `|g − n| / max(|g|, |n|, floor)` where `g`
//! is the analytic and `n` the numeric derivative. The floor keeps entries
//! whose true derivative is essentially zero from being judged on rounding
//! noise alone.

use crate::error::{Error, Result};
use crate::linalg::{plane_rotation_from_pair, Matrix, Rng, Vector};
use crate::model::{self, cross_entropy, ModelParams, ModelSpec, ROTATION_ARRAY};
use crate::AblationMode;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Largest embedding width drawn for an instance.
    pub max_dim: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 20,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_dim: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub instance: usize,
    pub array: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub instances: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub worst: Option<GradCheckEntry>,
    /// Largest relative error per array name, in checkpoint order.
    pub per_array: Vec<(&'static str, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |e| e.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "instances = {}\nentries_checked = {}\ntolerance = {:e}\nmax_rel_error = {:e}\n",
            self.instances,
            self.checked,
            self.tolerance,
            self.max_rel_error()
        );
        for (name, err) in &self.per_array {
            out.push_str(&format!("max_rel_error.{name} = {err:e}\n"));
        }
        if let Some(w) = &self.worst {
            out.push_str(&format!(
                "worst = instance {} {}[{}] analytic {:e} numeric {:e}\n",
                w.instance, w.array, w.index, w.analytic, w.numeric
            ));
        }
        out.push_str(if self.passed() { "status = pass\n" } else { "status = fail\n" });
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_of(params: &ModelParams, raw_a: &Matrix, raw_v: &Matrix, label: usize) -> Result<f64> {
    let fwd = params.forward(raw_a, raw_v, AblationMode::None)?;
    Ok(cross_entropy(&fwd.logits, label)?.0)
}

fn nudge(params: &mut ModelParams, target: usize, index: usize, delta: f64) {
    let mut k = 0;
    params.for_each_array_mut(|_, xs| {
        if k == target {
            xs[index] += delta;
        }
        k += 1;
    });
}

/// Compares the analytic gradient of one labelled sample with central
/// differences for every parameter entry except the rotation, which is
/// held constant by construction.
pub fn check_sample(
    params: &ModelParams,
    raw_a: &Matrix,
    raw_v: &Matrix,
    label: usize,
    step: f64,
    floor: f64,
) -> Result<Vec<GradCheckEntry>> {
    let analytic = params.sample_gradient(raw_a, raw_v, label)?.grads;
    let mut flat: Vec<(&'static str, Vec<f64>)> = Vec::new();
    analytic.for_each_array(|name, xs| flat.push((name, xs.to_vec())));
    let mut entries = Vec::new();
    let mut probe = params.clone();
    for (k, (name, grads)) in flat.iter().enumerate() {
        if *name == ROTATION_ARRAY {
            continue;
        }
        for (i, &g) in grads.iter().enumerate() {
            nudge(&mut probe, k, i, step);
            let up = loss_of(&probe, raw_a, raw_v, label)?;
            nudge(&mut probe, k, i, -2.0 * step);
            let down = loss_of(&probe, raw_a, raw_v, label)?;
            nudge(&mut probe, k, i, step);
            let numeric = (up - down) / (2.0 * step);
            entries.push(GradCheckEntry {
                instance: 0,
                array: name,
                index: i,
                analytic: g,
                numeric,
                rel_error: relative_error(g, numeric, floor),
            });
        }
    }
    Ok(entries)
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::new(rows, cols, data).expect("sized to shape")
}

fn gaussian_vector(rng: &mut Rng, dim: usize) -> Vector {
    Vector::new((0..dim).map(|_| rng.normal()).collect())
}

/// A random small model with every parameter (biases included) drawn at
/// O(1) scale and a non-trivial rotation, plus one labelled input.
pub fn random_instance(rng: &mut Rng, max_dim: usize) -> Result<(ModelParams, Matrix, Matrix, usize)> {
    if max_dim < 2 {
        return Err(Error::InvalidArgument("gradient check needs max_dim >= 2".into()));
    }
    let spec = ModelSpec {
        d_in_a: 2 + rng.below(4),
        d_in_v: 2 + rng.below(4),
        hidden: 2 + rng.below(5),
        dim: 2 + rng.below(max_dim - 1),
        classes: 2 + rng.below(3),
        init_std: 0.5,
    };
    let mut params = model::init(&spec, &rng.fork(1))?;
    params.for_each_array_mut(|name, xs| {
        if name != ROTATION_ARRAY {
            xs.iter_mut().for_each(|x| *x = 0.5 * rng.normal());
        }
    });
    let d = spec.dim;
    let rotation = plane_rotation_from_pair(&gaussian_vector(rng, d), &gaussian_vector(rng, d))?;
    params.fusion.rotation = rotation;
    let (len_a, len_v) = (1 + rng.below(3), 1 + rng.below(3));
    let raw_a = gaussian_matrix(rng, len_a, spec.d_in_a, 1.0);
    let raw_v = gaussian_matrix(rng, len_v, spec.d_in_v, 1.0);
    let label = rng.below(spec.classes);
    Ok((params, raw_a, raw_v, label))
}

pub fn run_suite(config: &GradCheckConfig) -> Result<GradCheckReport> {
    if config.instances == 0 || !(config.step > 0.0) || !(config.tolerance > 0.0) {
        return Err(Error::InvalidArgument(
            "gradient check needs instances >= 1 and positive step and tolerance".into(),
        ));
    }
    let root = Rng::new(config.seed);
    let mut per_array: Vec<(&'static str, f64)> = model::ARRAY_NAMES
        .iter()
        .filter(|n| **n != ROTATION_ARRAY)
        .map(|n| (*n, 0.0))
        .collect();
    let mut worst: Option<GradCheckEntry> = None;
    let mut checked = 0;
    for instance in 0..config.instances {
        let mut rng = root.fork(instance as u64);
        let (params, raw_a, raw_v, label) = random_instance(&mut rng, config.max_dim)?;
        for mut e in check_sample(&params, &raw_a, &raw_v, label, config.step, config.floor)? {
            e.instance = instance;
            checked += 1;
            if let Some(slot) = per_array.iter_mut().find(|(n, _)| *n == e.array) {
                slot.1 = slot.1.max(e.rel_error);
            }
            if worst.as_ref().is_none_or(|w| e.rel_error > w.rel_error) {
                worst = Some(e);
            }
        }
    }
    Ok(GradCheckReport {
        instances: config.instances,
        checked,
        tolerance: config.tolerance,
        worst,
        per_array,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn small_suite_passes() {
        let report = run_suite(&GradCheckConfig {
            instances: 3,
            ..GradCheckConfig::default()
        })
        .unwrap();
        assert!(report.passed(), "{}", report.render());
        assert!(report.checked > 0);
    }

    #[test]
    fn a_corrupted_gradient_is_caught() {
        let mut rng = Rng::new(5);
        let (params, a, v, label) = random_instance(&mut rng, 4).unwrap();
        let entries = check_sample(&params, &a, &v, label, 1e-5, 1e-6).unwrap();
        let e = entries.iter().find(|e| e.analytic.abs() > 1e-3).unwrap();
        assert!(relative_error(e.analytic * 1.01, e.numeric, 1e-6) > 1e-4);
    }
}
