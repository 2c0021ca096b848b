//! Seeded two-modality classification data.
//!
//! Every class owns one random unit prototype direction per modality. A
//! token of modality `m` is `s_m · prototype_m(class) + ε` with `ε ~ N(0, I)`,
//! so `s_m` sets how informative the modality is. With probability
//! `sample_varying_prob` a sample swaps the two strengths, which moves the
//! label signal to the other modality for that sample only.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::Modality;
use crate::linalg::{Matrix, Rng, Vector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub len_a: usize,
    pub len_v: usize,
    pub d_in_a: usize,
    pub d_in_v: usize,
    pub s_a: f64,
    pub s_v: f64,
    pub sample_varying_prob: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            len_a: 4,
            len_v: 4,
            d_in_a: 8,
            d_in_v: 8,
            s_a: 1.5,
            s_v: 0.5,
            sample_varying_prob: 0.0,
            train_size: 2000,
            test_size: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.classes,
            self.len_a,
            self.len_v,
            self.d_in_a,
            self.d_in_v,
            self.train_size,
            self.test_size,
        ];
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("dataset sizes must be >= 1, got {sizes:?}")));
        }
        if !(self.s_a >= 0.0 && self.s_v >= 0.0) || (self.s_a == 0.0 && self.s_v == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "informativeness must be >= 0 with at least one > 0, got ({}, {})",
                self.s_a, self.s_v
            )));
        }
        if !(0.0..=1.0).contains(&self.sample_varying_prob) {
            return Err(Error::InvalidArgument(format!(
                "sample_varying_prob must lie in [0, 1], got {}",
                self.sample_varying_prob
            )));
        }
        Ok(())
    }

    pub fn len(&self, m: Modality) -> usize {
        match m {
            Modality::A => self.len_a,
            Modality::V => self.len_v,
        }
    }

    pub fn d_in(&self, m: Modality) -> usize {
        match m {
            Modality::A => self.d_in_a,
            Modality::V => self.d_in_v,
        }
    }
}

/// Which modality carries the stronger label signal in a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Informative {
    A,
    V,
    Both,
}

impl Informative {
    pub fn as_str(self) -> &'static str {
        match self {
            Informative::A => "a",
            Informative::V => "v",
            Informative::Both => "both",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Informative::A),
            "v" => Ok(Informative::V),
            "both" => Ok(Informative::Both),
            other => Err(Error::Parse(format!("unknown informative modality '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub raw_a: Matrix,
    pub raw_v: Matrix,
    pub label: usize,
    pub informative: Informative,
}

impl Sample {
    pub fn raw(&self, m: Modality) -> &Matrix {
        match m {
            Modality::A => &self.raw_a,
            Modality::V => &self.raw_v,
        }
    }

    fn raw_mut(&mut self, m: Modality) -> &mut Matrix {
        match m {
            Modality::A => &mut self.raw_a,
            Modality::V => &mut self.raw_v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vector {
    loop {
        let v = Vector::new((0..dim).map(|_| rng.normal()).collect());
        if let Ok(u) = v.unit("prototype") {
            return u;
        }
    }
}

/// Class prototypes: `prototypes[m][c]` is the unit direction of class `c`
/// in modality `m`.
pub fn prototypes(spec: &SyntheticSpec) -> [Vec<Vector>; 2] {
    let mut rng = Rng::new(spec.seed).fork(0x70);
    let a = (0..spec.classes).map(|_| random_unit(&mut rng, spec.d_in_a)).collect();
    let v = (0..spec.classes).map(|_| random_unit(&mut rng, spec.d_in_v)).collect();
    [a, v]
}

fn make_split(spec: &SyntheticSpec, protos: &[Vec<Vector>; 2], size: usize, rng: &mut Rng) -> Vec<Sample> {
    let mut labels: Vec<usize> = (0..size).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);
    labels
        .into_iter()
        .map(|label| {
            let swapped = spec.sample_varying_prob > 0.0 && rng.uniform() < spec.sample_varying_prob;
            let (s_a, s_v) = if swapped { (spec.s_v, spec.s_a) } else { (spec.s_a, spec.s_v) };
            let mut tokens = |m: Modality, s: f64| {
                let proto = &protos[m.index()][label];
                let (len, d) = (spec.len(m), spec.d_in(m));
                let mut data = Vec::with_capacity(len * d);
                for _ in 0..len {
                    for p in proto.iter() {
                        data.push(s * p + rng.normal());
                    }
                }
                Matrix::new(len, d, data).expect("sized to shape")
            };
            let raw_a = tokens(Modality::A, s_a);
            let raw_v = tokens(Modality::V, s_v);
            let informative = if s_a > s_v {
                Informative::A
            } else if s_v > s_a {
                Informative::V
            } else {
                Informative::Both
            };
            Sample {
                raw_a,
                raw_v,
                label,
                informative,
            }
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let protos = prototypes(spec);
    let root = Rng::new(spec.seed);
    let train = make_split(spec, &protos, spec.train_size, &mut root.fork(0x71));
    let test = make_split(spec, &protos, spec.test_size, &mut root.fork(0x72));
    Ok(Dataset { train, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbMode {
    /// `(1 − level)·x + level·n`, `n` zero-mean Gaussian with each token's
    /// empirical variance.
    Replace,
    /// `x + level·σ̂·ε` with `σ̂` each token's empirical standard deviation.
    Additive,
}

impl PerturbMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbMode::Replace => "replace",
            PerturbMode::Additive => "additive",
        }
    }
}

impl std::str::FromStr for PerturbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(PerturbMode::Replace),
            "additive" => Ok(PerturbMode::Additive),
            other => Err(Error::Parse(format!("unknown perturbation mode '{other}'"))),
        }
    }
}

fn row_std(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    (row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Returns a noisy copy of `sample` with one modality corrupted. Level 0
/// returns an identical copy in both modes.
pub fn perturb(sample: &Sample, modality: Modality, level: f64, mode: PerturbMode, rng: &mut Rng) -> Result<Sample> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidArgument(format!("noise level must lie in [0, 1], got {level}")));
    }
    let mut out = sample.clone();
    if level == 0.0 {
        return Ok(out);
    }
    let tokens = out.raw_mut(modality);
    for i in 0..tokens.rows() {
        let row = tokens.row_mut(i);
        let sigma = row_std(row);
        for x in row.iter_mut() {
            let eps = rng.normal();
            *x = match mode {
                PerturbMode::Replace => (1.0 - level) * *x + level * sigma * eps,
                PerturbMode::Additive => *x + level * sigma * eps,
            };
        }
    }
    Ok(out)
}

/// Shuffled mini-batches of sample indices; the last batch may be short.
pub fn batches(len: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Writes a dataset as comma-separated text, one token per line:
/// `split,sample_id,modality,label,informative,token,x0,x1,...`.
pub fn dump(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("split,sample_id,modality,label,informative,token,values\n");
    for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        for (id, s) in samples.iter().enumerate() {
            for m in Modality::BOTH {
                let raw = s.raw(m);
                for t in 0..raw.rows() {
                    let _ = write!(out, "{split},{id},{m},{},{},{t}", s.label, s.informative.as_str());
                    for x in raw.row(t) {
                        let _ = write!(out, ",{x:e}");
                    }
                    out.push('\n');
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dump(&text)
}

fn parse_dump(text: &str) -> Result<Dataset> {
    struct Partial {
        label: usize,
        informative: Informative,
        rows: [Vec<Vec<f64>>; 2],
    }
    let mut splits: [Vec<Partial>; 2] = [Vec::new(), Vec::new()];
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let bad = |what: &str| Error::Parse(format!("line {}: {what}", lineno + 1));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 7 {
            return Err(bad("too few columns"));
        }
        let split = match cols[0] {
            "train" => 0,
            "test" => 1,
            _ => return Err(bad("unknown split")),
        };
        let id: usize = cols[1].parse().map_err(|_| bad("bad sample id"))?;
        let m: Modality = cols[2].parse()?;
        let label: usize = cols[3].parse().map_err(|_| bad("bad label"))?;
        let informative = Informative::parse(cols[4])?;
        let values = cols[6..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?;
        let samples = &mut splits[split];
        if id == samples.len() {
            samples.push(Partial {
                label,
                informative,
                rows: [Vec::new(), Vec::new()],
            });
        } else if id + 1 != samples.len() {
            return Err(bad("sample ids out of order"));
        }
        samples[id].rows[m.index()].push(values);
    }
    let finish = |parts: Vec<Partial>| -> Result<Vec<Sample>> {
        parts
            .into_iter()
            .map(|p| {
                let [a, v] = p.rows;
                Ok(Sample {
                    raw_a: Matrix::from_rows(&a)?,
                    raw_v: Matrix::from_rows(&v)?,
                    label: p.label,
                    informative: p.informative,
                })
            })
            .collect()
    };
    let [train, test] = splits;
    Ok(Dataset {
        train: finish(train)?,
        test: finish(test)?,
    })
}
