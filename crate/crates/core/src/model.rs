//! Everything around the fusion layer: per-token encoders, the linear head,
//! the loss, initialization, parameter accounting and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{self, AblationMode, FusionForwardTrace, FusionParams, Modality, ModalityTokens};
use crate::linalg::{matmul, softmax_row, truncated_normal, truncated_normal_matrix, Matrix, Rng, Vector};

/// Default standard deviation of the truncated-normal weight init.
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub d_in_a: usize,
    pub d_in_v: usize,
    pub hidden: usize,
    pub dim: usize,
    pub classes: usize,
    pub init_std: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_in_a, self.d_in_v, self.hidden, self.dim, self.classes];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("model dimensions must be >= 1, got {dims:?}")));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("init_std must be > 0, got {}", self.init_std)));
        }
        Ok(())
    }

    pub fn d_in(&self, m: Modality) -> usize {
        match m {
            Modality::A => self.d_in_a,
            Modality::V => self.d_in_v,
        }
    }
}

/// Two-layer perceptron applied to every token independently:
/// `z = elu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

/// Intermediate values of [`encode`] needed for its backward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    input: Matrix,
    pre: Matrix,
    hidden: Matrix,
}

fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn add_bias(m: &mut Matrix, b: &Vector) {
    for i in 0..m.rows() {
        for (x, y) in m.row_mut(i).iter_mut().zip(b.iter()) {
            *x += y;
        }
    }
}

fn column_sums(m: &Matrix) -> Vector {
    let mut out = Vector::zeros(m.cols());
    for i in 0..m.rows() {
        for (o, x) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
    out
}

impl EncoderParams {
    pub fn zeros(d_in: usize, hidden: usize, dim: usize) -> Self {
        EncoderParams {
            w1: Matrix::zeros(d_in, hidden),
            b1: Vector::zeros(hidden),
            w2: Matrix::zeros(hidden, dim),
            b2: Vector::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }
}

pub fn encode(params: &EncoderParams, modality: Modality, raw_tokens: &Matrix) -> Result<(ModalityTokens, EncoderCache)> {
    if raw_tokens.cols() != params.input_dim() {
        return Err(Error::shape(
            "encode",
            raw_tokens.shape_str(),
            format!("Lx{}", params.input_dim()),
        ));
    }
    let mut pre = matmul(raw_tokens, &params.w1)?;
    add_bias(&mut pre, &params.b1);
    let mut hidden = pre.clone();
    hidden.as_mut_slice().iter_mut().for_each(|x| *x = elu(*x));
    let mut out = matmul(&hidden, &params.w2)?;
    add_bias(&mut out, &params.b2);
    Ok((
        ModalityTokens::new(modality, out),
        EncoderCache {
            input: raw_tokens.clone(),
            pre,
            hidden,
        },
    ))
}

/// Gradients of the encoder parameters given `∂L/∂z` for every output token.
pub fn encode_backward(params: &EncoderParams, cache: &EncoderCache, grad_tokens: &Matrix) -> Result<EncoderParams> {
    if grad_tokens.shape() != (cache.input.rows(), params.output_dim()) {
        return Err(Error::shape(
            "encode backward",
            grad_tokens.shape_str(),
            format!("{}x{}", cache.input.rows(), params.output_dim()),
        ));
    }
    let w2 = matmul(&cache.hidden.transpose(), grad_tokens)?;
    let b2 = column_sums(grad_tokens);
    let mut dpre = matmul(grad_tokens, &params.w2.transpose())?;
    for (g, x) in dpre.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
        *g *= elu_grad(*x);
    }
    let w1 = matmul(&cache.input.transpose(), &dpre)?;
    let b1 = column_sums(&dpre);
    Ok(EncoderParams { w1, b1, w2, b2 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub weight: Matrix,
    pub bias: Vector,
}

pub fn classify(params: &ClassifierParams, h: &Vector) -> Result<Vector> {
    if h.dim() != params.weight.rows() || params.bias.dim() != params.weight.cols() {
        return Err(Error::shape(
            "classify",
            format!("1x{}", h.dim()),
            params.weight.shape_str(),
        ));
    }
    Ok(h.matmul(&params.weight)?.add(&params.bias))
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Vector, label: usize) -> Result<(f64, Vector)> {
    let classes = logits.dim();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];
    let mut grad = softmax_row(logits)?;
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub encoder_a: EncoderParams,
    pub encoder_v: EncoderParams,
    pub fusion: FusionParams,
    pub classifier: ClassifierParams,
}

/// Names of every parameter array, in checkpoint order.
pub const ARRAY_NAMES: [&str; 15] = [
    "encoder_a.w1",
    "encoder_a.b1",
    "encoder_a.w2",
    "encoder_a.b2",
    "encoder_v.w1",
    "encoder_v.b1",
    "encoder_v.w2",
    "encoder_v.b2",
    "fusion.w_q",
    "fusion.w_k",
    "fusion.w_v",
    "fusion.z_cls",
    "fusion.rotation",
    "classifier.weight",
    "classifier.bias",
];

pub const ROTATION_ARRAY: &str = "fusion.rotation";

/// Random init: every weight matrix and the class token are drawn from a
/// ±2σ truncated normal, biases start at zero and the rotation at identity.
pub fn init(spec: &ModelSpec, rng: &Rng) -> Result<ModelParams> {
    spec.validate()?;
    let std = spec.init_std;
    let enc_rng = |stream: u64, d_in: usize| {
        let mut r = rng.fork(stream);
        EncoderParams {
            w1: truncated_normal_matrix(&mut r, d_in, spec.hidden, std),
            b1: Vector::zeros(spec.hidden),
            w2: truncated_normal_matrix(&mut r, spec.hidden, spec.dim, std),
            b2: Vector::zeros(spec.dim),
        }
    };
    let encoder_a = enc_rng(1, spec.d_in_a);
    let encoder_v = enc_rng(2, spec.d_in_v);

    let mut r = rng.fork(3);
    let d = spec.dim;
    let fusion = FusionParams {
        w_q: truncated_normal_matrix(&mut r, d, d, std),
        w_k: truncated_normal_matrix(&mut r, d, d, std),
        w_v: truncated_normal_matrix(&mut r, d, d, std),
        z_cls: truncated_normal(&mut r, d, std),
        rotation: Matrix::identity(d),
    };
    let mut r = rng.fork(4);
    let classifier = ClassifierParams {
        weight: truncated_normal_matrix(&mut r, d, spec.classes, std),
        bias: Vector::zeros(spec.classes),
    };
    Ok(ModelParams {
        spec: *spec,
        encoder_a,
        encoder_v,
        fusion,
        classifier,
    })
}

/// Result of one full forward pass on a single sample.
#[derive(Clone, Debug)]
pub struct ModelForward {
    pub cache_a: EncoderCache,
    pub cache_v: EncoderCache,
    pub trace: FusionForwardTrace,
    pub logits: Vector,
}

impl ModelForward {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(v: &Vector) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-sample loss, parameter gradients and the forward pass they came from.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    pub loss: f64,
    pub grads: ModelParams,
    pub forward: ModelForward,
}

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn encoder(&self, m: Modality) -> &EncoderParams {
        match m {
            Modality::A => &self.encoder_a,
            Modality::V => &self.encoder_v,
        }
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> ModelParams {
        let mut z = self.clone();
        z.for_each_array_mut(|_, xs| xs.iter_mut().for_each(|x| *x = 0.0));
        z
    }

    pub(crate) fn arrays(&self) -> [&[f64]; 15] {
        [
            self.encoder_a.w1.as_slice(),
            self.encoder_a.b1.as_slice(),
            self.encoder_a.w2.as_slice(),
            self.encoder_a.b2.as_slice(),
            self.encoder_v.w1.as_slice(),
            self.encoder_v.b1.as_slice(),
            self.encoder_v.w2.as_slice(),
            self.encoder_v.b2.as_slice(),
            self.fusion.w_q.as_slice(),
            self.fusion.w_k.as_slice(),
            self.fusion.w_v.as_slice(),
            self.fusion.z_cls.as_slice(),
            self.fusion.rotation.as_slice(),
            self.classifier.weight.as_slice(),
            self.classifier.bias.as_slice(),
        ]
    }

    fn arrays_mut(&mut self) -> [&mut [f64]; 15] {
        [
            self.encoder_a.w1.as_mut_slice(),
            self.encoder_a.b1.as_mut_slice(),
            self.encoder_a.w2.as_mut_slice(),
            self.encoder_a.b2.as_mut_slice(),
            self.encoder_v.w1.as_mut_slice(),
            self.encoder_v.b1.as_mut_slice(),
            self.encoder_v.w2.as_mut_slice(),
            self.encoder_v.b2.as_mut_slice(),
            self.fusion.w_q.as_mut_slice(),
            self.fusion.w_k.as_mut_slice(),
            self.fusion.w_v.as_mut_slice(),
            self.fusion.z_cls.as_mut_slice(),
            self.fusion.rotation.as_mut_slice(),
            self.classifier.weight.as_mut_slice(),
            self.classifier.bias.as_mut_slice(),
        ]
    }

    fn shapes(&self) -> [(usize, usize); 15] {
        let v = |x: &Vector| (1, x.dim());
        [
            self.encoder_a.w1.shape(),
            v(&self.encoder_a.b1),
            self.encoder_a.w2.shape(),
            v(&self.encoder_a.b2),
            self.encoder_v.w1.shape(),
            v(&self.encoder_v.b1),
            self.encoder_v.w2.shape(),
            v(&self.encoder_v.b2),
            self.fusion.w_q.shape(),
            self.fusion.w_k.shape(),
            self.fusion.w_v.shape(),
            v(&self.fusion.z_cls),
            self.fusion.rotation.shape(),
            self.classifier.weight.shape(),
            v(&self.classifier.bias),
        ]
    }

    /// Visits every parameter array in checkpoint order.
    pub fn for_each_array(&self, mut f: impl FnMut(&'static str, &[f64])) {
        for (name, xs) in ARRAY_NAMES.iter().zip(self.arrays()) {
            f(name, xs);
        }
    }

    pub fn for_each_array_mut(&mut self, mut f: impl FnMut(&'static str, &mut [f64])) {
        for (name, xs) in ARRAY_NAMES.iter().zip(self.arrays_mut()) {
            f(name, xs);
        }
    }

    /// Total scalar parameter count; the rotation contributes `d²` when
    /// included.
    pub fn param_count(&self, include_rotation: bool) -> usize {
        let mut total = 0;
        self.for_each_array(|name, xs| {
            if include_rotation || name != ROTATION_ARRAY {
                total += xs.len();
            }
        });
        total
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_array(|_, xs| ok &= xs.iter().all(|x| x.is_finite()));
        ok
    }

    /// Order-sensitive hash of the exact bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        self.for_each_array(|_, xs| {
            for x in xs {
                h = crate::linalg::splitmix64(h ^ x.to_bits());
            }
        });
        h
    }

    pub fn forward(&self, raw_a: &Matrix, raw_v: &Matrix, mode: AblationMode) -> Result<ModelForward> {
        let (tokens_a, cache_a) = encode(&self.encoder_a, Modality::A, raw_a)?;
        let (tokens_v, cache_v) = encode(&self.encoder_v, Modality::V, raw_v)?;
        let trace = fusion::forward(&self.fusion, &tokens_a, &tokens_v, mode)?;
        let logits = classify(&self.classifier, &trace.output)?;
        Ok(ModelForward {
            cache_a,
            cache_v,
            trace,
            logits,
        })
    }

    /// Loss and gradients of every parameter for one sample. The rotation
    /// entry of the returned gradients is always zero.
    pub fn sample_gradient(&self, raw_a: &Matrix, raw_v: &Matrix, label: usize) -> Result<SampleGradient> {
        let fwd = self.forward(raw_a, raw_v, AblationMode::None)?;
        let (loss, dlogits) = cross_entropy(&fwd.logits, label)?;
        let grads = self.backward_from_logits(&fwd, &dlogits)?;
        Ok(SampleGradient {
            loss,
            grads,
            forward: fwd,
        })
    }

    /// Backpropagates `∂L/∂logits` through head, fusion and both encoders.
    pub fn backward_from_logits(&self, fwd: &ModelForward, dlogits: &Vector) -> Result<ModelParams> {
        let h = &fwd.trace.output;
        let classifier = ClassifierParams {
            weight: Matrix::outer(h, dlogits),
            bias: dlogits.clone(),
        };
        let dh = dlogits.matmul(&self.classifier.weight.transpose())?;
        self.backward_from_fused(fwd, &dh, classifier)
    }

    fn backward_from_fused(&self, fwd: &ModelForward, dh: &Vector, classifier: ClassifierParams) -> Result<ModelParams> {
        let fg = fusion::backward(&self.fusion, &fwd.trace, dh)?;
        let encoder_a = encode_backward(&self.encoder_a, &fwd.cache_a, &fg.tokens_a.total())?;
        let encoder_v = encode_backward(&self.encoder_v, &fwd.cache_v, &fg.tokens_v.total())?;
        let d = self.dim();
        Ok(ModelParams {
            spec: self.spec,
            encoder_a,
            encoder_v,
            fusion: FusionParams {
                w_q: fg.w_q,
                w_k: fg.w_k,
                w_v: fg.w_v,
                z_cls: fg.z_cls,
                rotation: Matrix::zeros(d, d),
            },
            classifier,
        })
    }

    /// `self += factor * other` over every array.
    pub fn axpy(&mut self, factor: f64, other: &ModelParams) {
        let src = other.arrays();
        for (dst, s) in self.arrays_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a += factor * b;
            }
        }
    }

    /// L2 norm over the arrays of one encoder.
    pub fn encoder_norm(&self, m: Modality) -> f64 {
        let e = self.encoder(m);
        [e.w1.as_slice(), e.b1.as_slice(), e.w2.as_slice(), e.b2.as_slice()]
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string(seed)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ModelParams, u64)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelParams::from_checkpoint_str(&text)
    }

    /// Plain-text checkpoint: a header with dims and seed, then every array
    /// in [`ARRAY_NAMES`] order. Floats use shortest round-trip notation so
    /// a save/load cycle is bit-exact.
    pub fn to_checkpoint_string(&self, seed: u64) -> String {
        let s = &self.spec;
        let mut out = String::new();
        out.push_str("rollingq-checkpoint 1\n");
        let _ = writeln!(out, "seed {seed}");
        let _ = writeln!(out, "d_in_a {}", s.d_in_a);
        let _ = writeln!(out, "d_in_v {}", s.d_in_v);
        let _ = writeln!(out, "hidden {}", s.hidden);
        let _ = writeln!(out, "dim {}", s.dim);
        let _ = writeln!(out, "classes {}", s.classes);
        let _ = writeln!(out, "init_std {:e}", s.init_std);
        let shapes = self.shapes();
        for ((name, xs), (rows, cols)) in ARRAY_NAMES.iter().zip(self.arrays()).zip(shapes) {
            let _ = writeln!(out, "array {name} {rows} {cols}");
            for r in 0..rows {
                let row: Vec<String> = xs[r * cols..(r + 1) * cols].iter().map(|x| format!("{x:e}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<(ModelParams, u64)> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse(format!("checkpoint truncated before {what}")));
        if next("header")? != "rollingq-checkpoint 1" {
            return Err(Error::Parse("not a version-1 checkpoint".into()));
        }
        fn field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("malformed line '{line}'")))?;
            if k != key {
                return Err(Error::Parse(format!("expected '{key}', found '{k}'")));
            }
            v.parse().map_err(|_| Error::Parse(format!("bad value for {key}: '{v}'")))
        }
        let seed: u64 = field(next("seed")?, "seed")?;
        let spec = ModelSpec {
            d_in_a: field(next("d_in_a")?, "d_in_a")?,
            d_in_v: field(next("d_in_v")?, "d_in_v")?,
            hidden: field(next("hidden")?, "hidden")?,
            dim: field(next("dim")?, "dim")?,
            classes: field(next("classes")?, "classes")?,
            init_std: field(next("init_std")?, "init_std")?,
        };
        spec.validate()?;
        let mut params = skeleton(&spec);
        let shapes = params.shapes();
        let mut arrays: Vec<Vec<f64>> = Vec::with_capacity(ARRAY_NAMES.len());
        for (name, (rows, cols)) in ARRAY_NAMES.iter().zip(shapes) {
            let header = next(name)?;
            let expected = format!("array {name} {rows} {cols}");
            if header != expected {
                return Err(Error::Parse(format!("expected '{expected}', found '{header}'")));
            }
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next(name)?;
                for tok in line.split_whitespace() {
                    values.push(tok.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{tok}' in {name}")))?);
                }
            }
            if values.len() != rows * cols {
                return Err(Error::Parse(format!("{name}: expected {} values, got {}", rows * cols, values.len())));
            }
            arrays.push(values);
        }
        if next("end")? != "end" {
            return Err(Error::Parse("missing end marker".into()));
        }
        for (dst, src) in params.arrays_mut().into_iter().zip(arrays) {
            dst.copy_from_slice(&src);
        }
        if !params.is_finite() {
            return Err(Error::Parse("checkpoint contains non-finite values".into()));
        }
        Ok((params, seed))
    }
}

fn skeleton(spec: &ModelSpec) -> ModelParams {
    let d = spec.dim;
    ModelParams {
        spec: *spec,
        encoder_a: EncoderParams::zeros(spec.d_in_a, spec.hidden, d),
        encoder_v: EncoderParams::zeros(spec.d_in_v, spec.hidden, d),
        fusion: FusionParams {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            z_cls: Vector::zeros(d),
            rotation: Matrix::identity(d),
        },
        classifier: ClassifierParams {
            weight: Matrix::zeros(d, spec.classes),
            bias: Vector::zeros(spec.classes),
        },
    }
}

/// Output of a classifier evaluation that diagnostics need: class logits and
/// the attention mass per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub logits: Vector,
    pub score_sums: (f64, f64),
}

impl Evaluation {
    pub fn score_sum(&self, m: Modality) -> f64 {
        match m {
            Modality::A => self.score_sums.0,
            Modality::V => self.score_sums.1,
        }
    }
}

/// Anything that classifies a two-modality sample and reports how its
/// attention mass was split. Implemented by [`ModelParams`]; tests use
/// hand-built implementations.
pub trait FusionClassifier {
    fn evaluate(&self, raw_a: &Matrix, raw_v: &Matrix, mode: AblationMode) -> Result<Evaluation>;
}

impl FusionClassifier for ModelParams {
    fn evaluate(&self, raw_a: &Matrix, raw_v: &Matrix, mode: AblationMode) -> Result<Evaluation> {
        let fwd = self.forward(raw_a, raw_v, mode)?;
        Ok(Evaluation {
            logits: fwd.logits,
            score_sums: fwd.trace.score_sums,
        })
    }
}
