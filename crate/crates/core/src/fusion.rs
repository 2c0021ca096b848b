//! Class-token attention fusion.
//!
//! A single query `q = z_cls · W_Q · R` attends over the concatenated key
//! sequence `[K_a, K_v]` with `K_m = Z_m W_K` and `V_m = Z_m W_V`:
//!
//! ```text
//! logits = q Kᵀ / √d
//! scores = softmax(logits)
//! h      = scores · V
//! ```
//!
//! The class token's own key and value are not part of the sequence. `R` is
//! the accumulated query rotation; it is treated as a constant in
//! [`backward`] and is only changed by the rotation controller.

use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, matmul, softmax_row, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    A,
    V,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::A, Modality::V];

    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::V,
            Modality::V => Modality::A,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::A => 0,
            Modality::V => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::A => "a",
            Modality::V => "v",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Modality::A),
            "v" | "V" => Ok(Modality::V),
            other => Err(Error::Parse(format!("unknown modality '{other}'"))),
        }
    }
}

/// Post-hoc attention surgery applied during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    None,
    /// Logits of this modality are set to `-inf` before the softmax.
    Mask(Modality),
    /// Each score is replaced by the mean score of its modality block.
    BlockAverage,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::None,
        AblationMode::Mask(Modality::A),
        AblationMode::Mask(Modality::V),
        AblationMode::BlockAverage,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::Mask(Modality::A) => "mask_a",
            AblationMode::Mask(Modality::V) => "mask_v",
            AblationMode::BlockAverage => "block_average",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityTokens {
    pub modality: Modality,
    pub tokens: Matrix,
}

impl ModalityTokens {
    pub fn new(modality: Modality, tokens: Matrix) -> Self {
        ModalityTokens { modality, tokens }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub z_cls: Vector,
    /// Accumulated query rotation. Never updated by gradient descent.
    pub rotation: Matrix,
}

impl FusionParams {
    pub fn dim(&self) -> usize {
        self.z_cls.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, m) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("rotation", &self.rotation),
        ] {
            if m.shape() != (d, d) {
                return Err(Error::shape("fusion params", format!("{name} {}", m.shape_str()), format!("{d}x{d}")));
            }
        }
        Ok(())
    }

    /// `z_cls · W_Q` before the rotation is applied.
    pub fn base_query(&self) -> Result<Vector> {
        self.z_cls.matmul(&self.w_q)
    }

    /// `z_cls · W_Q · R`
    pub fn effective_query(&self) -> Result<Vector> {
        self.base_query()?.matmul(&self.rotation)
    }
}

/// Everything produced by one forward pass, kept for the backward pass and
/// for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionForwardTrace {
    pub mode: AblationMode,
    pub tokens_a: Matrix,
    pub tokens_v: Matrix,
    pub base_query: Vector,
    pub query: Vector,
    pub keys_a: Matrix,
    pub keys_v: Matrix,
    pub values_a: Matrix,
    pub values_v: Matrix,
    /// Raw `q·k/√d` over `[K_a, K_v]`, before any ablation is applied.
    pub logits: Vector,
    /// Attention weights after the ablation mode.
    pub scores: Vector,
    pub output: Vector,
    pub score_sums: (f64, f64),
}

impl FusionForwardTrace {
    pub fn dim(&self) -> usize {
        self.query.dim()
    }

    pub fn len(&self, m: Modality) -> usize {
        self.keys(m).rows()
    }

    pub fn keys(&self, m: Modality) -> &Matrix {
        match m {
            Modality::A => &self.keys_a,
            Modality::V => &self.keys_v,
        }
    }

    pub fn values(&self, m: Modality) -> &Matrix {
        match m {
            Modality::A => &self.values_a,
            Modality::V => &self.values_v,
        }
    }

    pub fn tokens(&self, m: Modality) -> &Matrix {
        match m {
            Modality::A => &self.tokens_a,
            Modality::V => &self.tokens_v,
        }
    }

    pub fn score_sum(&self, m: Modality) -> f64 {
        match m {
            Modality::A => self.score_sums.0,
            Modality::V => self.score_sums.1,
        }
    }

    /// Index range of modality `m` inside the concatenated sequence.
    pub fn block(&self, m: Modality) -> std::ops::Range<usize> {
        let la = self.keys_a.rows();
        match m {
            Modality::A => 0..la,
            Modality::V => la..la + self.keys_v.rows(),
        }
    }

    pub fn average_key(&self, m: Modality) -> Vector {
        average_keys(self.keys(m))
    }
}

pub fn forward(
    params: &FusionParams,
    tokens_a: &ModalityTokens,
    tokens_v: &ModalityTokens,
    mode: AblationMode,
) -> Result<FusionForwardTrace> {
    if tokens_a.modality != Modality::A || tokens_v.modality != Modality::V {
        return Err(Error::InvalidArgument(format!(
            "expected token sets (a, v), got ({}, {})",
            tokens_a.modality, tokens_v.modality
        )));
    }
    let d = params.dim();
    for t in [&tokens_a.tokens, &tokens_v.tokens] {
        if t.cols() != d {
            return Err(Error::shape("fusion forward", t.shape_str(), format!("Lx{d}")));
        }
        if t.rows() == 0 {
            return Err(Error::InvalidArgument("modality with no tokens".into()));
        }
    }

    let base_query = params.base_query()?;
    let query = base_query.matmul(&params.rotation)?;
    let keys_a = matmul(&tokens_a.tokens, &params.w_k)?;
    let keys_v = matmul(&tokens_v.tokens, &params.w_k)?;
    let values_a = matmul(&tokens_a.tokens, &params.w_v)?;
    let values_v = matmul(&tokens_v.tokens, &params.w_v)?;

    let scale = 1.0 / (d as f64).sqrt();
    let la = keys_a.rows();
    let lv = keys_v.rows();
    let mut logits = Vec::with_capacity(la + lv);
    for keys in [&keys_a, &keys_v] {
        for j in 0..keys.rows() {
            let k = keys.row(j);
            logits.push(query.iter().zip(k).fold(0.0, |acc, (q, k)| acc + q * k) * scale);
        }
    }
    let logits = Vector::new(logits);

    let mut masked = logits.clone();
    if let AblationMode::Mask(m) = mode {
        let range = match m {
            Modality::A => 0..la,
            Modality::V => la..la + lv,
        };
        for j in range {
            masked[j] = f64::NEG_INFINITY;
        }
    }
    let mut scores = softmax_row(&masked)?;
    if mode == AblationMode::BlockAverage {
        for range in [0..la, la..la + lv] {
            let n = range.len() as f64;
            let mean = scores.as_slice()[range.clone()].iter().sum::<f64>() / n;
            for j in range {
                scores[j] = mean;
            }
        }
    }

    let mut output = Vector::zeros(d);
    let s = scores.as_slice();
    for (j, &w) in s[..la].iter().enumerate() {
        output.axpy(w, &Vector::new(values_a.row(j).to_vec()));
    }
    for (j, &w) in s[la..].iter().enumerate() {
        output.axpy(w, &Vector::new(values_v.row(j).to_vec()));
    }
    let score_sums = (s[..la].iter().sum(), s[la..].iter().sum());

    Ok(FusionForwardTrace {
        mode,
        tokens_a: tokens_a.tokens.clone(),
        tokens_v: tokens_v.tokens.clone(),
        base_query,
        query,
        keys_a,
        keys_v,
        values_a,
        values_v,
        logits,
        scores,
        output,
        score_sums,
    })
}

/// Gradient with respect to one modality's tokens, split by the path the
/// signal travels: through the keys (softmax weights) or through the values.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGradient {
    pub key_path: Matrix,
    pub value_path: Matrix,
}

impl TokenGradient {
    pub fn total(&self) -> Matrix {
        let mut t = self.key_path.clone();
        t.axpy(1.0, &self.value_path).expect("paths share a shape");
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionGradients {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub z_cls: Vector,
    pub tokens_a: TokenGradient,
    pub tokens_v: TokenGradient,
}

impl FusionGradients {
    pub fn tokens(&self, m: Modality) -> &TokenGradient {
        match m {
            Modality::A => &self.tokens_a,
            Modality::V => &self.tokens_v,
        }
    }
}

/// Exact gradients of a scalar loss given `grad_output = ∂L/∂h`.
pub fn backward(params: &FusionParams, trace: &FusionForwardTrace, grad_output: &Vector) -> Result<FusionGradients> {
    if trace.mode != AblationMode::None {
        return Err(Error::InvalidArgument(format!(
            "backward is defined for mode none only, got {}",
            trace.mode.label()
        )));
    }
    let d = params.dim();
    if grad_output.dim() != d || trace.dim() != d {
        return Err(Error::shape(
            "fusion backward",
            format!("grad 1x{} / trace 1x{}", grad_output.dim(), trace.dim()),
            format!("1x{d}"),
        ));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let la = trace.keys_a.rows();
    let s = trace.scores.as_slice();

    // ∂L/∂score_j = g · v_j
    let mut dscores = Vec::with_capacity(s.len());
    for values in [&trace.values_a, &trace.values_v] {
        for j in 0..values.rows() {
            dscores.push(values.row(j).iter().zip(grad_output.iter()).fold(0.0, |acc, (v, g)| acc + v * g));
        }
    }
    let weighted: f64 = s.iter().zip(&dscores).map(|(a, b)| a * b).sum();
    let dlogits: Vec<f64> = s.iter().zip(&dscores).map(|(sj, dj)| sj * (dj - weighted)).collect();

    let mut dquery = Vector::zeros(d);
    let mut token_grads = Vec::with_capacity(2);
    let mut dw_k = Matrix::zeros(d, d);
    let mut dw_v = Matrix::zeros(d, d);
    let w_k_t = params.w_k.transpose();
    let w_v_t = params.w_v.transpose();

    for (m, offset) in [(Modality::A, 0), (Modality::V, la)] {
        let keys = trace.keys(m);
        let len = keys.rows();
        let mut dkeys = Matrix::zeros(len, d);
        let mut dvalues = Matrix::zeros(len, d);
        for j in 0..len {
            let dl = dlogits[offset + j];
            let k = keys.row(j);
            for c in 0..d {
                dquery[c] += dl * k[c] * scale;
            }
            let row = dkeys.row_mut(j);
            for (c, r) in row.iter_mut().enumerate() {
                *r = dl * trace.query[c] * scale;
            }
            let sj = s[offset + j];
            let row = dvalues.row_mut(j);
            for (c, r) in row.iter_mut().enumerate() {
                *r = sj * grad_output[c];
            }
        }
        let tokens_t = trace.tokens(m).transpose();
        dw_k.axpy(1.0, &matmul(&tokens_t, &dkeys)?)?;
        dw_v.axpy(1.0, &matmul(&tokens_t, &dvalues)?)?;
        token_grads.push(TokenGradient {
            key_path: matmul(&dkeys, &w_k_t)?,
            value_path: matmul(&dvalues, &w_v_t)?,
        });
    }

    // q = z_cls W_Q R with R constant
    let dbase = dquery.matmul(&params.rotation.transpose())?;
    let w_q = Matrix::outer(&params.z_cls, &dbase);
    let z_cls = dbase.matmul(&params.w_q.transpose())?;

    let tokens_v = token_grads.pop().expect("two modalities");
    let tokens_a = token_grads.pop().expect("two modalities");
    Ok(FusionGradients {
        w_q,
        w_k: dw_k,
        w_v: dw_v,
        z_cls,
        tokens_a,
        tokens_v,
    })
}

/// Mean of the key rows of one modality.
pub fn average_keys(keys_m: &Matrix) -> Vector {
    keys_m.row_mean()
}

pub fn modality_score_sums(trace: &FusionForwardTrace) -> (f64, f64) {
    trace.score_sums
}

/// Factors of one modality's summed logits:
/// `Σ_j q·k_j/√d = (L/√d)·‖q‖·‖k̂‖·cosθ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineFactors {
    pub modality: Modality,
    pub len: usize,
    pub query_norm: f64,
    pub avg_key_norm: f64,
    pub cosine: f64,
}

impl CosineFactors {
    pub fn logit_sum(&self, dim: usize) -> f64 {
        self.len as f64 / (dim as f64).sqrt() * self.query_norm * self.avg_key_norm * self.cosine
    }
}

pub fn cosine_decomposition(trace: &FusionForwardTrace) -> Result<[CosineFactors; 2]> {
    let factors = |m: Modality| -> Result<CosineFactors> {
        let avg = trace.average_key(m);
        Ok(CosineFactors {
            modality: m,
            len: trace.len(m),
            query_norm: trace.query.norm(),
            avg_key_norm: avg.norm(),
            cosine: cosine_similarity(&trace.query, &avg)?,
        })
    };
    Ok([factors(Modality::A)?, factors(Modality::V)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    fn params_with_query(q: &[f64]) -> FusionParams {
        let d = q.len();
        FusionParams {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
            z_cls: Vector::new(q.to_vec()),
            rotation: Matrix::identity(d),
        }
    }

    fn tokens(m: Modality, rows: &[&[f64]]) -> ModalityTokens {
        ModalityTokens::new(m, Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
    }

    #[test]
    fn symmetric_keys_split_evenly() {
        let p = params_with_query(&[1.0, 0.0]);
        let a = tokens(Modality::A, &[&[1.0, 0.0]]);
        let v = tokens(Modality::V, &[&[1.0, 0.0]]);
        let t = forward(&p, &a, &v, AblationMode::None).unwrap();
        assert_eq!(t.scores.as_slice(), &[0.5, 0.5]);
        assert_eq!(modality_score_sums(&t), (0.5, 0.5));
        assert!(t.output.max_abs_diff(&Vector::new(vec![1.0, 0.0])) < 1e-15);
    }

    #[test]
    fn asymmetric_keys_match_brute_force_softmax() {
        let p = params_with_query(&[1.0, 0.0]);
        let a = tokens(Modality::A, &[&[1.0, 0.0]]);
        let v = tokens(Modality::V, &[&[0.0, 1.0]]);
        let t = forward(&p, &a, &v, AblationMode::None).unwrap();
        let la = (1.0 / 2f64.sqrt()).exp();
        let expected = la / (la + 1.0);
        let (sa, sv) = modality_score_sums(&t);
        assert!((sa - 0.6698).abs() < 1e-4 && (sv - 0.3302).abs() < 1e-4);
        assert!((sa - expected).abs() < 1e-15);
    }

    #[test]
    fn mask_zeroes_a_modality() {
        let p = params_with_query(&[1.0, 0.0]);
        let a = tokens(Modality::A, &[&[1.0, 0.0], &[0.5, 0.5]]);
        let v = tokens(Modality::V, &[&[0.0, 1.0]]);
        let t = forward(&p, &a, &v, AblationMode::Mask(Modality::V)).unwrap();
        assert_eq!(t.score_sums.1, 0.0);
        assert_eq!(t.score_sums.0, 1.0);
    }

    #[test]
    fn block_average_keeps_block_mass() {
        let mut rng = Rng::new(5);
        let p = params_with_query(&[0.3, -1.2, 0.8]);
        let rand_tokens = |rng: &mut Rng, m, l| {
            ModalityTokens::new(m, Matrix::new(l, 3, (0..3 * l).map(|_| rng.normal()).collect()).unwrap())
        };
        let a = rand_tokens(&mut rng, Modality::A, 3);
        let v = rand_tokens(&mut rng, Modality::V, 2);
        let plain = forward(&p, &a, &v, AblationMode::None).unwrap();
        let avg = forward(&p, &a, &v, AblationMode::BlockAverage).unwrap();
        assert!((plain.score_sums.0 - avg.score_sums.0).abs() < 1e-12);
        assert!((plain.score_sums.1 - avg.score_sums.1).abs() < 1e-12);
        assert_eq!(avg.scores[0], avg.scores[2]);
        assert_eq!(avg.scores[3], avg.scores[4]);
    }

    #[test]
    fn masking_a_moves_all_mass_to_v() {
        let p = params_with_query(&[1.0, 0.0]);
        let a = tokens(Modality::A, &[&[5.0, 0.0]]);
        let v = tokens(Modality::V, &[&[0.0, 1.0], &[0.0, -1.0]]);
        let t = forward(&p, &a, &v, AblationMode::Mask(Modality::A)).unwrap();
        assert_eq!(t.score_sums, (0.0, 1.0));
        assert_eq!(t.scores.as_slice(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = params_with_query(&[0.4, -0.2]);
        let a = tokens(Modality::A, &[&[1.0, 0.3]]);
        let v = tokens(Modality::V, &[&[-0.5, 1.0], &[0.2, 0.2]]);
        let t = forward(&p, &a, &v, AblationMode::None).unwrap();
        let g = backward(&p, &t, &Vector::zeros(2)).unwrap();
        for m in [&g.w_q, &g.w_k, &g.w_v, &g.tokens_a.total(), &g.tokens_v.total()] {
            assert!(m.as_slice().iter().all(|&x| x == 0.0));
        }
        assert!(g.z_cls.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_rejects_ablated_trace() {
        let p = params_with_query(&[1.0, 0.0]);
        let a = tokens(Modality::A, &[&[1.0, 0.0]]);
        let v = tokens(Modality::V, &[&[0.0, 1.0]]);
        let t = forward(&p, &a, &v, AblationMode::BlockAverage).unwrap();
        assert!(backward(&p, &t, &Vector::zeros(2)).is_err());
    }

    #[test]
    fn wrong_token_width_is_a_shape_error() {
        let p = params_with_query(&[1.0, 0.0]);
        let a = tokens(Modality::A, &[&[1.0, 0.0, 0.0]]);
        let v = tokens(Modality::V, &[&[0.0, 1.0]]);
        assert!(matches!(forward(&p, &a, &v, AblationMode::None), Err(Error::Shape { .. })));
    }

    #[test]
    fn average_keys_examples() {
        let one = Matrix::from_rows(&[vec![1.5, -2.0]]).unwrap();
        assert_eq!(average_keys(&one), Vector::new(vec![1.5, -2.0]));
        let two = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(average_keys(&two), Vector::new(vec![2.0, 0.0]));
        let copies = Matrix::from_rows(&vec![vec![0.25, 0.5, -1.0]; 7]).unwrap();
        assert!(average_keys(&copies).max_abs_diff(&Vector::new(vec![0.25, 0.5, -1.0])) < 1e-15);
    }

    #[test]
    fn cosine_decomposition_aligned_and_orthogonal() {
        let p = params_with_query(&[1.0, 0.0]);
        let a = tokens(Modality::A, &[&[2.0, 0.0], &[1.0, 0.0]]);
        let v = tokens(Modality::V, &[&[0.0, 1.0], &[0.0, 3.0]]);
        let t = forward(&p, &a, &v, AblationMode::None).unwrap();
        let [fa, fv] = cosine_decomposition(&t).unwrap();
        assert!((fa.cosine - 1.0).abs() < 1e-15);
        assert_eq!(fv.cosine, 0.0);
        assert_eq!(t.logits.as_slice()[2..].iter().sum::<f64>(), 0.0);
        assert!((fa.logit_sum(2) - t.logits.as_slice()[..2].iter().sum::<f64>()).abs() < 1e-12);
    }
}
