//! Small dense linear algebra used throughout the crate.
//!
//! Everything is row-major `f64`. Vectors are treated as row vectors, so a
//! linear map is applied as `v · M`. Summation order inside [`matmul`] is
//! fixed (ascending shared index) so that results are bit-reproducible.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Norm below which a vector is considered to have no direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Cosine below which a pair is treated as antiparallel by
/// [`plane_rotation_from_pair`].
pub const ANTIPARALLEL_COS: f64 = -1.0 + 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = Vector::zeros(dim);
        v.data[index] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        l2_norm(self)
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector::new(self.data.iter().map(|x| x * factor).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        Vector::new(self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Vector::new(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &Vector) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    /// Unit vector in the same direction; errors when the norm is below
    /// [`DEGENERATE_NORM`].
    pub fn unit(&self, context: &'static str) -> Result<Vector> {
        let n = self.norm();
        if n <= DEGENERATE_NORM {
            return Err(Error::DegenerateVector(context));
        }
        Ok(self.scaled(1.0 / n))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row-vector times matrix.
    pub fn matmul(&self, m: &Matrix) -> Result<Vector> {
        if self.dim() != m.rows {
            return Err(Error::shape(
                "vector-matrix product",
                format!("1x{}", self.dim()),
                m.shape_str(),
            ));
        }
        let mut out = vec![0.0; m.cols];
        for (k, &x) in self.data.iter().enumerate() {
            let row = m.row(k);
            for (o, &r) in out.iter_mut().zip(row) {
                *o += x * r;
            }
        }
        Ok(Vector::new(out))
    }

    pub fn as_row_matrix(&self) -> Matrix {
        Matrix {
            rows: 1,
            cols: self.dim(),
            data: self.data.clone(),
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector::new(data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix construction",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", format!("{cols} columns"), format!("{} columns", r.len())));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// Outer product `uᵀ v`.
    pub fn outer(u: &Vector, v: &Vector) -> Self {
        let mut m = Matrix::zeros(u.dim(), v.dim());
        for i in 0..u.dim() {
            for j in 0..v.dim() {
                m.data[i * v.dim() + j] = u[i] * v[j];
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_vector(&self, i: usize) -> Vector {
        Vector::new(self.row(i).to_vec())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    /// `self += factor * other`; shapes must agree.
    pub fn axpy(&mut self, factor: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("axpy", self.shape_str(), other.shape_str()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Arithmetic mean of the rows.
    pub fn row_mean(&self) -> Vector {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        let n = self.rows as f64;
        Vector::new(out.into_iter().map(|x| x / n).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest entrywise deviation of `MᵀM` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let mtm = matmul(&self.transpose(), self).expect("square product");
        mtm.max_abs_diff(&Matrix::identity(self.cols))
    }

    /// Determinant by LU decomposition with partial pivoting.
    pub fn determinant(&self) -> Result<f64> {
        if self.rows != self.cols {
            return Err(Error::shape("determinant", self.shape_str(), "square"));
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
                .expect("nonempty range");
            if a[pivot * n + col] == 0.0 {
                return Ok(0.0);
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                }
                det = -det;
            }
            let p = a[col * n + col];
            det *= p;
            for r in col + 1..n {
                let f = a[r * n + col] / p;
                if f != 0.0 {
                    for j in col..n {
                        a[r * n + j] -= f * a[col * n + j];
                    }
                }
            }
        }
        Ok(det)
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|x| format!("{x:.6}")).collect();
            writeln!(f, "[{}]", row.join(", "))?;
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Standard matrix product. For every output entry the shared index is
/// accumulated in ascending order starting from zero.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape_str(), b.shape_str()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let x = a.data[i * a.cols + k];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax. `-inf` entries are masked and map to exactly 0.
pub fn softmax_row(logits: &Vector) -> Result<Vector> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::FullyMasked);
    }
    let exps: Vec<f64> = logits
        .iter()
        .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() })
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(Vector::new(exps.into_iter().map(|e| e / total).collect()))
}

pub fn l2_norm(u: &Vector) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_similarity(u: &Vector, v: &Vector) -> Result<f64> {
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu <= DEGENERATE_NORM || nv <= DEGENERATE_NORM {
        return Err(Error::DegenerateCosine);
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Rotation acting only in the plane spanned by orthonormal `e1`, `e2`,
/// mapping `e1` to `cos·e1 + sin·e2` (row-vector convention).
fn rotation_in_plane(e1: &Vector, e2: &Vector, cos: f64, sin: f64) -> Matrix {
    let d = e1.dim();
    let mut r = Matrix::identity(d);
    for i in 0..d {
        for j in 0..d {
            let plane = e1[i] * e1[j] + e2[i] * e2[j];
            let skew = e1[i] * e2[j] - e2[i] * e1[j];
            let v = r.get(i, j) + (cos - 1.0) * plane + sin * skew;
            r.set(i, j, v);
        }
    }
    r
}

/// Minimal-angle rotation `R` with `unit(src) · R = unit(dst)`, acting as the
/// identity on the complement of `span{src, dst}`.
///
/// For (numerically) antiparallel inputs the plane is fixed by the
/// lowest-index basis axis that is not parallel to `src`, and the half-turn
/// is composed from two quarter-turns.
pub fn plane_rotation_from_pair(src: &Vector, dst: &Vector) -> Result<Matrix> {
    if src.dim() != dst.dim() {
        return Err(Error::shape(
            "plane_rotation_from_pair",
            format!("1x{}", src.dim()),
            format!("1x{}", dst.dim()),
        ));
    }
    let d = src.dim();
    if d < 2 {
        return Err(Error::InvalidArgument("rotation needs dimension >= 2".into()));
    }
    let u = src.unit("rotation source")?;
    let w = dst.unit("rotation target")?;
    let c = u.dot(&w).clamp(-1.0, 1.0);

    if c < ANTIPARALLEL_COS {
        let axis = (0..d)
            .map(|i| {
                let e = Vector::basis(d, i);
                let mut p = e.clone();
                p.axpy(-u[i], &u);
                p
            })
            .find(|p| p.norm() > 1e-6)
            .expect("some basis axis is not parallel to a unit vector in d >= 2");
        let p = axis.unit("auxiliary axis")?;
        let first = plane_rotation_from_pair(&u, &p)?;
        let second = plane_rotation_from_pair(&p, &w)?;
        return matmul(&first, &second);
    }

    let mut perp = w.clone();
    perp.axpy(-c, &u);
    let s = perp.norm();
    if s <= DEGENERATE_NORM {
        return Ok(Matrix::identity(d));
    }
    let e2 = perp.scaled(1.0 / s);
    Ok(rotation_in_plane(&u, &e2, c, s))
}

/// Seeded random stream. Identical seeds yield bit-identical samples.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream derived from this stream's seed and a label.
    pub fn fork(&self, stream: u64) -> Rng {
        let mixed = splitmix64(self.seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        Rng::new(mixed)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One draw from N(0, std²), resampled until it lies within ±2·std.
pub fn truncated_normal_scalar(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let x = rng.normal() * std;
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

pub fn truncated_normal(rng: &mut Rng, dim: usize, std: f64) -> Vector {
    Vector::new((0..dim).map(|_| truncated_normal_scalar(rng, std)).collect())
}

pub fn truncated_normal_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| truncated_normal_scalar(rng, std)).collect(),
    }
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", format!("{} values", x.len()), format!("{} values", y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument("pearson needs at least 3 points".into()));
    }
    let constant = |s: &[f64]| s.iter().all(|&v| v == s[0]);
    if constant(x) || constant(y) {
        return Err(Error::ZeroVariance);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
