//! Dense real-matrix primitives shared by the losses, model and scoring code.
//!
//! Everything here is double precision; the finite-difference gradient checks
//! rely on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor below which a covariance column counts as collapsed.
pub const EPS_COL: f64 = 1e-12;
/// Distance floor below which two embeddings count as duplicates.
pub const EPS_DUP: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("empty matrix {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, i.e. row-by-row dot products.
    pub fn matmul_transposed(&self, other: &RealMatrix) -> Result<RealMatrix> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealMatrix {
        RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &RealMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

impl std::ops::Index<(usize, usize)> for RealMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for RealMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Symmetric d×d matrix of normalized cross-dimension second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix(RealMatrix);

impl CovarianceMatrix {
    /// Wraps an arbitrary square matrix, e.g. a hand-built test case.
    pub fn from_matrix(m: RealMatrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::shape(format!(
                "covariance must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &RealMatrix {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Sum of squared off-diagonal entries.
    pub fn off_diagonal_sq_sum(&self) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    acc += self.0[(i, j)] * self.0[(i, j)];
                }
            }
        }
        acc
    }

    /// Mean absolute off-diagonal entry; zero for `d = 1`.
    pub fn mean_abs_off_diagonal(&self) -> f64 {
        let d = self.dim();
        if d < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    acc += self.0[(i, j)].abs();
                }
            }
        }
        acc / (d * (d - 1)) as f64
    }
}

/// How [`normalized_covariance_with`] treats its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CovarianceOptions {
    /// Floor column norms at [`EPS_COL`] instead of failing.
    pub floored: bool,
    /// Subtract column means before normalizing.
    pub centered: bool,
}

impl CovarianceOptions {
    pub const STRICT: Self = Self {
        floored: false,
        centered: false,
    };
    pub const TRAINING: Self = Self {
        floored: true,
        centered: false,
    };
}

/// Strict normalized covariance: `C_ij = Σ_b z_bi z_bj / (‖z_i‖ ‖z_j‖)`,
/// with no mean subtraction.
pub fn normalized_covariance(batch: &RealMatrix) -> Result<CovarianceMatrix> {
    normalized_covariance_with(batch, CovarianceOptions::STRICT)
}

pub fn normalized_covariance_with(
    batch: &RealMatrix,
    opts: CovarianceOptions,
) -> Result<CovarianceMatrix> {
    CovarianceTrace::forward(batch, opts).map(|t| t.covariance)
}

/// Forward state of the covariance computation, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct CovarianceTrace {
    /// Columns divided by their (possibly floored) norms.
    unit_columns: RealMatrix,
    norms: Vec<f64>,
    floored: Vec<bool>,
    centered: bool,
    pub covariance: CovarianceMatrix,
}

impl CovarianceTrace {
    pub fn forward(batch: &RealMatrix, opts: CovarianceOptions) -> Result<Self> {
        let (n, d) = batch.shape();
        if n < 2 {
            return Err(Error::BatchTooSmall { rows: n });
        }
        let mut z = batch.clone();
        if opts.centered {
            for j in 0..d {
                let mean = (0..n).map(|b| z[(b, j)]).sum::<f64>() / n as f64;
                for b in 0..n {
                    z[(b, j)] -= mean;
                }
            }
        }
        let mut norms = vec![0.0; d];
        let mut floored = vec![false; d];
        for (j, nj) in norms.iter_mut().enumerate() {
            let raw = (0..n).map(|b| z[(b, j)] * z[(b, j)]).sum::<f64>().sqrt();
            if raw < EPS_COL {
                if !opts.floored {
                    return Err(Error::ZeroVarianceColumn { column: j });
                }
                floored[j] = true;
                *nj = EPS_COL;
            } else {
                *nj = raw;
            }
        }
        let mut unit = z;
        for b in 0..n {
            for (j, nj) in norms.iter().enumerate() {
                unit[(b, j)] /= nj;
            }
        }
        let mut c = RealMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = if i == j && !floored[i] {
                    1.0
                } else {
                    let s: f64 = (0..n).map(|b| unit[(b, i)] * unit[(b, j)]).sum();
                    s.clamp(-1.0, 1.0)
                };
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        Ok(Self {
            unit_columns: unit,
            norms,
            floored,
            centered: opts.centered,
            covariance: CovarianceMatrix(c),
        })
    }

    /// Maps `∂L/∂C` (every entry treated as an independent output) to
    /// `∂L/∂batch`.
    pub fn backward(&self, grad_c: &RealMatrix) -> Result<RealMatrix> {
        let (n, d) = self.unit_columns.shape();
        if grad_c.shape() != (d, d) {
            return Err(Error::shape(format!(
                "covariance gradient is {}x{}, expected {d}x{d}",
                grad_c.rows(),
                grad_c.cols()
            )));
        }
        // C = ÛᵀÛ, so ∂L/∂Û = Û (G + Gᵀ).
        let mut sym = RealMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                sym[(i, j)] = grad_c[(i, j)] + grad_c[(j, i)];
            }
        }
        let grad_unit = self.unit_columns.matmul(&sym)?;
        let mut grad = RealMatrix::zeros(n, d);
        for j in 0..d {
            if self.floored[j] {
                for b in 0..n {
                    grad[(b, j)] = grad_unit[(b, j)] / self.norms[j];
                }
                continue;
            }
            let proj: f64 = (0..n)
                .map(|b| self.unit_columns[(b, j)] * grad_unit[(b, j)])
                .sum();
            for b in 0..n {
                grad[(b, j)] =
                    (grad_unit[(b, j)] - self.unit_columns[(b, j)] * proj) / self.norms[j];
            }
        }
        if self.centered {
            for j in 0..d {
                let mean = (0..n).map(|b| grad[(b, j)]).sum::<f64>() / n as f64;
                for b in 0..n {
                    grad[(b, j)] -= mean;
                }
            }
        }
        Ok(grad)
    }
}

/// `√(Σ_ij C_ij²)`, diagonal included.
pub fn frobenius_norm(m: &CovarianceMatrix) -> f64 {
    m.matrix().as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Distance from row `u` to its nearest other row, with that row's index.
pub fn nearest_neighbor(batch: &RealMatrix, u: usize) -> Result<(usize, f64)> {
    let n = batch.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { rows: n });
    }
    if u >= n {
        return Err(Error::shape(format!("row {u} out of range for {n} rows")));
    }
    let x = batch.row(u);
    let mut best = (usize::MAX, f64::INFINITY);
    for v in (0..n).filter(|&v| v != u) {
        let dist = euclidean_distance(x, batch.row(v));
        if dist < best.1 {
            best = (v, dist);
        }
    }
    Ok(best)
}

/// `min_{v≠u} ‖x_u − x_v‖`; fails when the minimum is an exact collapse.
pub fn pairwise_min_distance(batch: &RealMatrix, u: usize) -> Result<f64> {
    let (_, dist) = nearest_neighbor(batch, u)?;
    if dist < EPS_DUP {
        return Err(Error::DuplicateEmbedding { row: u });
    }
    Ok(dist)
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    Ok(softmax_unchecked(logits, temperature))
}

pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= EPS_COL {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Central finite-difference gradient of `f` at `at`.
pub fn finite_diff_gradient<F>(f: F, at: &RealMatrix, step: f64) -> RealMatrix
where
    F: Fn(&RealMatrix) -> f64,
{
    let mut grad = RealMatrix::zeros(at.rows(), at.cols());
    let mut probe = at.clone();
    for idx in 0..at.as_slice().len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + step;
        let plus = f(&probe);
        probe.as_mut_slice()[idx] = orig - step;
        let minus = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest entrywise deviation relative to the larger of the two max-norms.
///
/// This is the error measure the gradient checks report.
pub fn relative_error(analytic: &RealMatrix, numeric: &RealMatrix) -> f64 {
    debug_assert_eq!(analytic.shape(), numeric.shape());
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-12);
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use super::*;

    fn m(rows: &[&[f64]]) -> RealMatrix {
        RealMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn covariance_of_orthogonal_columns_is_identity() {
        let c = normalized_covariance(&m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(c.matrix(), &RealMatrix::identity(2));
    }

    #[test]
    fn covariance_of_duplicated_column_is_one() {
        let c = normalized_covariance(&m(&[&[1.0, 1.0, 2.0], &[-3.0, -3.0, 1.0], &[0.5, 0.5, 0.0]]))
            .unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((c.get(1, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn covariance_hand_case() {
        let c = normalized_covariance(&m(&[&[1.0, 2.0], &[2.0, 1.0], &[3.0, 3.0]])).unwrap();
        assert!((c.get(0, 1) - 13.0 / 14.0).abs() < 1e-15);
        assert_eq!(c.get(0, 1), c.get(1, 0));
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn zero_column_is_rejected_strict_and_floored_in_training() {
        let batch = m(&[&[1.0, 0.0], &[2.0, 0.0]]);
        assert!(matches!(
            normalized_covariance(&batch),
            Err(Error::ZeroVarianceColumn { column: 1 })
        ));
        let c = normalized_covariance_with(&batch, CovarianceOptions::TRAINING).unwrap();
        assert_eq!(c.get(1, 1), 0.0);
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn centered_covariance_is_pearson_correlation() {
        let batch = m(&[&[1.0, 2.0], &[2.0, 4.5], &[3.0, 5.0], &[4.0, 9.0]]);
        let c = normalized_covariance_with(
            &batch,
            CovarianceOptions {
                floored: false,
                centered: true,
            },
        )
        .unwrap();
        let (x, y) = (batch.column(0), batch.column(1));
        let mx = x.iter().sum::<f64>() / 4.0;
        let my = y.iter().sum::<f64>() / 4.0;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        assert!((c.get(0, 1) - sxy / (sxx * syy).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn frobenius_norm_cases() {
        let id = CovarianceMatrix::from_matrix(RealMatrix::identity(5)).unwrap();
        assert!((frobenius_norm(&id) - 5f64.sqrt()).abs() < 1e-15);
        let ones = CovarianceMatrix::from_matrix(RealMatrix::filled(2, 2, 1.0)).unwrap();
        assert_eq!(frobenius_norm(&ones), 2.0);
        let r = 13.0 / 14.0;
        let c = CovarianceMatrix::from_matrix(m(&[&[1.0, r], &[r, 1.0]])).unwrap();
        assert!((frobenius_norm(&c) - 1.929_894).abs() < 1e-6);
        assert!((frobenius_norm(&c) - (2.0 + 2.0 * r * r).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn min_distance_cases() {
        let tri = m(&[&[0.0, 0.0], &[3.0, 4.0], &[10.0, 0.0]]);
        assert_eq!(pairwise_min_distance(&tri, 0).unwrap(), 5.0);
        let line = m(&[&[0.0, 0.0], &[1.0, 0.0], &[5.0, 0.0]]);
        assert_eq!(pairwise_min_distance(&line, 2).unwrap(), 4.0);
        let dup = m(&[&[1.0, 2.0], &[1.0, 2.0]]);
        assert!(matches!(
            pairwise_min_distance(&dup, 0),
            Err(Error::DuplicateEmbedding { row: 0 })
        ));
        assert!(matches!(
            pairwise_min_distance(&m(&[&[1.0]]), 0),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        // Logits 1 and 2 at τ = 0.5 differ by 2 after scaling.
        let e2 = 2f64.exp();
        let p = softmax(&[1.0, 2.0], 0.5).unwrap();
        assert!((p[0] - 1.0 / (1.0 + e2)).abs() < 1e-15);
        assert!((p[1] - e2 / (1.0 + e2)).abs() < 1e-15);
        let a = softmax(&[0.3, -1.2, 2.0], 0.7).unwrap();
        let b = softmax(&[100.3, 98.8, 102.0], 0.7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            softmax(&[1.0], 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&[1.0; 4]).unwrap(), vec![0.5; 4]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn finite_diff_of_sum_and_half_square() {
        let x = m(&[&[0.5, -1.0, 2.0], &[3.0, 0.25, -0.75]]);
        let g = finite_diff_gradient(|z| z.sum(), &x, 1e-5);
        for v in g.as_slice() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let g = finite_diff_gradient(
            |z| 0.5 * z.as_slice().iter().map(|v| v * v).sum::<f64>(),
            &x,
            1e-5,
        );
        assert!(relative_error(&x, &g) < 1e-9);
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let batch = m(&[
            &[0.3, -1.2, 0.8],
            &[1.1, 0.4, -0.3],
            &[-0.7, 0.9, 0.5],
            &[0.2, 0.1, 1.4],
        ]);
        let weights = m(&[&[0.0, 0.7, -0.4], &[1.3, 0.0, 0.2], &[0.5, -0.9, 0.0]]);
        for opts in [
            CovarianceOptions::STRICT,
            CovarianceOptions {
                floored: false,
                centered: true,
            },
        ] {
            let f = |z: &RealMatrix| {
                let c = normalized_covariance_with(z, opts).unwrap();
                dot(c.matrix().as_slice(), weights.as_slice())
            };
            let trace = CovarianceTrace::forward(&batch, opts).unwrap();
            let analytic = trace.backward(&weights).unwrap();
            let numeric = finite_diff_gradient(f, &batch, 1e-5);
            assert!(relative_error(&analytic, &numeric) < 1e-7);
        }
    }

    #[test]
    fn matmul_shapes() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let b = m(&[&[1.0, 0.0, 2.0], &[0.0, 1.0, -1.0]]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.row(2), &[5.0, 6.0, 4.0]);
        assert_eq!(a.matmul_transposed(&a).unwrap()[(0, 1)], 11.0);
        assert!(a.matmul(&a).is_err());
        assert!(RealMatrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    fn batch() -> impl Strategy<Value = RealMatrix> {
        (2usize..12, 2usize..8).prop_flat_map(|(r, c)| {
            prop::collection::vec(-3.0..3.0f64, r * c)
                .prop_map(move |v| RealMatrix::from_vec(r, c, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_unit_diagonal_and_bounded(b in batch()) {
            let c = normalized_covariance(&b).unwrap();
            for i in 0..c.dim() {
                prop_assert!((c.get(i, i) - 1.0).abs() <= 1e-12);
                for j in 0..c.dim() {
                    prop_assert_eq!(c.get(i, j), c.get(j, i));
                    prop_assert!(c.get(i, j).abs() <= 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn covariance_ignores_column_scale(b in batch(), col in 0usize..8, s in 0.1..10.0f64) {
            let col = col % b.cols();
            let mut scaled = b.clone();
            for r in 0..b.rows() {
                scaled[(r, col)] *= s;
            }
            let (c0, c1) = (normalized_covariance(&b).unwrap(), normalized_covariance(&scaled).unwrap());
            for i in 0..c0.dim() {
                for j in 0..c0.dim() {
                    prop_assert!((c0.get(i, j) - c1.get(i, j)).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn softmax_sums_to_one_and_ignores_shifts(
            logits in prop::collection::vec(-20.0..20.0f64, 1..40),
            shift in -50.0..50.0f64,
            tau in 0.04..2.0f64,
        ) {
            let p = softmax(&logits, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
