//! Training objectives, each returning its value together with the analytic
//! gradient with respect to its direct inputs.
//!
//! | loss | input differentiated |
//! |------|----------------------|
//! | [`cross_entropy_loss`] | student logits (softmax arguments), one row per local view |
//! | [`diversity_regularization`] | embedding batch |
//! | [`off_diagonal_regularization`] | teacher and student embedding batches |
//! | [`frobenius_regularization`] | teacher and student embedding batches |
//!
//! [`sdpn_loss`] and [`total_loss`] combine values whose gradients already
//! live in a common space (typically the flattened student parameters).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    frobenius_norm, nearest_neighbor, CovarianceMatrix, CovarianceOptions, CovarianceTrace,
    RealMatrix, EPS_DUP,
};

/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: RealMatrix,
}

/// Loss over a teacher and a student batch, with a gradient for each.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedLossValue {
    pub value: f64,
    pub teacher_gradient: RealMatrix,
    pub student_gradient: RealMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the diversity term inside the self-distillation loss.
    pub mu: f64,
    /// Weight of the dimension regularizer in the total loss.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu: 0.1,
            lambda: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be non-negative, got mu={} lambda={}",
                self.mu, self.lambda
            )));
        }
        Ok(())
    }
}

/// Which dimension regularizer joins the self-distillation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    #[default]
    None,
    OffDiagonal,
    Frobenius,
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "off_diagonal" | "off-diagonal" | "odr" => Ok(Self::OffDiagonal),
            "frobenius" | "fdr" => Ok(Self::Frobenius),
            other => Err(Error::InvalidConfig(format!("unknown regularizer `{other}`"))),
        }
    }
}

/// Scaling of the diversity term.
///
/// `PerRow` averages one nearest-neighbour log-distance per row.
/// `DoubleSum` keeps the redundant inner sum over `v`, which multiplies every
/// row's term by the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityScaling {
    #[default]
    PerRow,
    DoubleSum,
}

/// `Σ_g Σ_l H(P_tea(g) | P_stu(l))` with `H(a | b) = −Σ_k a_k log b_k`.
///
/// The gradient is taken with respect to the student softmax arguments and has
/// one row per local view: `Σ_g (P_stu(l) − P_tea(g))`. Teacher distributions
/// are constants.
pub fn cross_entropy_loss(p_teacher: &[Vec<f64>], p_student: &[Vec<f64>]) -> Result<LossValue> {
    let k = p_teacher
        .first()
        .or(p_student.first())
        .map(Vec::len)
        .ok_or_else(|| Error::shape("no distributions"))?;
    if p_teacher.is_empty() || p_student.is_empty() || k == 0 {
        return Err(Error::shape("need at least one teacher and one student view"));
    }
    for p in p_teacher.iter().chain(p_student) {
        if p.len() != k {
            return Err(Error::DistributionLengthMismatch {
                expected: k,
                found: p.len(),
            });
        }
    }
    let mut value = 0.0;
    let mut gradient = RealMatrix::zeros(p_student.len(), k);
    for (l, stu) in p_student.iter().enumerate() {
        for tea in p_teacher {
            for kk in 0..k {
                value -= tea[kk] * stu[kk].max(PROB_FLOOR).ln();
                gradient[(l, kk)] += stu[kk] - tea[kk];
            }
        }
    }
    Ok(LossValue { value, gradient })
}

/// `−(1/n) Σ_u log(min_{v≠u} ‖x_u − x_v‖)`; distances are floored at
/// [`EPS_DUP`]. The gradient of each row's term flows into the row and its
/// nearest neighbour.
pub fn diversity_regularization(batch: &RealMatrix, scaling: DiversityScaling) -> Result<LossValue> {
    let (n, d) = batch.shape();
    if n < 2 {
        return Err(Error::BatchTooSmall { rows: n });
    }
    let weight = match scaling {
        DiversityScaling::PerRow => 1.0 / n as f64,
        DiversityScaling::DoubleSum => 1.0,
    };
    let mut value = 0.0;
    let mut gradient = RealMatrix::zeros(n, d);
    for u in 0..n {
        let (v, dist) = nearest_neighbor(batch, u)?;
        if dist < EPS_DUP {
            value -= weight * EPS_DUP.ln();
            continue;
        }
        value -= weight * dist.ln();
        let coeff = weight / (dist * dist);
        for j in 0..d {
            let diff = batch[(u, j)] - batch[(v, j)];
            gradient[(u, j)] -= coeff * diff;
            gradient[(v, j)] += coeff * diff;
        }
    }
    Ok(LossValue { value, gradient })
}

fn check_pair(teacher: &RealMatrix, student: &RealMatrix) -> Result<()> {
    if teacher.cols() != student.cols() {
        return Err(Error::shape(format!(
            "teacher batch has dimension {}, student batch {}",
            teacher.cols(),
            student.cols()
        )));
    }
    Ok(())
}

fn off_diagonal_single(batch: &RealMatrix, opts: CovarianceOptions) -> Result<(f64, RealMatrix)> {
    let trace = CovarianceTrace::forward(batch, opts)?;
    let c = trace.covariance.matrix();
    let d = c.rows();
    let mut grad_c = RealMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                grad_c[(i, j)] = 2.0 * c[(i, j)];
            }
        }
    }
    Ok((trace.covariance.off_diagonal_sq_sum(), trace.backward(&grad_c)?))
}

/// Sum of squared off-diagonal covariance entries over both batches.
pub fn off_diagonal_regularization(
    teacher_batch: &RealMatrix,
    student_batch: &RealMatrix,
    opts: CovarianceOptions,
) -> Result<PairedLossValue> {
    check_pair(teacher_batch, student_batch)?;
    let (vt, gt) = off_diagonal_single(teacher_batch, opts)?;
    let (vs, gs) = off_diagonal_single(student_batch, opts)?;
    Ok(PairedLossValue {
        value: vt + vs,
        teacher_gradient: gt,
        student_gradient: gs,
    })
}

/// `∂ log‖C‖_F / ∂C_ij` for a unit-diagonal `C`: `C_ij / (D + Σ_{i≠j} C_ij²)`
/// off the diagonal and zero on it.
pub fn frobenius_regularization_grad_wrt_c(c: &CovarianceMatrix) -> RealMatrix {
    let d = c.dim();
    let denom = d as f64 + c.off_diagonal_sq_sum();
    let mut g = RealMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                g[(i, j)] = c.get(i, j) / denom;
            }
        }
    }
    g
}

fn frobenius_single(batch: &RealMatrix, opts: CovarianceOptions) -> Result<(f64, RealMatrix)> {
    let trace = CovarianceTrace::forward(batch, opts)?;
    let cov = &trace.covariance;
    let value = frobenius_norm(cov).ln();
    let mut grad_c = frobenius_regularization_grad_wrt_c(cov);
    // A floored column has a zero diagonal entry, so D overcounts the squared
    // norm; the ratio is 1 for unit-diagonal input.
    let unit_denom = cov.dim() as f64 + cov.off_diagonal_sq_sum();
    grad_c.scale(unit_denom / frobenius_norm(cov).powi(2));
    Ok((value, trace.backward(&grad_c)?))
}

/// `log‖C_tea‖_F + log‖C_stu‖_F`.
pub fn frobenius_regularization(
    teacher_batch: &RealMatrix,
    student_batch: &RealMatrix,
    opts: CovarianceOptions,
) -> Result<PairedLossValue> {
    check_pair(teacher_batch, student_batch)?;
    let (vt, gt) = frobenius_single(teacher_batch, opts)?;
    let (vs, gs) = frobenius_single(student_batch, opts)?;
    Ok(PairedLossValue {
        value: vt + vs,
        teacher_gradient: gt,
        student_gradient: gs,
    })
}

/// Dispatches on `kind`; `None` yields a zero loss with zero gradients.
pub fn dimension_regularization(
    kind: RegularizerKind,
    teacher_batch: &RealMatrix,
    student_batch: &RealMatrix,
    opts: CovarianceOptions,
) -> Result<PairedLossValue> {
    match kind {
        RegularizerKind::None => {
            check_pair(teacher_batch, student_batch)?;
            Ok(PairedLossValue {
                value: 0.0,
                teacher_gradient: RealMatrix::zeros(teacher_batch.rows(), teacher_batch.cols()),
                student_gradient: RealMatrix::zeros(student_batch.rows(), student_batch.cols()),
            })
        }
        RegularizerKind::OffDiagonal => {
            off_diagonal_regularization(teacher_batch, student_batch, opts)
        }
        RegularizerKind::Frobenius => frobenius_regularization(teacher_batch, student_batch, opts),
    }
}

fn combine(base: &LossValue, extra: &LossValue, weight: f64) -> Result<LossValue> {
    let mut gradient = base.gradient.clone();
    gradient.add_scaled(weight, &extra.gradient)?;
    Ok(LossValue {
        value: base.value + weight * extra.value,
        gradient,
    })
}

/// `L_CE + μ·L_RE`.
pub fn sdpn_loss(ce: &LossValue, re: &LossValue, w: &LossWeights) -> Result<LossValue> {
    combine(ce, re, w.mu)
}

/// `L_SDPN + λ·L_DR`.
pub fn total_loss(sdpn: &LossValue, dr: &LossValue, w: &LossWeights) -> Result<LossValue> {
    combine(sdpn, dr, w.lambda)
}
