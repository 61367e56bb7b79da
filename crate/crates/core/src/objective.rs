//! Temperature-scaled contrastive distillation loss.
//!
//! For a batch of `N` student rows `s_i` and teacher rows `t_i`,
//!
//! ```text
//! loss = -(1/N) * sum_i log( exp(cos(s_i, t_i)/tau) / sum_j exp(cos(s_i, t_j)/tau) )
//! ```
//!
//! Negatives come from the teacher side only. The teacher is frozen: only the
//! gradient with respect to the raw (unnormalized) student rows is returned,
//! and it includes the Jacobian of the cosine normalization.

use crate::embedding::{dot, norm, Matrix};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, stream, StreamKind};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Same shape as the student batch.
    pub grad_student: Matrix,
    pub batch_size: usize,
}

struct Normalized {
    rows: Matrix,
    norms: Vec<f64>,
}

fn normalized(m: &Matrix) -> Result<Normalized> {
    let mut rows = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector { row: Some(i) });
        }
        rows.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok(Normalized { rows, norms })
}

fn check_shapes(student: &Matrix, teacher: &Matrix) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch {
            left: student.shape(),
            right: teacher.shape(),
        });
    }
    if student.rows() == 0 || student.cols() == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    Ok(())
}

/// Per-row term of the loss from one row of logits.
///
/// Returns `(term, probabilities)`. The term is evaluated as
/// `(max - logit_i) + ln_1p(sum of the other shifted exponentials)` so it stays
/// accurate when the softmax saturates.
fn row_term(logits: &[f64], positive: usize) -> (f64, Vec<f64>) {
    let (arg_max, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
    let shifted: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let rest: f64 = shifted
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg_max)
        .map(|(_, e)| e)
        .sum();
    let term = (max - logits[positive]) + rest.ln_1p();
    let denom = 1.0 + rest;
    let probs = shifted.into_iter().map(|e| e / denom).collect();
    (term, probs)
}

fn logits_row(u: &[f64], teacher: &Matrix, tau: f64) -> Vec<f64> {
    teacher.iter_rows().map(|t| dot(u, t) / tau).collect()
}

/// The `N` per-row terms whose mean is the loss. Row `i` depends only on
/// student row `i`.
pub fn distill_row_losses(student: &Matrix, teacher: &Matrix, tau: Temperature) -> Result<Vec<f64>> {
    check_shapes(student, teacher)?;
    let s = normalized(student)?;
    let t = normalized(teacher)?;
    Ok((0..student.rows())
        .map(|i| row_term(&logits_row(s.rows.row(i), &t.rows, tau.0), i).0)
        .collect())
}

pub fn distill_loss(student: &Matrix, teacher: &Matrix, tau: Temperature) -> Result<LossOutput> {
    check_shapes(student, teacher)?;
    let n = student.rows();
    let s = normalized(student)?;
    let t = normalized(teacher)?;
    let tau = tau.0;
    let inv_n = 1.0 / n as f64;

    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, student.cols());
    for i in 0..n {
        let u = s.rows.row(i);
        let (term, probs) = row_term(&logits_row(u, &t.rows, tau), i);
        loss += term;

        // dL/du_i = sum_j (p_ij - [i == j]) t_j / (N tau)
        let mut g = vec![0.0; student.cols()];
        for (j, p) in probs.iter().enumerate() {
            let coeff = (p - if i == j { 1.0 } else { 0.0 }) * inv_n / tau;
            if coeff == 0.0 {
                continue;
            }
            for (gk, tk) in g.iter_mut().zip(t.rows.row(j)) {
                *gk += coeff * tk;
            }
        }
        // Through u = s / |s|: (I - u u^T) g / |s|
        let radial = dot(&g, u);
        for ((out, gk), uk) in grad.row_mut(i).iter_mut().zip(&g).zip(u) {
            *out = (gk - radial * uk) / s.norms[i];
        }
    }
    Ok(LossOutput {
        loss: loss * inv_n,
        grad_student: grad,
        batch_size: n,
    })
}

/// Compares the analytic student gradient with central finite differences
/// (step `1e-5`) on a random Gaussian batch. Returns the maximum over entries
/// of `|analytic - fd| / (|fd| + 1e-12)`.
///
/// Each entry only moves its own row's term, so the differences are taken on
/// that term alone; the other terms cancel exactly in exact arithmetic.
pub fn distill_loss_symbolic_check(n: usize, d: usize, tau: Temperature, seed: u64) -> Result<f64> {
    if n < 2 || d < 2 {
        return Err(Error::InvalidConfig("gradient check needs N >= 2 and d >= 2".into()));
    }
    let mut rng = stream(seed, StreamKind::GradCheck, 0);
    let student = Matrix::from_vec(n, d, gaussian_vec(&mut rng, n * d, 1.0))?;
    let teacher = Matrix::from_vec(n, d, gaussian_vec(&mut rng, n * d, 1.0))?;
    let analytic = distill_loss(&student, &teacher, tau)?.grad_student;

    const STEP: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for k in 0..d {
            let mut plus = student.clone();
            plus[(i, k)] += STEP;
            let mut minus = student.clone();
            minus[(i, k)] -= STEP;
            let lp = distill_row_losses(&plus, &teacher, tau)?[i];
            let lm = distill_row_losses(&minus, &teacher, tau)?[i];
            let fd = (lp - lm) / (2.0 * STEP) / n as f64;
            let err = (analytic[(i, k)] - fd).abs() / (fd.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
