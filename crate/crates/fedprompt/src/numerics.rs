//! Dense-vector math used by every other module: cosine similarity, L2
//! normalization with forward-mode directional derivatives, numerically
//! stable softmax cross-entropy, and a central-difference gradient checker.
//!
//! All arithmetic is double precision; the tolerances documented on each
//! operation assume it.

use crate::error::{Error, Result};

/// Dot product of two equal-length slices. Callers guarantee equal lengths.
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Euclidean norm.
pub fn l2_norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn require_same_dim(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Cosine similarity of two nonzero vectors.
///
/// Errors on a zero-norm argument rather than dividing by zero. The result
/// is clamped to [-1, 1] so rounding can never leak an out-of-range cosine
/// into downstream arccos-style consumers.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    require_same_dim(u, v)?;
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim first argument"));
    }
    if nv == 0.0 {
        return Err(Error::ZeroNorm("cosine_sim second argument"));
    }
    let c = dot(u, v) / (nu * nv);
    if !c.is_finite() {
        return Err(Error::NonFinite("cosine_sim"));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// L2-normalize a nonzero vector.
pub fn l2_normalize(u: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(u);
    if n == 0.0 {
        return Err(Error::ZeroNorm("l2_normalize"));
    }
    Ok(u.iter().map(|x| x / n).collect())
}

/// L2-normalize `u` and push a tangent vector through the normalization.
///
/// The Jacobian of x ↦ x/‖x‖ is (I/‖u‖ − u·uᵀ/‖u‖³); it is symmetric, so
/// the same call serves as both JVP and VJP. The returned `jvp` satisfies
/// ⟨unit, jvp⟩ = 0 (tangency to the unit sphere).
pub fn l2_normalize_with_jvp(u: &[f64], tangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    require_same_dim(u, tangent)?;
    let n = l2_norm(u);
    if n == 0.0 {
        return Err(Error::ZeroNorm("l2_normalize_with_jvp"));
    }
    let unit: Vec<f64> = u.iter().map(|x| x / n).collect();
    let radial = dot(u, tangent) / (n * n * n);
    let jvp: Vec<f64> = tangent
        .iter()
        .zip(u)
        .map(|(t, x)| t / n - x * radial)
        .collect();
    Ok((unit, jvp))
}

/// Max-shifted softmax. Callers guarantee a nonempty slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    debug_assert!(!logits.is_empty());
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Shannon entropy −Σ p·ln p with the 0·ln 0 = 0 convention.
pub fn entropy(dist: &[f64]) -> f64 {
    dist.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Cross-entropy of a label under max-shifted softmax, with the gradient
/// with respect to the logits (softmax(logits) − onehot(label)).
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::InvalidParameter(
            "softmax_cross_entropy: empty logits".into(),
        ));
    }
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (logits[label] - m);
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub eval_count: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Check an analytic gradient against central finite differences.
///
/// For each coordinate i the relative error is
/// |cdᵢ − analyticᵢ| / max(1e-12, |cdᵢ| + |analyticᵢ|)
/// where cdᵢ = (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h. Central differences carry
/// O(h²) truncation error, which is what lets a 1e-5 step hit a 1e-5
/// relative tolerance in double precision.
pub fn finite_diff_check<F>(
    mut f: F,
    x: &[f64],
    analytic_grad: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    require_same_dim(x, analytic_grad)?;
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "finite_diff_check: step must be positive, got {step}"
        )));
    }
    let mut probe = x.to_vec();
    let mut max_rel_error = 0.0_f64;
    let mut worst_index = 0;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite("finite_diff_check objective"));
        }
        let cd = (hi - lo) / (2.0 * step);
        let rel = (cd - analytic_grad[i]).abs() / (cd.abs() + analytic_grad[i].abs()).max(1e-12);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        eval_count: 2 * x.len(),
    })
}
