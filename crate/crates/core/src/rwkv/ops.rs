use alloc::format;

use crate::error::{Error, Result};
use crate::tensor::{dot, outer, Matrix};

/// `W = diag(w) - κ̂ (a ⊙ κ̂)ᵀ`.
///
/// Requires `w ∈ (0,1]`, `a ∈ [0,1]` elementwise and `‖κ̂‖ = 1 ± 1e-9`.
pub fn transition_matrix(w: &[f64], kappa_hat: &[f64], a: &[f64]) -> Result<Matrix> {
    let n = w.len();
    if kappa_hat.len() != n || a.len() != n {
        return Err(Error::Shape(format!(
            "transition inputs of length {n}, {}, {}",
            kappa_hat.len(),
            a.len()
        )));
    }
    if !w.iter().all(|&x| x > 0.0 && x <= 1.0) {
        return Err(Error::InvalidArgument("decay w must lie in (0, 1]".into()));
    }
    if !a.iter().all(|&x| (0.0..=1.0).contains(&x)) {
        return Err(Error::InvalidArgument("in-context rate a must lie in [0, 1]".into()));
    }
    let norm = libm::sqrt(dot(kappa_hat, kappa_hat));
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "kappa_hat must be unit-norm (got {norm})"
        )));
    }
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = if i == j { w[i] } else { 0.0 };
            m.set(i, j, d - kappa_hat[i] * (a[j] * kappa_hat[j]));
        }
    }
    Ok(m)
}

/// `S_t = S_{t-1} W + v kᵀ` for a dense transition matrix.
pub fn state_update(prev: &Matrix, w: &Matrix, v: &[f64], k: &[f64]) -> Result<Matrix> {
    let (n, m) = prev.shape();
    if w.shape() != (m, m) || v.len() != n || k.len() != m {
        return Err(Error::Shape(format!(
            "state {:?}, transition {:?}, v {}, k {}",
            prev.shape(),
            w.shape(),
            v.len(),
            k.len()
        )));
    }
    let mut next = prev.matmul(w)?;
    next.add_assign(&outer(v, k))?;
    Ok(next)
}

/// In-place `S ← S·diag(w) - (S κ̂)(a ⊙ κ̂)ᵀ + v kᵀ`.
///
/// Same value as [`state_update`] with [`transition_matrix`], in `O(S²)`
/// instead of `O(S³)`. Agreement is to rounding, not bitwise.
pub fn state_update_structured(state: &mut Matrix, w: &[f64], kappa_hat: &[f64], a: &[f64], v: &[f64], k: &[f64]) {
    let n = state.cols();
    debug_assert_eq!(state.rows(), n);
    for i in 0..n {
        let row = state.row_mut(i);
        let sk = dot(row, kappa_hat);
        let vi = v[i];
        for j in 0..n {
            row[j] = row[j] * w[j] - sk * (a[j] * kappa_hat[j]) + vi * k[j];
        }
    }
}
