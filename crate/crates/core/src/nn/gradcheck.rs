use crate::error::{Error, Result};

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max_i |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// Compares `analytic` against central differences of `loss` around `params`
/// with step `h`. `loss` must be deterministic.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], h: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            context: "grad_check analytic gradient".into(),
            expected: params.len(),
            found: analytic.len(),
        });
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("perturbation must be positive, got {h}")));
    }
    let mut x = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let ga = analytic[i];
        if !(fd.is_finite() && ga.is_finite()) {
            return Err(Error::NonFinite(format!(
                "coordinate {i}: analytic {ga}, finite difference {fd}"
            )));
        }
        let err = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(fd);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        numeric,
    })
}
