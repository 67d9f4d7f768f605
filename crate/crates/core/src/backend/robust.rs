//! Huber M-estimator on whitened residual norms.

/// IRLS weight: 1 inside the quadratic region, `k / e` beyond it.
pub fn huber_weight(residual_norm: f64, k: f64) -> f64 {
    if residual_norm <= k {
        1.0
    } else {
        k / residual_norm
    }
}

/// Huber cost of a residual with norm `e`: `e^2 / 2` up to `k`, linear after.
pub fn huber_rho(e: f64, k: f64) -> f64 {
    if e <= k {
        0.5 * e * e
    } else {
        k * e - 0.5 * k * k
    }
}
