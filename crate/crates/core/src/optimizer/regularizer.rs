//! `g(M) = λ₁‖1 − M‖₁ + λ₂·BTV(M)` and its exact gradient.
//!
//! `BTV(M) = Σ_u exp(−|∇I(u)|²/σ²) · (|∂ₓM(u)|^β + |∂ᵧM(u)|^β)` with forward
//! differences per axis (zero past the last row/column). `|∇I(u)|²` sums the
//! squared forward differences of the guide image over both axes and all
//! channels. Without an edge scale (`σ = None`) every weight is 1 and BTV is
//! the plain anisotropic `β`-TV.

/// Guide image sampled on the same grid as the mask: `channels` planes of `rows×cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Guide {
    pub rows: usize,
    pub cols: usize,
    pub planes: Vec<Vec<f64>>,
}

impl Guide {
    /// Per-cell edge weights `exp(−|∇I|²/σ²)`.
    pub fn edge_weights(&self, sigma: Option<f64>) -> Vec<f64> {
        let (rows, cols) = (self.rows, self.cols);
        let Some(sigma) = sigma else {
            return vec![1.0; rows * cols];
        };
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let u = r * cols + c;
                let mut sq = 0.0;
                for plane in &self.planes {
                    if c + 1 < cols {
                        let d = plane[u + 1] - plane[u];
                        sq += d * d;
                    }
                    if r + 1 < rows {
                        let d = plane[u + cols] - plane[u];
                        sq += d * d;
                    }
                }
                out[u] = (-sq / (sigma * sigma)).exp();
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerWeights {
    pub lambda_l1: f64,
    pub lambda_tv: f64,
    pub tv_beta: f64,
    pub btv_sigma: Option<f64>,
}

#[inline]
fn pow_and_slope(d: f64, beta: f64) -> (f64, f64) {
    let a = d.abs();
    if a == 0.0 {
        return (0.0, 0.0);
    }
    let slope = beta * a.powf(beta - 1.0) * d.signum();
    (a.powf(beta), slope)
}

/// `BTV(M)` on a `rows×cols` grid with precomputed edge weights, plus its gradient.
pub fn btv(values: &[f64], rows: usize, cols: usize, weights: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            let u = r * cols + c;
            let w = weights[u];
            if c + 1 < cols {
                let (p, s) = pow_and_slope(values[u + 1] - values[u], beta);
                total += w * p;
                grad[u + 1] += w * s;
                grad[u] -= w * s;
            }
            if r + 1 < rows {
                let (p, s) = pow_and_slope(values[u + cols] - values[u], beta);
                total += w * p;
                grad[u + cols] += w * s;
                grad[u] -= w * s;
            }
        }
    }
    (total, grad)
}

/// `λ₁‖1 − M‖₁ + λ₂·BTV(M)` and its gradient with respect to `values`.
/// Masks live in `[0, 1]`, where `‖1 − M‖₁ = Σ(1 − M)` is linear.
pub fn regularizer(values: &[f64], rows: usize, cols: usize, edge_weights: &[f64], w: &RegularizerWeights) -> (f64, Vec<f64>) {
    let l1: f64 = values.iter().map(|m| (1.0 - m).abs()).sum();
    let (tv, tv_grad) = btv(values, rows, cols, edge_weights, w.tv_beta);
    let grad = tv_grad.iter().map(|g| -w.lambda_l1 + w.lambda_tv * g).collect();
    (w.lambda_l1 * l1 + w.lambda_tv * tv, grad)
}
