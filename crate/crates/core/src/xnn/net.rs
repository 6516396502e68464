use std::ops::Range;

use super::{LossTerms, SraeConfig, XnnBatch};
use crate::error::{Error, Result};

/// Offsets of each tensor in the flat parameter vector.
///
/// Order: encoder `W1 (h×s_z), b1 (h), W2 (n×h), b2 (n)`, decoder
/// `W3 (h×n), b3 (h), W4 (s_z×h), b4 (s_z)`, head `v (n)`; `h = 2·s_z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub s_z: usize,
    pub n: usize,
    pub hidden: usize,
}

impl Layout {
    pub fn new(s_z: usize, n: usize) -> Result<Self> {
        if n == 0 || n >= s_z {
            return Err(Error::input(format!("need 0 < n < s_z, got n = {n}, s_z = {s_z}")));
        }
        Ok(Layout { s_z, n, hidden: 2 * s_z })
    }

    fn sizes(&self) -> [usize; 9] {
        let (s, n, h) = (self.s_z, self.n, self.hidden);
        [h * s, h, n * h, n, h * n, h, s * h, s, n]
    }

    fn range(&self, k: usize) -> Range<usize> {
        let sizes = self.sizes();
        let start: usize = sizes[..k].iter().sum();
        start..start + sizes[k]
    }

    pub fn len(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Weight matrices and the head, with their fan-in.
    pub(super) fn weight_blocks(&self) -> Vec<(Range<usize>, usize)> {
        vec![
            (self.range(0), self.s_z),
            (self.range(2), self.hidden),
            (self.range(4), self.n),
            (self.range(6), self.hidden),
            (self.range(8), self.n),
        ]
    }

    pub fn v<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.range(8)]
    }
}

pub(super) struct Trace {
    h1: Vec<f64>,
    pub(super) e: Vec<f64>,
    h3: Vec<f64>,
    r: Vec<f64>,
}

/// `out = W x + b` for row-major `W` of shape `out.len() × x.len()`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(o, bo)| bo + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(w, x)| w * x).sum::<f64>())
        .collect()
}

pub(super) fn forward(l: &Layout, p: &[f64], z: &[f64]) -> Trace {
    let h1: Vec<f64> = affine(&p[l.range(0)], &p[l.range(1)], z).into_iter().map(f64::tanh).collect();
    let e: Vec<f64> = affine(&p[l.range(2)], &p[l.range(3)], &h1).into_iter().map(f64::tanh).collect();
    let h3: Vec<f64> = affine(&p[l.range(4)], &p[l.range(5)], &e).into_iter().map(f64::tanh).collect();
    let r = affine(&p[l.range(6)], &p[l.range(7)], &h3);
    Trace { h1, e, h3, r }
}

/// Accumulates `dW += dy xᵀ`, `db += dy` and returns `Wᵀ dy`.
fn affine_backward(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (o, &d) in dy.iter().enumerate() {
        db[o] += d;
        let row = o * x.len();
        for (k, &xk) in x.iter().enumerate() {
            dw[row + k] += d * xk;
            dx[k] += d * w[row + k];
        }
    }
    dx
}

fn split_mut<'g>(l: &Layout, g: &'g mut [f64], k: usize, j: usize) -> (&'g mut [f64], &'g mut [f64]) {
    let (a, b) = (l.range(k), l.range(j));
    debug_assert!(a.end == b.start);
    let (left, right) = g[a.start..b.end].split_at_mut(a.len());
    (left, right)
}

pub(super) fn loss_and_gradient(
    l: &Layout,
    p: &[f64],
    cfg: &SraeConfig,
    batch: &XnnBatch,
    want_grad: bool,
) -> (LossTerms, Option<Vec<f64>>) {
    let big_n = batch.len();
    let nf = big_n as f64;
    let (s, n) = (l.s_z, l.n);
    let v = l.v(p);
    let traces: Vec<Trace> = (0..big_n).map(|i| forward(l, p, batch.row(i))).collect();

    // faithfulness
    let residual: Vec<f64> = traces
        .iter()
        .zip(&batch.y_hat)
        .map(|(t, y)| v.iter().zip(&t.e).map(|(v, e)| v * e).sum::<f64>() - y)
        .collect();
    let faithfulness = residual.iter().map(|r| r * r).sum::<f64>() / nf;

    // reconstruction
    let mut err = vec![0.0; s];
    for (i, t) in traces.iter().enumerate() {
        for (k, (r, z)) in t.r.iter().zip(batch.row(i)).enumerate() {
            err[k] += (r - z) * (r - z) / nf;
        }
    }
    let reconstruction = cfg.beta / s as f64 * err.iter().map(|e| (cfg.q * e).ln_1p()).sum::<f64>();

    // pull-away over feature columns
    let columns: Vec<Vec<f64>> = (0..n).map(|k| traces.iter().map(|t| t.e[k]).collect()).collect();
    let norms2: Vec<f64> = columns.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
    let pair_scale = if n > 1 { cfg.eta / (n * (n - 1)) as f64 } else { 0.0 };
    let mut pullaway = 0.0;
    let mut cosines = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            if a == b || norms2[a] == 0.0 || norms2[b] == 0.0 {
                continue;
            }
            let dot: f64 = columns[a].iter().zip(&columns[b]).map(|(x, y)| x * y).sum();
            let c = dot / (norms2[a] * norms2[b]).sqrt();
            cosines[a * n + b] = c;
            pullaway += c * c;
        }
    }
    pullaway *= pair_scale;

    let terms = LossTerms { faithfulness, reconstruction, pullaway, total: faithfulness + reconstruction + pullaway };
    if !want_grad {
        return (terms, None);
    }

    let mut g = vec![0.0; l.len()];
    let v_range = l.range(8);
    // ∂pull-away/∂E_a: Σ_{b≠a} 2 (ordered pairs) · 2c (E_b/(|E_a||E_b|) − c E_a/|E_a|²)
    let mut d_columns = vec![vec![0.0; big_n]; n];
    for a in 0..n {
        for b in 0..n {
            let c = cosines[a * n + b];
            if a == b || c == 0.0 {
                continue;
            }
            let inv = 1.0 / (norms2[a] * norms2[b]).sqrt();
            for i in 0..big_n {
                d_columns[a][i] += pair_scale * 4.0 * c * (columns[b][i] * inv - c * columns[a][i] / norms2[a]);
            }
        }
    }
    let recon_scale: Vec<f64> = err.iter().map(|e| cfg.beta / s as f64 * cfg.q / (1.0 + cfg.q * e) * 2.0 / nf).collect();

    for (i, t) in traces.iter().enumerate() {
        let z = batch.row(i);
        // head
        for k in 0..n {
            g[v_range.start + k] += 2.0 / nf * residual[i] * t.e[k];
        }
        let mut de: Vec<f64> = (0..n).map(|k| 2.0 / nf * residual[i] * v[k] + d_columns[k][i]).collect();

        // decoder
        let dr: Vec<f64> = (0..s).map(|k| recon_scale[k] * (t.r[k] - z[k])).collect();
        let (dw4, db4) = split_mut(l, &mut g, 6, 7);
        let dh3 = affine_backward(&p[l.range(6)], &t.h3, &dr, dw4, db4);
        let da3: Vec<f64> = dh3.iter().zip(&t.h3).map(|(d, h)| d * (1.0 - h * h)).collect();
        let (dw3, db3) = split_mut(l, &mut g, 4, 5);
        let de_dec = affine_backward(&p[l.range(4)], &t.e, &da3, dw3, db3);
        for (a, b) in de.iter_mut().zip(de_dec) {
            *a += b;
        }

        // encoder
        let da2: Vec<f64> = de.iter().zip(&t.e).map(|(d, e)| d * (1.0 - e * e)).collect();
        let (dw2, db2) = split_mut(l, &mut g, 2, 3);
        let dh1 = affine_backward(&p[l.range(2)], &t.h1, &da2, dw2, db2);
        let da1: Vec<f64> = dh1.iter().zip(&t.h1).map(|(d, h)| d * (1.0 - h * h)).collect();
        let (dw1, db1) = split_mut(l, &mut g, 0, 1);
        affine_backward(&p[l.range(0)], z, &da1, dw1, db1);
    }
    (terms, Some(g))
}
