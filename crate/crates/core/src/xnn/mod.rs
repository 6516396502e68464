//! Explanation networks trained with the SRAE objective.
//!
//! An encoder maps an embedding `Z ∈ ℝ^{S_z}` to `n` explanation features
//! `E(Z)`, a linear head `v` reproduces the explained output `ŷ ≈ vᵀE(Z)`,
//! and a decoder reconstructs `Z` from `E`. The objective is
//!
//! ```text
//! (1/N) Σ_i (vᵀE(Zᵢ) − ŷᵢ)²
//!   + β/S_z · Σ_k log(1 + q · (1/N) Σ_i (D(E(Zᵢ))_k − Z_ik)²)
//!   + η/(n(n−1)) · Σ_{l≠l'} cos²(E_l, E_l')
//! ```
//!
//! where `E_l` is the `l`-th feature over the batch. Encoder and decoder are
//! one-hidden-layer tanh perceptrons of width `2·S_z`; the encoder output is
//! also tanh.

mod net;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::file::{Container, ModelKind};
use crate::model::ToyCnn;

pub use net::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SraeConfig {
    pub n_features: usize,
    /// Reconstruction weight `β`.
    pub beta: f64,
    /// Pull-away weight `η`.
    pub eta: f64,
    /// Sparsity steepness `q`.
    pub q: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the loss improved by less than `plateau_tolerance`
    /// (relative) over this many epochs.
    pub plateau_patience: usize,
    pub plateau_tolerance: f64,
}

impl Default for SraeConfig {
    fn default() -> Self {
        SraeConfig {
            n_features: 2,
            beta: 0.1,
            eta: 0.1,
            q: 10.0,
            learning_rate: 0.1,
            max_epochs: 20_000,
            plateau_patience: 2000,
            plateau_tolerance: 1e-5,
        }
    }
}

impl SraeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 {
            return Err(Error::input("n_features must be positive"));
        }
        let weights = [self.beta, self.eta, self.q];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::input("beta, eta and q must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::input("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// Embeddings `Z` (row-major, `len × s_z`) and explained outputs `ŷ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XnnBatch {
    pub s_z: usize,
    pub z: Vec<f64>,
    pub y_hat: Vec<f64>,
}

impl XnnBatch {
    pub fn new(s_z: usize, z: Vec<f64>, y_hat: Vec<f64>) -> Result<Self> {
        if s_z == 0 || z.len() != s_z * y_hat.len() {
            return Err(Error::input(format!(
                "Z has {} values, expected {} rows of {s_z}",
                z.len(),
                y_hat.len()
            )));
        }
        if y_hat.len() < 2 {
            return Err(Error::input("a batch needs at least 2 examples"));
        }
        if z.iter().chain(&y_hat).any(|v| !v.is_finite()) {
            return Err(Error::input("batch contains non-finite values"));
        }
        Ok(XnnBatch { s_z, z, y_hat })
    }

    pub fn len(&self) -> usize {
        self.y_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_hat.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.s_z..(i + 1) * self.s_z]
    }

    /// Rows `[start, end)` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        XnnBatch::new(self.s_z, self.z[start * self.s_z..end * self.s_z].to_vec(), self.y_hat[start..end].to_vec())
    }
}

/// Hidden-layer activations and the class logit of `model` for each image.
pub fn activation_batch(model: &ToyCnn, images: &[Image], class_index: usize) -> Result<XnnBatch> {
    let s_z = model.architecture().hidden;
    if class_index >= model.architecture().classes {
        return Err(Error::input(format!("class {class_index} out of range")));
    }
    let mut z = Vec::with_capacity(images.len() * s_z);
    let mut y_hat = Vec::with_capacity(images.len());
    for img in images {
        let trace = model.forward(img);
        z.extend_from_slice(&trace.hidden);
        y_hat.push(trace.logits[class_index]);
    }
    XnnBatch::new(s_z, z, y_hat)
}

/// `ŷ = a·Z₀ + b·Z₁` with `Z` uniform on `[−1, 1]^{s_z}`.
pub fn linear_task(len: usize, s_z: usize, a: f64, b: f64, seed: u64) -> Result<XnnBatch> {
    if s_z < 2 {
        return Err(Error::input("linear task needs s_z ≥ 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let z: Vec<f64> = (0..len * s_z).map(|_| u.sample(&mut rng)).collect();
    let y_hat = (0..len).map(|i| a * z[i * s_z] + b * z[i * s_z + 1]).collect();
    XnnBatch::new(s_z, z, y_hat)
}

/// Half of the dimensions follow one shared factor `f` plus small noise, the
/// rest are uniform noise, and `ŷ = f`. Unconstrained explanation features
/// tend to collapse onto `f`, which the pull-away term counteracts.
pub fn shared_factor_task(len: usize, s_z: usize, seed: u64) -> Result<XnnBatch> {
    if s_z < 2 {
        return Err(Error::input("shared-factor task needs s_z ≥ 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let mut z = Vec::with_capacity(len * s_z);
    let mut y_hat = Vec::with_capacity(len);
    for _ in 0..len {
        let f: f64 = u.sample(&mut rng);
        for k in 0..s_z {
            z.push(if k < s_z / 2 { f + noise.sample(&mut rng) } else { u.sample(&mut rng) });
        }
        y_hat.push(f);
    }
    XnnBatch::new(s_z, z, y_hat)
}

/// Each example carries feature A (dims 0–1) or feature B (dims 2–3), never
/// both; `ŷ` is 1 when the carried feature is strong and 0 otherwise. Either
/// feature alone suffices, so a 2-feature explanation may merge them.
pub fn or_task(len: usize, s_z: usize, seed: u64) -> Result<XnnBatch> {
    if s_z < 4 {
        return Err(Error::input("OR task needs s_z ≥ 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut z = vec![0.0; len * s_z];
    let mut y_hat = vec![0.0; len];
    for i in 0..len {
        let row = &mut z[i * s_z..(i + 1) * s_z];
        for v in row.iter_mut() {
            *v = noise.sample(&mut rng);
        }
        let strong = (i / 2) % 2 == 0;
        let offset = if i % 2 == 0 { 0 } else { 2 };
        let level = if strong { 1.0 } else { 0.2 };
        row[offset] += level;
        row[offset + 1] += level;
        y_hat[i] = f64::from(u8::from(strong));
    }
    XnnBatch::new(s_z, z, y_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub faithfulness: f64,
    pub reconstruction: f64,
    pub pullaway: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SraeModel {
    layout: Layout,
    params: Vec<f64>,
    config: SraeConfig,
}

impl SraeModel {
    /// Seeded initialization: weights `N(0, 1/fan_in)`, zero biases, `v ~ N(0, 1/n)`.
    pub fn initialize(s_z: usize, config: SraeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(s_z, config.n_features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.len()];
        for (range, fan_in) in layout.weight_blocks() {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[range] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(SraeModel { layout, params, config })
    }

    pub fn from_params(s_z: usize, config: SraeConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(s_z, config.n_features)?;
        if params.len() != layout.len() {
            return Err(Error::input(format!("expected {} parameters, got {}", layout.len(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::input("parameters must be finite"));
        }
        Ok(SraeModel { layout, params, config })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn config(&self) -> &SraeConfig {
        &self.config
    }

    /// Explanation features `E(z)` of one embedding.
    pub fn features(&self, z: &[f64]) -> Vec<f64> {
        net::forward(&self.layout, &self.params, z).e
    }

    /// `vᵀE(z)`.
    pub fn predict(&self, z: &[f64]) -> f64 {
        let e = self.features(z);
        self.layout.v(&self.params).iter().zip(&e).map(|(v, e)| v * e).sum()
    }

    fn check_batch(&self, batch: &XnnBatch) -> Result<()> {
        if batch.s_z != self.layout.s_z {
            return Err(Error::input(format!("batch has s_z {}, model expects {}", batch.s_z, self.layout.s_z)));
        }
        Ok(())
    }
}

/// Value of the objective and its three terms.
pub fn srae_loss(model: &SraeModel, batch: &XnnBatch) -> Result<LossTerms> {
    model.check_batch(batch)?;
    Ok(net::loss_and_gradient(&model.layout, &model.params, &model.config, batch, false).0)
}

/// Objective terms and the gradient with respect to every parameter.
pub fn srae_gradient(model: &SraeModel, batch: &XnnBatch) -> Result<(LossTerms, Vec<f64>)> {
    model.check_batch(batch)?;
    let (terms, grad) = net::loss_and_gradient(&model.layout, &model.params, &model.config, batch, true);
    Ok((terms, grad.expect("requested")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SraeReport {
    pub seed: u64,
    pub epochs: usize,
    pub stopped_on_plateau: bool,
    pub final_terms: LossTerms,
}

/// Full-batch gradient descent on the objective; deterministic in `seed`.
pub fn train_srae(batch: &XnnBatch, config: &SraeConfig, seed: u64) -> Result<(SraeModel, SraeReport)> {
    let mut model = SraeModel::initialize(batch.s_z, *config, seed)?;
    let mut history: Vec<f64> = Vec::new();
    let mut epochs = 0;
    let mut stopped_on_plateau = false;
    for epoch in 0..config.max_epochs {
        let (terms, grad) = srae_gradient(&model, batch)?;
        if !terms.total.is_finite() {
            return Err(Error::Training { iteration: epoch, loss: terms.total });
        }
        history.push(terms.total);
        if history.len() > config.plateau_patience {
            let old = history[history.len() - 1 - config.plateau_patience];
            if old - terms.total <= config.plateau_tolerance * old.abs() {
                stopped_on_plateau = true;
                break;
            }
        }
        for (p, g) in model.params.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
        epochs = epoch + 1;
    }
    let final_terms = srae_loss(&model, batch)?;
    if !final_terms.total.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Training { iteration: epochs, loss: final_terms.total });
    }
    Ok((model, SraeReport { seed, epochs, stopped_on_plateau, final_terms }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub mse: f64,
    /// Pearson correlation; absent when either side is constant.
    pub correlation: Option<f64>,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Mean squared error and correlation between `vᵀE(Z)` and `ŷ`.
pub fn faithfulness_metric(model: &SraeModel, batch: &XnnBatch) -> Result<Faithfulness> {
    model.check_batch(batch)?;
    let pred: Vec<f64> = (0..batch.len()).map(|i| model.predict(batch.row(i))).collect();
    let mse = pred.iter().zip(&batch.y_hat).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / batch.len() as f64;
    Ok(Faithfulness { mse, correlation: pearson(&pred, &batch.y_hat) })
}

/// Mean of `cos²` over unordered pairs of feature columns; 0 is orthogonal.
pub fn orthogonality_metric(model: &SraeModel, batch: &XnnBatch) -> Result<f64> {
    model.check_batch(batch)?;
    let n = model.layout.n;
    if n < 2 {
        return Err(Error::input("orthogonality needs at least 2 features"));
    }
    let columns = feature_columns(model, batch);
    let mut sum = 0.0;
    for l in 0..n {
        for m in l + 1..n {
            sum += cos2(&columns[l], &columns[m]);
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// `columns[l][i] = E_l(Zᵢ)`.
pub fn feature_columns(model: &SraeModel, batch: &XnnBatch) -> Vec<Vec<f64>> {
    let mut columns = vec![Vec::with_capacity(batch.len()); model.layout.n];
    for i in 0..batch.len() {
        for (col, e) in columns.iter_mut().zip(model.features(batch.row(i))) {
            col.push(e);
        }
    }
    columns
}

/// `cos²` of two vectors; 0 when either is zero.
pub fn cos2(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot * dot / (na * nb)
    }
}

/// Descriptor `[s_z, n, hidden]`; blobs: parameters, then `β, η, q`.
pub fn encode_srae(model: &SraeModel) -> Vec<u8> {
    let l = model.layout;
    let c = model.config;
    let mut values: Vec<f32> = model.params.iter().map(|&p| p as f32).collect();
    values.extend([c.beta as f32, c.eta as f32, c.q as f32]);
    Container { kind: ModelKind::Srae, descriptor: vec![l.s_z as u32, l.n as u32, l.hidden as u32], values }.encode()
}

/// Inverse of [`encode_srae`]; training settings other than `β, η, q` take defaults.
pub fn decode_srae(bytes: &[u8]) -> Result<SraeModel> {
    let c = Container::decode(bytes)?;
    if c.kind != ModelKind::Srae {
        return Err(Error::Format("file does not hold an SRAE model".into()));
    }
    let [s_z, n, hidden] = c.descriptor[..] else {
        return Err(Error::Format(format!("SRAE descriptor needs 3 entries, got {}", c.descriptor.len())));
    };
    let layout = Layout::new(s_z as usize, n as usize).map_err(|e| Error::Format(e.to_string()))?;
    if layout.hidden != hidden as usize {
        return Err(Error::Format(format!("hidden width {hidden} does not match 2·s_z")));
    }
    let mut parts = c.split(&[layout.len(), 3])?;
    let hyper = parts.pop().expect("two parts");
    let config = SraeConfig { n_features: n as usize, beta: hyper[0], eta: hyper[1], q: hyper[2], ..SraeConfig::default() };
    SraeModel::from_params(s_z as usize, config, parts.pop().expect("two parts")).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_srae(model: &SraeModel, path: impl AsRef<std::path::Path>) -> Result<()> {
    std::fs::write(path, encode_srae(model))?;
    Ok(())
}

pub fn load_srae(path: impl AsRef<std::path::Path>) -> Result<SraeModel> {
    decode_srae(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests;
