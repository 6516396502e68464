//! Small convolutional classifier with hand-written backpropagation.
//!
//! Layer stack: `conv3×3(8) → ReLU → maxpool2 → conv3×3(16) → ReLU → maxpool2
//! → dense(S_z) → ReLU → dense(classes) → softmax`. Convolutions use zero
//! "same" padding; pooling floors odd sizes. The ReLU derivative at exactly 0
//! is taken to be 0.
//!
//! Weights are held as `f64` but always carry `f32`-representable values, so
//! a network written to and read back from a model file evaluates bit-identically.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{softmax, Capability, Scorer};
use crate::error::{Error, Result};
use crate::image::{Image, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArchitecture {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    /// Width of the dense hidden layer (`S_z`).
    pub hidden: usize,
    pub classes: usize,
}

impl Default for CnnArchitecture {
    fn default() -> Self {
        CnnArchitecture {
            height: 32,
            width: 32,
            channels: 1,
            conv1_filters: 8,
            conv2_filters: 16,
            hidden: 32,
            classes: 2,
        }
    }
}

impl CnnArchitecture {
    pub fn input_shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    fn pool1(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    fn pool2(&self) -> (usize, usize) {
        let (h, w) = self.pool1();
        (h / 2, w / 2)
    }

    pub fn flat_len(&self) -> usize {
        let (h, w) = self.pool2();
        self.conv2_filters * h * w
    }

    /// Lengths of the eight parameter tensors in storage order:
    /// conv1 weights/bias, conv2 weights/bias, dense1 weights/bias, dense2 weights/bias.
    pub fn tensor_lengths(&self) -> [usize; 8] {
        [
            self.conv1_filters * self.channels * 9,
            self.conv1_filters,
            self.conv2_filters * self.conv1_filters * 9,
            self.conv2_filters,
            self.hidden * self.flat_len(),
            self.hidden,
            self.classes * self.hidden,
            self.classes,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.height,
            self.width,
            self.channels,
            self.conv1_filters,
            self.conv2_filters,
            self.hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::input("architecture dimensions must be positive"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::input("input must be at least 4×4 to survive two poolings"));
        }
        if self.classes < 2 {
            return Err(Error::input("at least 2 classes are required"));
        }
        Ok(())
    }
}

/// The eight parameter tensors. Also used to hold gradients during training.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Params {
    pub tensors: [Vec<f64>; 8],
}

impl Params {
    pub fn zeros(arch: &CnnArchitecture) -> Self {
        Params { tensors: arch.tensor_lengths().map(|n| vec![0.0; n]) }
    }

    /// He-normal weights, zero biases, rounded to `f32`.
    pub fn init<R: Rng>(arch: &CnnArchitecture, rng: &mut R) -> Self {
        let mut p = Params::zeros(arch);
        let fan_in = [arch.channels * 9, arch.conv1_filters * 9, arch.flat_len(), arch.hidden];
        for (layer, fan) in fan_in.iter().enumerate() {
            let normal = Normal::new(0.0, (2.0 / *fan as f64).sqrt()).expect("positive std");
            for w in &mut p.tensors[2 * layer] {
                *w = normal.sample(rng) as f32 as f64;
            }
        }
        p
    }

    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Intermediate values from one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input_chw: Vec<f64>,
    conv1: Vec<f64>,
    pool1: Vec<f64>,
    pool1_arg: Vec<usize>,
    conv2: Vec<f64>,
    pool2_arg: Vec<usize>,
    flat: Vec<f64>,
    hidden_pre: Vec<f64>,
    /// Post-ReLU dense hidden activations (`Z`, dimension `S_z`).
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCnn {
    arch: CnnArchitecture,
    params: Params,
}

impl ToyCnn {
    /// Freshly initialized network (He-normal weights from `seed`).
    pub fn initialize(arch: CnnArchitecture, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        arch.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&arch, &mut rng);
        Ok(ToyCnn { arch, params })
    }

    /// Builds a network from the eight tensors in storage order.
    pub fn from_tensors(arch: CnnArchitecture, tensors: Vec<Vec<f64>>) -> Result<Self> {
        arch.validate()?;
        let lengths = arch.tensor_lengths();
        if tensors.len() != 8 || tensors.iter().zip(lengths).any(|(t, n)| t.len() != n) {
            return Err(Error::input("tensor count or lengths do not match the architecture"));
        }
        let tensors: [Vec<f64>; 8] = tensors.try_into().expect("length checked");
        let mut params = Params { tensors };
        if !params.is_finite() {
            return Err(Error::input("non-finite weight"));
        }
        params.round_to_f32();
        Ok(ToyCnn { arch, params })
    }

    pub(crate) fn from_params(arch: CnnArchitecture, mut params: Params) -> Result<Self> {
        if !params.is_finite() {
            return Err(Error::input("non-finite weight"));
        }
        params.round_to_f32();
        Ok(ToyCnn { arch, params })
    }

    pub(crate) fn from_params_unrounded(arch: CnnArchitecture, params: Params) -> Self {
        ToyCnn { arch, params }
    }

    pub(crate) fn params(&self) -> &Params {
        &self.params
    }

    pub fn architecture(&self) -> &CnnArchitecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Vec<f64>; 8] {
        &self.params.tensors
    }

    pub fn forward(&self, image: &Image) -> ForwardTrace {
        let a = &self.arch;
        let [c1w, c1b, c2w, c2b, d1w, d1b, d2w, d2b] = &self.params.tensors;
        let (h, w, c) = (a.height, a.width, a.channels);

        let mut input_chw = vec![0.0; c * h * w];
        for (i, px) in image.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                input_chw[ch * h * w + i] = v;
            }
        }

        let mut conv1 = vec![0.0; a.conv1_filters * h * w];
        conv3x3(&input_chw, c, h, w, c1w, c1b, &mut conv1);
        relu_in_place(&mut conv1);
        let (h1, w1) = a.pool1();
        let (pool1, pool1_arg) = maxpool2(&conv1, a.conv1_filters, h, w);

        let mut conv2 = vec![0.0; a.conv2_filters * h1 * w1];
        conv3x3(&pool1, a.conv1_filters, h1, w1, c2w, c2b, &mut conv2);
        relu_in_place(&mut conv2);
        let (flat, pool2_arg) = maxpool2(&conv2, a.conv2_filters, h1, w1);

        let hidden_pre = dense(d1w, d1b, &flat);
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let logits = dense(d2w, d2b, &hidden);
        let probabilities = softmax(&logits);

        ForwardTrace {
            input_chw,
            conv1,
            pool1,
            pool1_arg,
            conv2,
            pool2_arg,
            flat,
            hidden_pre,
            hidden,
            logits,
            probabilities,
        }
    }

    /// Dense hidden-layer activations for `image`.
    pub fn hidden(&self, image: &Image) -> Vec<f64> {
        self.forward(image).hidden
    }

    pub fn logits(&self, image: &Image) -> Vec<f64> {
        self.forward(image).logits
    }

    /// Backpropagates `d_logits` through the network. Returns the gradient
    /// with respect to the input (image layout) and, when requested, the
    /// parameter gradients.
    pub(crate) fn backward(
        &self,
        trace: &ForwardTrace,
        d_logits: &[f64],
        want_params: bool,
    ) -> (Vec<f64>, Option<Params>) {
        let a = &self.arch;
        let [c1w, _, c2w, _, d1w, _, d2w, _] = &self.params.tensors;
        let (h, w, c) = (a.height, a.width, a.channels);
        let (h1, w1) = a.pool1();
        let mut grads = want_params.then(|| Params::zeros(a));

        // dense2
        let nh = a.hidden;
        let mut d_hidden = vec![0.0; nh];
        for (k, &dl) in d_logits.iter().enumerate() {
            let row = &d2w[k * nh..(k + 1) * nh];
            for (dh, wv) in d_hidden.iter_mut().zip(row) {
                *dh += dl * wv;
            }
        }
        if let Some(g) = grads.as_mut() {
            outer_accumulate(&mut g.tensors[6], d_logits, &trace.hidden);
            add_into(&mut g.tensors[7], d_logits);
        }

        // ReLU on hidden
        for (dh, &pre) in d_hidden.iter_mut().zip(&trace.hidden_pre) {
            if pre <= 0.0 {
                *dh = 0.0;
            }
        }

        // dense1
        let nf = a.flat_len();
        let mut d_flat = vec![0.0; nf];
        for (j, &dh) in d_hidden.iter().enumerate() {
            if dh == 0.0 {
                continue;
            }
            let row = &d1w[j * nf..(j + 1) * nf];
            for (df, wv) in d_flat.iter_mut().zip(row) {
                *df += dh * wv;
            }
        }
        if let Some(g) = grads.as_mut() {
            outer_accumulate(&mut g.tensors[4], &d_hidden, &trace.flat);
            add_into(&mut g.tensors[5], &d_hidden);
        }

        // pool2 → conv2 (ReLU folded in: pooled positions carry post-ReLU values)
        let mut d_conv2 = vec![0.0; trace.conv2.len()];
        unpool(&d_flat, &trace.pool2_arg, &mut d_conv2);
        relu_mask(&mut d_conv2, &trace.conv2);

        let mut d_pool1 = vec![0.0; trace.pool1.len()];
        conv3x3_backward(
            &trace.pool1,
            a.conv1_filters,
            h1,
            w1,
            c2w,
            &d_conv2,
            &mut d_pool1,
            grads.as_mut().map(|g| {
                let (lo, hi) = g.tensors.split_at_mut(3);
                (&mut lo[2], &mut hi[0])
            }),
        );

        let mut d_conv1 = vec![0.0; trace.conv1.len()];
        unpool(&d_pool1, &trace.pool1_arg, &mut d_conv1);
        relu_mask(&mut d_conv1, &trace.conv1);

        let mut d_input_chw = vec![0.0; c * h * w];
        conv3x3_backward(
            &trace.input_chw,
            c,
            h,
            w,
            c1w,
            &d_conv1,
            &mut d_input_chw,
            grads.as_mut().map(|g| {
                let (lo, hi) = g.tensors.split_at_mut(1);
                (&mut lo[0], &mut hi[0])
            }),
        );

        let mut d_input = vec![0.0; c * h * w];
        for i in 0..h * w {
            for ch in 0..c {
                d_input[i * c + ch] = d_input_chw[ch * h * w + i];
            }
        }
        (d_input, grads)
    }
}

impl Scorer for ToyCnn {
    fn class_count(&self) -> usize {
        self.arch.classes
    }

    fn input_shape(&self) -> Shape {
        self.arch.input_shape()
    }

    fn capability(&self) -> Capability {
        Capability::GradientCapable
    }

    fn probabilities(&self, image: &Image) -> Vec<f64> {
        self.forward(image).probabilities
    }

    fn probability_gradient(&self, image: &Image, class_index: usize) -> Result<(f64, Vec<f64>)> {
        let trace = self.forward(image);
        let p = &trace.probabilities;
        let pc = p[class_index];
        // ∂p_c/∂logit_k = p_c (δ_ck − p_k)
        let d_logits: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| pc * (f64::from(u8::from(k == class_index)) - pk))
            .collect();
        let (grad, _) = self.backward(&trace, &d_logits, false);
        Ok((pc, grad))
    }
}

fn dense(weights: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    bias.iter()
        .enumerate()
        .map(|(j, b)| b + weights[j * n..(j + 1) * n].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

fn outer_accumulate(out: &mut [f64], rows: &[f64], cols: &[f64]) {
    let n = cols.len();
    for (j, &r) in rows.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        for (o, c) in out[j * n..(j + 1) * n].iter_mut().zip(cols) {
            *o += r * c;
        }
    }
}

fn add_into(out: &mut [f64], x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose post-ReLU activation is 0.
fn relu_mask(grad: &mut [f64], activation: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Valid output span for a kernel offset `d ∈ {-1, 0, 1}` on an axis of length `n`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n.saturating_sub(1) } else { n };
    (lo, hi)
}

fn conv3x3(input: &[f64], in_c: usize, h: usize, w: usize, weights: &[f64], bias: &[f64], out: &mut [f64]) {
    let plane = h * w;
    for (f, &b) in bias.iter().enumerate() {
        let out_f = &mut out[f * plane..(f + 1) * plane];
        out_f.fill(b);
        for ch in 0..in_c {
            let inp = &input[ch * plane..(ch + 1) * plane];
            let kernel = &weights[(f * in_c + ch) * 9..(f * in_c + ch + 1) * 9];
            for (k, &wv) in kernel.iter().enumerate() {
                let dy = (k / 3) as isize - 1;
                let dx = (k % 3) as isize - 1;
                let (y0, y1) = span(dy, h);
                let (x0, x1) = span(dx, w);
                for y in y0..y1 {
                    let src_row = (y as isize + dy) as usize * w;
                    let dst = &mut out_f[y * w + x0..y * w + x1];
                    let src = &inp[(src_row as isize + x0 as isize + dx) as usize..][..x1 - x0];
                    for (o, i) in dst.iter_mut().zip(src) {
                        *o += wv * i;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    d_out: &[f64],
    d_input: &mut [f64],
    mut param_grads: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
) {
    let plane = h * w;
    let filters = d_out.len() / plane;
    for f in 0..filters {
        let dout_f = &d_out[f * plane..(f + 1) * plane];
        if dout_f.iter().all(|&v| v == 0.0) {
            continue;
        }
        if let Some((_, db)) = param_grads.as_mut() {
            db[f] += dout_f.iter().sum::<f64>();
        }
        for ch in 0..in_c {
            let inp = &input[ch * plane..(ch + 1) * plane];
            let din = &mut d_input[ch * plane..(ch + 1) * plane];
            for k in 0..9 {
                let widx = (f * in_c + ch) * 9 + k;
                let wv = weights[widx];
                let dy = (k / 3) as isize - 1;
                let dx = (k % 3) as isize - 1;
                let (y0, y1) = span(dy, h);
                let (x0, x1) = span(dx, w);
                let mut dw = 0.0;
                for y in y0..y1 {
                    let src_start = ((y as isize + dy) as usize * w) as isize + x0 as isize + dx;
                    let src_start = src_start as usize;
                    let go = &dout_f[y * w + x0..y * w + x1];
                    let di = &mut din[src_start..src_start + (x1 - x0)];
                    let iv = &inp[src_start..src_start + (x1 - x0)];
                    for ((d, &g), &i) in di.iter_mut().zip(go).zip(iv) {
                        *d += wv * g;
                        dw += g * i;
                    }
                }
                if let Some((dwt, _)) = param_grads.as_mut() {
                    dwt[widx] += dw;
                }
            }
        }
    }
}

/// 2×2 stride-2 max pooling over `channels` planes. Ties keep the first
/// position in raster order. Returns pooled values and argmax indices into `input`.
fn maxpool2(input: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * ho * wo);
    let mut arg = Vec::with_capacity(channels * ho * wo);
    for ch in 0..channels {
        let base = ch * h * w;
        for y in 0..ho {
            for x in 0..wo {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn unpool(d_out: &[f64], arg: &[usize], d_in: &mut [f64]) {
    for (&g, &i) in d_out.iter().zip(arg) {
        d_in[i] += g;
    }
}
