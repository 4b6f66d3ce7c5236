//! LeNet-style CNN with a forward pass that can be split after the first
//! convolution.
//!
//! Layout: conv(5x5) → ReLU → maxpool 2 → conv(5x5) → ReLU → maxpool 2 →
//! fc → ReLU → fc → ReLU → fc → softmax. All parameters are `f64`.

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{GrayImage, MNIST_SIDE};
use crate::seeding::substream;
use crate::NUM_CLASSES;

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("unexpected EOF")]
    UnexpectedEof,
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CnnError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CnnError::UnexpectedEof
        } else {
            CnnError::Io(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub kernel: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            conv1_filters: 6,
            conv2_filters: 16,
            fc1: 120,
            fc2: 84,
            kernel: 5,
        }
    }
}

impl Architecture {
    pub fn conv1_side(&self) -> usize {
        MNIST_SIDE - self.kernel + 1
    }

    fn pool1_side(&self) -> usize {
        self.conv1_side() / 2
    }

    fn conv2_side(&self) -> usize {
        self.pool1_side() - self.kernel + 1
    }

    fn pool2_side(&self) -> usize {
        self.conv2_side() / 2
    }

    pub fn flat_len(&self) -> usize {
        self.conv2_filters * self.pool2_side() * self.pool2_side()
    }

    /// Length of one vectorized first-layer feature map.
    pub fn feature_dim(&self) -> usize {
        self.conv1_side() * self.conv1_side()
    }

    fn validate(&self) -> Result<(), CnnError> {
        let ok = self.kernel >= 1
            && self.kernel < MNIST_SIDE
            && self.conv1_side().is_multiple_of(2)
            && self.pool1_side() >= self.kernel
            && self.conv2_side().is_multiple_of(2)
            && [self.conv1_filters, self.conv2_filters, self.fc1, self.fc2]
                .iter()
                .all(|&n| n > 0);
        if ok {
            Ok(())
        } else {
            Err(CnnError::Shape(format!("unsupported architecture {self:?}")))
        }
    }
}

/// Trainable parameters, also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
    pub fc3_w: Vec<f64>,
    pub fc3_b: Vec<f64>,
}

pub const BLOCK_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
    "fc3.weight",
    "fc3.bias",
];

impl Params {
    fn zeros(a: &Architecture) -> Self {
        let k2 = a.kernel * a.kernel;
        Self {
            conv1_w: vec![0.0; a.conv1_filters * k2],
            conv1_b: vec![0.0; a.conv1_filters],
            conv2_w: vec![0.0; a.conv2_filters * a.conv1_filters * k2],
            conv2_b: vec![0.0; a.conv2_filters],
            fc1_w: vec![0.0; a.fc1 * a.flat_len()],
            fc1_b: vec![0.0; a.fc1],
            fc2_w: vec![0.0; a.fc2 * a.fc1],
            fc2_b: vec![0.0; a.fc2],
            fc3_w: vec![0.0; NUM_CLASSES * a.fc2],
            fc3_b: vec![0.0; NUM_CLASSES],
        }
    }

    /// Block shapes in `BLOCK_NAMES` order.
    fn shapes(a: &Architecture) -> [Vec<usize>; 10] {
        let k = a.kernel;
        [
            vec![a.conv1_filters, 1, k, k],
            vec![a.conv1_filters],
            vec![a.conv2_filters, a.conv1_filters, k, k],
            vec![a.conv2_filters],
            vec![a.fc1, a.flat_len()],
            vec![a.fc1],
            vec![a.fc2, a.fc1],
            vec![a.fc2],
            vec![NUM_CLASSES, a.fc2],
            vec![NUM_CLASSES],
        ]
    }

    pub fn blocks(&self) -> [&[f64]; 10] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
            &self.fc3_w,
            &self.fc3_b,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
            &mut self.fc3_w,
            &mut self.fc3_b,
        ]
    }

    fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Vectorized first-convolution outputs (post-ReLU), one row-major map per
/// filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    side: usize,
    maps: Vec<Vec<f64>>,
}

impl FeatureMapSet {
    pub fn new(side: usize, maps: Vec<Vec<f64>>) -> Result<Self, CnnError> {
        if maps.is_empty() || maps.iter().any(|m| m.len() != side * side) {
            return Err(CnnError::Shape(format!(
                "feature maps must be non-empty {side}x{side} vectors"
            )));
        }
        Ok(Self { side, maps })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn map(&self, k: usize) -> &[f64] {
        &self.maps[k]
    }

    pub fn maps(&self) -> &[Vec<f64>] {
        &self.maps
    }

    pub fn set_map(&mut self, k: usize, values: &[f64]) {
        self.maps[k].copy_from_slice(values);
    }
}

/// Class posterior from the softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub probabilities: Vec<f64>,
}

impl Posterior {
    fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self {
            probabilities: exps.into_iter().map(|e| e / sum).collect(),
        }
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities[self.predicted()]
    }

    /// Probability mass outside the predicted class, `1 - confidence`
    /// without the cancellation: stays positive when the top probability
    /// rounds to exactly 1.
    pub fn residual_mass(&self) -> f64 {
        let top = self.predicted();
        self.probabilities
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .map(|(_, p)| p)
            .sum()
    }
}

/// Mini-batch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier on the He-uniform initialization bound.
    pub init_scale: f64,
    pub architecture: Architecture,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.05,
            init_scale: 1.0,
            architecture: Architecture::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    arch: Architecture,
    pub params: Params,
}

// ---------------------------------------------------------------------------
// layer primitives

/// Valid cross-correlation of `input` (`in_ch` planes of `side`²) with
/// `out_ch` kernels of `in_ch`×k×k, plus bias. Returns pre-activations.
fn conv_valid(
    input: &[f64],
    in_ch: usize,
    side: usize,
    weights: &[f64],
    bias: &[f64],
    k: usize,
) -> Vec<f64> {
    let out_ch = bias.len();
    let os = side - k + 1;
    let mut out = vec![0.0; out_ch * os * os];
    for o in 0..out_ch {
        let plane = &mut out[o * os * os..(o + 1) * os * os];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..in_ch {
            let src = &input[i * side * side..(i + 1) * side * side];
            for ky in 0..k {
                for kx in 0..k {
                    let w = weights[((o * in_ch + i) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    for oy in 0..os {
                        let row = &src[(oy + ky) * side + kx..(oy + ky) * side + kx + os];
                        let dst = &mut plane[oy * os..(oy + 1) * os];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel/bias gradients and (optionally) the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    in_ch: usize,
    side: usize,
    weights: &[f64],
    k: usize,
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let out_ch = grad_b.len();
    let os = side - k + 1;
    for o in 0..out_ch {
        let g = &grad_out[o * os * os..(o + 1) * os * os];
        grad_b[o] += g.iter().sum::<f64>();
        for i in 0..in_ch {
            let src = &input[i * side * side..(i + 1) * side * side];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * in_ch + i) * k + ky) * k + kx;
                    let mut acc = 0.0;
                    for oy in 0..os {
                        let row = &src[(oy + ky) * side + kx..(oy + ky) * side + kx + os];
                        let grow = &g[oy * os..(oy + 1) * os];
                        acc += row.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad_w[widx] += acc;
                    if let Some(gi) = grad_in.as_deref_mut() {
                        let w = weights[widx];
                        let plane = &mut gi[i * side * side..(i + 1) * side * side];
                        for oy in 0..os {
                            let dst = &mut plane[(oy + ky) * side + kx..(oy + ky) * side + kx + os];
                            let grow = &g[oy * os..(oy + 1) * os];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += w * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn relu(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// 2x2 stride-2 max pooling; returns the pooled planes and, per output, the
/// flat input index of the winning entry (first maximum in window order).
fn maxpool2(input: &[f64], ch: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let os = side / 2;
    let mut out = Vec::with_capacity(ch * os * os);
    let mut arg = Vec::with_capacity(ch * os * os);
    for c in 0..ch {
        let base = c * side * side;
        for oy in 0..os {
            for ox in 0..os {
                let mut best = base + 2 * oy * side + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * side + 2 * ox + dx;
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

fn dense(weights: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(j, b)| {
            b + weights[j * n_in..(j + 1) * n_in]
                .iter()
                .zip(input)
                .map(|(w, x)| w * x)
                .sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    weights: &[f64],
    input: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let n_in = input.len();
    let mut grad_in = vec![0.0; n_in];
    for (j, &g) in grad_out.iter().enumerate() {
        grad_b[j] += g;
        if g == 0.0 {
            continue;
        }
        let wrow = &weights[j * n_in..(j + 1) * n_in];
        let grow = &mut grad_w[j * n_in..(j + 1) * n_in];
        for ((gw, x), (gi, w)) in grow.iter_mut().zip(input).zip(grad_in.iter_mut().zip(wrow)) {
            *gw += g * x;
            *gi += g * w;
        }
    }
    grad_in
}

/// Everything the backward pass needs from one forward pass.
struct Trace {
    input: Vec<f64>,
    conv1: Vec<f64>,
    pool1: Vec<f64>,
    pool1_arg: Vec<usize>,
    conv2: Vec<f64>,
    pool2: Vec<f64>,
    pool2_arg: Vec<usize>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    logits: Vec<f64>,
}

impl CnnModel {
    /// Model with every parameter zero: uniform posterior on any input.
    pub fn zeroed(arch: Architecture) -> Result<Self, CnnError> {
        arch.validate()?;
        Ok(Self {
            arch,
            params: Params::zeros(&arch),
        })
    }

    /// He-uniform weights scaled by `init_scale`, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, init_scale: f64, rng: &mut R) -> Result<Self, CnnError> {
        let mut model = Self::zeroed(arch)?;
        let k2 = (arch.kernel * arch.kernel) as f64;
        let fan_ins = [
            k2,
            k2 * arch.conv1_filters as f64,
            arch.flat_len() as f64,
            arch.fc1 as f64,
            arch.fc2 as f64,
        ];
        let p = &mut model.params;
        for (w, fan_in) in [
            &mut p.conv1_w,
            &mut p.conv2_w,
            &mut p.fc1_w,
            &mut p.fc2_w,
            &mut p.fc3_w,
        ]
        .into_iter()
        .zip(fan_ins)
        {
            let bound = init_scale * (6.0 / fan_in).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(model)
    }

    pub fn from_params(arch: Architecture, params: Params) -> Result<Self, CnnError> {
        arch.validate()?;
        let expected = Params::shapes(&arch);
        for ((block, shape), name) in params.blocks().iter().zip(&expected).zip(BLOCK_NAMES) {
            if block.len() != shape.iter().product::<usize>() {
                return Err(CnnError::Shape(format!("{name} has {} values", block.len())));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn check_image(&self, img: &GrayImage) -> Result<(), CnnError> {
        if img.width() != MNIST_SIDE || img.height() != MNIST_SIDE {
            return Err(CnnError::Shape(format!(
                "expected a {MNIST_SIDE}x{MNIST_SIDE} image, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    fn conv1_activations(&self, input: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let mut z = conv_valid(input, 1, MNIST_SIDE, &p.conv1_w, &p.conv1_b, self.arch.kernel);
        relu(&mut z);
        z
    }

    /// Post-ReLU first-convolution maps, one per filter.
    pub fn forward_conv1(&self, img: &GrayImage) -> Result<FeatureMapSet, CnnError> {
        self.check_image(img)?;
        let a = self.conv1_activations(&img.normalized());
        let d = self.arch.feature_dim();
        Ok(FeatureMapSet {
            side: self.arch.conv1_side(),
            maps: a.chunks(d).map(<[f64]>::to_vec).collect(),
        })
    }

    fn logits_from_conv1(&self, conv1: &[f64]) -> Vec<f64> {
        let a = &self.arch;
        let p = &self.params;
        let (pool1, _) = maxpool2(conv1, a.conv1_filters, a.conv1_side());
        let mut conv2 = conv_valid(&pool1, a.conv1_filters, a.pool1_side(), &p.conv2_w, &p.conv2_b, a.kernel);
        relu(&mut conv2);
        let (pool2, _) = maxpool2(&conv2, a.conv2_filters, a.conv2_side());
        let mut h1 = dense(&p.fc1_w, &p.fc1_b, &pool2);
        relu(&mut h1);
        let mut h2 = dense(&p.fc2_w, &p.fc2_b, &h1);
        relu(&mut h2);
        dense(&p.fc3_w, &p.fc3_b, &h2)
    }

    /// Resumes inference from (possibly replaced) first-layer maps.
    pub fn forward_from_conv1(&self, maps: &FeatureMapSet) -> Result<Posterior, CnnError> {
        if maps.side != self.arch.conv1_side() || maps.len() != self.arch.conv1_filters {
            return Err(CnnError::Shape(format!(
                "expected {} maps of {}x{}, got {} of {}x{}",
                self.arch.conv1_filters,
                self.arch.conv1_side(),
                self.arch.conv1_side(),
                maps.len(),
                maps.side,
                maps.side
            )));
        }
        let flat: Vec<f64> = maps.maps.concat();
        Ok(Posterior::from_logits(&self.logits_from_conv1(&flat)))
    }

    pub fn forward_full(&self, img: &GrayImage) -> Result<Posterior, CnnError> {
        let maps = self.forward_conv1(img)?;
        self.forward_from_conv1(&maps)
    }

    /// `(class, confidence)` of the standard network.
    pub fn predict(&self, img: &GrayImage) -> Result<(usize, f64), CnnError> {
        let post = self.forward_full(img)?;
        Ok((post.predicted(), post.confidence()))
    }

    fn trace(&self, img: &GrayImage) -> Trace {
        let a = &self.arch;
        let p = &self.params;
        let input = img.normalized();
        let conv1 = self.conv1_activations(&input);
        let (pool1, pool1_arg) = maxpool2(&conv1, a.conv1_filters, a.conv1_side());
        let mut conv2 = conv_valid(&pool1, a.conv1_filters, a.pool1_side(), &p.conv2_w, &p.conv2_b, a.kernel);
        relu(&mut conv2);
        let (pool2, pool2_arg) = maxpool2(&conv2, a.conv2_filters, a.conv2_side());
        let mut h1 = dense(&p.fc1_w, &p.fc1_b, &pool2);
        relu(&mut h1);
        let mut h2 = dense(&p.fc2_w, &p.fc2_b, &h1);
        relu(&mut h2);
        let logits = dense(&p.fc3_w, &p.fc3_b, &h2);
        Trace {
            input,
            conv1,
            pool1,
            pool1_arg,
            conv2,
            pool2,
            pool2_arg,
            h1,
            h2,
            logits,
        }
    }

    /// Cross-entropy of one image; the gradient is added into `grad`.
    fn backprop(&self, img: &GrayImage, grad: &mut Params) -> f64 {
        let a = &self.arch;
        let p = &self.params;
        let t = self.trace(img);
        let label = img.label() as usize;

        let max = t.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let loss = lse - t.logits[label];

        let mut d_logits: Vec<f64> = t.logits.iter().map(|l| (l - lse).exp()).collect();
        d_logits[label] -= 1.0;

        let mut d_h2 = dense_backward(&p.fc3_w, &t.h2, &d_logits, &mut grad.fc3_w, &mut grad.fc3_b);
        mask_relu(&mut d_h2, &t.h2);
        let mut d_h1 = dense_backward(&p.fc2_w, &t.h1, &d_h2, &mut grad.fc2_w, &mut grad.fc2_b);
        mask_relu(&mut d_h1, &t.h1);
        let d_pool2 = dense_backward(&p.fc1_w, &t.pool2, &d_h1, &mut grad.fc1_w, &mut grad.fc1_b);

        let mut d_conv2 = vec![0.0; t.conv2.len()];
        for (g, &idx) in d_pool2.iter().zip(&t.pool2_arg) {
            d_conv2[idx] += g;
        }
        mask_relu(&mut d_conv2, &t.conv2);
        let mut d_pool1 = vec![0.0; t.pool1.len()];
        conv_backward(
            &t.pool1,
            a.conv1_filters,
            a.pool1_side(),
            &p.conv2_w,
            a.kernel,
            &d_conv2,
            &mut grad.conv2_w,
            &mut grad.conv2_b,
            Some(&mut d_pool1),
        );

        let mut d_conv1 = vec![0.0; t.conv1.len()];
        for (g, &idx) in d_pool1.iter().zip(&t.pool1_arg) {
            d_conv1[idx] += g;
        }
        mask_relu(&mut d_conv1, &t.conv1);
        conv_backward(
            &t.input,
            1,
            MNIST_SIDE,
            &p.conv1_w,
            a.kernel,
            &d_conv1,
            &mut grad.conv1_w,
            &mut grad.conv1_b,
            None,
        );
        loss
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn loss_and_gradient(&self, batch: &[GrayImage]) -> Result<(f64, Params), CnnError> {
        if batch.is_empty() {
            return Err(CnnError::EmptyTrainingSet);
        }
        let mut grad = Params::zeros(&self.arch);
        let mut loss = 0.0;
        for img in batch {
            self.check_image(img)?;
            loss += self.backprop(img, &mut grad);
        }
        let n = batch.len() as f64;
        for block in grad.blocks_mut() {
            block.iter_mut().for_each(|g| *g /= n);
        }
        Ok((loss / n, grad))
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &[GrayImage]) -> Result<f64, CnnError> {
        let mut total = 0.0;
        for img in batch {
            let post = self.forward_full(img)?;
            total -= post.probabilities[img.label() as usize].ln();
        }
        Ok(total / batch.len().max(1) as f64)
    }

    pub fn accuracy(&self, images: &[GrayImage]) -> Result<f64, CnnError> {
        let mut correct = 0usize;
        for img in images {
            if self.predict(img)?.0 == img.label() as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len().max(1) as f64)
    }

    // -----------------------------------------------------------------------
    // checkpoint

    pub const MAGIC: &'static [u8; 4] = b"ICNN";
    pub const FORMAT_VERSION: u32 = 1;

    /// Binary checkpoint: magic, version, architecture, then per block a
    /// name, shape header and little-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::FORMAT_VERSION.to_le_bytes());
        let a = &self.arch;
        for v in [a.conv1_filters, a.conv2_filters, a.fc1, a.fc2, a.kernel] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(BLOCK_NAMES.len() as u32).to_le_bytes());
        for ((block, shape), name) in self.params.blocks().iter().zip(Params::shapes(a)).zip(BLOCK_NAMES) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CnnError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CnnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(CnnError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != Self::FORMAT_VERSION {
            return Err(CnnError::Format(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r)? as usize;
        }
        let arch = Architecture {
            conv1_filters: dims[0],
            conv2_filters: dims[1],
            fc1: dims[2],
            fc2: dims[3],
            kernel: dims[4],
        };
        arch.validate()?;
        let n_blocks = read_u32(&mut r)? as usize;
        if n_blocks != BLOCK_NAMES.len() {
            return Err(CnnError::Format(format!("{n_blocks} parameter blocks")));
        }
        let mut params = Params::zeros(&arch);
        for ((block, shape), name) in params.blocks_mut().into_iter().zip(Params::shapes(&arch)).zip(BLOCK_NAMES) {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 64 {
                return Err(CnnError::Format("block name too long".into()));
            }
            let mut buf = vec![0u8; name_len];
            r.read_exact(&mut buf)?;
            if buf != name.as_bytes() {
                return Err(CnnError::Format(format!("expected block {name}")));
            }
            let ndims = read_u32(&mut r)? as usize;
            let mut got = Vec::with_capacity(ndims.min(8));
            for _ in 0..ndims {
                got.push(read_u32(&mut r)? as usize);
            }
            if got != shape {
                return Err(CnnError::Format(format!("{name} has shape {got:?}, expected {shape:?}")));
            }
            for v in block.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        if !params.all_finite() {
            return Err(CnnError::Format("non-finite parameter".into()));
        }
        Ok(Self { arch, params })
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CnnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn mask_relu(grad: &mut [f64], activation: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Per-epoch training summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Mini-batch SGD on cross-entropy.
///
/// Initialization and the per-epoch shuffles draw from the `"train"`
/// substream of `seed`, so the result depends only on `(train_set, hp, seed)`.
pub fn train(train_set: &[GrayImage], hp: &TrainParams, seed: u64) -> Result<CnnModel, CnnError> {
    train_with_log(train_set, hp, seed, |_| {})
}

pub fn train_with_log<F: FnMut(EpochLog)>(
    train_set: &[GrayImage],
    hp: &TrainParams,
    seed: u64,
    mut on_epoch: F,
) -> Result<CnnModel, CnnError> {
    if train_set.is_empty() {
        return Err(CnnError::EmptyTrainingSet);
    }
    if hp.batch_size == 0 {
        return Err(CnnError::Shape("batch size must be positive".into()));
    }
    let mut rng = substream(seed, "train", &[]);
    let mut model = CnnModel::init(hp.architecture, hp.init_scale, &mut rng)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch = Vec::with_capacity(hp.batch_size);

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let (loss, grad) = model.loss_and_gradient(&batch)?;
            if !loss.is_finite() {
                return Err(CnnError::Diverged { epoch, batch: b });
            }
            epoch_loss += loss * chunk.len() as f64;
            for (w, g) in model.params.blocks_mut().into_iter().zip(grad.blocks()) {
                for (wv, gv) in w.iter_mut().zip(g.iter()) {
                    *wv -= hp.learning_rate * gv;
                }
            }
            if !model.params.all_finite() {
                return Err(CnnError::Diverged { epoch, batch: b });
            }
        }
        let log = EpochLog {
            epoch,
            mean_loss: epoch_loss / train_set.len() as f64,
        };
        log::info!("epoch {} mean loss {:.5}", log.epoch, log.mean_loss);
        on_epoch(log);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, label: u8) -> GrayImage {
        let px = (0..MNIST_SIDE * MNIST_SIDE).map(|_| rng.gen()).collect();
        GrayImage::new(MNIST_SIDE, MNIST_SIDE, px, label).unwrap()
    }

    fn random_model(seed: u64) -> CnnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = CnnModel::init(Architecture::default(), 1.0, &mut rng).unwrap();
        for b in [&mut m.params.conv1_b, &mut m.params.conv2_b, &mut m.params.fc1_b] {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        m
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_maps() {
        let m = random_model(1);
        let mut m = m.clone();
        m.params.conv1_b.iter_mut().for_each(|b| *b = 0.0);
        let blank = GrayImage::new(28, 28, vec![0; 784], 0).unwrap();
        let maps = m.forward_conv1(&blank).unwrap();
        assert_eq!(maps.len(), 6);
        assert_eq!(maps.dim(), 576);
        assert!(maps.maps().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_kernel_crops_centre() {
        let mut m = CnnModel::zeroed(Architecture::default()).unwrap();
        m.params.conv1_w[2 * 5 + 2] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 0);
        let maps = m.forward_conv1(&img).unwrap();
        let norm = img.normalized();
        for y in 0..24 {
            for x in 0..24 {
                assert_eq!(maps.map(0)[y * 24 + x], norm[(y + 2) * 28 + x + 2]);
            }
        }
    }

    #[test]
    fn conv1_matches_quadruple_loop() {
        let m = random_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 0);
        let x = img.normalized();
        let maps = m.forward_conv1(&img).unwrap();
        for f in 0..6 {
            for oy in 0..24 {
                for ox in 0..24 {
                    let mut acc = m.params.conv1_b[f];
                    for ky in 0..5 {
                        for kx in 0..5 {
                            acc += m.params.conv1_w[f * 25 + ky * 5 + kx] * x[(oy + ky) * 28 + ox + kx];
                        }
                    }
                    let expected = acc.max(0.0);
                    assert!((maps.map(f)[oy * 24 + ox] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_matches_window_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input: Vec<f64> = (0..2 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, arg) = maxpool2(&input, 2, 8);
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let window = [
                        input[c * 64 + 2 * y * 8 + 2 * x],
                        input[c * 64 + 2 * y * 8 + 2 * x + 1],
                        input[c * 64 + (2 * y + 1) * 8 + 2 * x],
                        input[c * 64 + (2 * y + 1) * 8 + 2 * x + 1],
                    ];
                    let m = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let o = c * 16 + y * 4 + x;
                    assert_eq!(out[o], m);
                    assert_eq!(input[arg[o]], m);
                }
            }
        }
    }

    #[test]
    fn split_pipeline_is_bitwise_identical() {
        let m = random_model(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let img = random_image(&mut rng, 1);
            let split = m.forward_from_conv1(&m.forward_conv1(&img).unwrap()).unwrap();
            let full = m.forward_full(&img).unwrap();
            assert_eq!(split, full);
            let t = m.trace(&img);
            assert_eq!(Posterior::from_logits(&t.logits), full);
            let sum: f64 = full.probabilities.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = CnnModel::zeroed(Architecture::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 4);
        let post = m.forward_full(&img).unwrap();
        assert!(post.probabilities.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        assert_eq!(m.predict(&img).unwrap(), (0, 0.1));
    }

    #[test]
    fn zero_maps_posterior_depends_only_on_biases() {
        let m = random_model(9);
        let zero = FeatureMapSet::new(24, vec![vec![0.0; 576]; 6]).unwrap();
        let a = m.forward_from_conv1(&zero).unwrap();
        let mut other = m.clone();
        other.params.conv1_w.iter_mut().for_each(|w| *w *= -3.0);
        assert_eq!(other.forward_from_conv1(&zero).unwrap(), a);
    }

    #[test]
    fn shape_errors() {
        let m = random_model(10);
        let small = GrayImage::new(10, 10, vec![0; 100], 0).unwrap();
        assert!(matches!(m.forward_conv1(&small), Err(CnnError::Shape(_))));
        let wrong = FeatureMapSet::new(24, vec![vec![0.0; 576]; 5]).unwrap();
        assert!(matches!(m.forward_from_conv1(&wrong), Err(CnnError::Shape(_))));
    }

    #[test]
    fn permuting_conv1_filters_leaves_posterior_unchanged() {
        let m = random_model(11);
        let mut p = m.clone();
        let (a, b) = (1usize, 4usize);
        for i in 0..25 {
            p.params.conv1_w.swap(a * 25 + i, b * 25 + i);
        }
        p.params.conv1_b.swap(a, b);
        for o in 0..16 {
            for i in 0..25 {
                p.params.conv2_w.swap((o * 6 + a) * 25 + i, (o * 6 + b) * 25 + i);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = random_image(&mut rng, 0);
        let x = m.forward_full(&img).unwrap();
        let y = p.forward_full(&img).unwrap();
        for (u, v) in x.probabilities.iter().zip(&y.probabilities) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn predicted_ties_go_low() {
        let p = Posterior {
            probabilities: vec![0.1, 0.4, 0.4, 0.1],
        };
        assert_eq!(p.predicted(), 1);
        assert_eq!(p.confidence(), 0.4);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let m = random_model(13);
        let bytes = m.to_bytes();
        let back = CnnModel::read_from(&bytes[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
        assert!(matches!(
            CnnModel::read_from(&bytes[..bytes.len() - 3]),
            Err(CnnError::UnexpectedEof)
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(CnnModel::read_from(&bad[..]), Err(CnnError::Format(_))));
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(matches!(CnnModel::read_from(&bad_version[..]), Err(CnnError::Format(_))));
    }

    #[test]
    fn one_epoch_reduces_loss_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // two learnable prototypes with noise
        let protos: Vec<Vec<u8>> = (0..2).map(|_| (0..784).map(|_| rng.gen()).collect()).collect();
        let set: Vec<GrayImage> = (0..64)
            .map(|i| {
                let label = (i % 2) as u8;
                let px = protos[label as usize]
                    .iter()
                    .map(|&p| p.saturating_add(rng.gen_range(0..20)))
                    .collect();
                GrayImage::new(28, 28, px, label).unwrap()
            })
            .collect();
        let hp = TrainParams {
            epochs: 1,
            batch_size: 8,
            learning_rate: 0.02,
            ..TrainParams::default()
        };
        let init = CnnModel::init(hp.architecture, hp.init_scale, &mut substream(99, "train", &[])).unwrap();
        let trained = train(&set, &hp, 99).unwrap();
        assert!(trained.loss(&set).unwrap() < init.loss(&set).unwrap());
        assert_eq!(train(&set, &hp, 99).unwrap(), trained);
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let set: Vec<GrayImage> = (0..16).map(|i| random_image(&mut rng, (i % 10) as u8)).collect();
        let hp = TrainParams {
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e308,
            ..TrainParams::default()
        };
        assert!(matches!(train(&set, &hp, 1), Err(CnnError::Diverged { .. })));
    }
}
