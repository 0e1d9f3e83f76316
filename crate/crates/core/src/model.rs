//! The shared network `f: R^D -> R^K` and its two heads.
//!
//! The classifier head is the softmax of the logits. The energy head is the
//! unnormalised log-density `LogSumExp(logits)`; the energy is its negation.
//! The partition function is never formed.
//!
//! The network is a flat parameter vector interpreted by a sequence of
//! [`Op`]s. Every op knows how to run forward and how to push a gradient
//! backward, optionally accumulating parameter gradients on the way.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Swish => z * sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Swish => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Arch {
    /// Fully connected `input -> hidden.. -> classes`, activation after each hidden layer.
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        classes: usize,
        activation: Activation,
    },
    /// 3x3 conv blocks on an HWC image. The first block keeps resolution,
    /// later blocks are preceded by 2x2 average pooling. Global average
    /// pooling feeds a linear classifier.
    Cnn {
        height: usize,
        width: usize,
        channels: usize,
        conv: Vec<usize>,
        classes: usize,
        activation: Activation,
    },
}

impl Arch {
    /// The desk-scale MLP `input -> 64 -> 64 -> classes` with swish.
    pub fn reference_mlp(input: usize, classes: usize) -> Self {
        Arch::Mlp {
            input,
            hidden: vec![64, 64],
            classes,
            activation: Activation::Swish,
        }
    }

    /// The desk-scale CNN with 16 and 32 channel conv blocks.
    pub fn reference_cnn(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Arch::Cnn {
            height,
            width,
            channels,
            conv: vec![16, 32],
            classes,
            activation: Activation::Swish,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Arch::Mlp { input, .. } => *input,
            Arch::Cnn { height, width, channels, .. } => height * width * channels,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Arch::Mlp { classes, .. } | Arch::Cnn { classes, .. } => *classes,
        }
    }

    pub fn param_count(&self) -> usize {
        Network::build(self).param_count
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    /// Weights `output x input` row-major, then `output` biases.
    Dense { input: usize, output: usize, offset: usize },
    /// 3x3 stride-1 zero-padded convolution on HWC data. Weights are
    /// `[out][ky][kx][in]`, then `out` biases.
    Conv3x3 { height: usize, width: usize, input: usize, output: usize, offset: usize },
    AvgPool2 { height: usize, width: usize, channels: usize },
    GlobalAvgPool { height: usize, width: usize, channels: usize },
    Act(Activation),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Dense { .. } => "dense",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::AvgPool2 { .. } => "avgpool2",
            Op::GlobalAvgPool { .. } => "global-avgpool",
            Op::Act(_) => "activation",
        }
    }

    fn fan_in(&self) -> Option<(usize, usize, usize)> {
        // (offset, weight count, fan-in)
        match *self {
            Op::Dense { input, output, offset } => Some((offset, input * output, input)),
            Op::Conv3x3 { input, output, offset, .. } => Some((offset, 9 * input * output, 9 * input)),
            _ => None,
        }
    }

    fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        match *self {
            Op::Dense { input, output, offset } => {
                let w = &params[offset..offset + input * output];
                let b = &params[offset + input * output..offset + input * output + output];
                (0..output)
                    .map(|o| {
                        let row = &w[o * input..(o + 1) * input];
                        b[o] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
                    })
                    .collect()
            }
            Op::Conv3x3 { height, width, input, output, offset } => {
                let nw = 9 * input * output;
                let w = &params[offset..offset + nw];
                let b = &params[offset + nw..offset + nw + output];
                let mut out = vec![0.0; height * width * output];
                for y in 0..height {
                    for xx in 0..width {
                        let dst = &mut out[(y * width + xx) * output..(y * width + xx + 1) * output];
                        dst.copy_from_slice(b);
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= height as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= width as isize {
                                    continue;
                                }
                                let src = (sy as usize * width + sx as usize) * input;
                                let src = &x[src..src + input];
                                for (o, d) in dst.iter_mut().enumerate() {
                                    let k = ((o * 3 + ky) * 3 + kx) * input;
                                    *d += w[k..k + input].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                }
                out
            }
            Op::AvgPool2 { height, width, channels } => {
                let (oh, ow) = (height / 2, width / 2);
                let mut out = vec![0.0; oh * ow * channels];
                for y in 0..oh {
                    for xx in 0..ow {
                        for c in 0..channels {
                            let at = |yy: usize, xq: usize| x[(yy * width + xq) * channels + c];
                            out[(y * ow + xx) * channels + c] = 0.25
                                * (at(2 * y, 2 * xx)
                                    + at(2 * y, 2 * xx + 1)
                                    + at(2 * y + 1, 2 * xx)
                                    + at(2 * y + 1, 2 * xx + 1));
                        }
                    }
                }
                out
            }
            Op::GlobalAvgPool { height, width, channels } => {
                let mut out = vec![0.0; channels];
                for px in x.chunks_exact(channels) {
                    for (o, v) in out.iter_mut().zip(px) {
                        *o += v;
                    }
                }
                let scale = 1.0 / (height * width) as f64;
                out.iter_mut().for_each(|v| *v *= scale);
                out
            }
            Op::Act(act) => x.iter().map(|&z| act.apply(z)).collect(),
        }
    }

    /// Returns the gradient with respect to `x` given the gradient with
    /// respect to this op's output, accumulating parameter gradients into
    /// `grad_params` when provided.
    fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        grad_out: &[f64],
        grad_params: Option<&mut [f64]>,
    ) -> Vec<f64> {
        match *self {
            Op::Dense { input, output, offset } => {
                let w = &params[offset..offset + input * output];
                let mut grad_in = vec![0.0; input];
                for (o, &g) in grad_out.iter().enumerate() {
                    let row = &w[o * input..(o + 1) * input];
                    for (gi, wi) in grad_in.iter_mut().zip(row) {
                        *gi += g * wi;
                    }
                }
                if let Some(gp) = grad_params {
                    let (gw, gb) = gp[offset..offset + input * output + output].split_at_mut(input * output);
                    for (o, &g) in grad_out.iter().enumerate() {
                        for (gwi, xi) in gw[o * input..(o + 1) * input].iter_mut().zip(x) {
                            *gwi += g * xi;
                        }
                        gb[o] += g;
                    }
                }
                grad_in
            }
            Op::Conv3x3 { height, width, input, output, offset } => {
                let nw = 9 * input * output;
                let w = &params[offset..offset + nw];
                let mut grad_in = vec![0.0; height * width * input];
                let mut gp = grad_params.map(|gp| gp[offset..offset + nw + output].split_at_mut(nw));
                for y in 0..height {
                    for xx in 0..width {
                        let g = &grad_out[(y * width + xx) * output..(y * width + xx + 1) * output];
                        if let Some((_, gb)) = gp.as_mut() {
                            for (gbo, go) in gb.iter_mut().zip(g) {
                                *gbo += go;
                            }
                        }
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= height as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= width as isize {
                                    continue;
                                }
                                let src = (sy as usize * width + sx as usize) * input;
                                for (o, &go) in g.iter().enumerate() {
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let k = ((o * 3 + ky) * 3 + kx) * input;
                                    for i in 0..input {
                                        grad_in[src + i] += go * w[k + i];
                                    }
                                    if let Some((gw, _)) = gp.as_mut() {
                                        for i in 0..input {
                                            gw[k + i] += go * x[src + i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                grad_in
            }
            Op::AvgPool2 { height, width, channels } => {
                let (oh, ow) = (height / 2, width / 2);
                let mut grad_in = vec![0.0; height * width * channels];
                for y in 0..oh {
                    for xx in 0..ow {
                        for c in 0..channels {
                            let g = 0.25 * grad_out[(y * ow + xx) * channels + c];
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                grad_in[((2 * y + dy) * width + 2 * xx + dx) * channels + c] += g;
                            }
                        }
                    }
                }
                grad_in
            }
            Op::GlobalAvgPool { height, width, channels } => {
                let scale = 1.0 / (height * width) as f64;
                let mut grad_in = vec![0.0; height * width * channels];
                for px in grad_in.chunks_exact_mut(channels) {
                    for (gi, go) in px.iter_mut().zip(grad_out) {
                        *gi = go * scale;
                    }
                }
                grad_in
            }
            Op::Act(act) => x
                .iter()
                .zip(grad_out)
                .map(|(&z, &g)| g * act.derivative(z))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Network {
    ops: Vec<Op>,
    param_count: usize,
    /// Number of leading ops forming the first layer (first parametric op
    /// plus its activation, if any).
    first_block: usize,
}

impl Network {
    fn build(arch: &Arch) -> Self {
        let mut ops = Vec::new();
        let mut offset = 0;
        match arch {
            Arch::Mlp { input, hidden, classes, activation } => {
                let mut prev = *input;
                for &h in hidden {
                    ops.push(Op::Dense { input: prev, output: h, offset });
                    offset += prev * h + h;
                    ops.push(Op::Act(*activation));
                    prev = h;
                }
                ops.push(Op::Dense { input: prev, output: *classes, offset });
                offset += prev * classes + classes;
            }
            Arch::Cnn { height, width, channels, conv, classes, activation } => {
                let (mut h, mut w, mut c) = (*height, *width, *channels);
                for (i, &out) in conv.iter().enumerate() {
                    if i > 0 {
                        ops.push(Op::AvgPool2 { height: h, width: w, channels: c });
                        h /= 2;
                        w /= 2;
                    }
                    ops.push(Op::Conv3x3 { height: h, width: w, input: c, output: out, offset });
                    offset += 9 * c * out + out;
                    ops.push(Op::Act(*activation));
                    c = out;
                }
                ops.push(Op::GlobalAvgPool { height: h, width: w, channels: c });
                ops.push(Op::Dense { input: c, output: *classes, offset });
                offset += c * classes + classes;
            }
        }
        let first_block = match ops.get(1) {
            Some(Op::Act(_)) => 2,
            _ => 1,
        };
        Network {
            ops,
            param_count: offset,
            first_block,
        }
    }
}

/// Activations recorded by a forward pass; `acts[0]` is the input and
/// `acts[i + 1]` is the output of op `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

/// Parameters plus architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: Arch,
    pub params: Vec<f64>,
    pub init_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    arch: Arch,
    init_seed: u64,
    param_count: usize,
}

impl ModelState {
    /// He-style fan-in initialisation: weights `N(0, 2 / fan_in)`, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let network = Network::build(&arch);
        let mut params = vec![0.0; network.param_count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for op in &network.ops {
            if let Some((offset, count, fan_in)) = op.fan_in() {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                for p in &mut params[offset..offset + count] {
                    *p = normal.sample(&mut rng);
                }
            }
        }
        ModelState {
            arch,
            params,
            init_seed: seed,
        }
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        let network = Network::build(&arch);
        if params.len() != network.param_count {
            return Err(Error::validation(format!(
                "architecture needs {} parameters, got {}",
                network.param_count,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("non-finite parameter"));
        }
        Ok(ModelState {
            arch,
            params,
            init_seed: 0,
        })
    }

    pub fn zeros(arch: Arch) -> Self {
        let n = arch.param_count();
        Self::from_params(arch, vec![0.0; n]).expect("zero parameters are valid")
    }

    fn network(&self) -> Network {
        Network::build(&self.arch)
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::validation(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let net = self.network();
        let mut acts = Vec::with_capacity(net.ops.len() + 1);
        acts.push(x.to_vec());
        for (i, op) in net.ops.iter().enumerate() {
            let out = op.forward(&self.params, acts.last().expect("non-empty"));
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite activation in layer {i} ({})", op.name())));
            }
            acts.push(out);
        }
        Ok(Trace { acts })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.acts.pop().expect("non-empty"))
    }

    /// Backpropagates `grad_logits` through ops `[stop, len)`, returning the
    /// gradient with respect to `acts[stop]`.
    fn backward_to(
        &self,
        net: &Network,
        trace: &Trace,
        grad_logits: &[f64],
        stop: usize,
        mut grad_params: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let mut grad = grad_logits.to_vec();
        for i in (stop..net.ops.len()).rev() {
            grad = net.ops[i].backward(&self.params, &trace.acts[i], &grad, grad_params.as_deref_mut());
        }
        grad
    }

    /// Accumulates `d(loss)/d(params)` into `grad_params` for a loss whose
    /// gradient with respect to the logits is `grad_logits`.
    pub fn accumulate_param_grad(&self, trace: &Trace, grad_logits: &[f64], grad_params: &mut [f64]) {
        let net = self.network();
        self.backward_to(&net, trace, grad_logits, 0, Some(grad_params));
    }

    pub fn input_grad(&self, trace: &Trace, grad_logits: &[f64]) -> Vec<f64> {
        let net = self.network();
        let frozen = self.backward_to(&net, trace, grad_logits, net.first_block, None);
        self.first_block_backward(&net, &trace.acts[..=net.first_block], &frozen)
    }

    fn first_block_backward(&self, net: &Network, acts: &[Vec<f64>], grad_out: &[f64]) -> Vec<f64> {
        let mut grad = grad_out.to_vec();
        for i in (0..net.first_block).rev() {
            grad = net.ops[i].backward(&self.params, &acts[i], &grad, None);
        }
        grad
    }

    /// Energy gradient `d(-LogSumExp(f(x)))/dx`.
    pub fn grad_energy_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward(x)?;
        let grad_logits = energy_grad_logits(trace.logits());
        Ok(self.input_grad(&trace, &grad_logits))
    }

    /// Energy gradient with respect to the first layer's output, held fixed
    /// while the sample is moved by [`Self::first_layer_input_grad`].
    pub fn frozen_upper_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward(x)?;
        let net = self.network();
        let grad_logits = energy_grad_logits(trace.logits());
        Ok(self.backward_to(&net, &trace, &grad_logits, net.first_block, None))
    }

    /// Input gradient through the first layer only, given a frozen gradient
    /// at that layer's output.
    pub fn first_layer_input_grad(&self, x: &[f64], frozen: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let net = self.network();
        let mut acts = Vec::with_capacity(net.first_block + 1);
        acts.push(x.to_vec());
        for (i, op) in net.ops[..net.first_block].iter().enumerate() {
            let out = op.forward(&self.params, &acts[i]);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite activation in layer {i} ({})", op.name())));
            }
            acts.push(out);
        }
        Ok(self.first_block_backward(&net, &acts, frozen))
    }

    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        Ok(-log_density_unnorm(&self.logits(x)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            init_seed: self.init_seed,
            param_count: self.params.len(),
        };
        fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&header)?)?;
        let bytes: Vec<u8> = self.params.iter().flat_map(|p| p.to_le_bytes()).collect();
        fs::write(dir.join("params.bin"), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_slice(&fs::read(dir.join("model.json"))?)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "version",
                format!("checkpoint version {} is not supported", header.version),
            ));
        }
        let bytes = fs::read(dir.join("params.bin"))?;
        if bytes.len() != header.param_count * 8 {
            return Err(Error::format("params.bin", "length does not match param_count"));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut state = Self::from_params(header.arch, params)?;
        state.init_seed = header.init_seed;
        Ok(state)
    }
}

/// Softmax computed with max-shifted exponentials.
pub fn posterior(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log sum_y exp(l[y])`, the log-density up to the log partition function.
pub fn log_density_unnorm(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// `log p(y | x)` as `l[y] - LogSumExp(l)`.
pub fn log_posterior(logits: &[f64], class: usize) -> f64 {
    logits[class] - log_density_unnorm(logits)
}

/// Maximum posterior probability and its class; ties go to the lowest index.
pub fn confidence(probs: &[f64]) -> (f64, usize) {
    let mut best = (probs[0], 0);
    for (k, &p) in probs.iter().enumerate().skip(1) {
        if p > best.0 {
            best = (p, k);
        }
    }
    best
}

/// Gradient of the energy `-LogSumExp(l)` with respect to the logits.
pub fn energy_grad_logits(logits: &[f64]) -> Vec<f64> {
    posterior(logits).into_iter().map(|p| -p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(d: usize, k: usize) -> Arch {
        Arch::Mlp { input: d, hidden: vec![], classes: k, activation: Activation::Identity }
    }

    #[test]
    fn zero_network_gives_zero_logits_and_gradient() {
        let state = ModelState::zeros(Arch::reference_mlp(2, 3));
        assert_eq!(state.logits(&[0.3, -0.7]).unwrap(), vec![0.0; 3]);
        assert_eq!(state.grad_energy_input(&[0.3, -0.7]).unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut params = vec![0.0; 3 * 3 + 3];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let state = ModelState::from_params(linear(3, 3), params).unwrap();
        assert_eq!(state.logits(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_logit_energy_gradient_is_minus_w() {
        let w = vec![0.5, -2.0, 3.0];
        let mut params = w.clone();
        params.push(0.7);
        let state = ModelState::from_params(linear(3, 1), params).unwrap();
        for x in [[0.0, 0.0, 0.0], [1.0, -4.0, 2.0]] {
            let g = state.grad_energy_input(&x).unwrap();
            for (gi, wi) in g.iter().zip(&w) {
                assert!((gi + wi).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let state = ModelState::init(Arch::reference_mlp(2, 3), 0);
        assert!(matches!(state.logits(&[1.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let arch = Arch::reference_mlp(2, 3);
        let mut state = ModelState::init(arch, 0);
        state.params[0] = 1e308;
        let err = state.logits(&[1e10, 1.0]).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn posterior_closed_forms() {
        let p = posterior(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = posterior(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn log_density_closed_forms() {
        assert!((log_density_unnorm(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_density_unnorm(&[4.2, -1e9]) - 4.2).abs() < 1e-12);
    }

    #[test]
    fn confidence_and_ties() {
        assert_eq!(confidence(&[0.1, 0.7, 0.2]), (0.7, 1));
        assert_eq!(confidence(&[0.5, 0.5]), (0.5, 0));
        let (c, _) = confidence(&[0.25; 4]);
        assert_eq!(c, 0.25);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let state = ModelState::init(Arch::reference_cnn(6, 6, 1, 3), 5);
        state.save(dir.path()).unwrap();
        let back = ModelState::load(dir.path()).unwrap();
        assert_eq!(back.params, state.params);
        assert_eq!(back.arch, state.arch);
        assert_eq!(back.logits(&[0.1; 36]).unwrap(), state.logits(&[0.1; 36]).unwrap());
    }

    #[test]
    fn param_counts() {
        assert_eq!(Arch::reference_mlp(2, 3).param_count(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3);
        assert_eq!(
            Arch::reference_cnn(28, 28, 1, 8).param_count(),
            9 * 16 + 16 + 9 * 16 * 32 + 32 + 32 * 8 + 8
        );
    }
}
