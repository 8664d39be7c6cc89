//! Layer building blocks on top of the tape.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, init: Init, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.w"), init.tensor(&[in_dim, out_dim], in_dim, out_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Linear map followed by RMSNorm and SiLU.
#[derive(Clone, Debug)]
pub struct Dense {
    pub linear: Linear,
    pub norm: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let linear = Linear::new(store, name, in_dim, out_dim, false, Init::FanAvg(1.0), rng);
        let norm = store.add(format!("{name}.norm"), Tensor::full(&[out_dim], 1.0));
        Self { linear, norm }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = self.linear.forward(tape, store, x);
        let s = tape.param(store, self.norm);
        let n = tape.rms_norm(y, s, NORM_EPS);
        tape.silu(n)
    }
}

/// Stack of [`Dense`] layers with a linear output head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Vec<Dense>,
    pub out: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, units: usize, layers: usize, out_dim: usize, out_init: Init, rng: &mut impl Rng) -> Self {
        let mut hidden = Vec::with_capacity(layers);
        let mut d = in_dim;
        for i in 0..layers {
            hidden.push(Dense::new(store, &format!("{name}.h{i}"), d, units, rng));
            d = units;
        }
        let out = Linear::new(store, &format!("{name}.out"), d, out_dim, true, out_init, rng);
        Self { hidden, out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(tape, store, h);
        }
        self.out.forward(tape, store, h)
    }
}

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Strided convolutional trunk: each stage halves the spatial size.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    stages: Vec<(ParamId, ParamId)>,
    proj: Linear,
    size: usize,
    channels: Vec<usize>,
}

impl ConvEncoder {
    pub fn new(store: &mut ParamStore, name: &str, size: usize, channels: &[usize], out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut stages = Vec::with_capacity(channels.len());
        let mut cin = 3;
        for (i, &cout) in channels.iter().enumerate() {
            let fan_in = KERNEL * KERNEL * cin;
            let w = store.add(format!("{name}.conv{i}.w"), Init::FanAvg(1.0).tensor(&[fan_in, cout], fan_in, cout, rng));
            let n = store.add(format!("{name}.conv{i}.norm"), Tensor::full(&[cout], 1.0));
            stages.push((w, n));
            cin = cout;
        }
        let out_size = size >> channels.len();
        assert!(out_size >= 1 && out_size << channels.len() == size, "image size {size} must be divisible by 2^{}", channels.len());
        let flat = out_size * out_size * cin;
        let proj = Linear::new(store, &format!("{name}.proj"), flat, out_dim, true, Init::FanAvg(1.0), rng);
        Self { stages, proj, size, channels: channels.to_vec() }
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn out_dim(&self) -> usize {
        self.proj.out_dim
    }

    /// `pixels`: `[n, size, size, 3]` -> `[n, out_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pixels: Var) -> Var {
        let n = tape.shape(pixels)[0];
        let mut x = pixels;
        for &(w, s) in &self.stages {
            let wv = tape.param(store, w);
            let y = tape.conv2d(x, wv, KERNEL, STRIDE, PAD);
            let sv = tape.param(store, s);
            let y = tape.rms_norm(y, sv, NORM_EPS);
            x = tape.silu(y);
        }
        let flat = tape.value(x).len() / n;
        let x = tape.reshape(x, &[n, flat]);
        self.proj.forward(tape, store, x)
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }
}

/// Transposed mirror of [`ConvEncoder`]; outputs per-pixel means in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct ConvDecoder {
    input: Linear,
    input_norm: ParamId,
    stages: Vec<(ParamId, Option<ParamId>, usize)>,
    out_bias: ParamId,
    start: usize,
    start_channels: usize,
}

impl ConvDecoder {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, size: usize, channels: &[usize], rng: &mut impl Rng) -> Self {
        let start = size >> channels.len();
        let start_channels = *channels.last().expect("decoder needs at least one stage");
        let input = Linear::new(store, &format!("{name}.in"), in_dim, start * start * start_channels, false, Init::FanAvg(1.0), rng);
        let input_norm = store.add(format!("{name}.in.norm"), Tensor::full(&[start_channels], 1.0));
        let mut outs: Vec<usize> = channels.iter().rev().skip(1).copied().collect();
        outs.push(3);
        let mut stages = Vec::new();
        let mut cin = start_channels;
        for (i, &cout) in outs.iter().enumerate() {
            let fan = KERNEL * KERNEL * cout;
            let w = store.add(format!("{name}.deconv{i}.w"), Init::FanAvg(1.0).tensor(&[cin, fan], cin, fan, rng));
            let last = i + 1 == outs.len();
            let norm = (!last).then(|| store.add(format!("{name}.deconv{i}.norm"), Tensor::full(&[cout], 1.0)));
            stages.push((w, norm, cout));
            cin = cout;
        }
        let out_bias = store.add(format!("{name}.out.b"), Tensor::zeros(&[3]));
        Self { input, input_norm, stages, out_bias, start, start_channels }
    }

    /// `features`: `[n, in_dim]` -> `[n, size, size, 3]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Var {
        let n = tape.value(features).rows();
        let x = self.input.forward(tape, store, features);
        let x = tape.reshape(x, &[n, self.start, self.start, self.start_channels]);
        let s = tape.param(store, self.input_norm);
        let x = tape.rms_norm(x, s, NORM_EPS);
        let mut x = tape.silu(x);
        for &(w, norm, cout) in &self.stages {
            let wv = tape.param(store, w);
            x = tape.conv_transpose2d(x, wv, KERNEL, STRIDE, PAD, cout);
            if let Some(norm) = norm {
                let s = tape.param(store, norm);
                let y = tape.rms_norm(x, s, NORM_EPS);
                x = tape.silu(y);
            }
        }
        let b = tape.param(store, self.out_bias);
        let x = tape.add_row(x, b);
        tape.sigmoid(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoder_and_decoder_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = ConvEncoder::new(&mut store, "enc", 16, &[4, 8, 8, 16], 32, &mut rng);
        let dec = ConvDecoder::new(&mut store, "dec", 32, 16, &[4, 8, 8, 16], &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 16, 16, 3], 0.5));
        let e = enc.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(e), &[2, 32]);
        let y = dec.forward(&mut tape, &store, e);
        assert_eq!(tape.shape(y), &[2, 16, 16, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
