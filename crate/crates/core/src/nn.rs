//! Small layer building blocks on top of the autograd tape: conv, linear,
//! layer norm, MLP, and multi-head cross-attention. Each layer registers its
//! parameters under a dotted name prefix and holds only [`ParamId`]s, so
//! models stay `Send + Sync` plain data.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{PadMode, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::Result;

/// Kaiming-style uniform init over `[-bound, bound]` with
/// `bound = sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Xavier-style uniform init with `bound = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// 2-D convolution layer with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub mode: PadMode,
    pub out_channels: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = params.register(
            format!("{name}.weight"),
            kaiming_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng),
        )?;
        let bias = params.register(format!("{name}.bias"), Tensor::zeros(&[c_out, 1, 1]))?;
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            padding,
            mode: PadMode::Zero,
            out_channels: c_out,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let w = params.var(tape, self.weight, trainable);
        let b = params.var(tape, self.bias, trainable);
        let y = tape.conv2d(x, w, self.stride, self.padding, self.mode)?;
        tape.add(y, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Dense layer `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = params.register(
            format!("{name}.weight"),
            xavier_uniform(&[d_in, d_out], d_in, d_out, rng),
        )?;
        let bias = params.register(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let w = params.var(tape, self.weight, trainable);
        let b = params.var(tape, self.bias, trainable);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Layer normalization over the last axis of a rank-2 input.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        let gamma = params.register(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
        let beta = params.register(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let d = tape.value(x).shape()[1] as f64;
        let sum = tape.sum_axis(x, 1)?;
        let mean = tape.mul_scalar(sum, 1.0 / d);
        let centered = tape.sub(x, mean)?;
        let sq = tape.mul(centered, centered)?;
        let var_sum = tape.sum_axis(sq, 1)?;
        let var = tape.mul_scalar(var_sum, 1.0 / d);
        let var_eps = tape.add_scalar(var, self.eps);
        let std = tape.sqrt(var_eps);
        let normed = tape.div(centered, std)?;
        let g = params.var(tape, self.gamma, trainable);
        let b = params.var(tape, self.beta, trainable);
        let scaled = tape.mul(normed, g)?;
        tape.add(scaled, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Three-layer MLP with relu between layers.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Mlp3 {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Mlp3 {
            l1: Linear::new(params, &format!("{name}.l1"), d_in, d_hidden, rng)?,
            l2: Linear::new(params, &format!("{name}.l2"), d_hidden, d_hidden, rng)?,
            l3: Linear::new(params, &format!("{name}.l3"), d_hidden, d_out, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        let h1 = self.l1.forward(tape, params, x, trainable)?;
        let h1 = tape.relu(h1);
        let h2 = self.l2.forward(tape, params, h1, trainable)?;
        let h2 = tape.relu(h2);
        self.l3.forward(tape, params, h2, trainable)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.l1, &self.l2, &self.l3]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }
}

/// Multi-head cross-attention: queries `[K, d]` attend over tokens `[T, d]`.
/// Positional encodings are added to the keys only.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        assert!(d_model % heads == 0, "d_model must divide into heads");
        Ok(MultiHeadAttention {
            wq: Linear::new(params, &format!("{name}.wq"), d_model, d_model, rng)?,
            wk: Linear::new(params, &format!("{name}.wk"), d_model, d_model, rng)?,
            wv: Linear::new(params, &format!("{name}.wv"), d_model, d_model, rng)?,
            wo: Linear::new(params, &format!("{name}.wo"), d_model, d_model, rng)?,
            heads,
            d_model,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        queries: Var,
        tokens: Var,
        token_pos: Var,
        trainable: bool,
    ) -> Result<Var> {
        let keys_in = tape.add(tokens, token_pos)?;
        let q = self.wq.forward(tape, params, queries, trainable)?;
        let k = self.wk.forward(tape, params, keys_in, trainable)?;
        let v = self.wv.forward(tape, params, tokens, trainable)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = None;
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose2d(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.mul_scalar(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            let ch = tape.matmul(attn, vh)?;
            ctx = Some(match ctx {
                None => ch,
                Some(acc) => tape.concat_cols(acc, ch)?,
            });
        }
        self.wo.forward(tape, params, ctx.expect("at least one head"), trainable)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }
}
