//! U-Net generator and U-Net critic.
//!
//! Both networks share one encoder/decoder layout. With `depth = n` there are
//! `n/2` stride-2 encoder blocks and `n/2` stride-2 decoder blocks; layer `i`
//! (1-based) is joined to layer `n − i` by concatenating its output onto the
//! input of layer `n − i + 1`. A block is convolution → batch norm → leaky
//! ReLU; the outermost encoder block, the innermost (bottleneck) encoder block
//! and the output block carry no batch norm. The generator ends in `tanh`; the
//! critic ends linearly and adds a global score read from the bottleneck.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use image::GrayImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{generator_input, tensor_to_normal_map};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, NormalMapImage};
use crate::nn::{self, BatchNormCache, Conv, ConvCache, ConvKind};
use crate::tensor::{Real, Tensor};

/// Probability of zeroing a decoder activation when noise is on.
pub const DROPOUT_RATE: f64 = 0.5;
/// Decoder blocks (counted from the bottleneck) that receive dropout noise.
pub const NOISY_DECODER_BLOCKS: usize = 3;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Total layer count, encoder plus decoder.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Batch normalization on the inner blocks.
    pub norm: bool,
    pub leaky_slope: f64,
    /// Square input side in pixels.
    pub input_size: usize,
}

impl UNetConfig {
    pub const DEFAULT_DEPTH: usize = 16;
    pub const DEFAULT_BASE_CHANNELS: usize = 64;
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

    /// 4-channel sketch+mask in, 3-channel normals out.
    pub fn generator(input_size: usize, depth: usize) -> Self {
        Self {
            depth,
            base_channels: Self::DEFAULT_BASE_CHANNELS,
            in_channels: 4,
            out_channels: 3,
            norm: true,
            leaky_slope: Self::DEFAULT_LEAKY_SLOPE,
            input_size,
        }
    }

    /// The critic mirrors a generator config but reads sketch + mask + normals.
    pub fn critic_for(generator: &UNetConfig) -> Self {
        Self {
            in_channels: generator.in_channels + generator.out_channels,
            out_channels: 1,
            ..generator.clone()
        }
    }

    /// Largest depth whose bottleneck is still at least 1×1.
    pub fn max_depth_for(input_size: usize) -> usize {
        2 * input_size.trailing_zeros() as usize
    }

    pub fn levels(&self) -> usize {
        self.depth / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth < 2 || self.depth % 2 != 0 {
            return bad(format!("depth must be even and at least 2, got {}", self.depth));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope must be finite and >= 0, got {}", self.leaky_slope));
        }
        let stride = 1usize.checked_shl(self.levels() as u32).unwrap_or(0);
        if stride == 0 || self.input_size == 0 || self.input_size % stride != 0 {
            return bad(format!(
                "input size {} is not divisible by 2^{} required by depth {}",
                self.input_size,
                self.levels(),
                self.depth
            ));
        }
        Ok(())
    }

    /// Output channels of encoder block `i` (0-based): doubling, capped at 8×base.
    pub fn encoder_channels(&self, i: usize) -> usize {
        let cap = 8 * self.base_channels;
        (self.base_channels << i.min(3)).min(cap)
    }

    /// Output channels of decoder block `j` (0-based from the bottleneck).
    pub fn decoder_channels(&self, j: usize) -> usize {
        let k = self.levels();
        if j + 1 == k {
            self.out_channels
        } else {
            self.encoder_channels(k - 2 - j)
        }
    }

    /// Input channels of decoder block `j`: previous decoder output plus skip.
    pub fn decoder_input_channels(&self, j: usize) -> usize {
        let k = self.levels();
        if j == 0 {
            self.encoder_channels(k - 1)
        } else {
            self.decoder_channels(j - 1) + self.encoder_channels(k - 1 - j)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NoiseMode {
    #[default]
    Off,
    Dropout,
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::Off => "off",
            NoiseMode::Dropout => "dropout",
        })
    }
}

impl FromStr for NoiseMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "off" => Ok(NoiseMode::Off),
            "dropout" => Ok(NoiseMode::Dropout),
            other => Err(format!("unknown noise mode `{other}` (expected off|dropout)")),
        }
    }
}

/// Noise source for one forward pass.
pub enum Noise<'a> {
    Off,
    Dropout(&'a mut ChaCha8Rng),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Generator,
    Critic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Leaky,
    Tanh,
    Identity,
}

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv: Conv,
    weight: usize,
    bias: Option<usize>,
    norm: Option<(usize, usize)>,
    activation: Activation,
    dropout: bool,
}

/// Architecture introspection for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockInfo {
    pub name: String,
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub batch_norm: bool,
    pub activation: Activation,
    pub dropout: bool,
}

/// Parameter gradients aligned with [`UNet::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T>(pub Vec<Vec<T>>);

impl<T: Real> Grads<T> {
    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

struct BlockCache<T> {
    conv: ConvCache<T>,
    norm: Option<BatchNormCache<T>>,
    /// Activation input (leaky / identity) or output (tanh).
    act: Tensor<T>,
    dropout: Option<Vec<T>>,
}

/// Everything a backward pass needs from the matching forward pass.
pub struct UNetCache<T> {
    encoder: Vec<BlockCache<T>>,
    decoder: Vec<BlockCache<T>>,
    pooled: Option<Vec<T>>,
    bottleneck_shape: [usize; 4],
}

/// The shared encoder/decoder network.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    role: Role,
    params: Vec<Param<T>>,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    /// (weight, bias) of the critic's global head.
    head: Option<(usize, usize)>,
}

impl<T: Real> UNet<T> {
    /// Builds the architecture with N(0, 0.02) convolution weights and
    /// N(1, 0.02) batch-norm scales.
    pub fn new(config: UNetConfig, role: Role, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let k = config.levels();
        let mut params: Vec<Param<T>> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: &mut dyn FnMut() -> f64| -> usize {
            let len = shape.iter().product();
            let data = (0..len).map(|_| T::lit(init())).collect();
            params.push(Param { name, shape, data });
            params.len() - 1
        };
        let weights = Normal::new(0.0, INIT_STD).expect("valid std");
        let scales = Normal::new(1.0, INIT_STD).expect("valid std");
        let mut make_block = |prefix: String, conv: Conv, norm: bool, activation, dropout, rng: &mut ChaCha8Rng| {
            let shape = match conv.kind {
                ConvKind::Down => vec![conv.out_channels, conv.in_channels, 4, 4],
                ConvKind::Up => vec![conv.in_channels, conv.out_channels, 4, 4],
            };
            let weight = add(format!("{prefix}.conv.weight"), shape, &mut || weights.sample(rng));
            let (bias, norm) = if norm {
                let g = add(format!("{prefix}.bn.gamma"), vec![conv.out_channels], &mut || scales.sample(rng));
                let b = add(format!("{prefix}.bn.beta"), vec![conv.out_channels], &mut || 0.0);
                (None, Some((g, b)))
            } else {
                let b = add(format!("{prefix}.conv.bias"), vec![conv.out_channels], &mut || 0.0);
                (Some(b), None)
            };
            Block {
                conv,
                weight,
                bias,
                norm,
                activation,
                dropout,
            }
        };
        let mut encoder = Vec::with_capacity(k);
        for i in 0..k {
            let conv = Conv {
                kind: ConvKind::Down,
                in_channels: if i == 0 { config.in_channels } else { config.encoder_channels(i - 1) },
                out_channels: config.encoder_channels(i),
            };
            let norm = config.norm && i != 0 && i + 1 != k;
            encoder.push(make_block(format!("enc.{i}"), conv, norm, Activation::Leaky, false, rng));
        }
        let mut decoder = Vec::with_capacity(k);
        for j in 0..k {
            let last = j + 1 == k;
            let conv = Conv {
                kind: ConvKind::Up,
                in_channels: config.decoder_input_channels(j),
                out_channels: config.decoder_channels(j),
            };
            let activation = match (last, role) {
                (false, _) => Activation::Leaky,
                (true, Role::Generator) => Activation::Tanh,
                (true, Role::Critic) => Activation::Identity,
            };
            let dropout = role == Role::Generator && !last && j < NOISY_DECODER_BLOCKS;
            decoder.push(make_block(format!("dec.{j}"), conv, config.norm && !last, activation, dropout, rng));
        }
        let head = match role {
            Role::Generator => None,
            Role::Critic => {
                let c = config.encoder_channels(k - 1);
                let w = add("global.weight".into(), vec![c], &mut || weights.sample(rng));
                let b = add("global.bias".into(), vec![1], &mut || 0.0);
                Some((w, b))
            }
        };
        Ok(Self {
            config,
            role,
            params,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads(self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect())
    }

    /// Sets every parameter to zero.
    pub fn zero_parameters(&mut self) {
        for p in &mut self.params {
            p.data.fill(T::zero());
        }
    }

    /// Replaces parameter values by name; every parameter must be supplied.
    pub fn load_params(&mut self, mut values: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<()> {
        for p in &mut self.params {
            let idx = values
                .iter()
                .position(|(n, _, _)| *n == p.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", p.name)))?;
            let (_, shape, data) = values.swap_remove(idx);
            if shape != p.shape {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name, shape, p.shape
                )));
            }
            p.data = data;
        }
        if let Some((name, _, _)) = values.first() {
            return Err(Error::Config(format!("unexpected parameter `{name}`")));
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<BlockInfo> {
        let info = |prefix: &str, i: usize, b: &Block| BlockInfo {
            name: format!("{prefix}.{i}"),
            kind: b.conv.kind,
            in_channels: b.conv.in_channels,
            out_channels: b.conv.out_channels,
            batch_norm: b.norm.is_some(),
            activation: b.activation,
            dropout: b.dropout,
        };
        self.encoder
            .iter()
            .enumerate()
            .map(|(i, b)| info("enc", i, b))
            .chain(self.decoder.iter().enumerate().map(|(j, b)| info("dec", j, b)))
            .collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let stride = 1usize << self.config.levels();
        let [n, c, h, w] = x.shape();
        if n == 0 || c != self.config.in_channels || h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not fit a depth-{} net with {} input channels",
                x.shape(),
                self.config.depth,
                self.config.in_channels
            )));
        }
        Ok(())
    }

    fn block_forward(
        &self,
        block: &Block,
        x: &Tensor<T>,
        noise: &mut Noise<'_>,
        keep: bool,
    ) -> (Tensor<T>, Option<BlockCache<T>>) {
        let p = |i: usize| self.params[i].data.as_slice();
        let (mut z, conv_cache) = block.conv.forward(x, p(block.weight), block.bias.map(p), keep);
        let mut norm_cache = None;
        if let Some((g, b)) = block.norm {
            let (y, c) = nn::batch_norm_forward(&z, p(g), p(b), keep);
            z = y;
            norm_cache = c;
        }
        let slope = T::lit(self.config.leaky_slope);
        let mut y = match block.activation {
            Activation::Leaky => nn::leaky_relu(&z, slope),
            Activation::Tanh => z.map(|v| v.tanh()),
            Activation::Identity => z.clone(),
        };
        let mut dropout = None;
        if block.dropout {
            if let Noise::Dropout(rng) = noise {
                let keep_scale = T::lit(1.0 / (1.0 - DROPOUT_RATE));
                let mask: Vec<T> = (0..y.data().len())
                    .map(|_| if rng.gen::<f64>() < DROPOUT_RATE { T::zero() } else { keep_scale })
                    .collect();
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v = *v * *m;
                }
                dropout = Some(mask);
            }
        }
        let cache = conv_cache.map(|conv| BlockCache {
            conv,
            norm: norm_cache,
            act: if block.activation == Activation::Tanh { y.clone() } else { z },
            dropout,
        });
        (y, cache)
    }

    fn block_backward(
        &self,
        block: &Block,
        cache: &BlockCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut Grads<T>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let mut g = grad_out.clone();
        if let Some(mask) = &cache.dropout {
            for (v, m) in g.data_mut().iter_mut().zip(mask) {
                *v = *v * *m;
            }
        }
        g = match block.activation {
            Activation::Leaky => nn::leaky_relu_backward(&cache.act, &g, T::lit(self.config.leaky_slope)),
            Activation::Tanh => {
                // cache.act holds the (pre-dropout) tanh output; the output
                // block never has dropout.
                nn::tanh_backward(&cache.act, &g)
            }
            Activation::Identity => g,
        };
        if let (Some((gi, bi)), Some(nc)) = (block.norm, cache.norm.as_ref()) {
            let (mut gg, mut gb) = (std::mem::take(&mut grads.0[gi]), std::mem::take(&mut grads.0[bi]));
            g = nn::batch_norm_backward(nc, &g, &self.params[gi].data, &mut gg, &mut gb);
            grads.0[gi] = gg;
            grads.0[bi] = gb;
        }
        let mut gw = std::mem::take(&mut grads.0[block.weight]);
        let mut gb = block.bias.map(|b| std::mem::take(&mut grads.0[b]));
        let gin = block.conv.backward(
            &cache.conv,
            &g,
            &self.params[block.weight].data,
            &mut gw,
            gb.as_deref_mut(),
            need_input,
        );
        grads.0[block.weight] = gw;
        if let (Some(b), Some(v)) = (block.bias, gb) {
            grads.0[b] = v;
        }
        gin
    }

    /// Runs the network; returns the decoder output, the global score (critic
    /// only) and, when `keep`, the cache for [`UNet::backward`].
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mut noise: Noise<'_>,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<Vec<T>>, Option<UNetCache<T>>)> {
        self.check_input(x)?;
        let k = self.config.levels();
        let mut enc_out: Vec<Tensor<T>> = Vec::with_capacity(k);
        let mut enc_cache = Vec::with_capacity(k);
        for (i, block) in self.encoder.iter().enumerate() {
            let input = if i == 0 { x } else { &enc_out[i - 1] };
            let (y, c) = self.block_forward(block, input, &mut noise, keep);
            enc_out.push(y);
            enc_cache.extend(c);
        }
        let mut dec_cache = Vec::with_capacity(k);
        let mut d: Option<Tensor<T>> = None;
        for (j, block) in self.decoder.iter().enumerate() {
            let input = match &d {
                None => enc_out[k - 1].clone(),
                Some(prev) => Tensor::concat_channels(&[prev, &enc_out[k - 1 - j]])?,
            };
            let (y, c) = self.block_forward(block, &input, &mut noise, keep);
            d = Some(y);
            dec_cache.extend(c);
        }
        let bottleneck = &enc_out[k - 1];
        let (global, pooled) = match self.head {
            None => (None, None),
            Some((wi, bi)) => {
                let [n, c, _, _] = bottleneck.shape();
                let plane = T::from_usize(bottleneck.plane()).unwrap();
                let w = &self.params[wi].data;
                let b = self.params[bi].data[0];
                let mut pooled = Vec::with_capacity(n * c);
                let mut scores = Vec::with_capacity(n);
                for s in 0..n {
                    let mut acc = b;
                    for (ch, chunk) in bottleneck.sample(s).chunks(bottleneck.plane()).enumerate() {
                        let m = chunk.iter().copied().sum::<T>() / plane;
                        pooled.push(m);
                        acc = acc + m * w[ch];
                    }
                    scores.push(acc);
                }
                (Some(scores), Some(pooled))
            }
        };
        let cache = keep.then(|| UNetCache {
            encoder: enc_cache,
            decoder: dec_cache,
            pooled,
            bottleneck_shape: bottleneck.shape(),
        });
        Ok((d.expect("at least one decoder block"), global, cache))
    }

    /// Backpropagates output (and global-score) gradients.
    pub fn backward(
        &self,
        cache: &UNetCache<T>,
        grad_out: &Tensor<T>,
        grad_global: Option<&[T]>,
        need_input: bool,
    ) -> (Grads<T>, Option<Tensor<T>>) {
        let k = self.config.levels();
        let mut grads = self.zero_grads();
        let mut enc_grad: Vec<Option<Tensor<T>>> = (0..k).map(|_| None).collect();
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            None => *slot = Some(g),
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
        };
        let mut g = grad_out.clone();
        for j in (0..k).rev() {
            let gin = self
                .block_backward(&self.decoder[j], &cache.decoder[j], &g, &mut grads, true)
                .expect("input gradient requested");
            if j == 0 {
                accumulate(&mut enc_grad[k - 1], gin);
            } else {
                let split = self.config.decoder_channels(j - 1);
                accumulate(&mut enc_grad[k - 1 - j], gin.channel_range(split, gin.channels()));
                g = gin.channel_range(0, split);
            }
        }
        if let (Some((wi, bi)), Some(gg), Some(pooled)) = (self.head, grad_global, cache.pooled.as_ref()) {
            let shape = cache.bottleneck_shape;
            let [n, c, _, _] = shape;
            let plane = shape[2] * shape[3];
            let inv_plane = T::one() / T::from_usize(plane).unwrap();
            let w = &self.params[wi].data;
            let mut gb = Tensor::zeros(shape);
            for s in 0..n {
                grads.0[bi][0] = grads.0[bi][0] + gg[s];
                for ch in 0..c {
                    grads.0[wi][ch] = grads.0[wi][ch] + gg[s] * pooled[s * c + ch];
                    let v = gg[s] * w[ch] * inv_plane;
                    gb.sample_mut(s)[ch * plane..(ch + 1) * plane].fill(v);
                }
            }
            accumulate(&mut enc_grad[k - 1], gb);
        }
        let mut grad_input = None;
        for i in (0..k).rev() {
            let Some(g) = enc_grad[i].take() else { continue };
            let need = i > 0 || need_input;
            let gin = self.block_backward(&self.encoder[i], &cache.encoder[i], &g, &mut grads, need);
            if let Some(gin) = gin {
                if i == 0 {
                    grad_input = Some(gin);
                } else {
                    accumulate(&mut enc_grad[i - 1], gin);
                }
            }
        }
        (grads, grad_input)
    }
}

/// The 4 → 3 channel U-Net generator with a bounded output.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T>(pub UNet<T>);

/// The U-Net critic: global score plus per-pixel score map, both unbounded.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T>(pub UNet<T>);

pub fn build_generator<T: Real>(cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Result<Generator<T>> {
    if cfg.in_channels != 4 || cfg.out_channels != 3 {
        return Err(Error::Config(format!(
            "generator maps 4 channels to 3, got {} -> {}",
            cfg.in_channels, cfg.out_channels
        )));
    }
    UNet::new(cfg.clone(), Role::Generator, rng).map(Generator)
}

pub fn build_discriminator<T: Real>(cfg: &UNetConfig, rng: &mut ChaCha8Rng) -> Result<Discriminator<T>> {
    if cfg.out_channels != 1 {
        return Err(Error::Config(format!(
            "critic produces a single score map, got {} output channels",
            cfg.out_channels
        )));
    }
    UNet::new(cfg.clone(), Role::Critic, rng).map(Discriminator)
}

impl<T: Real> Generator<T> {
    pub fn config(&self) -> &UNetConfig {
        self.0.config()
    }

    /// Output normals in [−1, 1], shape `[n, 3, h, w]`.
    pub fn forward(&self, input: &Tensor<T>, noise: Noise<'_>) -> Result<Tensor<T>> {
        Ok(self.0.forward(input, noise, false)?.0)
    }

    pub fn forward_train(&self, input: &Tensor<T>, noise: Noise<'_>) -> Result<(Tensor<T>, UNetCache<T>)> {
        let (y, _, cache) = self.0.forward(input, noise, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    pub fn backward(&self, cache: &UNetCache<T>, grad_out: &Tensor<T>) -> Grads<T> {
        self.0.backward(cache, grad_out, None, false).0
    }

    /// Noise-free inference on one sketch; `None` leaves the hint channel at zero.
    pub fn generate(&self, sketch: &GrayImage, mask: Option<&BinaryMask>) -> Result<NormalMapImage> {
        let input = generator_input::<T>(sketch, mask)?;
        let y = self.forward(&input, Noise::Off)?;
        Ok(tensor_to_normal_map(&y, 0))
    }
}

/// Critic readout for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticOutput<T> {
    pub global: Vec<T>,
    /// `[n, 1, h, w]`.
    pub map: Tensor<T>,
}

impl<T: Real> CriticOutput<T> {
    /// Per-sample `½·(global + mean(map))`.
    pub fn combined(&self) -> Vec<T> {
        let half = T::lit(0.5);
        let plane = T::from_usize(self.map.sample_len()).unwrap();
        self.global
            .iter()
            .enumerate()
            .map(|(s, &g)| half * (g + self.map.sample(s).iter().copied().sum::<T>() / plane))
            .collect()
    }

    /// Batch mean of [`CriticOutput::combined`].
    pub fn mean_combined(&self) -> T {
        let c = self.combined();
        c.iter().copied().sum::<T>() / T::from_usize(c.len()).unwrap()
    }
}

impl<T: Real> Discriminator<T> {
    pub fn config(&self) -> &UNetConfig {
        self.0.config()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<CriticOutput<T>> {
        let (map, global, _) = self.0.forward(input, Noise::Off, false)?;
        Ok(CriticOutput {
            global: global.expect("critic has a global head"),
            map,
        })
    }

    pub fn forward_train(&self, input: &Tensor<T>) -> Result<(CriticOutput<T>, UNetCache<T>)> {
        let (map, global, cache) = self.0.forward(input, Noise::Off, true)?;
        Ok((
            CriticOutput {
                global: global.expect("critic has a global head"),
                map,
            },
            cache.expect("cache requested"),
        ))
    }

    /// Gradients of `Σ_s weights[s] · combined_s`.
    pub fn backward_combined(
        &self,
        cache: &UNetCache<T>,
        map_shape: [usize; 4],
        weights: &[T],
        need_input: bool,
    ) -> (Grads<T>, Option<Tensor<T>>) {
        let half = T::lit(0.5);
        let plane = map_shape[1] * map_shape[2] * map_shape[3];
        let per_pixel = half / T::from_usize(plane).unwrap();
        let mut grad_map = Tensor::zeros(map_shape);
        for (s, &w) in weights.iter().enumerate() {
            grad_map.sample_mut(s).fill(w * per_pixel);
        }
        let grad_global: Vec<T> = weights.iter().map(|&w| w * half).collect();
        self.0.backward(cache, &grad_map, Some(&grad_global), need_input)
    }

    /// Clamps every critic parameter to `[−c, c]`.
    pub fn clip_weights(&mut self, c: T) {
        for p in self.0.params_mut() {
            for v in &mut p.data {
                *v = v.max(-c).min(c);
            }
        }
    }

    pub fn max_abs_param(&self) -> T {
        self.0
            .params()
            .iter()
            .flat_map(|p| p.data.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests;
