//! The attention autoencoder: two residual encoder blocks, a two-branch
//! spatial attention gate, channel attention, and a strided decoder.

mod checkpoint;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{
    apply_dual_attention, ca_module, encoder_block, sa_module, AttentionArtifacts, ForwardCache, ForwardOutput,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, ConvKernel, Real, Tensor};

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel width of both encoder blocks.
    pub encoder_width: usize,
    /// Output channels of each spatial attention branch.
    pub sa_channels: usize,
    /// Kernel size inside the spatial attention branches (odd).
    pub sa_kernel: usize,
    /// Hidden widths of the channel attention MLP.
    pub ca_hidden: [usize; 2],
    /// Spatial extents `(D, H, W)` of one input volume.
    pub input_dims: [usize; 3],
    /// Number of stride-2 stages in the decoder (mirrored by transposed convs).
    pub decoder_depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_width: 32,
            sa_channels: 16,
            sa_kernel: 5,
            ca_hidden: [16, 16],
            input_dims: [16, 16, 16],
            decoder_depth: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_width == 0 || self.sa_channels == 0 {
            return Err(Error::config("encoder_width and sa_channels must be positive"));
        }
        if 2 * self.sa_channels != self.encoder_width {
            return Err(Error::config(format!(
                "2 * sa_channels must equal encoder_width (got sa_channels {} and encoder_width {})",
                self.sa_channels, self.encoder_width
            )));
        }
        if self.sa_kernel % 2 == 0 {
            return Err(Error::config(format!("sa_kernel must be odd, got {}", self.sa_kernel)));
        }
        if self.ca_hidden.contains(&0) {
            return Err(Error::config("ca_hidden widths must be positive"));
        }
        let unit = 1usize << self.decoder_depth;
        if self.input_dims.iter().any(|&d| d == 0 || d % unit != 0) {
            return Err(Error::config(format!(
                "input_dims {:?} must be positive multiples of 2^decoder_depth = {unit}",
                self.input_dims
            )));
        }
        Ok(())
    }
}

/// Encoder stage: 5³, 3³ and 1³ convolutions, each followed by batch norm,
/// GELU between them, and a residual connection around the whole block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T: Real = f64> {
    pub conv5: ConvKernel<T>,
    pub bn5: BatchNormState<T>,
    pub conv3: ConvKernel<T>,
    pub bn3: BatchNormState<T>,
    pub conv1: ConvKernel<T>,
    pub bn1: BatchNormState<T>,
    /// 1³ projection when input and output widths differ; identity otherwise.
    pub proj: Option<ConvKernel<T>>,
}

/// One spatial attention branch: conv, GELU, conv. Its output is the
/// pre-sigmoid map; the gate is its sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct SaBranch<T: Real = f64> {
    pub conv_a: ConvKernel<T>,
    pub conv_b: ConvKernel<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Real = f64> {
    /// `(in, out)`
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Channel attention MLP over globally pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttention<T: Real = f64> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
    pub fc3: Dense<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T: Real = f64> {
    pub down: Vec<ConvKernel<T>>,
    pub up: Vec<ConvKernel<T>>,
    pub out: ConvKernel<T>,
}

/// All learnable weights and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub enc1: ConvBlock<T>,
    pub enc2: ConvBlock<T>,
    pub sa1: SaBranch<T>,
    pub sa2: SaBranch<T>,
    pub ca: ChannelAttention<T>,
    pub decoder: Decoder<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Trained by the optimizer.
    Param,
    /// Running statistic; saved but not trained.
    Buffer,
}

pub struct NamedTensor<'a, T: Real> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: &'a Tensor<T>,
}

pub struct NamedTensorMut<'a, T: Real> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: &'a mut Tensor<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn he<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(normal.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape matches").with_grad()
    }

    fn conv<T: Real>(&mut self, cout: usize, cin: usize, k: usize) -> ConvKernel<T> {
        ConvKernel::same(self.he(&[cout, cin, k, k, k], cin * k * k * k), Tensor::zeros(&[cout]).with_grad())
    }

    fn strided<T: Real>(&mut self, cout: usize, cin: usize) -> ConvKernel<T> {
        ConvKernel {
            weights: self.he(&[cout, cin, 3, 3, 3], cin * 27),
            bias: Tensor::zeros(&[cout]).with_grad(),
            stride: 2,
            padding: 1,
            output_padding: 0,
        }
    }

    fn transposed<T: Real>(&mut self, cin: usize, cout: usize) -> ConvKernel<T> {
        ConvKernel {
            weights: self.he(&[cin, cout, 3, 3, 3], cin * 27),
            bias: Tensor::zeros(&[cout]).with_grad(),
            stride: 2,
            padding: 1,
            output_padding: 1,
        }
    }

    fn dense<T: Real>(&mut self, fan_in: usize, out: usize) -> Dense<T> {
        Dense { weights: self.he(&[fan_in, out], fan_in), bias: Tensor::zeros(&[out]).with_grad() }
    }

    fn block<T: Real>(&mut self, cin: usize, width: usize) -> ConvBlock<T> {
        ConvBlock {
            conv5: self.conv(width, cin, 5),
            bn5: BatchNormState::new(width),
            conv3: self.conv(width, width, 3),
            bn3: BatchNormState::new(width),
            conv1: self.conv(width, width, 1),
            bn1: BatchNormState::new(width),
            proj: (cin != width).then(|| self.conv(width, cin, 1)),
        }
    }
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized network: He-normal weights, zero biases,
    /// unit/zero batch-norm affine parameters. Deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let width = config.encoder_width;
        let sa = config.sa_channels;
        let k = config.sa_kernel;
        let enc1 = init.block(1, width);
        let enc2 = init.block(width, width);
        let sa1 = SaBranch { conv_a: init.conv(sa, width, k), conv_b: init.conv(sa, sa, k) };
        let sa2 = SaBranch { conv_a: init.conv(sa, width, k), conv_b: init.conv(sa, sa, k) };
        let gated = 2 * sa;
        let [h1, h2] = config.ca_hidden;
        let ca = ChannelAttention { fc1: init.dense(gated, h1), fc2: init.dense(h1, h2), fc3: init.dense(h2, gated) };
        let down = (0..config.decoder_depth).map(|_| init.strided(width, width)).collect();
        let up = (0..config.decoder_depth).map(|_| init.transposed(width, width)).collect();
        let out = init.conv(1, width, 1);
        Ok(Self { config, enc1, enc2, sa1, sa2, ca, decoder: Decoder { down, up, out } })
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = Vec::new();
        self.walk(&mut |name, kind, tensor| out.push(NamedTensor { name, kind, tensor }));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, T>> {
        let mut out = Vec::new();
        self.walk_mut(&mut |name, kind, tensor| out.push(NamedTensorMut { name, kind, tensor }));
        out
    }

    /// Trainable tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<NamedTensorMut<'_, T>> {
        self.named_tensors_mut().into_iter().filter(|t| t.kind == TensorKind::Param).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().filter(|t| t.kind == TensorKind::Param).map(|t| t.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.named_tensors_mut() {
            t.tensor.zero_grad();
        }
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.config.clone()).expect("config already validated");
        let src = self.named_tensors();
        for (dst, src) in out.named_tensors_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name, src.name);
            *dst.tensor = src.tensor.cast();
        }
        out
    }

    fn walk<'a>(&'a self, f: &mut dyn FnMut(String, TensorKind, &'a Tensor<T>)) {
        use TensorKind::*;
        fn conv<'a, T: Real>(f: &mut dyn FnMut(String, TensorKind, &'a Tensor<T>), p: &str, k: &'a ConvKernel<T>) {
            f(format!("{p}.weight"), Param, &k.weights);
            f(format!("{p}.bias"), Param, &k.bias);
        }
        fn bn<'a, T: Real>(f: &mut dyn FnMut(String, TensorKind, &'a Tensor<T>), p: &str, s: &'a BatchNormState<T>) {
            f(format!("{p}.gamma"), Param, &s.gamma);
            f(format!("{p}.beta"), Param, &s.beta);
            f(format!("{p}.running_mean"), Buffer, &s.running_mean);
            f(format!("{p}.running_var"), Buffer, &s.running_var);
        }
        for (p, b) in [("enc1", &self.enc1), ("enc2", &self.enc2)] {
            conv(f, &format!("{p}.conv5"), &b.conv5);
            bn(f, &format!("{p}.bn5"), &b.bn5);
            conv(f, &format!("{p}.conv3"), &b.conv3);
            bn(f, &format!("{p}.bn3"), &b.bn3);
            conv(f, &format!("{p}.conv1"), &b.conv1);
            bn(f, &format!("{p}.bn1"), &b.bn1);
            if let Some(proj) = &b.proj {
                conv(f, &format!("{p}.proj"), proj);
            }
        }
        for (p, s) in [("sa1", &self.sa1), ("sa2", &self.sa2)] {
            conv(f, &format!("{p}.conv_a"), &s.conv_a);
            conv(f, &format!("{p}.conv_b"), &s.conv_b);
        }
        for (p, d) in [("ca.fc1", &self.ca.fc1), ("ca.fc2", &self.ca.fc2), ("ca.fc3", &self.ca.fc3)] {
            f(format!("{p}.weight"), Param, &d.weights);
            f(format!("{p}.bias"), Param, &d.bias);
        }
        for (i, k) in self.decoder.down.iter().enumerate() {
            conv(f, &format!("dec.down{i}"), k);
        }
        for (i, k) in self.decoder.up.iter().enumerate() {
            conv(f, &format!("dec.up{i}"), k);
        }
        conv(f, "dec.out", &self.decoder.out);
    }

    fn walk_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, TensorKind, &'a mut Tensor<T>)) {
        use TensorKind::*;
        fn conv<'a, T: Real>(f: &mut dyn FnMut(String, TensorKind, &'a mut Tensor<T>), p: &str, k: &'a mut ConvKernel<T>) {
            f(format!("{p}.weight"), Param, &mut k.weights);
            f(format!("{p}.bias"), Param, &mut k.bias);
        }
        fn bn<'a, T: Real>(f: &mut dyn FnMut(String, TensorKind, &'a mut Tensor<T>), p: &str, s: &'a mut BatchNormState<T>) {
            f(format!("{p}.gamma"), Param, &mut s.gamma);
            f(format!("{p}.beta"), Param, &mut s.beta);
            f(format!("{p}.running_mean"), Buffer, &mut s.running_mean);
            f(format!("{p}.running_var"), Buffer, &mut s.running_var);
        }
        for (p, b) in [("enc1", &mut self.enc1), ("enc2", &mut self.enc2)] {
            conv(f, &format!("{p}.conv5"), &mut b.conv5);
            bn(f, &format!("{p}.bn5"), &mut b.bn5);
            conv(f, &format!("{p}.conv3"), &mut b.conv3);
            bn(f, &format!("{p}.bn3"), &mut b.bn3);
            conv(f, &format!("{p}.conv1"), &mut b.conv1);
            bn(f, &format!("{p}.bn1"), &mut b.bn1);
            if let Some(proj) = &mut b.proj {
                conv(f, &format!("{p}.proj"), proj);
            }
        }
        for (p, s) in [("sa1", &mut self.sa1), ("sa2", &mut self.sa2)] {
            conv(f, &format!("{p}.conv_a"), &mut s.conv_a);
            conv(f, &format!("{p}.conv_b"), &mut s.conv_b);
        }
        for (p, d) in [("ca.fc1", &mut self.ca.fc1), ("ca.fc2", &mut self.ca.fc2), ("ca.fc3", &mut self.ca.fc3)] {
            f(format!("{p}.weight"), Param, &mut d.weights);
            f(format!("{p}.bias"), Param, &mut d.bias);
        }
        for (i, k) in self.decoder.down.iter_mut().enumerate() {
            conv(f, &format!("dec.down{i}"), k);
        }
        for (i, k) in self.decoder.up.iter_mut().enumerate() {
            conv(f, &format!("dec.up{i}"), k);
        }
        conv(f, "dec.out", &mut self.decoder.out);
    }
}
