use super::{ChannelAttention, ConvBlock, Decoder, Dense, Model, SaBranch};
use crate::error::{Error, Result};
use crate::tensor::conv::conv3d_backward_impl;
use crate::tensor::{
    batchnorm, batchnorm_backward, concat_channels, conv3d, conv3d_transposed, conv3d_transposed_backward,
    fully_connected, fully_connected_backward, gelu, gelu_backward, global_avg_pool, global_avg_pool_backward,
    hadamard, hadamard_backward, sigmoid, sigmoid_backward, split_channels, BatchNormCache, ConvKernel, Mode, Real,
    Tensor,
};

/// Attention maps produced for one batch.
#[derive(Debug, Clone)]
pub struct AttentionArtifacts<T: Real = f32> {
    /// Sigmoid gate of the first spatial branch, `(B, sa, D, H, W)`.
    pub sa_gate_1: Tensor<T>,
    pub sa_gate_2: Tensor<T>,
    /// Pre-activation input of `sa_gate_1`.
    pub sa_presigmoid_1: Tensor<T>,
    pub sa_presigmoid_2: Tensor<T>,
    /// Channel attention weights over the concatenated branches, `(B, 2·sa)`.
    pub ca_weights: Tensor<T>,
    /// Encoder features multiplied by the concatenated gates, `(B, C, D, H, W)`.
    pub gated_features: Tensor<T>,
}

impl<T: Real> AttentionArtifacts<T> {
    /// Both pre-sigmoid maps concatenated along the channel axis.
    pub fn presigmoid(&self) -> Result<Tensor<T>> {
        concat_channels(&self.sa_presigmoid_1, &self.sa_presigmoid_2)
    }

    pub fn batch(&self) -> usize {
        self.ca_weights.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Real = f32> {
    /// `(B, 1, D, H, W)`
    pub reconstruction: Tensor<T>,
    pub attention: AttentionArtifacts<T>,
}

/// Activations saved for [`Model::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real = f32> {
    enc1: BlockCache<T>,
    enc2: BlockCache<T>,
    features: Tensor<T>,
    sa1: SaCache<T>,
    sa2: SaCache<T>,
    ca: CaCache<T>,
    gates: Tensor<T>,
    gated: Tensor<T>,
    decoder: DecoderCache<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T: Real> {
    x: Tensor<T>,
    b1: Tensor<T>,
    g1: Tensor<T>,
    b2: Tensor<T>,
    g2: Tensor<T>,
    bn5: BatchNormCache<T>,
    bn3: BatchNormCache<T>,
    bn1: BatchNormCache<T>,
}

#[derive(Debug, Clone)]
struct SaCache<T: Real> {
    pre: Tensor<T>,
    act: Tensor<T>,
}

#[derive(Debug, Clone)]
struct CaCache<T: Real> {
    pooled: Tensor<T>,
    f1: Tensor<T>,
    h1: Tensor<T>,
    f2: Tensor<T>,
    h2: Tensor<T>,
    weights: Tensor<T>,
    presigmoid_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct DecoderCache<T: Real> {
    /// `(input, pre-activation)` per strided stage, down then up.
    stages: Vec<(Tensor<T>, Tensor<T>)>,
    last: Tensor<T>,
}

fn conv_back<T: Real>(
    k: &mut ConvKernel<T>,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let (dx, dw, db) = conv3d_backward_impl(input, k, grad_out, want_input)?;
    k.weights.accumulate_grad(dw.data());
    k.bias.accumulate_grad(db.data());
    Ok(dx)
}

fn dense_back<T: Real>(d: &mut Dense<T>, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let g = fully_connected_backward(input, &d.weights, &d.bias, grad_out)?;
    d.weights.accumulate_grad(g.weights.data());
    d.bias.accumulate_grad(g.bias.data());
    Ok(g.input)
}

impl<T: Real> ConvBlock<T> {
    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (b1, bn5) = batchnorm(&conv3d(x, &self.conv5)?, &self.bn5, mode)?;
        let g1 = gelu(&b1);
        let (b2, bn3) = batchnorm(&conv3d(&g1, &self.conv3)?, &self.bn3, mode)?;
        let g2 = gelu(&b2);
        let (b3, bn1) = batchnorm(&conv3d(&g2, &self.conv1)?, &self.bn1, mode)?;
        let skip = match &self.proj {
            Some(p) => conv3d(x, p)?,
            None => x.clone(),
        };
        let y = b3.add(&skip)?;
        Ok((y, BlockCache { x: x.clone(), b1, g1, b2, g2, bn5, bn3, bn1 }))
    }

    fn backward(&mut self, c: &BlockCache<T>, gy: &Tensor<T>, want_input: bool) -> Result<Option<Tensor<T>>> {
        let skip = match &mut self.proj {
            Some(p) => conv_back(p, &c.x, gy, want_input)?,
            None => Some(gy.clone()),
        };

        let (dc1, dgamma, dbeta) = batchnorm_backward(&c.bn1, &self.bn1, gy)?;
        self.bn1.gamma.accumulate_grad(dgamma.data());
        self.bn1.beta.accumulate_grad(dbeta.data());
        let dg2 = conv_back(&mut self.conv1, &c.g2, &dc1, true)?.expect("requested");

        let (dc3, dgamma, dbeta) = batchnorm_backward(&c.bn3, &self.bn3, &gelu_backward(&c.b2, &dg2)?)?;
        self.bn3.gamma.accumulate_grad(dgamma.data());
        self.bn3.beta.accumulate_grad(dbeta.data());
        let dg1 = conv_back(&mut self.conv3, &c.g1, &dc3, true)?.expect("requested");

        let (dc5, dgamma, dbeta) = batchnorm_backward(&c.bn5, &self.bn5, &gelu_backward(&c.b1, &dg1)?)?;
        self.bn5.gamma.accumulate_grad(dgamma.data());
        self.bn5.beta.accumulate_grad(dbeta.data());
        let dx = conv_back(&mut self.conv5, &c.x, &dc5, want_input)?;

        match (dx, skip) {
            (Some(a), Some(b)) => Ok(Some(a.add(&b)?)),
            _ => Ok(None),
        }
    }

    fn update_running(&mut self, c: &BlockCache<T>) {
        self.bn5.update_running(&c.bn5);
        self.bn3.update_running(&c.bn3);
        self.bn1.update_running(&c.bn1);
    }
}

impl<T: Real> SaBranch<T> {
    /// Returns the pre-sigmoid map.
    fn forward(&self, h: &Tensor<T>) -> Result<(Tensor<T>, SaCache<T>)> {
        let pre = conv3d(h, &self.conv_a)?;
        let act = gelu(&pre);
        let out = conv3d(&act, &self.conv_b)?;
        Ok((out, SaCache { pre, act }))
    }

    fn backward(&mut self, h: &Tensor<T>, c: &SaCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let dact = conv_back(&mut self.conv_b, &c.act, grad, true)?.expect("requested");
        let dpre = gelu_backward(&c.pre, &dact)?;
        Ok(conv_back(&mut self.conv_a, h, &dpre, true)?.expect("requested"))
    }
}

impl<T: Real> ChannelAttention<T> {
    fn forward(&self, presigmoid: &Tensor<T>) -> Result<CaCache<T>> {
        let pooled = global_avg_pool(presigmoid)?;
        let f1 = fully_connected(&pooled, &self.fc1.weights, &self.fc1.bias)?;
        let h1 = gelu(&f1);
        let f2 = fully_connected(&h1, &self.fc2.weights, &self.fc2.bias)?;
        let h2 = gelu(&f2);
        let weights = sigmoid(&fully_connected(&h2, &self.fc3.weights, &self.fc3.bias)?);
        Ok(CaCache { pooled, f1, h1, f2, h2, weights, presigmoid_shape: presigmoid.shape().to_vec() })
    }

    /// Gradient with respect to the concatenated pre-sigmoid maps.
    fn backward(&mut self, c: &CaCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let d3 = sigmoid_backward(&c.weights, grad)?;
        let dh2 = dense_back(&mut self.fc3, &c.h2, &d3)?;
        let dh1 = dense_back(&mut self.fc2, &c.h1, &gelu_backward(&c.f2, &dh2)?)?;
        let dpooled = dense_back(&mut self.fc1, &c.pooled, &gelu_backward(&c.f1, &dh1)?)?;
        global_avg_pool_backward(&c.presigmoid_shape, &dpooled)
    }
}

impl<T: Real> Decoder<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let mut stages = Vec::with_capacity(self.down.len() + self.up.len());
        let mut cur = x.clone();
        for k in &self.down {
            let pre = conv3d(&cur, k)?;
            let next = gelu(&pre);
            stages.push((cur, pre));
            cur = next;
        }
        for k in &self.up {
            let pre = conv3d_transposed(&cur, k)?;
            let next = gelu(&pre);
            stages.push((cur, pre));
            cur = next;
        }
        let out = conv3d(&cur, &self.out)?;
        Ok((out, DecoderCache { stages, last: cur }))
    }

    fn backward(&mut self, c: &DecoderCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = conv_back(&mut self.out, &c.last, grad, true)?.expect("requested");
        let n_down = self.down.len();
        for (i, k) in self.up.iter_mut().enumerate().rev() {
            let (input, pre) = &c.stages[n_down + i];
            let grads = conv3d_transposed_backward(input, k, &gelu_backward(pre, &g)?)?;
            k.weights.accumulate_grad(grads.weights.data());
            k.bias.accumulate_grad(grads.bias.data());
            g = grads.input;
        }
        for (i, k) in self.down.iter_mut().enumerate().rev() {
            let (input, pre) = &c.stages[i];
            g = conv_back(k, input, &gelu_backward(pre, &g)?, true)?.expect("requested");
        }
        Ok(g)
    }
}

/// One encoder stage in isolation.
pub fn encoder_block<T: Real>(x: &Tensor<T>, block: &ConvBlock<T>, mode: Mode) -> Result<Tensor<T>> {
    Ok(block.forward(x, mode)?.0)
}

/// Returns `(gate, presigmoid)` of one spatial attention branch.
pub fn sa_module<T: Real>(x: &Tensor<T>, branch: &SaBranch<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (pre, _) = branch.forward(x)?;
    Ok((sigmoid(&pre), pre))
}

/// Channel attention weights `(B, C)` for maps `(B, C, D, H, W)`.
pub fn ca_module<T: Real>(x: &Tensor<T>, ca: &ChannelAttention<T>) -> Result<Tensor<T>> {
    Ok(ca.forward(x)?.weights)
}

/// Both spatial branches on encoder features `x`, the gated features, and
/// channel attention over the concatenated pre-sigmoid maps.
pub fn apply_dual_attention<T: Real>(x: &Tensor<T>, model: &Model<T>) -> Result<AttentionArtifacts<T>> {
    Ok(model.attend(x)?.artifacts)
}

struct AttentionCache<'a, T: Real> {
    gates: &'a Tensor<T>,
    gated: &'a Tensor<T>,
    sa1: &'a SaCache<T>,
    sa2: &'a SaCache<T>,
    ca: &'a CaCache<T>,
}

struct Attended<T: Real> {
    artifacts: AttentionArtifacts<T>,
    gates: Tensor<T>,
    sa1: SaCache<T>,
    sa2: SaCache<T>,
    ca: CaCache<T>,
}

impl<T: Real> Model<T> {
    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [d, h, w] = self.config.input_dims;
        match x.shape() {
            &[b, 1, xd, xh, xw] if b > 0 && [xd, xh, xw] == [d, h, w] => Ok(()),
            s => Err(Error::shape(format!("model input must be (B, 1, {d}, {h}, {w}), got {s:?}"))),
        }
    }

    fn encode(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BlockCache<T>, BlockCache<T>)> {
        self.check_input(x)?;
        let (h1, c1) = self.enc1.forward(x, mode)?;
        let (h2, c2) = self.enc2.forward(&h1, mode)?;
        Ok((h2, c1, c2))
    }

    fn attend(&self, features: &Tensor<T>) -> Result<Attended<T>> {
        let c = features.shape().get(1).copied().unwrap_or(0);
        if c != 2 * self.config.sa_channels {
            return Err(Error::shape(format!(
                "dual attention expects {} feature channels, got {:?}",
                2 * self.config.sa_channels,
                features.shape()
            )));
        }
        let (p1, sa1) = self.sa1.forward(features)?;
        let (p2, sa2) = self.sa2.forward(features)?;
        let presigmoid = concat_channels(&p1, &p2)?;
        let gates = sigmoid(&presigmoid);
        let gated_features = hadamard(features, &gates)?;
        let ca = self.ca.forward(&presigmoid)?;
        let (g1, g2) = split_channels(&gates, self.config.sa_channels)?;
        let artifacts = AttentionArtifacts {
            sa_gate_1: g1,
            sa_gate_2: g2,
            sa_presigmoid_1: p1,
            sa_presigmoid_2: p2,
            ca_weights: ca.weights.clone(),
            gated_features,
        };
        Ok(Attended { artifacts, gates, sa1, sa2, ca })
    }

    /// Encoder and attention only, with running batch-norm statistics. This
    /// is the extraction path; the decoder is never evaluated.
    pub fn attention(&self, x: &Tensor<T>) -> Result<AttentionArtifacts<T>> {
        let (features, _, _) = self.encode(x, Mode::Eval)?;
        Ok(self.attend(&features)?.artifacts)
    }

    /// Full pass. The decoder sees the gated features scaled per channel by
    /// the channel attention weights.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(ForwardOutput<T>, ForwardCache<T>)> {
        let (features, enc1, enc2) = self.encode(x, mode)?;
        let Attended { artifacts, gates, sa1, sa2, ca } = self.attend(&features)?;
        let weighted = hadamard(&artifacts.gated_features, &artifacts.ca_weights)?;
        let (reconstruction, decoder) = self.decoder.forward(&weighted)?;
        let cache = ForwardCache {
            enc1,
            enc2,
            features,
            sa1,
            sa2,
            ca,
            gates,
            gated: artifacts.gated_features.clone(),
            decoder,
        };
        Ok((ForwardOutput { reconstruction, attention: artifacts }, cache))
    }

    /// Accumulates parameter gradients of `sum(grad_reconstruction * reconstruction)`
    /// into each tensor's `grad` slot. Returns the input gradient if requested.
    pub fn backward(
        &mut self,
        cache: &ForwardCache<T>,
        grad_reconstruction: &Tensor<T>,
        want_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let dweighted = self.decoder.backward(&cache.decoder, grad_reconstruction)?;
        let dfeatures = self.attention_backward(
            &cache.features,
            &AttentionCache { gates: &cache.gates, gated: &cache.gated, sa1: &cache.sa1, sa2: &cache.sa2, ca: &cache.ca },
            &dweighted,
        )?;
        let dh1 = self.enc2.backward(&cache.enc2, &dfeatures, true)?.expect("requested");
        self.enc1.backward(&cache.enc1, &dh1, want_input_grad)
    }

    /// Gradient with respect to the encoder features, given the gradient of
    /// the channel-weighted gated features.
    fn attention_backward(
        &mut self,
        features: &Tensor<T>,
        c: &AttentionCache<'_, T>,
        dweighted: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (dgated, dca) = hadamard_backward(c.gated, &c.ca.weights, dweighted)?;
        let (dfeatures_direct, dgates) = hadamard_backward(features, c.gates, &dgated)?;
        let dpresig = sigmoid_backward(c.gates, &dgates)?.add(&self.ca.backward(c.ca, &dca)?)?;
        let (dp1, dp2) = split_channels(&dpresig, self.config.sa_channels)?;
        dfeatures_direct
            .add(&self.sa1.backward(features, c.sa1, &dp1)?)?
            .add(&self.sa2.backward(features, c.sa2, &dp2)?)
    }

    /// Folds the batch statistics of a train-mode pass into the running ones.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        self.enc1.update_running(&cache.enc1);
        self.enc2.update_running(&cache.enc2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn input(batch: usize, n: usize) -> Tensor<f64> {
        let len = batch * n * n * n;
        let data = (0..len).map(|i| ((i * 7919 % 113) as f64 / 56.0 - 1.0) * 0.8).collect();
        Tensor::from_vec(vec![batch, 1, n, n, n], data).unwrap()
    }

    #[test]
    fn shapes_through_the_network() {
        let cfg = ModelConfig { encoder_width: 4, sa_channels: 2, sa_kernel: 3, input_dims: [8, 8, 8], ..Default::default() };
        let m = Model::<f64>::new(cfg).unwrap();
        let (out, _) = m.forward(&input(2, 8), Mode::Train).unwrap();
        assert_eq!(out.reconstruction.shape(), &[2, 1, 8, 8, 8]);
        let a = &out.attention;
        assert_eq!(a.sa_gate_1.shape(), &[2, 2, 8, 8, 8]);
        assert_eq!(a.gated_features.shape(), &[2, 4, 8, 8, 8]);
        assert_eq!(a.ca_weights.shape(), &[2, 4]);
        for g in [&a.sa_gate_1, &a.sa_gate_2, &a.ca_weights] {
            assert!(g.data().iter().all(|&g| g > 0.0 && g < 1.0));
        }
    }

    #[test]
    fn attention_composite_passes_grad_check() {
        use crate::tensor::grad_check;
        let cfg = ModelConfig { encoder_width: 4, sa_channels: 2, sa_kernel: 3, ca_hidden: [3, 2], input_dims: [8, 8, 8], seed: 5, ..Default::default() };
        let model = Model::<f64>::new(cfg).unwrap();
        let features = input(8, 8).reshape(&[2, 4, 8, 8, 8]).unwrap();
        let weighted = |x: &Tensor<f64>| {
            let a = model.attend(x).unwrap().artifacts;
            hadamard(&a.gated_features, &a.ca_weights).unwrap()
        };
        let report = grad_check(
            weighted,
            |x, g| {
                let att = model.attend(x).unwrap();
                let c = AttentionCache { gates: &att.gates, gated: &att.artifacts.gated_features, sa1: &att.sa1, sa2: &att.sa2, ca: &att.ca };
                model.clone().attention_backward(x, &c, g).unwrap()
            },
            &features,
            1e-4,
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn wrong_input_extent_rejected() {
        let m = Model::<f64>::new(ModelConfig { input_dims: [8, 8, 8], ..Default::default() }).unwrap();
        let err = m.attention(&input(1, 4)).unwrap_err();
        assert!(err.to_string().contains("(B, 1, 8, 8, 8)"), "{err}");
    }

    #[test]
    fn attention_path_matches_eval_forward() {
        let cfg = ModelConfig { encoder_width: 4, sa_channels: 2, sa_kernel: 3, input_dims: [8, 8, 8], ..Default::default() };
        let m = Model::<f64>::new(cfg).unwrap();
        let x = input(1, 8);
        let a = m.attention(&x).unwrap();
        let (full, _) = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.sa_presigmoid_2.data(), full.attention.sa_presigmoid_2.data());
        assert_eq!(a.ca_weights.data(), full.attention.ca_weights.data());
    }
}
