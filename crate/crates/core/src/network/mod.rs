//! Declarative network construction, initialization, forward evaluation and
//! checkpointing for the ConvNet, conventional ResNet and LiResNet families.

mod checkpoint;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use spec::{Arch, ArchParams, LayerSpec, NetworkSpec};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradTape, NodeId, Precision, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Parameter indices owned by one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Stem { weight: usize, bias: usize },
    LinearResidual { weight: usize, beta: Option<usize> },
    Conv { weight: usize, bias: usize },
    ConventionalResidual { conv1: usize, conv2: usize, beta: Option<usize> },
    MinMax,
    Neck { conv_weight: usize, conv_bias: usize, dense_weight: usize, dense_bias: usize },
    Head { weight: usize, bias: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<[usize; 3]>,
    params: Vec<Param>,
    layers: Vec<LayerParams>,
}

/// Node ids of a forward pass recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Recorded {
    pub features: NodeId,
    pub logits: NodeId,
}

/// Builds and initializes a network: Kaiming Gaussian weights
/// (`std = sqrt(2 / fan_in)`), zero biases, `beta = 1` for linear residual
/// blocks and `beta = 0` for conventional residual blocks.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let shapes = spec.shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut add = |name: String, value: Tensor| {
        params.push(Param { name, value });
        params.len() - 1
    };
    let kaiming = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng);
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let [c, _, _] = shapes[i];
        let lp = match *layer {
            LayerSpec::Stem { kernel, out_channels, .. } => {
                let w = kaiming(&[out_channels, c, kernel, kernel], c * kernel * kernel, &mut rng);
                LayerParams::Stem {
                    weight: add(format!("l{}.weight", i), w),
                    bias: add(format!("l{}.bias", i), Tensor::zeros(&[out_channels])),
                }
            }
            LayerSpec::LinearResidualBlock { channels, kernel_size, beta_per_channel, .. } => {
                let w = kaiming(&[channels, channels, kernel_size, kernel_size], channels * kernel_size * kernel_size, &mut rng);
                let weight = add(format!("l{}.weight", i), w);
                let beta = beta_per_channel.then(|| add(format!("l{}.beta", i), Tensor::full(&[channels], 1.0)));
                LayerParams::LinearResidual { weight, beta }
            }
            LayerSpec::ConvBlock { channels, kernel, .. } => {
                let w = kaiming(&[channels, c, kernel, kernel], c * kernel * kernel, &mut rng);
                LayerParams::Conv {
                    weight: add(format!("l{}.weight", i), w),
                    bias: add(format!("l{}.bias", i), Tensor::zeros(&[channels])),
                }
            }
            LayerSpec::ConventionalResidualBlock { channels, kernel_size, beta_per_channel } => {
                let fan = channels * kernel_size * kernel_size;
                let shape = [channels, channels, kernel_size, kernel_size];
                let conv1 = add(format!("l{}.conv1", i), kaiming(&shape, fan, &mut rng));
                let conv2 = add(format!("l{}.conv2", i), kaiming(&shape, fan, &mut rng));
                let beta = beta_per_channel.then(|| add(format!("l{}.beta", i), Tensor::zeros(&[channels])));
                LayerParams::ConventionalResidual { conv1, conv2, beta }
            }
            LayerSpec::MinMax => LayerParams::MinMax,
            LayerSpec::Neck { kernel, stride, conv_channels, out_dim } => {
                let cw = kaiming(&[conv_channels, c, kernel, kernel], c * kernel * kernel, &mut rng);
                let conv_weight = add(format!("l{}.conv_weight", i), cw);
                let conv_bias = add(format!("l{}.conv_bias", i), Tensor::zeros(&[conv_channels]));
                let [_, h, w] = shapes[i];
                let (oh, ow) = crate::tensor::conv_output_hw(h, w, kernel, kernel, stride, 0)?;
                let flat = conv_channels * oh * ow;
                let dense_weight = add(format!("l{}.dense_weight", i), kaiming(&[out_dim, flat], flat, &mut rng));
                let dense_bias = add(format!("l{}.dense_bias", i), Tensor::zeros(&[out_dim]));
                LayerParams::Neck { conv_weight, conv_bias, dense_weight, dense_bias }
            }
            LayerSpec::DenseHead { num_classes } => {
                let d: usize = shapes[i].iter().product();
                LayerParams::Head {
                    weight: add(format!("l{}.weight", i), kaiming(&[num_classes, d], d, &mut rng)),
                    bias: add(format!("l{}.bias", i), Tensor::zeros(&[num_classes])),
                }
            }
        };
        layers.push(lp);
    }
    Ok(Network { spec: spec.clone(), shapes, params, layers })
}

/// `scale * beta[o] * W[o, ..] + Delta`, where `Delta` places a 1 at the
/// center tap of every diagonal `(i, i)` channel pair.
pub fn equivalent_kernel(weight: &Tensor, beta: Option<&Tensor>, scale: f64) -> Result<Tensor> {
    crate::tensor::tape::equivalent_kernel_value(weight, beta, scale)
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, i: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.params[i].value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{}: {:?} vs {:?}", self.params[i].name, value.shape(), self.params[i].value.shape()),
            ));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Input feature shape `[C, H, W]` of layer `i` (index `len` is the output).
    pub fn input_shape(&self, i: usize) -> [usize; 3] {
        self.shapes[i]
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn head_weight(&self) -> &Tensor {
        match self.layers.last() {
            Some(LayerParams::Head { weight, .. }) => self.param(*weight),
            _ => unreachable!("validated spec ends in a head"),
        }
    }

    pub fn head_weight_index(&self) -> usize {
        match self.layers.last() {
            Some(LayerParams::Head { weight, .. }) => *weight,
            _ => unreachable!("validated spec ends in a head"),
        }
    }

    /// Hash of every parameter's bit pattern; used to detect stale bounds.
    pub fn param_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Equivalent single-convolution kernel of linear residual block `layer`.
    pub fn equivalent_kernel(&self, layer: usize) -> Result<Tensor> {
        match (&self.spec.layers[layer], &self.layers[layer]) {
            (LayerSpec::LinearResidualBlock { depth_scale, .. }, LayerParams::LinearResidual { weight, beta }) => {
                equivalent_kernel(self.param(*weight), beta.map(|b| self.param(b)), *depth_scale)
            }
            (other, _) => Err(Error::UnsupportedLayer(format!(
                "equivalent kernel needs a linear residual block, layer {} is {}",
                layer,
                other.kind()
            ))),
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.spec.input {
            return Err(Error::shape(
                "forward",
                format!("batch {:?} does not match input [N, {:?}]", s, self.spec.input),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`, starting from node `input`.
    pub fn record(&self, tape: &mut GradTape, input: NodeId) -> Result<Recorded> {
        self.check_batch(tape.value(input))?;
        let mut x = input;
        let mut features = input;
        let p = |tape: &mut GradTape, i: usize| tape.param(i, self.params[i].value.clone());
        for (spec, lp) in self.spec.layers.iter().zip(&self.layers) {
            x = match (spec, lp) {
                (LayerSpec::Stem { stride, padding, .. }, LayerParams::Stem { weight, bias })
                | (LayerSpec::ConvBlock { stride, padding, .. }, LayerParams::Conv { weight, bias }) => {
                    let w = p(tape, *weight);
                    let b = p(tape, *bias);
                    let y = tape.conv2d(x, w, *stride, *padding)?;
                    tape.channel_bias(y, b)?
                }
                (LayerSpec::LinearResidualBlock { kernel_size, depth_scale, .. }, LayerParams::LinearResidual { weight, beta }) => {
                    let w = p(tape, *weight);
                    let b = beta.map(|b| p(tape, b));
                    let y = tape.conv2d(x, w, 1, kernel_size / 2)?;
                    let y = tape.channel_scale(y, b, *depth_scale)?;
                    tape.add(x, y)?
                }
                (LayerSpec::ConventionalResidualBlock { kernel_size, .. }, LayerParams::ConventionalResidual { conv1, conv2, beta }) => {
                    let w1 = p(tape, *conv1);
                    let w2 = p(tape, *conv2);
                    let b = beta.map(|b| p(tape, b));
                    let y = tape.conv2d(x, w1, 1, kernel_size / 2)?;
                    let y = tape.minmax(y)?;
                    let y = tape.conv2d(y, w2, 1, kernel_size / 2)?;
                    let y = tape.channel_scale(y, b, 1.0)?;
                    tape.add(x, y)?
                }
                (LayerSpec::MinMax, LayerParams::MinMax) => tape.minmax(x)?,
                (LayerSpec::Neck { stride, .. }, LayerParams::Neck { conv_weight, conv_bias, dense_weight, dense_bias }) => {
                    let w = p(tape, *conv_weight);
                    let b = p(tape, *conv_bias);
                    let y = tape.conv2d(x, w, *stride, 0)?;
                    let y = tape.channel_bias(y, b)?;
                    let y = tape.minmax(y)?;
                    let y = tape.flatten(y)?;
                    let dw = p(tape, *dense_weight);
                    let db = p(tape, *dense_bias);
                    tape.dense(y, dw, Some(db))?
                }
                (LayerSpec::DenseHead { .. }, LayerParams::Head { weight, bias }) => {
                    let flat = if tape.value(x).rank() == 2 { x } else { tape.flatten(x)? };
                    features = flat;
                    let w = p(tape, *weight);
                    let b = p(tape, *bias);
                    tape.dense(flat, w, Some(b))?
                }
                _ => unreachable!("layer params built from the same spec"),
            };
        }
        Ok(Recorded { features, logits: x })
    }

    /// Logits `[N, m]` at float64.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new(Precision::F64);
        let x = tape.leaf(batch.clone());
        let rec = self.record(&mut tape, x)?;
        Ok(tape.value(rec.logits).clone())
    }

    /// Penultimate features (the flattened input to the head).
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new(Precision::F64);
        let x = tape.leaf(batch.clone());
        let rec = self.record(&mut tape, x)?;
        Ok(tape.value(rec.features).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;

    fn liresnet(depth: usize, width: usize) -> NetworkSpec {
        NetworkSpec::preset(
            Arch::LiResNet,
            &ArchParams { input: [1, 1, 8], num_classes: 3, depth, width, neck_dim: 8 },
        )
        .unwrap()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = build_network(&liresnet(2, 4), 9).unwrap();
        let b = build_network(&liresnet(2, 4), 9).unwrap();
        assert_eq!(a, b);
        let c = build_network(&liresnet(2, 4), 10).unwrap();
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn conventional_beta_starts_at_zero_so_block_is_identity() {
        let spec = NetworkSpec {
            input: [2, 3, 3],
            layers: vec![
                LayerSpec::ConventionalResidualBlock { channels: 2, kernel_size: 3, beta_per_channel: true },
                LayerSpec::DenseHead { num_classes: 2 },
            ],
        };
        let net = build_network(&spec, 1).unwrap();
        let beta = net.param_index("l0.beta").unwrap();
        assert!(net.param(beta).data().iter().all(|&b| b == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let f = net.features(&x).unwrap();
        assert_eq!(f.data(), x.data());
    }

    #[test]
    fn linear_block_with_zero_weight_is_identity() {
        let spec = NetworkSpec {
            input: [2, 4, 4],
            layers: vec![
                LayerSpec::LinearResidualBlock { channels: 2, kernel_size: 3, beta_per_channel: true, depth_scale: 1.0 },
                LayerSpec::DenseHead { num_classes: 2 },
            ],
        };
        let mut net = build_network(&spec, 1).unwrap();
        assert!(net.param(net.param_index("l0.beta").unwrap()).data().iter().all(|&b| b == 1.0));
        let w = net.param_index("l0.weight").unwrap();
        net.set_param(w, Tensor::zeros(&[2, 2, 3, 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        assert_eq!(net.features(&x).unwrap().data(), x.data());
    }

    #[test]
    fn delta_layout_for_two_channels() {
        let k = equivalent_kernel(&Tensor::zeros(&[2, 2, 3, 3]), None, 1.0).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                for y in 0..3 {
                    for x in 0..3 {
                        let v = k.data()[((o * 2 + i) * 3 + y) * 3 + x];
                        let expect = if o == i && y == 1 && x == 1 { 1.0 } else { 0.0 };
                        assert_eq!(v, expect);
                    }
                }
            }
        }
    }

    #[test]
    fn equivalent_kernel_reproduces_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in [1, 3, 5] {
            let w = Tensor::randn(&[3, 3, k, k], 0.4, &mut rng);
            let beta = Tensor::randn(&[3], 1.0, &mut rng);
            let x = Tensor::randn(&[2, 3, 6, 5], 1.0, &mut rng);
            let scale = 0.5;
            let eq = equivalent_kernel(&w, Some(&beta), scale).unwrap();
            let direct = conv2d(&x, &eq, 1, k / 2).unwrap();
            let branch = conv2d(&x, &w, 1, k / 2).unwrap();
            let mut block = x.clone();
            let inner = 30;
            for (i, v) in block.data_mut().iter_mut().enumerate() {
                let c = (i / inner) % 3;
                *v += scale * beta.data()[c] * branch.data()[i];
            }
            assert!(block.max_abs_diff(&direct) < 1e-12);
        }
        assert!(equivalent_kernel(&Tensor::zeros(&[2, 3, 3, 3]), None, 1.0).is_err());
        assert!(equivalent_kernel(&Tensor::zeros(&[2, 2, 2, 2]), None, 1.0).is_err());
    }

    #[test]
    fn forward_matches_equivalent_kernel_network() {
        let spec = liresnet(3, 4);
        let net = build_network(&spec, 5).unwrap();
        // Replace every linear block with a plain conv carrying its equivalent kernel.
        let mut conv_spec = spec.clone();
        for l in conv_spec.layers.iter_mut() {
            if let LayerSpec::LinearResidualBlock { channels, kernel_size, .. } = *l {
                *l = LayerSpec::ConvBlock { channels, kernel: kernel_size, stride: 1, padding: kernel_size / 2 };
            }
        }
        let mut conv_net = build_network(&conv_spec, 0).unwrap();
        for (i, l) in spec.layers.iter().enumerate() {
            match l {
                LayerSpec::LinearResidualBlock { .. } => {
                    let w = conv_net.param_index(&format!("l{}.weight", i)).unwrap();
                    conv_net.set_param(w, net.equivalent_kernel(i).unwrap()).unwrap();
                    let b = conv_net.param_index(&format!("l{}.bias", i)).unwrap();
                    conv_net.set_param(b, Tensor::zeros(conv_net.param(b).shape())).unwrap();
                }
                _ => {
                    for p in net.params().iter().filter(|p| p.name.starts_with(&format!("l{}.", i))) {
                        let j = conv_net.param_index(&p.name).unwrap();
                        conv_net.set_param(j, p.value.clone()).unwrap();
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[5, 1, 1, 8], 1.0, &mut rng);
        let a = net.forward(&x).unwrap();
        let b = conv_net.forward(&x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let net = build_network(&liresnet(1, 4), 0).unwrap();
        assert!(net.forward(&Tensor::zeros(&[2, 1, 1, 7])).is_err());
        assert!(net.equivalent_kernel(0).is_err());
    }
}
