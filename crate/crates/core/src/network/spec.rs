use std::fmt;
use std::str::FromStr;

use crate::config::Section;
use crate::error::{Error, Result};
use crate::tensor::conv_output_hw;

/// One entry of a declarative layer list.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Input convolution with bias.
    Stem { kernel: usize, stride: usize, padding: usize, out_channels: usize },
    /// `x + depth_scale * beta * Conv(x)`, odd square kernel, padding `kernel / 2`.
    LinearResidualBlock { channels: usize, kernel_size: usize, beta_per_channel: bool, depth_scale: f64 },
    /// Plain convolution with bias.
    ConvBlock { channels: usize, kernel: usize, stride: usize, padding: usize },
    /// `x + beta * Conv2(MinMax(Conv1(x)))`.
    ConventionalResidualBlock { channels: usize, kernel_size: usize, beta_per_channel: bool },
    MinMax,
    /// Convolution (padding 0) with bias, MinMax, flatten, dense with bias.
    Neck { kernel: usize, stride: usize, conv_channels: usize, out_dim: usize },
    /// Final dense layer; its weight rows are the per-class vectors `w_i`.
    DenseHead { num_classes: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Stem { .. } => "stem",
            LayerSpec::LinearResidualBlock { .. } => "linres",
            LayerSpec::ConvBlock { .. } => "conv",
            LayerSpec::ConventionalResidualBlock { .. } => "resblock",
            LayerSpec::MinMax => "minmax",
            LayerSpec::Neck { .. } => "neck",
            LayerSpec::DenseHead { .. } => "head",
        }
    }

    /// Feature shape `[C, H, W]` produced from `input`; vectors are `[d, 1, 1]`.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        let bad = |msg: String| Error::InvalidSpec(format!("{}: {}", self.kind(), msg));
        match *self {
            LayerSpec::Stem { kernel, stride, padding, out_channels } => {
                if out_channels == 0 {
                    return Err(bad("zero output channels".into()));
                }
                let (oh, ow) = conv_output_hw(h, w, kernel, kernel, stride, padding).map_err(|e| bad(e.to_string()))?;
                Ok([out_channels, oh, ow])
            }
            LayerSpec::LinearResidualBlock { channels, kernel_size, .. }
            | LayerSpec::ConventionalResidualBlock { channels, kernel_size, .. } => {
                if channels != c {
                    return Err(bad(format!("block has {} channels but receives {}", channels, c)));
                }
                if kernel_size % 2 == 0 {
                    return Err(bad(format!("kernel size {} must be odd", kernel_size)));
                }
                conv_output_hw(h, w, kernel_size, kernel_size, 1, kernel_size / 2).map_err(|e| bad(e.to_string()))?;
                Ok(input)
            }
            LayerSpec::ConvBlock { channels, kernel, stride, padding } => {
                if channels == 0 {
                    return Err(bad("zero channels".into()));
                }
                let (oh, ow) = conv_output_hw(h, w, kernel, kernel, stride, padding).map_err(|e| bad(e.to_string()))?;
                Ok([channels, oh, ow])
            }
            LayerSpec::MinMax => {
                if c % 2 != 0 {
                    return Err(bad(format!("odd channel count {}", c)));
                }
                Ok(input)
            }
            LayerSpec::Neck { kernel, stride, conv_channels, out_dim } => {
                if conv_channels % 2 != 0 || conv_channels == 0 {
                    return Err(bad(format!("conv channels {} must be even and positive", conv_channels)));
                }
                if out_dim == 0 {
                    return Err(bad("zero output dimension".into()));
                }
                conv_output_hw(h, w, kernel, kernel, stride, 0).map_err(|e| bad(e.to_string()))?;
                Ok([out_dim, 1, 1])
            }
            LayerSpec::DenseHead { num_classes } => {
                if num_classes < 2 {
                    return Err(bad("need at least two classes".into()));
                }
                Ok([num_classes, 1, 1])
            }
        }
    }

    /// Whether the layer consumes a spatial map (as opposed to a flat vector).
    fn needs_map(&self) -> bool {
        !matches!(self, LayerSpec::MinMax | LayerSpec::DenseHead { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Stem { kernel, stride, padding, out_channels } => {
                write!(f, "stem kernel={} stride={} padding={} out={}", kernel, stride, padding, out_channels)
            }
            LayerSpec::LinearResidualBlock { channels, kernel_size, beta_per_channel, depth_scale } => write!(
                f,
                "linres channels={} kernel={} beta={} scale={:?}",
                channels, kernel_size, beta_per_channel, depth_scale
            ),
            LayerSpec::ConvBlock { channels, kernel, stride, padding } => {
                write!(f, "conv channels={} kernel={} stride={} padding={}", channels, kernel, stride, padding)
            }
            LayerSpec::ConventionalResidualBlock { channels, kernel_size, beta_per_channel } => {
                write!(f, "resblock channels={} kernel={} beta={}", channels, kernel_size, beta_per_channel)
            }
            LayerSpec::MinMax => write!(f, "minmax"),
            LayerSpec::Neck { kernel, stride, conv_channels, out_dim } => {
                write!(f, "neck kernel={} stride={} channels={} out={}", kernel, stride, conv_channels, out_dim)
            }
            LayerSpec::DenseHead { num_classes } => write!(f, "head classes={}", num_classes),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let kind = parts.next().ok_or_else(|| Error::InvalidSpec("empty layer".into()))?;
        let mut fields: Vec<(&str, &str)> = Vec::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::InvalidSpec(format!("layer field `{}` is not key=value", p)))?;
            fields.push((k, v));
        }
        let take = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::InvalidSpec(format!("{} layer missing `{}`", kind, key)))
        };
        let num = |key: &str| -> Result<usize> {
            take(key)?.parse().map_err(|_| Error::InvalidSpec(format!("{}.{} is not an integer", kind, key)))
        };
        let flag = |key: &str| -> Result<bool> {
            take(key)?.parse().map_err(|_| Error::InvalidSpec(format!("{}.{} is not a bool", kind, key)))
        };
        let expect = |keys: &[&str]| -> Result<()> {
            for (k, _) in &fields {
                if !keys.contains(k) {
                    return Err(Error::InvalidSpec(format!("{} layer has unknown field `{}`", kind, k)));
                }
            }
            Ok(())
        };
        let spec = match kind {
            "stem" => {
                expect(&["kernel", "stride", "padding", "out"])?;
                LayerSpec::Stem { kernel: num("kernel")?, stride: num("stride")?, padding: num("padding")?, out_channels: num("out")? }
            }
            "linres" => {
                expect(&["channels", "kernel", "beta", "scale"])?;
                let scale: f64 = take("scale")?
                    .parse()
                    .map_err(|_| Error::InvalidSpec("linres.scale is not a float".into()))?;
                LayerSpec::LinearResidualBlock {
                    channels: num("channels")?,
                    kernel_size: num("kernel")?,
                    beta_per_channel: flag("beta")?,
                    depth_scale: scale,
                }
            }
            "conv" => {
                expect(&["channels", "kernel", "stride", "padding"])?;
                LayerSpec::ConvBlock { channels: num("channels")?, kernel: num("kernel")?, stride: num("stride")?, padding: num("padding")? }
            }
            "resblock" => {
                expect(&["channels", "kernel", "beta"])?;
                LayerSpec::ConventionalResidualBlock { channels: num("channels")?, kernel_size: num("kernel")?, beta_per_channel: flag("beta")? }
            }
            "minmax" => {
                expect(&[])?;
                LayerSpec::MinMax
            }
            "neck" => {
                expect(&["kernel", "stride", "channels", "out"])?;
                LayerSpec::Neck { kernel: num("kernel")?, stride: num("stride")?, conv_channels: num("channels")?, out_dim: num("out")? }
            }
            "head" => {
                expect(&["classes"])?;
                LayerSpec::DenseHead { num_classes: num("classes")? }
            }
            other => return Err(Error::InvalidSpec(format!("unknown layer kind `{}`", other))),
        };
        Ok(spec)
    }
}

/// Architecture families with a fixed stem/backbone/neck/head recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    LiResNet,
    ConvNet,
    ResNet,
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "liresnet" => Ok(Arch::LiResNet),
            "convnet" => Ok(Arch::ConvNet),
            "resnet" => Ok(Arch::ResNet),
            _ => Err(Error::Config(format!("unknown architecture `{}` (liresnet|convnet|resnet)", s))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::LiResNet => "liresnet",
            Arch::ConvNet => "convnet",
            Arch::ResNet => "resnet",
        })
    }
}

/// Inputs to [`NetworkSpec::preset`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    pub input: [usize; 3],
    pub num_classes: usize,
    pub depth: usize,
    pub width: usize,
    pub neck_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Stem, `(block -> MinMax) x depth`, neck, MinMax, dense head.
    ///
    /// Maps of at least 16x16 get a kernel-5/stride-2/padding-2 stem and a
    /// kernel-4/stride-4 neck; smaller inputs (e.g. `1 x d` feature rows) get a
    /// kernel-3/stride-1/padding-1 stem and a 1x1 neck.
    pub fn preset(arch: Arch, p: &ArchParams) -> Result<NetworkSpec> {
        if p.depth == 0 || p.width == 0 || p.width % 2 != 0 {
            return Err(Error::InvalidSpec(format!("depth {} / width {}: need depth >= 1 and even width", p.depth, p.width)));
        }
        if p.neck_dim == 0 || p.neck_dim % 2 != 0 {
            return Err(Error::InvalidSpec(format!("neck dimension {} must be even and positive", p.neck_dim)));
        }
        let [_, h, w] = p.input;
        let large = h >= 16 && w >= 16;
        let (sk, ss, sp) = if large { (5, 2, 2) } else { (3, 1, 1) };
        let mut layers = vec![
            LayerSpec::Stem { kernel: sk, stride: ss, padding: sp, out_channels: p.width },
            LayerSpec::MinMax,
        ];
        let scale = 1.0 / (p.depth as f64).sqrt();
        for _ in 0..p.depth {
            layers.push(match arch {
                Arch::LiResNet => LayerSpec::LinearResidualBlock {
                    channels: p.width,
                    kernel_size: 3,
                    beta_per_channel: true,
                    depth_scale: scale,
                },
                Arch::ConvNet => LayerSpec::ConvBlock { channels: p.width, kernel: 3, stride: 1, padding: 1 },
                Arch::ResNet => LayerSpec::ConventionalResidualBlock { channels: p.width, kernel_size: 3, beta_per_channel: true },
            });
            layers.push(LayerSpec::MinMax);
        }
        let [_, fh, fw] = LayerSpec::Stem { kernel: sk, stride: ss, padding: sp, out_channels: p.width }.output_shape(p.input)?;
        let (nk, ns) = if fh >= 4 && fw >= 4 { (4, 4) } else { (1, 1) };
        layers.push(LayerSpec::Neck { kernel: nk, stride: ns, conv_channels: 2 * p.width, out_dim: p.neck_dim });
        layers.push(LayerSpec::MinMax);
        layers.push(LayerSpec::DenseHead { num_classes: p.num_classes });
        let spec = NetworkSpec { input: p.input, layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Number of linear residual blocks (the `L` of the `1/sqrt(L)` scaler).
    pub fn linear_block_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::LinearResidualBlock { .. })).count()
    }

    /// Per-layer input shapes followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = vec![self.input];
        let mut flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if flat && layer.needs_map() {
                return Err(Error::InvalidSpec(format!("layer {} ({}) follows a flattening layer", i, layer.kind())));
            }
            let next = layer.output_shape(*shapes.last().unwrap())?;
            if matches!(layer, LayerSpec::Neck { .. } | LayerSpec::DenseHead { .. }) {
                flat = true;
            }
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec(format!("input shape {:?} has a zero dimension", self.input)));
        }
        match self.layers.last() {
            Some(LayerSpec::DenseHead { .. }) => {}
            _ => return Err(Error::InvalidSpec("network must end in a dense head".into())),
        }
        let heads = self.layers.iter().filter(|l| matches!(l, LayerSpec::DenseHead { .. })).count();
        if heads != 1 {
            return Err(Error::InvalidSpec(format!("expected exactly one head, found {}", heads)));
        }
        let l = self.linear_block_count();
        if l > 0 {
            let expected = 1.0 / (l as f64).sqrt();
            for layer in &self.layers {
                if let LayerSpec::LinearResidualBlock { depth_scale, .. } = layer {
                    if (depth_scale - expected).abs() > 1e-12 * expected {
                        return Err(Error::InvalidSpec(format!(
                            "linear block depth scale {} differs from 1/sqrt({}) = {}",
                            depth_scale, l, expected
                        )));
                    }
                }
            }
        }
        self.shapes().map(|_| ())
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::DenseHead { num_classes }) => *num_classes,
            _ => 0,
        }
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new("network");
        s.set("input", format!("{},{},{}", self.input[0], self.input[1], self.input[2]));
        s.set("layers", self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            s.set(&format!("layer.{}", i), l);
        }
        s
    }

    pub fn from_section(s: &Section) -> Result<NetworkSpec> {
        let input = s.get("input").ok_or_else(|| Error::InvalidSpec("missing input".into()))?;
        let dims: Vec<usize> = input
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidSpec(format!("bad input shape `{}`", input)))?;
        if dims.len() != 3 {
            return Err(Error::InvalidSpec(format!("input shape `{}` must have three dims", input)));
        }
        let n: usize = s
            .parse("layers")?
            .ok_or_else(|| Error::InvalidSpec("missing layer count".into()))?;
        let mut allowed: Vec<String> = vec!["input".into(), "layers".into()];
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let key = format!("layer.{}", i);
            let text = s.get(&key).ok_or_else(|| Error::InvalidSpec(format!("missing {}", key)))?;
            layers.push(text.parse()?);
            allowed.push(key);
        }
        let allowed: Vec<&str> = allowed.iter().map(|s| s.as_str()).collect();
        s.check_keys(&allowed)?;
        let spec = NetworkSpec { input: [dims[0], dims[1], dims[2]], layers };
        spec.validate()?;
        Ok(spec)
    }
}
