//! Declarative network descriptions.
//!
//! A [`NetworkSpec`] lists layers row by row, the same way the architecture
//! tables are written: kind, neurons, kernel, stride, normalization,
//! activation and a per-row `shared` flag.
//!
//! Padding defaults (used when a row leaves `padding` unset):
//!
//! | kind            | padding       | output padding                       |
//! |-----------------|---------------|--------------------------------------|
//! | conv            | `(k - 1) / 2` | n/a                                  |
//! | transposed-conv | `(k - 1) / 2` | `s + 2p - k` when in `0..s`, else 0  |
//! | residual-block  | 1 (3x3, s1)   | n/a                                  |
//! | max-pool        | 0             | n/a                                  |
//!
//! With these rules stride-1 convolutions keep their size, stride-2
//! convolutions halve it and stride-2 transposed convolutions double it.
//! Rows that need something else (the 8x8 valid convolution of the digit
//! encoder, the 1x1 -> 4x4 first generator layer) set `padding` explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UnitError};
use crate::kernels::Geometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    TransposedConv,
    ResidualBlock,
    FullyConnected,
    MaxPool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    #[default]
    None,
    BatchNorm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    #[default]
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Encoder,
    Generator,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub neurons: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_padding: Option<usize>,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub dropout: f64,
    #[serde(default)]
    pub shared: bool,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl LayerSpec {
    pub fn new(kind: LayerKind, neurons: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kind,
            neurons,
            kernel,
            stride,
            padding: None,
            output_padding: None,
            norm: Norm::None,
            activation: Activation::None,
            dropout: 0.0,
            shared: false,
        }
    }
    pub fn conv(n: usize, k: usize, s: usize) -> Self {
        Self::new(LayerKind::Conv, n, k, s)
    }
    pub fn deconv(n: usize, k: usize, s: usize) -> Self {
        Self::new(LayerKind::TransposedConv, n, k, s)
    }
    pub fn resblk(n: usize) -> Self {
        Self::new(LayerKind::ResidualBlock, n, 3, 1)
    }
    pub fn fc(n: usize) -> Self {
        Self::new(LayerKind::FullyConnected, n, 1, 1)
    }
    pub fn pool(k: usize, s: usize) -> Self {
        Self::new(LayerKind::MaxPool, 1, k, s)
    }
    pub fn act(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }
    pub fn bn(mut self) -> Self {
        self.norm = Norm::BatchNorm;
        self
    }
    pub fn pad(mut self, p: usize) -> Self {
        self.padding = Some(p);
        self
    }
    pub fn out_pad(mut self, p: usize) -> Self {
        self.output_padding = Some(p);
        self
    }
    pub fn drop(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }
    pub fn shared(mut self, s: bool) -> Self {
        self.shared = s;
        self
    }

    pub fn resolved_padding(&self) -> usize {
        match self.kind {
            LayerKind::MaxPool | LayerKind::FullyConnected => 0,
            LayerKind::ResidualBlock => 1,
            _ => self.padding.unwrap_or((self.kernel - 1) / 2),
        }
    }

    pub fn resolved_output_padding(&self) -> usize {
        if let Some(op) = self.output_padding {
            return op;
        }
        let (s, p, k) = (self.stride as isize, self.resolved_padding() as isize, self.kernel as isize);
        let op = s + 2 * p - k;
        if (0..s).contains(&op) {
            op as usize
        } else {
            0
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry { kernel: self.kernel, stride: self.stride, pad: self.resolved_padding() }
    }

    /// Equality of everything except the sharing flag.
    pub fn same_structure(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.shared = other.shared;
        a == *other
    }

    /// Output `(channels, size)` for an input of `(channels, size)`, where
    /// size is the spatial extent of a square map (1 after an FC layer).
    pub fn output_dims(&self, channels: usize, size: usize) -> Result<(usize, usize)> {
        let g = self.geometry();
        let fail = || UnitError::Dimension(format!("layer {:?} K{} S{} cannot take {}x{} input", self.kind, self.kernel, self.stride, size, size));
        match self.kind {
            LayerKind::Conv => Ok((self.neurons, g.conv_out(size).ok_or_else(fail)?)),
            LayerKind::TransposedConv => {
                let o = g.deconv_out(size, self.resolved_output_padding()).filter(|&o| o > 0).ok_or_else(fail)?;
                Ok((self.neurons, o))
            }
            LayerKind::ResidualBlock => Ok((self.neurons, size)),
            LayerKind::FullyConnected => Ok((self.neurons, 1)),
            LayerKind::MaxPool => {
                if size < self.kernel {
                    return Err(fail());
                }
                Ok((channels, (size - self.kernel) / self.stride + 1))
            }
        }
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let err = |m: &str| Err(UnitError::Spec(format!("layer {}: {}", idx + 1, m)));
        if self.kernel == 0 {
            return err("kernel must be >= 1");
        }
        if self.stride == 0 {
            return err("stride must be >= 1");
        }
        if self.neurons == 0 {
            return err("neurons must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must be in [0, 1)");
        }
        if self.kind == LayerKind::ResidualBlock && (self.kernel != 3 || self.stride != 1) {
            return err("residual blocks are 3x3 stride 1");
        }
        if self.kind == LayerKind::MaxPool && (self.norm != Norm::None || self.activation != Activation::None) {
            return err("max-pool rows carry no norm or activation");
        }
        if self.activation == Activation::Softmax && self.kind != LayerKind::FullyConnected {
            return err("softmax only follows a fully-connected layer");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub role: Role,
    pub input_channels: usize,
    /// Spatial extent of the (square) input.
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    /// Discriminators only: classification branch on top of the trunk.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classifier_head: Vec<LayerSpec>,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_slope() -> f64 {
    0.01
}

impl NetworkSpec {
    pub fn new(role: Role, input_channels: usize, input_size: usize, layers: Vec<LayerSpec>) -> Self {
        Self { role, input_channels, input_size, layers, classifier_head: Vec::new(), leaky_slope: default_slope() }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(UnitError::Spec("network has zero depth".into()));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(UnitError::Spec("input channels and size must be positive".into()));
        }
        for (i, l) in self.layers.iter().chain(&self.classifier_head).enumerate() {
            l.validate(i)?;
        }
        let last = self.layers.last().unwrap();
        match self.role {
            Role::Encoder => {
                if last.activation != Activation::None || !matches!(last.kind, LayerKind::Conv | LayerKind::ResidualBlock) {
                    return Err(UnitError::Spec("encoder must end in a linear mean (mu) layer".into()));
                }
            }
            Role::Generator => {
                if last.activation != Activation::Tanh {
                    return Err(UnitError::Spec("generator must end in tanh".into()));
                }
            }
            Role::Discriminator => {
                if last.activation != Activation::Sigmoid {
                    return Err(UnitError::Spec("discriminator adversarial output must be sigmoid".into()));
                }
                if let Some(h) = self.classifier_head.last() {
                    if h.activation != Activation::Softmax {
                        return Err(UnitError::Spec("classifier head must end in softmax".into()));
                    }
                }
            }
        }
        if self.role != Role::Discriminator && !self.classifier_head.is_empty() {
            return Err(UnitError::Spec("only discriminators carry a classifier head".into()));
        }
        self.layer_dims()?;
        Ok(())
    }

    /// Input `(channels, size)` of every row plus the final output dims.
    pub fn layer_dims(&self) -> Result<Vec<(usize, usize)>> {
        let mut dims = vec![(self.input_channels, self.input_size)];
        let (mut c, mut s) = (self.input_channels, self.input_size);
        for l in &self.layers {
            (c, s) = l.output_dims(c, s)?;
            dims.push((c, s));
        }
        Ok(dims)
    }

    /// `(channels, size)` of the network output.
    pub fn output_dims(&self) -> Result<(usize, usize)> {
        Ok(*self.layer_dims()?.last().unwrap())
    }

    /// Dims of the trunk features (input to the final adversarial layer).
    pub fn feature_dims(&self) -> Result<(usize, usize)> {
        let d = self.layer_dims()?;
        Ok(d[d.len() - 2])
    }

    /// Number of contiguous shared rows at the back-end.
    pub fn trailing_shared(&self) -> usize {
        self.layers.iter().rev().take_while(|l| l.shared).count()
    }

    /// Number of contiguous shared rows at the front-end.
    pub fn leading_shared(&self) -> usize {
        self.layers.iter().take_while(|l| l.shared).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Weight initialization. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme", deny_unknown_fields)]
pub enum Init {
    /// Every weight drawn from N(0, std²).
    Normal { std: f64 },
    /// N(0, gain² / fan_in); transposed convolutions divide the fan by stride².
    FanIn { gain: f64 },
}

impl Default for Init {
    fn default() -> Self {
        Init::Normal { std: 0.02 }
    }
}

impl Init {
    pub fn std(&self, fan_in: usize) -> f64 {
        match *self {
            Init::Normal { std } => std,
            Init::FanIn { gain } => gain / (fan_in.max(1) as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            Init::Normal { std } => std,
            Init::FanIn { gain } => gain,
        };
        if !(v.is_finite() && v > 0.0) {
            return Err(UnitError::Spec(format!("init scale must be positive, got {v}")));
        }
        Ok(())
    }
}

/// How many rows each pair of networks ties together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharingPlan {
    /// Counted from the encoder back-end (the mu layer is row 1).
    pub encoder_shared_layers: usize,
    /// Counted from the generator front-end.
    pub generator_shared_layers: usize,
    /// Counted from the discriminator back-end (adversarial output is row 1).
    #[serde(default)]
    pub discriminator_shared_layers: usize,
}

impl SharingPlan {
    pub fn none() -> Self {
        Self::default()
    }

    /// Same depth for encoder and generator.
    pub fn vae(depth: usize) -> Self {
        Self { encoder_shared_layers: depth, generator_shared_layers: depth, discriminator_shared_layers: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.encoder_shared_layers == 0 && self.generator_shared_layers == 0 && self.discriminator_shared_layers == 0
    }

    /// Reads the plan off the per-row `shared` flags.
    pub fn from_specs(enc: &NetworkSpec, gen: &NetworkSpec, disc: &NetworkSpec) -> Self {
        Self {
            encoder_shared_layers: enc.trailing_shared(),
            generator_shared_layers: gen.leading_shared(),
            discriminator_shared_layers: disc.trailing_shared(),
        }
    }

    /// Rewrites the `shared` flags of a spec to agree with this plan.
    pub fn apply(&self, spec: &mut NetworkSpec) {
        let n = spec.layers.len();
        let (count, from_back) = match spec.role {
            Role::Encoder => (self.encoder_shared_layers, true),
            Role::Generator => (self.generator_shared_layers, false),
            Role::Discriminator => (self.discriminator_shared_layers, true),
        };
        for (i, l) in spec.layers.iter_mut().enumerate() {
            l.shared = if from_back { i + count >= n } else { i < count };
        }
        let head_shared = spec.role == Role::Discriminator && count > 0;
        spec.classifier_head.iter_mut().for_each(|l| l.shared = head_shared);
    }
}
