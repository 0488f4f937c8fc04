//! The mapping network (generator), the image critic, and the small pretext
//! encoder, with reproducible initialization and a flat binary checkpoint
//! format.

pub mod checkpoint;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::transforms::LEAKY_SLOPE;

pub const LATENT_DIM: usize = 10;
pub const MAPPING_HIDDEN: usize = 128;

/// Output role of a mapping network. The affine family is split into a
/// dedicated scale generator and one for the remaining five parameters;
/// a single 6-output generator exists for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorRole {
    /// Affine scale only (1 output).
    Scale,
    /// Rotation, translation and shear (5 outputs).
    AffineRest,
    /// All six affine parameters from one network.
    AffineFull,
    /// Brightness, saturation, contrast, hue (4 outputs).
    Color,
}

impl GeneratorRole {
    pub fn out_dim(self) -> usize {
        match self {
            GeneratorRole::Scale => 1,
            GeneratorRole::AffineRest => 5,
            GeneratorRole::AffineFull => 6,
            GeneratorRole::Color => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorRole::Scale => "scale",
            GeneratorRole::AffineRest => "affine_rest",
            GeneratorRole::AffineFull => "affine_full",
            GeneratorRole::Color => "color",
        }
    }
}

/// One fully connected layer held as persistent tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn new(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![d_in, d_out]),
            b: Tensor::zeros(vec![d_out]),
        }
    }

    fn init<R: Rng>(&mut self, rng: &mut R) {
        let bound = 1.0 / (self.w.shape[0] as f64).sqrt();
        for v in self.w.values.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        self.b.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Uniform fan-in initialization (bound 1/sqrt(fan_in)), zero biases,
/// deterministic per seed.
pub fn init_linear_weights(layers: &mut [&mut Linear], seed: u64, stream: u64) {
    let mut r = rng::stream(seed, stream);
    for layer in layers.iter_mut() {
        layer.init(&mut r);
    }
}

/// Bound layer node ids for one graph pass.
#[derive(Debug, Clone)]
pub struct BoundLinear {
    pub w: NodeId,
    pub b: NodeId,
}

fn bind_linear(g: &mut Graph, l: &Linear, trainable: bool) -> BoundLinear {
    BoundLinear {
        w: g.leaf_tensor(&l.w, trainable),
        b: g.leaf_tensor(&l.b, trainable),
    }
}

fn linear_forward(g: &mut Graph, l: &BoundLinear, x: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, l.w)?;
    g.bias_add(y, l.b)
}

/// Three fully connected layers (10 -> 128 -> 128 -> d_out), leaky rectifier
/// (slope 0.2) between layers and a tanh on the output, so every output
/// coordinate lies strictly inside (-1, 1).
#[derive(Debug, Clone)]
pub struct MappingNetwork {
    pub role: GeneratorRole,
    pub layers: [Linear; 3],
}

impl MappingNetwork {
    pub fn new(role: GeneratorRole, seed: u64, stream: u64) -> Self {
        let mut net = MappingNetwork {
            role,
            layers: [
                Linear::new(LATENT_DIM, MAPPING_HIDDEN),
                Linear::new(MAPPING_HIDDEN, MAPPING_HIDDEN),
                Linear::new(MAPPING_HIDDEN, role.out_dim()),
            ],
        };
        let [l0, l1, l2] = &mut net.layers;
        init_linear_weights(&mut [l0, l1, l2], seed, stream);
        net
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMapping {
        BoundMapping {
            layers: [
                bind_linear(g, &self.layers[0], trainable),
                bind_linear(g, &self.layers[1], trainable),
                bind_linear(g, &self.layers[2], trainable),
            ],
        }
    }

    /// Forward pass on a fresh graph without gradients; returns the [b, d]
    /// output values.
    pub fn forward_values(&self, z: &[f64], batch: usize) -> Vec<f64> {
        let mut g = Graph::new();
        let zn = g.constant(vec![batch, LATENT_DIM], z.to_vec());
        let bound = self.bind(&mut g, false);
        let out = bound.forward(&mut g, zn).expect("mapping forward");
        g.values(out).to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct BoundMapping {
    pub layers: [BoundLinear; 3],
}

impl BoundMapping {
    /// z [b, 10] -> normalized parameters [b, d_out] in (-1, 1). The
    /// randomness enters only through z (reparameterized sampling), so the
    /// output is a deterministic, differentiable function of z.
    pub fn forward(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let h0 = linear_forward(g, &self.layers[0], z)?;
        let a0 = g.leaky_relu(h0, LEAKY_SLOPE)?;
        let h1 = linear_forward(g, &self.layers[1], a0)?;
        let a1 = g.leaky_relu(h1, LEAKY_SLOPE)?;
        let h2 = linear_forward(g, &self.layers[2], a1)?;
        Ok(g.tanh(h2))
    }

    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

/// Wasserstein critic: flatten then three fully connected layers with output
/// dims 512, 256 and 1; leaky rectifier after the first two, no final
/// activation. The op set on this path is fully twice-differentiable.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub input_dim: usize,
    pub layers: [Linear; 3],
}

pub const DISC_HIDDEN: [usize; 2] = [512, 256];

impl Discriminator {
    pub fn new(input_dim: usize, seed: u64, stream: u64) -> Self {
        let mut net = Discriminator {
            input_dim,
            layers: [
                Linear::new(input_dim, DISC_HIDDEN[0]),
                Linear::new(DISC_HIDDEN[0], DISC_HIDDEN[1]),
                Linear::new(DISC_HIDDEN[1], 1),
            ],
        };
        let [l0, l1, l2] = &mut net.layers;
        init_linear_weights(&mut [l0, l1, l2], seed, stream);
        net
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDiscriminator {
        BoundDiscriminator {
            input_dim: self.input_dim,
            layers: [
                bind_linear(g, &self.layers[0], trainable),
                bind_linear(g, &self.layers[1], trainable),
                bind_linear(g, &self.layers[2], trainable),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundDiscriminator {
    pub input_dim: usize,
    pub layers: [BoundLinear; 3],
}

impl BoundDiscriminator {
    /// images [b, input_dim] -> scores [b].
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(crate::autodiff::Error::ShapeMismatch {
                op: "discriminator",
                detail: format!(
                    "expected [b x {}], got {}",
                    self.input_dim,
                    crate::tensor::format_shape(&s)
                ),
            });
        }
        let b = s[0];
        let h0 = linear_forward(g, &self.layers[0], x)?;
        let a0 = g.leaky_relu(h0, LEAKY_SLOPE)?;
        let h1 = linear_forward(g, &self.layers[1], a0)?;
        let a1 = g.leaky_relu(h1, LEAKY_SLOPE)?;
        let h2 = linear_forward(g, &self.layers[2], a1)?;
        g.reshape(h2, vec![b])
    }

    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

/// Two 3x3 stride-2 convolutions with leaky rectifiers, global average
/// pooling, and a replaceable K-way linear head. A deliberately small
/// stand-in encoder for desk-scale pretext runs.
#[derive(Debug, Clone)]
pub struct PretextEncoder {
    pub in_channels: usize,
    pub widths: [usize; 2],
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub head: Linear,
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub k: Tensor,
    pub b: Tensor,
}

impl ConvLayer {
    fn new(ci: usize, co: usize, ksize: usize) -> Self {
        ConvLayer {
            k: Tensor::zeros(vec![co, ci, ksize, ksize]),
            b: Tensor::zeros(vec![co]),
        }
    }

    fn init<R: Rng>(&mut self, rng: &mut R) {
        let fan_in = self.k.shape[1] * self.k.shape[2] * self.k.shape[3];
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in self.k.values.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        self.b.values.iter_mut().for_each(|v| *v = 0.0);
    }
}

impl PretextEncoder {
    pub fn new(in_channels: usize, widths: [usize; 2], classes: usize, seed: u64, stream: u64) -> Self {
        let mut enc = PretextEncoder {
            in_channels,
            widths,
            conv1: ConvLayer::new(in_channels, widths[0], 3),
            conv2: ConvLayer::new(widths[0], widths[1], 3),
            head: Linear::new(widths[1], classes),
        };
        let mut r = rng::stream(seed, stream);
        enc.conv1.init(&mut r);
        enc.conv2.init(&mut r);
        enc.head.init(&mut r);
        enc
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[1]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1.k,
            &self.conv1.b,
            &self.conv2.k,
            &self.conv2.b,
            &self.head.w,
            &self.head.b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.k,
            &mut self.conv1.b,
            &mut self.conv2.k,
            &mut self.conv2.b,
            &mut self.head.w,
            &mut self.head.b,
        ]
    }

    /// Encoder-only parameters (the head excluded), e.g. for freeze checks.
    pub fn encoder_params(&self) -> Vec<&Tensor> {
        vec![&self.conv1.k, &self.conv1.b, &self.conv2.k, &self.conv2.b]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            conv1: (
                g.leaf_tensor(&self.conv1.k, trainable),
                g.leaf_tensor(&self.conv1.b, trainable),
            ),
            conv2: (
                g.leaf_tensor(&self.conv2.k, trainable),
                g.leaf_tensor(&self.conv2.b, trainable),
            ),
            head: bind_linear(g, &self.head, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub conv1: (NodeId, NodeId),
    pub conv2: (NodeId, NodeId),
    pub head: BoundLinear,
}

impl BoundEncoder {
    /// images [b, c, h, w] -> pooled features [b, feature_dim].
    pub fn features(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let c1 = g.conv2d(x, self.conv1.0, self.conv1.1, 2)?;
        let a1 = g.leaky_relu(c1, LEAKY_SLOPE)?;
        let c2 = g.conv2d(a1, self.conv2.0, self.conv2.1, 2)?;
        let a2 = g.leaky_relu(c2, LEAKY_SLOPE)?;
        g.mean_hw(a2)
    }

    /// images -> task logits [b, classes].
    pub fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let f = self.features(g, x)?;
        linear_forward(g, &self.head, f)
    }

    pub fn param_nodes(&self) -> Vec<NodeId> {
        vec![
            self.conv1.0,
            self.conv1.1,
            self.conv2.0,
            self.conv2.1,
            self.head.w,
            self.head.b,
        ]
    }
}
