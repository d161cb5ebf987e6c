//! Encoder, projection head, classifier head and the momentum twin.

use sha2::{Digest, Sha256};

use crate::error::{MoproError, Result};
use crate::numkit::{Graph, Rng, Tensor, Var};

/// Layer widths for the desk-scale network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub repr_dim: usize,
    /// Hidden width of the projection MLP; `None` means "same as `repr_dim`".
    pub proj_hidden: Option<usize>,
    pub embed_dim: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            hidden: vec![128, 128],
            repr_dim: 64,
            proj_hidden: None,
            embed_dim: 16,
            classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn proj_hidden_width(&self) -> usize {
        self.proj_hidden.unwrap_or(self.repr_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`, so a forward pass is `x · W + b`.
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

impl Linear {
    /// Uniform fan-in init: U(-1/√in, 1/√in) for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = (0..input * output)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let bias = (0..output).map(|_| rng.uniform_range(-bound, bound)).collect();
        Linear {
            weight: Tensor::new(vec![input, output], weight).expect("positive widths"),
            bias: Tensor::new(vec![1, output], bias).expect("positive widths"),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundLinear {
            weight: leaf(g, &self.weight),
            bias: leaf(g, &self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundLinear {
    weight: Var,
    bias: Var,
}

impl BoundLinear {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        g.add_bias(h, self.bias)
    }
}

/// Stack of affine layers with rectifiers between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Apply a rectifier after the final layer too.
    pub relu_output: bool,
}

impl Mlp {
    pub fn init(widths: &[usize], relu_output: bool, rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            relu_output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").output_dim()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
            relu_output: self.relu_output,
        }
    }

    fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }
}

#[derive(Debug, Clone)]
struct BoundMlp {
    layers: Vec<BoundLinear>,
    relu_output: bool,
}

impl BoundMlp {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last || self.relu_output {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

/// Maps an input vector to the representation `v` (post-rectifier).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet(pub Mlp);

/// One-hidden-layer MLP from `v` to the unit-norm embedding `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead(pub Mlp);

/// Affine layer from `v` to class logits; probabilities via softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead(pub Linear);

/// The trainable online network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: EncoderNet,
    pub projection: ProjectionHead,
    pub classifier: ClassifierHead,
}

/// EMA copy of encoder + projection. Never bound as trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumTwin {
    pub encoder: EncoderNet,
    pub projection: ProjectionHead,
}

/// Graph handles for one training forward pass.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    encoder: BoundMlp,
    projection: BoundMlp,
    classifier: BoundLinear,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub repr: Var,
    pub embed: Var,
    pub logits: Var,
    pub probs: Var,
}

impl BoundNetwork {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ForwardVars> {
        let repr = self.encoder.forward(g, x)?;
        let h = self.projection.forward(g, repr)?;
        let embed = g.l2_normalize(h)?;
        let logits = self.classifier.forward(g, repr)?;
        let probs = g.softmax_rows(logits)?;
        Ok(ForwardVars {
            repr,
            embed,
            logits,
            probs,
        })
    }

    /// Parameter handles in the same order as [`Network::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        self.encoder
            .vars()
            .chain(self.projection.vars())
            .chain([self.classifier.weight, self.classifier.bias])
            .collect()
    }
}

fn check_width(op: &'static str, expected: usize, batch: &Tensor) -> Result<()> {
    if batch.cols() != expected {
        return Err(MoproError::Dimension {
            op,
            left: vec![expected],
            right: batch.shape().to_vec(),
        });
    }
    Ok(())
}

fn embed_with(encoder: &Mlp, projection: &Mlp, batch: &Tensor) -> Result<(Tensor, Tensor)> {
    check_width("forward_embed", encoder.input_dim(), batch)?;
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let v = encoder.bind(&mut g, false).forward(&mut g, x)?;
    let h = projection.bind(&mut g, false).forward(&mut g, v)?;
    let z = g.l2_normalize(h)?;
    Ok((g.value(v).clone(), g.value(z).clone()))
}

impl Network {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.repr_dim);
        let encoder = EncoderNet(Mlp::init(&widths, true, rng));
        let projection = ProjectionHead(Mlp::init(
            &[config.repr_dim, config.proj_hidden_width(), config.embed_dim],
            false,
            rng,
        ));
        let classifier = ClassifierHead(Linear::init(config.repr_dim, config.classes, rng));
        Network {
            encoder,
            projection,
            classifier,
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.0.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.0.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.0.output_dim()
    }

    /// Register every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundNetwork {
        BoundNetwork {
            encoder: self.encoder.0.bind(g, true),
            projection: self.projection.0.bind(g, true),
            classifier: self.classifier.0.bind(g, true),
        }
    }

    /// Representation `v` and unit-norm embedding `z` for a batch.
    pub fn forward_embed(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        embed_with(&self.encoder.0, &self.projection.0, batch)
    }

    /// Representation `v` only.
    pub fn represent(&self, batch: &Tensor) -> Result<Tensor> {
        check_width("represent", self.input_dim(), batch)?;
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let v = self.encoder.0.bind(&mut g, false).forward(&mut g, x)?;
        Ok(g.value(v).clone())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.encoder
            .0
            .params()
            .chain(self.projection.0.params())
            .chain([&self.classifier.0.weight, &self.classifier.0.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Network {
            encoder,
            projection,
            classifier,
        } = self;
        encoder
            .0
            .params_mut()
            .chain(projection.0.params_mut())
            .chain([&mut classifier.0.weight, &mut classifier.0.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.encoder.0.param_names("encoder");
        names.extend(self.projection.0.param_names("projection"));
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    /// SHA-256 over the encoder and projection parameters.
    pub fn backbone_hash(&self) -> String {
        hash_params(self.encoder.0.params().chain(self.projection.0.params()))
    }

    pub fn classifier_hash(&self) -> String {
        hash_params([&self.classifier.0.weight, &self.classifier.0.bias].into_iter())
    }
}

/// Class probabilities from representations.
pub fn forward_classify(head: &ClassifierHead, repr: &Tensor) -> Result<Tensor> {
    check_width("forward_classify", head.0.input_dim(), repr)?;
    let mut g = Graph::new();
    let x = g.constant(repr.clone());
    let bound = head.0.bind(&mut g, false);
    let logits = bound.forward(&mut g, x)?;
    let p = g.softmax_rows(logits)?;
    Ok(g.value(p).clone())
}

pub fn forward_embed(net: &Network, batch: &Tensor) -> Result<(Tensor, Tensor)> {
    net.forward_embed(batch)
}

fn hash_params<'a>(params: impl Iterator<Item = &'a Tensor>) -> String {
    let mut hasher = Sha256::new();
    for p in params {
        for v in p.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

impl MomentumTwin {
    /// Exact copy of the online encoder and projection.
    pub fn from_online(online: &Network) -> Self {
        MomentumTwin {
            encoder: online.encoder.clone(),
            projection: online.projection.clone(),
        }
    }

    pub fn forward_embed(&self, batch: &Tensor) -> Result<Tensor> {
        embed_with(&self.encoder.0, &self.projection.0, batch).map(|(_, z)| z)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.encoder
            .0
            .params()
            .chain(self.projection.0.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let MomentumTwin {
            encoder,
            projection,
        } = self;
        encoder
            .0
            .params_mut()
            .chain(projection.0.params_mut())
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.encoder.0.param_names("momentum.encoder");
        names.extend(self.projection.0.param_names("momentum.projection"));
        names
    }
}

/// `θ' ← m·θ' + (1−m)·θ` for every encoder/projection parameter.
pub fn ema_update_params(twin: &mut MomentumTwin, online: &Network, momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(MoproError::config(
            "momentum",
            format!("{momentum} is outside [0, 1)"),
        ));
    }
    let online_params: Vec<&Tensor> = online
        .encoder
        .0
        .params()
        .chain(online.projection.0.params())
        .collect();
    let mut twin_params = twin.params_mut();
    if twin_params.len() != online_params.len() {
        return Err(MoproError::Structural(format!(
            "momentum twin has {} parameter tensors, online network has {}",
            twin_params.len(),
            online_params.len()
        )));
    }
    if let Some((t, o)) = twin_params
        .iter()
        .zip(&online_params)
        .find(|(t, o)| !t.same_shape(o))
    {
        return Err(MoproError::Structural(format!(
            "parameter shape {:?} in momentum twin vs {:?} online",
            t.shape(),
            o.shape()
        )));
    }
    let keep = 1.0 - momentum;
    for (t, o) in twin_params.iter_mut().zip(online_params) {
        for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
            *a = momentum * *a + keep * b;
        }
    }
    Ok(())
}
