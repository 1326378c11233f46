//! Layered classifiers built on the autodiff graph.

mod dataset;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, NodeId, Op, ParamId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dataset::{blobs2, shapes3, Sample, SHAPES3_CLASSES, SHAPES3_SIDE};
pub use train::{accuracy, train, TrainConfig, TrainReport};

/// Name under which the model's input node is registered.
pub const INPUT: &str = "image";

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// `kernels` filters of `height x width`, valid padding, stride 1.
    Conv {
        kernels: usize,
        height: usize,
        width: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    MaxPool,
    AvgPool,
    Flatten,
    /// Only allowed as the final layer.
    Softmax,
    Scale(f64),
    Shift(f64),
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::AvgPool => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Scale(_) => "scale",
            LayerSpec::Shift(_) => "shift",
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                kernels,
                height,
                width,
            } => write!(f, "conv:{kernels}:{height}x{width}"),
            LayerSpec::Dense { units } => write!(f, "dense:{units}"),
            LayerSpec::Scale(a) => write!(f, "scale:{a:?}"),
            LayerSpec::Shift(b) => write!(f, "shift:{b:?}"),
            other => f.write_str(other.kind()),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    /// Parses `conv:4:3x3` (or `conv:4:3`), `dense:3`, `scale:-1`, `shift:1`,
    /// `relu`, `maxpool`, `avgpool`, `flatten`, `softmax`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::ModelConfig(format!("cannot parse layer `{s}`"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let count = |v: &str| v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(bad);
        let float = |v: &str| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(bad)
        };
        Ok(match parts.as_slice() {
            ["conv", k, size] => {
                let (h, w) = size.split_once('x').unwrap_or((size, size));
                LayerSpec::Conv {
                    kernels: count(k)?,
                    height: count(h)?,
                    width: count(w)?,
                }
            }
            ["dense", u] => LayerSpec::Dense { units: count(u)? },
            ["scale", a] => LayerSpec::Scale(float(a)?),
            ["shift", b] => LayerSpec::Shift(float(b)?),
            ["relu"] => LayerSpec::Relu,
            ["maxpool"] => LayerSpec::MaxPool,
            ["avgpool"] => LayerSpec::AvgPool,
            ["flatten"] => LayerSpec::Flatten,
            ["softmax"] => LayerSpec::Softmax,
            _ => return Err(bad()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// conv(4 kernels 3x3) -> relu -> maxpool -> flatten -> dense(3) -> softmax
    /// over 16x16 grayscale images.
    pub fn shapes3(seed: u64) -> Self {
        Self {
            input_shape: vec![SHAPES3_SIDE, SHAPES3_SIDE, 1],
            layers: vec![
                LayerSpec::Conv {
                    kernels: 4,
                    height: 3,
                    width: 3,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: SHAPES3_CLASSES,
                },
                LayerSpec::Softmax,
            ],
            classes: SHAPES3_CLASSES,
            seed,
        }
    }

    /// The single saturating unit `f(x) = 1 - relu(1 - x)` on a scalar input.
    /// Its derivative is 1 below `x = 1` and 0 above.
    pub fn vanishing() -> Self {
        Self {
            input_shape: vec![1],
            layers: vec![
                LayerSpec::Scale(-1.0),
                LayerSpec::Shift(1.0),
                LayerSpec::Relu,
                LayerSpec::Scale(-1.0),
                LayerSpec::Shift(1.0),
            ],
            classes: 1,
            seed: 0,
        }
    }
}

/// Picks a layer by position in the layer list or by its generated name
/// (`conv0`, `relu1`, `maxpool2`, ...).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSelector {
    Index(usize),
    Name(String),
}

impl FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::UnknownLayer(s.into()));
        }
        Ok(match s.parse::<usize>() {
            Ok(i) => LayerSelector::Index(i),
            Err(_) => LayerSelector::Name(s.into()),
        })
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelector::Index(i) => write!(f, "{i}"),
            LayerSelector::Name(n) => f.write_str(n),
        }
    }
}

/// Which output the attribution methods differentiate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Target {
    /// Pre-softmax class score.
    #[default]
    Logit,
    /// Post-softmax class probability.
    Probability,
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Target::Logit),
            "prob" | "probability" => Ok(Target::Probability),
            _ => Err(Error::InvalidArgument(format!("unknown target `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub node: NodeId,
    /// Weight and bias of conv and dense layers.
    pub params: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    graph: Graph,
    input: NodeId,
    layers: Vec<Layer>,
    logits: NodeId,
    probs: Option<NodeId>,
}

/// Feature maps of one layer together with the network outputs, all read
/// from the same tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub maps: Tensor,
    pub logits: Tensor,
    pub probs: Option<Tensor>,
}

/// Builds a model, drawing weights uniformly from `[-s, s]` with
/// `s = sqrt(6 / (fan_in + fan_out))` and zero biases.
pub fn build_model(config: ModelConfig) -> Result<Model> {
    if config.classes == 0 {
        return Err(Error::ModelConfig("class count must be positive".into()));
    }
    if config.layers.is_empty() {
        return Err(Error::ModelConfig("layer list is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut graph = Graph::new();
    let input = graph.input(INPUT, &config.input_shape)?;
    let mut cur = input;
    let mut layers = Vec::with_capacity(config.layers.len());
    let last = config.layers.len() - 1;

    for (idx, spec) in config.layers.iter().enumerate() {
        let in_shape = graph.node(cur).shape.clone();
        let at = |e: Error| match e {
            Error::Shape { msg, .. } => Error::LayerConfig { layer: idx, msg },
            other => other,
        };
        let mut params = None;
        cur = match *spec {
            LayerSpec::Conv {
                kernels,
                height,
                width,
            } => {
                let channels = *in_shape.last().unwrap_or(&0);
                if in_shape.len() != 3 {
                    return Err(Error::LayerConfig {
                        layer: idx,
                        msg: format!("conv needs an (h, w, c) input, got {in_shape:?}"),
                    });
                }
                let shape = [height, width, channels, kernels];
                let fan_in = height * width * channels;
                let fan_out = height * width * kernels;
                let k = glorot(&mut rng, &shape, fan_in, fan_out);
                let node = graph
                    .conv2d(cur, k, Tensor::zeros(&[kernels]))
                    .map_err(at)?;
                params = Some(last_two(&graph));
                node
            }
            LayerSpec::Dense { units } => {
                if in_shape.len() != 1 {
                    return Err(Error::LayerConfig {
                        layer: idx,
                        msg: format!("dense needs a vector input, got {in_shape:?}; add flatten"),
                    });
                }
                let w = glorot(&mut rng, &[units, in_shape[0]], in_shape[0], units);
                let node = graph.dense(cur, w, Tensor::zeros(&[units])).map_err(at)?;
                params = Some(last_two(&graph));
                node
            }
            LayerSpec::Relu => graph.relu(cur).map_err(at)?,
            LayerSpec::MaxPool => graph.max_pool2(cur).map_err(at)?,
            LayerSpec::AvgPool => graph.avg_pool2(cur).map_err(at)?,
            LayerSpec::Flatten => graph.flatten(cur).map_err(at)?,
            LayerSpec::Scale(a) => graph.scale(cur, a).map_err(at)?,
            LayerSpec::Shift(b) => graph.shift(cur, b).map_err(at)?,
            LayerSpec::Softmax => {
                if idx != last {
                    return Err(Error::LayerConfig {
                        layer: idx,
                        msg: "softmax must be the final layer".into(),
                    });
                }
                graph.softmax(cur).map_err(at)?
            }
        };
        layers.push(Layer {
            name: format!("{}{idx}", spec.kind()),
            spec: spec.clone(),
            node: cur,
            params,
        });
    }

    let out_shape = &graph.node(cur).shape;
    if out_shape.len() != 1 || out_shape[0] != config.classes {
        return Err(Error::ModelConfig(format!(
            "final layer produces {out_shape:?}, expected [{}] for the class count",
            config.classes
        )));
    }
    let (logits, probs) = match config.layers[last] {
        LayerSpec::Softmax => (graph.node(cur).inputs[0], Some(cur)),
        _ => (cur, None),
    };
    Ok(Model {
        config,
        graph,
        input,
        layers,
        logits,
        probs,
    })
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-s..=s)).collect();
    Tensor::new(shape.to_vec(), data).expect("extents are positive")
}

fn last_two(graph: &Graph) -> (ParamId, ParamId) {
    let n = graph.params().len();
    (n - 2, n - 1)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub(crate) fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn input_node(&self) -> NodeId {
        self.input
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.config.input_shape
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn logits_node(&self) -> NodeId {
        self.logits
    }

    pub fn probs_node(&self) -> Option<NodeId> {
        self.probs
    }

    pub fn has_softmax(&self) -> bool {
        self.probs.is_some()
    }

    /// Node whose output coordinate `c` is the score `y^c` for `target`.
    pub fn score_node(&self, target: Target) -> Result<NodeId> {
        match target {
            Target::Logit => Ok(self.logits),
            Target::Probability => self.probs.ok_or(Error::NoSoftmax),
        }
    }

    pub fn layer(&self, selector: &LayerSelector) -> Result<&Layer> {
        match selector {
            LayerSelector::Index(i) => self.layers.get(*i),
            LayerSelector::Name(n) => self.layers.iter().find(|l| &l.name == n),
        }
        .ok_or_else(|| Error::UnknownLayer(selector.to_string()))
    }

    /// Resolves a selector that must name a `(h, w, K)` feature-map layer.
    pub fn feature_layer(&self, selector: &LayerSelector) -> Result<&Layer> {
        let layer = self.layer(selector)?;
        if self.graph.node(layer.node).shape.len() != 3 {
            return Err(Error::NotFeatureMaps(layer.name.clone()));
        }
        Ok(layer)
    }

    /// Replaces the weight and bias of a conv or dense layer.
    pub fn set_layer_params(
        &mut self,
        selector: &LayerSelector,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<()> {
        let layer = self.layer(selector)?;
        let (w, b) = layer.params.ok_or_else(|| {
            Error::InvalidArgument(format!("layer `{}` has no parameters", layer.name))
        })?;
        self.graph.set_param(w, weight)?;
        self.graph.set_param(b, bias)
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        image.expect_shape(&self.config.input_shape)
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.config.classes {
            return Err(Error::IndexOutOfRange {
                index: class,
                len: self.config.classes,
            });
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor, retain: &[NodeId]) -> Result<Tape> {
        self.check_input(image)?;
        self.graph.forward(&[(INPUT, image)], retain)
    }

    /// Output of the final layer: a probability vector when the model ends
    /// in softmax.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward(image, &[])?.output().clone())
    }

    /// `y^c` at `image`.
    pub fn score(&self, image: &Tensor, class: usize, target: Target) -> Result<f64> {
        self.check_class(class)?;
        let node = self.score_node(target)?;
        Ok(self.forward(image, &[])?.value(node).data()[class])
    }

    /// One forward pass and the gradient of `y^c` at the `retain` nodes.
    pub fn gradients(
        &self,
        image: &Tensor,
        class: usize,
        target: Target,
        retain: &[NodeId],
    ) -> Result<(Tape, Gradients)> {
        self.check_class(class)?;
        let node = self.score_node(target)?;
        let tape = self.forward(image, retain)?;
        let grads = self.graph.backward_at(&tape, node, class)?;
        Ok((tape, grads))
    }

    pub fn capture(&self, image: &Tensor, selector: &LayerSelector) -> Result<Capture> {
        let node = self.feature_layer(selector)?.node;
        let tape = self.forward(image, &[])?;
        Ok(Capture {
            maps: tape.value(node).clone(),
            logits: tape.value(self.logits).clone(),
            probs: self.probs.map(|p| tape.value(p).clone()),
        })
    }

    /// First layer whose output is a feature-map stack, scanning from the end.
    pub fn last_feature_layer(&self) -> Option<&Layer> {
        self.layers
            .iter()
            .rev()
            .find(|l| self.graph.node(l.node).shape.len() == 3)
    }

    /// True when every parameter matches `other` bit for bit.
    pub fn same_params(&self, other: &Model) -> bool {
        let a = self.graph.params();
        let b = other.graph.params();
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.shape() == y.shape()
                    && x.data()
                        .iter()
                        .zip(y.data())
                        .all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    pub fn is_conv(&self, layer: &Layer) -> bool {
        matches!(self.graph.node(layer.node).op, Op::Conv2d { .. })
    }
}
