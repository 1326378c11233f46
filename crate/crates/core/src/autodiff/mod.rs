//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a topologically ordered list of operator nodes built once
//! and then shared immutably. [`Graph::forward`] evaluates it into a private
//! [`Tape`]; [`Graph::backward`] walks the tape in reverse and returns the
//! gradients of one output coordinate at the nodes that were marked for
//! retention.

mod backward;
mod check;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use backward::Gradients;
pub use check::{finite_diff_check, finite_diff_check_at, FiniteDiffReport};

pub type NodeId = usize;
pub type ParamId = usize;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Operator kinds understood by the engine.
///
/// Spatial operators work on `(h, w, c)` stacks with valid padding and
/// stride 1; pooling uses non-overlapping 2x2 windows and drops a trailing
/// odd row or column.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input {
        name: String,
    },
    /// `y = W x + b`, weight shaped `[out, in]`, bias `[out]`.
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    /// Kernel shaped `[kh, kw, c, k]`, bias `[k]`.
    Conv2d {
        kernel: ParamId,
        bias: ParamId,
    },
    Relu,
    MaxPool2,
    AvgPool2,
    Flatten,
    Softmax,
    Scale(f64),
    Shift(f64),
    Add,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv",
            Op::Relu => "relu",
            Op::MaxPool2 => "maxpool",
            Op::AvgPool2 => "avgpool",
            Op::Flatten => "flatten",
            Op::Softmax => "softmax",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::Add => "add",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<Tensor>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Id of the last node, whose value is the network output.
    pub fn output(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id]
    }

    /// Mutable access to a parameter. The replacement must keep its shape.
    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id]
    }

    pub fn set_param(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        value.expect_shape(self.params[id].shape())?;
        self.params[id] = value;
        Ok(())
    }

    pub fn inputs(&self) -> impl Iterator<Item = (NodeId, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match &n.op {
                Op::Input { name } => Some((id, name.as_str())),
                _ => None,
            })
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::ZeroExtent(shape.to_vec()));
        }
        if self.inputs().any(|(_, n)| n == name) {
            return Err(Error::InvalidArgument(format!("duplicate input `{name}`")));
        }
        Ok(self.push(
            Op::Input {
                name: name.to_string(),
            },
            vec![],
            shape.to_vec(),
        ))
    }

    pub fn dense(&mut self, x: NodeId, weight: Tensor, bias: Tensor) -> Result<NodeId> {
        let id = self.check_inputs(&[x])?;
        let xs = &self.nodes[x].shape;
        let ws = weight.shape();
        if xs.len() != 1 {
            return Err(shape_err(
                id,
                format!("dense expects a vector input, got {xs:?}"),
            ));
        }
        if ws.len() != 2 || ws[1] != xs[0] {
            return Err(shape_err(
                id,
                format!("dense weight {ws:?} does not fit input {xs:?}"),
            ));
        }
        if bias.shape() != [ws[0]] {
            return Err(shape_err(
                id,
                format!("dense bias {:?} does not fit weight {ws:?}", bias.shape()),
            ));
        }
        let out = vec![ws[0]];
        let weight = self.add_param(weight);
        let bias = self.add_param(bias);
        Ok(self.push(Op::Dense { weight, bias }, vec![x], out))
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: Tensor, bias: Tensor) -> Result<NodeId> {
        let id = self.check_inputs(&[x])?;
        let xs = &self.nodes[x].shape;
        let ks = kernel.shape();
        if xs.len() != 3 {
            return Err(shape_err(
                id,
                format!("conv2d expects (h, w, c) input, got {xs:?}"),
            ));
        }
        if ks.len() != 4 {
            return Err(shape_err(
                id,
                format!("conv2d kernel must be rank 4, got {ks:?}"),
            ));
        }
        if ks[2] != xs[2] {
            return Err(shape_err(
                id,
                format!("kernel expects {} channels, input has {}", ks[2], xs[2]),
            ));
        }
        if ks[0] > xs[0] || ks[1] > xs[1] {
            return Err(shape_err(
                id,
                format!(
                    "kernel {}x{} larger than input {}x{}",
                    ks[0], ks[1], xs[0], xs[1]
                ),
            ));
        }
        if bias.shape() != [ks[3]] {
            return Err(shape_err(
                id,
                format!(
                    "conv bias {:?} does not fit {} kernels",
                    bias.shape(),
                    ks[3]
                ),
            ));
        }
        let out = vec![xs[0] - ks[0] + 1, xs[1] - ks[1] + 1, ks[3]];
        let kernel = self.add_param(kernel);
        let bias = self.add_param(bias);
        Ok(self.push(Op::Conv2d { kernel, bias }, vec![x], out))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, x)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(Op::Scale(factor), x)
    }

    pub fn shift(&mut self, x: NodeId, offset: f64) -> Result<NodeId> {
        self.unary(Op::Shift(offset), x)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.pool(Op::MaxPool2, x)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.pool(Op::AvgPool2, x)
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_inputs(&[x])?;
        let n = self.nodes[x].shape.iter().product();
        Ok(self.push(Op::Flatten, vec![x], vec![n]))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let id = self.check_inputs(&[x])?;
        if self.nodes[x].shape.len() != 1 {
            return Err(shape_err(id, "softmax expects a vector input".into()));
        }
        self.unary(Op::Softmax, x)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let id = self.check_inputs(&[a, b])?;
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(shape_err(
                id,
                format!(
                    "add operands {:?} and {:?} differ",
                    self.nodes[a].shape, self.nodes[b].shape
                ),
            ));
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(Op::Add, vec![a, b], shape))
    }

    fn unary(&mut self, op: Op, x: NodeId) -> Result<NodeId> {
        self.check_inputs(&[x])?;
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(op, vec![x], shape))
    }

    fn pool(&mut self, op: Op, x: NodeId) -> Result<NodeId> {
        let id = self.check_inputs(&[x])?;
        let xs = &self.nodes[x].shape;
        if xs.len() != 3 || xs[0] < 2 || xs[1] < 2 {
            return Err(shape_err(
                id,
                format!("2x2 pooling needs an (h>=2, w>=2, c) input, got {xs:?}"),
            ));
        }
        let out = vec![xs[0] / 2, xs[1] / 2, xs[2]];
        Ok(self.push(op, vec![x], out))
    }

    fn check_inputs(&self, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        for &i in inputs {
            if i >= id {
                return Err(shape_err(id, format!("input node {i} does not exist yet")));
            }
        }
        Ok(id)
    }

    fn add_param(&mut self, t: Tensor) -> ParamId {
        self.params.push(t);
        self.params.len() - 1
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        self.nodes.len() - 1
    }

    /// Evaluates every node. `retain` lists the nodes whose gradients
    /// [`Graph::backward`] should report.
    pub fn forward(&self, inputs: &[(&str, &Tensor)], retain: &[NodeId]) -> Result<Tape> {
        for (name, _) in inputs {
            if !self.inputs().any(|(_, n)| n == *name) {
                return Err(Error::UnknownInput(name.to_string()));
            }
        }
        let mut retained = vec![false; self.nodes.len()];
        for &r in retain {
            if r >= self.nodes.len() {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: self.nodes.len(),
                });
            }
            retained[r] = true;
        }

        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input { name } => {
                    let (_, t) = inputs
                        .iter()
                        .find(|(n, _)| n == name)
                        .ok_or_else(|| Error::MissingInput(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(shape_err(
                            id,
                            format!(
                                "input `{name}` expects {:?}, got {:?}",
                                node.shape,
                                t.shape()
                            ),
                        ));
                    }
                    if !t.is_finite() {
                        return Err(Error::NonFinite(format!("input `{name}`")));
                    }
                    (*t).clone()
                }
                op => {
                    let args: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    ops::forward(op, &args, &self.params, &node.shape)
                }
            };
            values.push(value);
        }
        Ok(Tape {
            graph_id: self.id,
            values,
            retained,
        })
    }
}

fn shape_err(node: NodeId, msg: String) -> Error {
    Error::Shape { node, msg }
}

/// Forward values of one evaluation of a graph.
#[derive(Clone, Debug)]
pub struct Tape {
    graph_id: u64,
    values: Vec<Tensor>,
    retained: Vec<bool>,
}

impl Tape {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Output of the final node.
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("tapes are never empty")
    }

    pub fn is_retained(&self, node: NodeId) -> bool {
        self.retained.get(node).copied().unwrap_or(false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vanishing() -> Graph {
        let mut g = Graph::new();
        let x = g.input("x", &[1]).unwrap();
        let a = g.scale(x, -1.0).unwrap();
        let a = g.shift(a, 1.0).unwrap();
        let r = g.relu(a).unwrap();
        let r = g.scale(r, -1.0).unwrap();
        g.shift(r, 1.0).unwrap();
        g
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        g.relu(x).unwrap();
        let t = g
            .forward(&[("x", &Tensor::from_vec(vec![-1.0, 2.0]))], &[])
            .unwrap();
        assert_eq!(t.output().data(), &[0.0, 2.0]);
    }

    #[test]
    fn dense_then_relu() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let d = g.dense(x, w, Tensor::zeros(&[1])).unwrap();
        g.relu(d).unwrap();
        let t = g
            .forward(&[("x", &Tensor::from_vec(vec![3.0, 4.0]))], &[])
            .unwrap();
        assert_eq!(t.output().data(), &[7.0]);
    }

    #[test]
    fn saturating_unit_outputs_one_at_two() {
        let g = vanishing();
        let t = g.forward(&[("x", &Tensor::scalar(2.0))], &[]).unwrap();
        assert_eq!(t.output().data(), &[1.0]);
    }

    #[test]
    fn saturating_unit_gradient() {
        let g = vanishing();
        for (x, expected) in [(0.5, 1.0), (2.0, 0.0), (1.0, 0.0)] {
            let t = g.forward(&[("x", &Tensor::scalar(x))], &[0]).unwrap();
            let grads = g.backward(&t, 0).unwrap();
            assert_eq!(grads.node(0).unwrap().data(), &[expected], "x = {x}");
        }
    }

    #[test]
    fn conv_of_ones() {
        let mut g = Graph::new();
        let x = g.input("x", &[3, 3, 1]).unwrap();
        g.conv2d(x, Tensor::full(&[2, 2, 1, 1], 1.0), Tensor::zeros(&[1]))
            .unwrap();
        let t = g
            .forward(&[("x", &Tensor::full(&[3, 3, 1], 1.0))], &[])
            .unwrap();
        assert_eq!(t.output().shape(), &[2, 2, 1]);
        assert_eq!(t.output().data(), &[4.0; 4]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]).unwrap();
        g.softmax(x).unwrap();
        let t = g.forward(&[("x", &Tensor::zeros(&[3]))], &[]).unwrap();
        for &p in t.output().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_rejects_large_kernel_and_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.input("x", &[3, 3, 2]).unwrap();
        let big = g.conv2d(x, Tensor::zeros(&[4, 2, 2, 1]), Tensor::zeros(&[1]));
        assert!(matches!(big, Err(Error::Shape { node: 1, .. })));
        let chan = g.conv2d(x, Tensor::zeros(&[2, 2, 3, 1]), Tensor::zeros(&[1]));
        assert!(matches!(chan, Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]).unwrap();
        g.relu(x).unwrap();
        let wrong = g.forward(&[("x", &Tensor::zeros(&[3]))], &[]);
        assert!(matches!(wrong, Err(Error::Shape { node: 0, .. })));
        let nan = g.forward(&[("x", &Tensor::from_vec(vec![0.0, f64::NAN]))], &[]);
        assert!(matches!(nan, Err(Error::NonFinite(_))));
        let missing = g.forward(&[], &[]);
        assert!(matches!(missing, Err(Error::MissingInput(_))));
        let unknown = g.forward(&[("y", &Tensor::zeros(&[2]))], &[]);
        assert!(matches!(unknown, Err(Error::UnknownInput(_))));
    }

    #[test]
    fn backward_rejects_foreign_tape_and_bad_index() {
        let g = vanishing();
        let other = vanishing();
        let t = g.forward(&[("x", &Tensor::scalar(0.5))], &[0]).unwrap();
        assert!(matches!(other.backward(&t, 0), Err(Error::TapeMismatch)));
        assert!(matches!(
            g.backward(&t, 1),
            Err(Error::IndexOutOfRange { index: 1, len: 1 })
        ));
    }

    #[test]
    fn pooling_shapes_and_values() {
        let mut g = Graph::new();
        let x = g.input("x", &[3, 4, 1]).unwrap();
        let m = g.max_pool2(x).unwrap();
        let a = g.avg_pool2(x).unwrap();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let t = g
            .forward(&[("x", &Tensor::new(vec![3, 4, 1], data).unwrap())], &[])
            .unwrap();
        assert_eq!(t.value(m).shape(), &[1, 2, 1]);
        assert_eq!(t.value(m).data(), &[5.0, 7.0]);
        assert_eq!(t.value(a).data(), &[2.5, 4.5]);
    }
}
