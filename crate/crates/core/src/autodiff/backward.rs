use std::collections::BTreeMap;

use super::{ops, Graph, NodeId, Op, ParamId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients of one scalar (an output coordinate or a seeded
/// vector-Jacobian product) with respect to retained nodes and, optionally,
/// every parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    nodes: BTreeMap<NodeId, Tensor>,
    params: Vec<Tensor>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(&id)
    }

    pub fn take_node(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes.remove(&id)
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, Tensor> {
        &self.nodes
    }

    /// Parameter gradients, indexed by [`ParamId`]. Empty unless requested.
    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id)
    }
}

impl Graph {
    /// Gradient of `output[output_index]` of the final node.
    pub fn backward(&self, tape: &Tape, output_index: usize) -> Result<Gradients> {
        let out = self.output().ok_or(Error::TapeMismatch)?;
        self.backward_at(tape, out, output_index)
    }

    /// Gradient of coordinate `index` of `node`'s output.
    pub fn backward_at(&self, tape: &Tape, node: NodeId, index: usize) -> Result<Gradients> {
        self.check_tape(tape)?;
        let len = tape.values[node].len();
        if index >= len {
            return Err(Error::IndexOutOfRange { index, len });
        }
        let mut seed = Tensor::zeros(tape.values[node].shape());
        seed.data_mut()[index] = 1.0;
        self.backward_seeded(tape, node, &seed, false)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `node`'s
    /// output) back to the retained nodes, and to all parameters when
    /// `want_params` is set.
    pub fn backward_seeded(
        &self,
        tape: &Tape,
        node: NodeId,
        seed: &Tensor,
        want_params: bool,
    ) -> Result<Gradients> {
        self.check_tape(tape)?;
        if node >= self.nodes.len() {
            return Err(Error::IndexOutOfRange {
                index: node,
                len: self.nodes.len(),
            });
        }
        seed.expect_shape(&self.nodes[node].shape)?;

        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; node + 1];
        adjoint[node] = Some(seed.data().to_vec());
        let mut params: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        let mut out = Gradients::default();

        for id in (0..=node).rev() {
            let Some(g) = adjoint[id].take() else {
                continue;
            };
            let n = &self.nodes[id];
            if !matches!(n.op, Op::Input { .. }) {
                let args: Vec<&Tensor> = n.inputs.iter().map(|&i| &tape.values[i]).collect();
                let vjp = ops::backward(
                    &n.op,
                    &args,
                    &tape.values[id],
                    &g,
                    &self.params,
                    want_params,
                );
                for (&input, dx) in n.inputs.iter().zip(vjp.inputs) {
                    accumulate(&mut adjoint[input], dx);
                }
                for (p, dp) in vjp.params {
                    accumulate(&mut params[p], dp);
                }
            }
            if tape.retained[id] {
                out.nodes.insert(
                    id,
                    Tensor::new(n.shape.clone(), g).expect("adjoint matches node shape"),
                );
            }
        }

        if want_params {
            out.params = params
                .into_iter()
                .zip(&self.params)
                .map(|(g, p)| match g {
                    Some(g) => Tensor::new(p.shape().to_vec(), g).expect("param shape"),
                    None => Tensor::zeros(p.shape()),
                })
                .collect();
        }
        Ok(out)
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.graph_id != self.id || tape.values.len() != self.nodes.len() {
            return Err(Error::TapeMismatch);
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
