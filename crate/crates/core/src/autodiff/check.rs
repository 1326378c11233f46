use super::{ops, Graph, NodeId, Op, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic input gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(|analytic|, 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose `±epsilon` probe changed a ReLU sign or a max-pool
    /// winner, so the central difference straddles a kink.
    pub skipped: Vec<usize>,
    /// Units at the unperturbed input lying within `10 * epsilon` of a kink.
    pub near_kink_units: usize,
}

/// Checks `d output[output_index] / d input` of a single-input graph against
/// central finite differences with step `epsilon`.
pub fn finite_diff_check(
    graph: &Graph,
    input: &Tensor,
    output_index: usize,
    epsilon: f64,
) -> Result<FiniteDiffReport> {
    let out = graph
        .output()
        .ok_or_else(|| Error::InvalidArgument("graph is empty".into()))?;
    finite_diff_check_at(graph, input, out, output_index, epsilon)
}

/// As [`finite_diff_check`], for coordinate `output_index` of any `node`.
pub fn finite_diff_check_at(
    graph: &Graph,
    input: &Tensor,
    node: NodeId,
    output_index: usize,
    epsilon: f64,
) -> Result<FiniteDiffReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut inputs = graph.inputs();
    let (input_id, name) = inputs
        .next()
        .ok_or_else(|| Error::InvalidArgument("graph has no input".into()))?;
    if inputs.next().is_some() {
        return Err(Error::InvalidArgument(
            "finite_diff_check needs a single-input graph".into(),
        ));
    }

    let base = graph.forward(&[(name, input)], &[input_id])?;
    let analytic = graph
        .backward_at(&base, node, output_index)?
        .take_node(input_id)
        .expect("input retained");
    let base_pattern = kink_pattern(graph, &base);
    let near_kink_units = near_kinks(graph, &base, 10.0 * epsilon);

    let mut probe = input.clone();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: Vec::new(),
        near_kink_units,
    };
    for i in 0..input.len() {
        let x0 = input.data()[i];
        probe.data_mut()[i] = x0 + epsilon;
        let plus = graph.forward(&[(name, &probe)], &[])?;
        probe.data_mut()[i] = x0 - epsilon;
        let minus = graph.forward(&[(name, &probe)], &[])?;
        probe.data_mut()[i] = x0;

        if kink_pattern(graph, &plus) != base_pattern || kink_pattern(graph, &minus) != base_pattern
        {
            report.skipped.push(i);
            continue;
        }
        let numeric = (plus.value(node).data()[output_index]
            - minus.value(node).data()[output_index])
            / (2.0 * epsilon);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// ReLU sign bits and max-pool winners: the piece of the piecewise-smooth
/// function a tape lies on.
fn kink_pattern(graph: &Graph, tape: &Tape) -> Vec<u8> {
    let mut pattern = Vec::new();
    for node in graph.nodes() {
        match node.op {
            Op::Relu => {
                let x = tape.value(node.inputs[0]);
                pattern.extend(x.data().iter().map(|&v| u8::from(v > 0.0)));
            }
            Op::MaxPool2 => {
                let x = tape.value(node.inputs[0]);
                let (_, w, c) = x.dims3();
                for i in 0..node.shape[0] {
                    for j in 0..node.shape[1] {
                        for ch in 0..c {
                            let idx = ops::window(i, j, ch, w, c);
                            pattern.push(ops::max_slot(idx.map(|p| x.data()[p])) as u8);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    pattern
}

fn near_kinks(graph: &Graph, tape: &Tape, margin: f64) -> usize {
    let mut count = 0;
    for node in graph.nodes() {
        match node.op {
            Op::Relu => {
                let x = tape.value(node.inputs[0]);
                count += x.data().iter().filter(|v| v.abs() < margin).count();
            }
            Op::MaxPool2 => {
                let x = tape.value(node.inputs[0]);
                let (_, w, c) = x.dims3();
                // max over ReLU outputs that are all zero is relu(max); only
                // the ReLU kinks, counted above, matter there
                let after_relu = matches!(graph.node(node.inputs[0]).op, Op::Relu);
                for i in 0..node.shape[0] {
                    for j in 0..node.shape[1] {
                        for ch in 0..c {
                            let mut v = ops::window(i, j, ch, w, c).map(|p| x.data()[p]);
                            v.sort_by(|a, b| b.total_cmp(a));
                            if after_relu && v[0] <= 0.0 {
                                continue;
                            }
                            if v[0] - v[1] < margin {
                                count += 1;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    count
}
