use super::{check_steps, sweep, AttributionOptions, InterpolationPath, Method};
use crate::error::{Error, Result};
use crate::model::{LayerSelector, Model};
use crate::tensor::Tensor;

/// Class activation map for one class at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CamResult {
    /// One weight per feature map.
    pub weights: Vec<f64>,
    /// `(h, w)` map, non-negative.
    pub heatmap: Tensor,
    pub class: usize,
    pub method: Method,
    /// Interpolation steps; 1 for plain Grad-CAM.
    pub steps: usize,
}

/// Everything accumulated by one Riemann-Stieltjes sweep at a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RsiTrace {
    pub weights: Vec<f64>,
    /// Per unit: `sum_l dy/dA(alpha_l) * (A(alpha_l) - A(alpha_{l-1}))`.
    pub unit_integrals: Tensor,
    /// Per unit: `sum_l (A(alpha_l) - A(alpha_{l-1}))`; telescopes to `end - start`.
    pub delta_sums: Tensor,
    /// Activations at the baseline.
    pub start: Tensor,
    /// Activations at the input.
    pub end: Tensor,
}

/// Spatial mean over each feature map: `w_k = (1/Z) sum_{i,j} t[i, j, k]`,
/// units visited in ascending `(i, j)`.
fn spatial_mean(t: &Tensor) -> Vec<f64> {
    let (h, w, k) = t.dims3();
    let mut sums = vec![0.0; k];
    for unit in t.data().chunks_exact(k) {
        sums.iter_mut().zip(unit).for_each(|(s, v)| *s += v);
    }
    let z = (h * w) as f64;
    sums.into_iter().map(|s| s / z).collect()
}

/// Grad-CAM weights: spatially averaged gradient of `y^c` at the layer.
pub fn gradcam_weights(
    model: &Model,
    selector: &LayerSelector,
    input: &Tensor,
    class: usize,
    opts: &AttributionOptions,
) -> Result<Vec<f64>> {
    Ok(grad_cam_parts(model, selector, input, class, opts)?.0)
}

fn grad_cam_parts(
    model: &Model,
    selector: &LayerSelector,
    input: &Tensor,
    class: usize,
    opts: &AttributionOptions,
) -> Result<(Vec<f64>, Tensor)> {
    let node = model.feature_layer(selector)?.node;
    let (tape, mut grads) = model.gradients(input, class, opts.target, &[node])?;
    let g = grads.take_node(node).expect("layer retained");
    Ok((spatial_mean(&g), tape.value(node).clone()))
}

pub fn grad_cam(
    model: &Model,
    selector: &LayerSelector,
    input: &Tensor,
    class: usize,
    opts: &AttributionOptions,
) -> Result<CamResult> {
    let (weights, maps) = grad_cam_parts(model, selector, input, class, opts)?;
    Ok(CamResult {
        heatmap: heatmap(&weights, &maps)?,
        weights,
        class,
        method: Method::GradCam,
        steps: 1,
    })
}

/// Riemann-Stieltjes weights
/// `w_k = (1/Z) sum_{i,j} sum_{l=1..m} dy^c(alpha_l)/dA_ijk * (A_ijk(alpha_l) - A_ijk(alpha_{l-1}))`.
pub fn rsi_weights(
    model: &Model,
    selector: &LayerSelector,
    path: &InterpolationPath,
    class: usize,
    opts: &AttributionOptions,
) -> Result<Vec<f64>> {
    Ok(rsi_trace(model, selector, path, class, opts)?.weights)
}

/// Runs the sweep behind [`rsi_weights`]: one forward at `alpha_0 = 0`, then a
/// forward and backward at each `alpha_l`, `l = 1..=m`.
pub fn rsi_trace(
    model: &Model,
    selector: &LayerSelector,
    path: &InterpolationPath,
    class: usize,
    opts: &AttributionOptions,
) -> Result<RsiTrace> {
    check_steps(path.steps())?;
    model.check_input(path.input())?;
    model.check_class(class)?;
    model.score_node(opts.target)?;
    let node = model.feature_layer(selector)?.node;
    let start = model.forward(&path.point(0)?, &[])?.value(node).clone();
    let n = start.len();

    struct Acc {
        prev: Tensor,
        integrals: Vec<f64>,
        deltas: Vec<f64>,
    }
    let acc = sweep(
        path.steps(),
        opts.threads,
        Acc {
            prev: start.clone(),
            integrals: vec![0.0; n],
            deltas: vec![0.0; n],
        },
        |l| {
            let (tape, mut grads) =
                model.gradients(&path.point(l)?, class, opts.target, &[node])?;
            Ok((
                tape.value(node).clone(),
                grads.take_node(node).expect("layer retained"),
            ))
        },
        |mut acc, _, (a, g)| {
            for u in 0..n {
                let delta = a.data()[u] - acc.prev.data()[u];
                acc.integrals[u] += g.data()[u] * delta;
                acc.deltas[u] += delta;
            }
            acc.prev = a;
            acc
        },
    )?;

    let shape = start.shape().to_vec();
    let unit_integrals = Tensor::new(shape.clone(), acc.integrals)?;
    Ok(RsiTrace {
        weights: spatial_mean(&unit_integrals),
        unit_integrals,
        delta_sums: Tensor::new(shape, acc.deltas)?,
        start,
        end: acc.prev,
    })
}

/// RSI-Grad-CAM from `baseline` to `input` with `steps` interpolation steps;
/// the heatmap combines the activations at `input`.
pub fn rsi_grad_cam(
    model: &Model,
    selector: &LayerSelector,
    input: &Tensor,
    baseline: &Tensor,
    steps: usize,
    class: usize,
    opts: &AttributionOptions,
) -> Result<CamResult> {
    let path = InterpolationPath::new(baseline.clone(), input.clone(), steps)?;
    let trace = rsi_trace(model, selector, &path, class, opts)?;
    Ok(CamResult {
        heatmap: heatmap(&trace.weights, &trace.end)?,
        weights: trace.weights,
        class,
        method: Method::RsiGradCam,
        steps,
    })
}

/// `ReLU(sum_k w_k A^k)` over an `(h, w, K)` stack, giving an `(h, w)` map.
pub fn heatmap(weights: &[f64], maps: &Tensor) -> Result<Tensor> {
    if maps.rank() != 3 {
        return Err(Error::InvalidArgument(format!(
            "feature maps must be (h, w, K), got {:?}",
            maps.shape()
        )));
    }
    let (h, w, k) = maps.dims3();
    if weights.len() != k {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {k} feature maps",
            weights.len()
        )));
    }
    let data = maps
        .data()
        .chunks_exact(k)
        .map(|unit| {
            unit.iter()
                .zip(weights)
                .map(|(a, w)| w * a)
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    Tensor::new(vec![h, w], data)
}
