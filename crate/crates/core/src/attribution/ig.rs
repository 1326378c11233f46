use super::{check_steps, sweep, AttributionOptions, InterpolationPath, Method};
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// Per-input-element attribution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Tensor,
    pub class: usize,
    pub method: Method,
    pub steps: usize,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.values.sum()
    }
}

/// Right-endpoint Riemann sum of input gradients along the straight path:
/// `(x_i - b_i) * (1/m) * sum_{l=1..m} dF_c(b + (l/m)(x - b)) / dx_i`.
pub fn integrated_gradients(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    steps: usize,
    class: usize,
    opts: &AttributionOptions,
) -> Result<AttributionMap> {
    check_steps(steps)?;
    model.check_input(input)?;
    model.check_input(baseline)?;
    model.check_class(class)?;
    model.score_node(opts.target)?;
    let path = InterpolationPath::new(baseline.clone(), input.clone(), steps)?;
    let x_node = model.input_node();

    let sum = sweep(
        steps,
        opts.threads,
        vec![0.0; input.len()],
        |l| {
            let point = path.point(l)?;
            let (_, mut grads) = model.gradients(&point, class, opts.target, &[x_node])?;
            Ok(grads.take_node(x_node).expect("input retained"))
        },
        |mut acc, _, g| {
            acc.iter_mut().zip(g.data()).for_each(|(a, v)| *a += v);
            acc
        },
    )?;

    let m = steps as f64;
    let data = input
        .data()
        .iter()
        .zip(baseline.data())
        .zip(&sum)
        .map(|((x, b), s)| (x - b) * (s / m))
        .collect();
    Ok(AttributionMap {
        values: Tensor::new(input.shape().to_vec(), data)?,
        class,
        method: Method::IntegratedGradients,
        steps,
    })
}

/// `|sum_i IG_i - (F_c(x) - F_c(b))|`.
pub fn completeness_gap(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    steps: usize,
    class: usize,
    opts: &AttributionOptions,
) -> Result<f64> {
    let map = integrated_gradients(model, input, baseline, steps, class, opts)?;
    completeness_gap_of(model, &map, input, baseline, opts)
}

/// Completeness gap of an already computed map.
pub fn completeness_gap_of(
    model: &Model,
    map: &AttributionMap,
    input: &Tensor,
    baseline: &Tensor,
    opts: &AttributionOptions,
) -> Result<f64> {
    let fx = model.score(input, map.class, opts.target)?;
    let fb = model.score(baseline, map.class, opts.target)?;
    Ok((map.total() - (fx - fb)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, LayerSelector, LayerSpec, ModelConfig};

    fn linear(w: &[f64]) -> Model {
        let mut m = build_model(ModelConfig {
            input_shape: vec![w.len()],
            layers: vec![LayerSpec::Dense { units: 1 }],
            classes: 1,
            seed: 0,
        })
        .unwrap();
        m.set_layer_params(
            &LayerSelector::Index(0),
            Tensor::new(vec![1, w.len()], w.to_vec()).unwrap(),
            Tensor::scalar(0.25),
        )
        .unwrap();
        m
    }

    #[test]
    fn saturating_unit_right_endpoint_sum() {
        let m = build_model(ModelConfig::vanishing()).unwrap();
        let opts = AttributionOptions::default();
        for steps in [2usize, 4, 10, 50, 100, 1000] {
            let map = integrated_gradients(
                &m,
                &Tensor::scalar(2.0),
                &Tensor::scalar(0.0),
                steps,
                0,
                &opts,
            )
            .unwrap();
            // steps l < m/2 lie strictly below the kink and contribute 1 each;
            // l = m/2 lands exactly on it, where the derivative is 0
            let expected = 2.0 * (steps / 2 - 1) as f64 / steps as f64;
            assert!((map.total() - expected).abs() < 1e-12, "m = {steps}");
            assert!((map.total() - (1.0 - 2.0 / steps as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_path_gives_zero_map() {
        let m = build_model(ModelConfig::shapes3(3)).unwrap();
        let x = crate::model::shapes3(1, 1)[0].image.clone();
        for steps in [1, 5] {
            let map =
                integrated_gradients(&m, &x, &x, steps, 1, &AttributionOptions::default()).unwrap();
            assert!(map.values.data().iter().all(|&v| v == 0.0));
            let gap = completeness_gap(&m, &x, &x, steps, 1, &Default::default()).unwrap();
            assert_eq!(gap, 0.0);
        }
    }

    #[test]
    fn linear_model_attributes_w_times_x() {
        let w = [0.5, -1.25, 3.0, 0.1];
        let x = Tensor::from_vec(vec![1.5, 2.0, -0.3, 7.0]);
        let m = linear(&w);
        for steps in [1, 7, 50] {
            let map = integrated_gradients(
                &m,
                &x,
                &Tensor::zeros(&[4]),
                steps,
                0,
                &AttributionOptions::default(),
            )
            .unwrap();
            for ((v, wi), xi) in map.values.data().iter().zip(w).zip(x.data()) {
                assert!((v - wi * xi).abs() < 1e-12);
            }
            let gap = completeness_gap(&m, &x, &Tensor::zeros(&[4]), steps, 0, &Default::default())
                .unwrap();
            assert!(gap < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let m = linear(&[1.0]);
        let opts = AttributionOptions::default();
        let x = Tensor::scalar(1.0);
        assert!(integrated_gradients(&m, &x, &x, 0, 0, &opts).is_err());
        assert!(integrated_gradients(&m, &x, &x, 3, 1, &opts).is_err());
        assert!(integrated_gradients(&m, &Tensor::zeros(&[2]), &x, 3, 0, &opts).is_err());
    }
}
