//! Baseline perturbation toward a target output distribution.
//!
//! Minimizes `lambda * L_out(o_b, o_t) + (1 - lambda) * L_0(b, b_0)` by
//! gradient descent on the baseline pixels while the model stays frozen.
//! This is the same optimization as training a fully connected layer whose
//! weights start at `b_0` and which is fed the constant 1: that layer's
//! weights are the baseline pixels. `L_0` is the mean squared difference
//! from `b_0`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Added inside the logarithm of the crossentropy.
pub const CCE_EPS: f64 = 1e-12;

/// Halvings tried per iteration before giving up on a descent step.
pub const MAX_HALVINGS: usize = 20;

/// Iterations spanned by the loss-change stopping test.
pub const STOP_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputLoss {
    Mse,
    CategoricalCrossentropy,
    /// `max_c |o_c - t_c|`.
    MaxAbs,
    /// `max_c (o_c - t_c)` without absolute values.
    MaxSigned,
}

impl fmt::Display for OutputLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputLoss::Mse => "mse",
            OutputLoss::CategoricalCrossentropy => "cce",
            OutputLoss::MaxAbs => "maxabs",
            OutputLoss::MaxSigned => "maxsigned",
        })
    }
}

impl FromStr for OutputLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(OutputLoss::Mse),
            "cce" | "crossentropy" => Ok(OutputLoss::CategoricalCrossentropy),
            "maxabs" => Ok(OutputLoss::MaxAbs),
            "maxsigned" => Ok(OutputLoss::MaxSigned),
            _ => Err(Error::InvalidArgument(format!("unknown loss kind `{s}`"))),
        }
    }
}

fn check_lengths(o_b: &[f64], o_t: &[f64]) -> Result<()> {
    if o_b.len() != o_t.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![o_t.len()],
            actual: vec![o_b.len()],
        });
    }
    Ok(())
}

/// Index of the largest `key(c)`; the lowest index wins ties.
fn argmax_by(n: usize, key: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    for c in 1..n {
        if key(c) > key(best) {
            best = c;
        }
    }
    best
}

pub fn loss_out(kind: OutputLoss, o_b: &[f64], o_t: &[f64]) -> Result<f64> {
    check_lengths(o_b, o_t)?;
    let n = o_b.len();
    Ok(match kind {
        OutputLoss::Mse => {
            o_b.iter()
                .zip(o_t)
                .map(|(b, t)| (b - t) * (b - t))
                .sum::<f64>()
                / n as f64
        }
        OutputLoss::CategoricalCrossentropy => -o_b
            .iter()
            .zip(o_t)
            .map(|(b, t)| t * (b + CCE_EPS).ln())
            .sum::<f64>(),
        OutputLoss::MaxAbs => {
            let c = argmax_by(n, |c| (o_b[c] - o_t[c]).abs());
            (o_b[c] - o_t[c]).abs()
        }
        OutputLoss::MaxSigned => {
            let c = argmax_by(n, |c| o_b[c] - o_t[c]);
            o_b[c] - o_t[c]
        }
    })
}

/// Derivative of [`loss_out`] with respect to `o_b`. The max losses use the
/// subgradient at the single winning coordinate.
pub fn loss_out_grad(kind: OutputLoss, o_b: &[f64], o_t: &[f64]) -> Result<Vec<f64>> {
    check_lengths(o_b, o_t)?;
    let n = o_b.len();
    let mut g = vec![0.0; n];
    match kind {
        OutputLoss::Mse => {
            for c in 0..n {
                g[c] = 2.0 * (o_b[c] - o_t[c]) / n as f64;
            }
        }
        OutputLoss::CategoricalCrossentropy => {
            for c in 0..n {
                g[c] = -o_t[c] / (o_b[c] + CCE_EPS);
            }
        }
        OutputLoss::MaxAbs => {
            let c = argmax_by(n, |c| (o_b[c] - o_t[c]).abs());
            let d = o_b[c] - o_t[c];
            g[c] = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        OutputLoss::MaxSigned => {
            g[argmax_by(n, |c| o_b[c] - o_t[c])] = 1.0;
        }
    }
    Ok(g)
}

/// `lambda * l_out + (1 - lambda) * l_0`.
pub fn composite_loss(lambda: f64, l_out: f64, l_0: f64) -> f64 {
    lambda * l_out + (1.0 - lambda) * l_0
}

/// Mean squared difference between two tensors of equal shape.
pub fn mean_square_drift(b: &Tensor, b0: &Tensor) -> Result<f64> {
    b.expect_shape(b0.shape())?;
    let s: f64 = b
        .data()
        .iter()
        .zip(b0.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / b.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOptConfig {
    pub lambda: f64,
    pub loss: OutputLoss,
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once the loss moved less than this over the last
    /// [`STOP_WINDOW`] iterations.
    pub tolerance: f64,
    /// Target distribution; `None` means uniform.
    pub target: Option<Vec<f64>>,
}

impl Default for BaselineOptConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            loss: OutputLoss::MaxAbs,
            learning_rate: 10.0,
            max_iters: 300,
            tolerance: 1e-9,
            target: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    /// Loss change over the stopping window fell below the tolerance.
    Converged,
    /// No step among [`MAX_HALVINGS`] halvings reduced the loss.
    NoDescent,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxIterations => "max-iterations",
            StopReason::Converged => "converged",
            StopReason::NoDescent => "no-descent",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOptReport {
    pub baseline: Tensor,
    /// Composite loss at the start and after every accepted step.
    pub loss_trace: Vec<f64>,
    pub target: Vec<f64>,
    pub initial_output: Vec<f64>,
    pub final_output: Vec<f64>,
    pub initial_max_deviation: f64,
    pub final_max_deviation: f64,
    /// `(min, max)` of the final baseline values.
    pub value_range: (f64, f64),
    /// Mean squared difference from `b_0`.
    pub drift: f64,
    pub iterations: usize,
    pub stop: StopReason,
}

impl fmt::Display for BaselineOptReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vec = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.6}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(
            f,
            "# baseline optimized directly; equivalent to training a dense layer fed the constant 1 whose weights are the baseline"
        )?;
        writeln!(f, "iterations={} stop={}", self.iterations, self.stop)?;
        writeln!(
            f,
            "loss_initial={:.9} loss_final={:.9}",
            self.loss_trace[0],
            self.loss_trace[self.loss_trace.len() - 1]
        )?;
        writeln!(f, "target={}", vec(&self.target))?;
        writeln!(f, "output_before={}", vec(&self.initial_output))?;
        writeln!(f, "output_after={}", vec(&self.final_output))?;
        let range = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            format!("{lo:.6}..{hi:.6}")
        };
        writeln!(
            f,
            "output_range_before={} output_range_after={}",
            range(&self.initial_output),
            range(&self.final_output)
        )?;
        writeln!(
            f,
            "max_deviation_before={:.6} max_deviation_after={:.6} reduction={:.2}",
            self.initial_max_deviation,
            self.final_max_deviation,
            self.initial_max_deviation / self.final_max_deviation.max(f64::MIN_POSITIVE)
        )?;
        writeln!(
            f,
            "baseline_min={:.6} baseline_max={:.6} drift_mse={:.6e}",
            self.value_range.0, self.value_range.1, self.drift
        )
    }
}

fn resolve_target(model: &Model, target: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = model.classes();
    let t = match target {
        Some(t) => t.to_vec(),
        None => vec![1.0 / n as f64; n],
    };
    if t.len() != n {
        return Err(Error::InvalidArgument(format!(
            "target has {} entries for {n} classes",
            t.len()
        )));
    }
    if t.iter().any(|&v| v.is_nan() || v < 0.0) || (t.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "target must be non-negative and sum to 1".into(),
        ));
    }
    Ok(t)
}

fn max_deviation(o: &[f64], t: &[f64]) -> f64 {
    o.iter()
        .zip(t)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Perturbs `b0` so the model's softmax output approaches the target.
///
/// Each iteration starts from the configured learning rate and halves it
/// until the composite loss does not increase, so the loss trace is
/// non-increasing. Baseline values are never clipped.
pub fn optimize_baseline(
    model: &Model,
    b0: &Tensor,
    config: &BaselineOptConfig,
) -> Result<BaselineOptReport> {
    if !(0.0..=1.0).contains(&config.lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {}",
            config.lambda
        )));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            config.learning_rate
        )));
    }
    model.check_input(b0)?;
    let probs = model.probs_node().ok_or(Error::NoSoftmax)?;
    let target = resolve_target(model, config.target.as_deref())?;
    let x_node = model.input_node();
    let lambda = config.lambda;

    let eval = |b: &Tensor, iter: usize| -> Result<(f64, Vec<f64>)> {
        let o = model.predict(b).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss(iter),
            other => other,
        })?;
        let l = composite_loss(
            lambda,
            loss_out(config.loss, o.data(), &target)?,
            mean_square_drift(b, b0)?,
        );
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss(iter));
        }
        Ok((l, o.into_data()))
    };

    let mut b = b0.clone();
    let (mut loss, initial_output) = eval(&b, 0)?;
    let mut trace = vec![loss];
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    let n = b.len() as f64;

    // lambda * dL_out/db for a given dL_out/do, plus the drift term
    let direction =
        |tape: &crate::autodiff::Tape, b: &Tensor, dl_do: Vec<f64>| -> Result<Vec<f64>> {
            let seed = Tensor::new(vec![dl_do.len()], dl_do)?;
            let out_grad = model
                .graph()
                .backward_seeded(tape, probs, &seed, false)?
                .take_node(x_node)
                .expect("input retained");
            Ok(out_grad
                .data()
                .iter()
                .zip(b.data().iter().zip(b0.data()))
                .map(|(g, (x, x0))| lambda * g + (1.0 - lambda) * 2.0 * (x - x0) / n)
                .collect())
        };
    let descend =
        |b: &Tensor, grad: &[f64], loss: f64, iter: usize| -> Result<Option<(Tensor, f64)>> {
            let mut lr = config.learning_rate;
            for _ in 0..=MAX_HALVINGS {
                let cand = Tensor::new(
                    b.shape().to_vec(),
                    b.data().iter().zip(grad).map(|(x, g)| x - lr * g).collect(),
                )?;
                let (l, _) = eval(&cand, iter)?;
                if l <= loss {
                    return Ok(Some((cand, l)));
                }
                lr *= 0.5;
            }
            Ok(None)
        };

    while iterations < config.max_iters {
        let tape = model.forward(&b, &[x_node])?;
        let o = tape.value(probs).data().to_vec();
        let grad = direction(&tape, &b, loss_out_grad(config.loss, &o, &target)?)?;
        let mut accepted = descend(&b, &grad, loss, iterations + 1)?;

        if accepted.is_none() && matches!(config.loss, OutputLoss::MaxAbs | OutputLoss::MaxSigned) {
            // Near a tie between deviations the single-coordinate subgradient
            // need not descend. Widen the active set to the top-k coordinates
            // and step along the minimum-norm element of their subgradients.
            let grads = coordinate_subgradients(config.loss, &o, &target)
                .into_iter()
                .map(|g| direction(&tape, &b, g))
                .collect::<Result<Vec<_>>>()?;
            for k in 2..=grads.len() {
                let d = min_norm_combination(&grads[..k]);
                accepted = descend(&b, &d, loss, iterations + 1)?;
                if accepted.is_some() {
                    break;
                }
            }
        }

        let Some((cand, l)) = accepted else {
            stop = StopReason::NoDescent;
            break;
        };
        b = cand;
        loss = l;
        trace.push(loss);
        iterations += 1;
        if trace.len() > STOP_WINDOW
            && (trace[trace.len() - 1 - STOP_WINDOW] - loss).abs() < config.tolerance
        {
            stop = StopReason::Converged;
            break;
        }
    }

    let final_output = model.predict(&b)?.into_data();
    Ok(BaselineOptReport {
        initial_max_deviation: max_deviation(&initial_output, &target),
        final_max_deviation: max_deviation(&final_output, &target),
        value_range: (b.min(), b.max()),
        drift: mean_square_drift(&b, b0)?,
        baseline: b,
        loss_trace: trace,
        target,
        initial_output,
        final_output,
        iterations,
        stop,
    })
}

/// Subgradients `dL_out/do` of a max loss, one per class, ordered by
/// decreasing deviation (ties by lowest index).
fn coordinate_subgradients(kind: OutputLoss, o: &[f64], t: &[f64]) -> Vec<Vec<f64>> {
    let score = |c: usize| match kind {
        OutputLoss::MaxSigned => o[c] - t[c],
        _ => (o[c] - t[c]).abs(),
    };
    let mut order: Vec<usize> = (0..o.len()).collect();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|c| {
            let mut g = vec![0.0; o.len()];
            g[c] = match kind {
                OutputLoss::MaxSigned => 1.0,
                _ => {
                    let d = o[c] - t[c];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }
            };
            g
        })
        .collect()
}

/// Minimum-norm point of the convex hull of `vectors`, by Frank-Wolfe with
/// exact line search on their Gram matrix.
fn min_norm_combination(vectors: &[Vec<f64>]) -> Vec<f64> {
    let k = vectors.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram: Vec<Vec<f64>> = vectors
        .iter()
        .map(|a| vectors.iter().map(|b| dot(a, b)).collect())
        .collect();
    let mut w = vec![1.0 / k as f64; k];
    for _ in 0..200 {
        // gradient of w'Gw is 2Gw; move toward the vertex minimizing it
        let gw: Vec<f64> = gram.iter().map(|row| dot(row, &w)).collect();
        let s = (0..k).min_by(|&a, &b| gw[a].total_cmp(&gw[b])).unwrap_or(0);
        let wgw = dot(&w, &gw);
        // d = e_s - w; minimize (w + t d)' G (w + t d) over t in [0, 1]
        let dgw = gw[s] - wgw;
        let dgd = gram[s][s] - 2.0 * gw[s] + wgw;
        if dgd <= 0.0 || dgw >= 0.0 {
            break;
        }
        let step = (-dgw / dgd).min(1.0);
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = (1.0 - step) * *wi + if i == s { step } else { 0.0 };
        }
    }
    let mut out = vec![0.0; vectors[0].len()];
    for (wi, v) in w.iter().zip(vectors) {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += wi * x);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformityStats {
    pub min: f64,
    pub max: f64,
    /// `max_c |o_c - t_c|`.
    pub max_deviation: f64,
    /// Shannon entropy of the output in nats.
    pub entropy: f64,
}

impl fmt::Display for UniformityStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "min={:.6} max={:.6} max_deviation={:.6} entropy={:.6}",
            self.min, self.max, self.max_deviation, self.entropy
        )
    }
}

/// Statistics of a probability vector against a target.
pub fn uniformity_stats(o: &[f64], target: &[f64]) -> Result<UniformityStats> {
    check_lengths(o, target)?;
    Ok(UniformityStats {
        min: o.iter().copied().fold(f64::INFINITY, f64::min),
        max: o.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        max_deviation: max_deviation(o, target),
        entropy: -o
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>(),
    })
}

/// Feeds `baseline` to the model once and summarizes its output against the
/// target (uniform when `None`).
pub fn uniformity_report(
    model: &Model,
    baseline: &Tensor,
    target: Option<&[f64]>,
) -> Result<UniformityStats> {
    let target = resolve_target(model, target)?;
    let o = model.predict(baseline)?;
    uniformity_stats(o.data(), &target)
}

#[cfg(test)]
mod tests {
    use super::*;

    const U4: [f64; 4] = [0.25; 4];

    #[test]
    fn identical_vectors_have_zero_loss() {
        let o = [0.2, 0.3, 0.5];
        for kind in [OutputLoss::Mse, OutputLoss::MaxAbs, OutputLoss::MaxSigned] {
            assert_eq!(loss_out(kind, &o, &o).unwrap(), 0.0);
        }
    }

    #[test]
    fn max_abs_example() {
        let l = loss_out(OutputLoss::MaxAbs, &[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert_eq!(l, 0.5);
    }

    #[test]
    fn signed_max_can_miss_negative_deviation() {
        // deviations are (-0.5, +0.5): both readings agree here
        assert_eq!(
            loss_out(OutputLoss::MaxSigned, &[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            0.5
        );
        // deviations (+0.1, -0.1, 0): signed reading reports 0.1, as does abs
        let o = [0.4, 0.2, 0.4];
        let t = [0.3, 0.3, 0.4];
        assert!((loss_out(OutputLoss::MaxSigned, &o, &t).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn uniform_crossentropy_is_ln_n() {
        let l = loss_out(OutputLoss::CategoricalCrossentropy, &U4, &U4).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-10);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn length_mismatch() {
        assert!(loss_out(OutputLoss::Mse, &[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn composite_endpoints() {
        assert_eq!(composite_loss(1.0, 0.7, 5.0), 0.7);
        assert_eq!(composite_loss(0.0, 0.7, 5.0), 5.0);
        assert!((composite_loss(0.9, 1.0, 10.0) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn max_abs_gradient_picks_lowest_tied_index() {
        let g = loss_out_grad(OutputLoss::MaxAbs, &[0.0, 0.5, 0.5], &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(g, vec![-1.0, 0.0, 0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let o = [0.1, 0.6, 0.3];
        let t = [0.2, 0.3, 0.5];
        for kind in [
            OutputLoss::Mse,
            OutputLoss::CategoricalCrossentropy,
            OutputLoss::MaxAbs,
            OutputLoss::MaxSigned,
        ] {
            let g = loss_out_grad(kind, &o, &t).unwrap();
            for c in 0..3 {
                let h = 1e-6;
                let mut p = o;
                let mut m = o;
                p[c] += h;
                m[c] -= h;
                let fd =
                    (loss_out(kind, &p, &t).unwrap() - loss_out(kind, &m, &t).unwrap()) / (2.0 * h);
                assert!((fd - g[c]).abs() < 1e-6, "{kind} c={c}: {fd} vs {}", g[c]);
            }
        }
    }

    #[test]
    fn uniformity_of_uniform_and_one_hot() {
        let s = uniformity_stats(&U4, &U4).unwrap();
        assert_eq!(s.max_deviation, 0.0);
        assert!((s.entropy - 4f64.ln()).abs() < 1e-15);
        let s = uniformity_stats(&[0.0, 1.0, 0.0, 0.0], &U4).unwrap();
        assert_eq!(s.max_deviation, 0.75);
        assert_eq!(s.entropy, 0.0);
    }

    #[test]
    fn min_norm_of_opposed_pair_is_their_midpoint_projection() {
        let d = min_norm_combination(&[vec![1.0, 1.0], vec![-1.0, 1.0]]);
        assert!(d[0].abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12, "{d:?}");
        let d = min_norm_combination(&[vec![2.0, 0.0], vec![3.0, 0.0]]);
        assert!((d[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn coordinate_subgradients_follow_deviation_order() {
        let g = coordinate_subgradients(OutputLoss::MaxAbs, &[0.0, 0.3, 0.7], &[1.0 / 3.0; 3]);
        assert_eq!(g[0], vec![0.0, 0.0, 1.0]);
        assert_eq!(g[1], vec![-1.0, 0.0, 0.0]);
        assert_eq!(g[2], vec![0.0, -1.0, 0.0]);
    }

    #[test]
    fn loss_kinds_parse() {
        for k in ["mse", "cce", "maxabs", "maxsigned"] {
            assert_eq!(k.parse::<OutputLoss>().unwrap().to_string(), k);
        }
        assert!("huber".parse::<OutputLoss>().is_err());
    }
}
