//! Integrated Gradients, Grad-CAM and RSI-Grad-CAM, plus heatmap rendering.
//!
//! Every interpolation sweep uses right-endpoint steps `alpha_l = l / m`,
//! `l = 1..=m`. The per-step forward/backward passes are independent and may
//! run on a thread pool, but their results are always folded in ascending
//! `l`, and within a step over units in row-major `(i, j, k)` order, so the
//! thread count never changes a result bit.

mod cam;
mod ig;
mod path;
mod render;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Target;

pub use cam::{
    grad_cam, gradcam_weights, heatmap, rsi_grad_cam, rsi_trace, rsi_weights, CamResult, RsiTrace,
};
pub use ig::{completeness_gap, completeness_gap_of, integrated_gradients, AttributionMap};
pub use path::InterpolationPath;
pub use render::{
    colorize, ig_saliency, normalize, render, upsample_bilinear, Rendered, DEFAULT_ALPHA,
};

/// Default number of interpolation steps.
pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    IntegratedGradients,
    GradCam,
    RsiGradCam,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::IntegratedGradients => "ig",
            Method::GradCam => "grad-cam",
            Method::RsiGradCam => "rsi-grad-cam",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ig" => Ok(Method::IntegratedGradients),
            "grad-cam" => Ok(Method::GradCam),
            "rsi-grad-cam" => Ok(Method::RsiGradCam),
            _ => Err(Error::InvalidArgument(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttributionOptions {
    pub target: Target,
    /// Worker threads for the interpolation sweep; 0 and 1 both mean serial.
    pub threads: usize,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        Self {
            target: Target::Logit,
            threads: 1,
        }
    }
}

/// Steps evaluated together before folding when running in parallel.
const CHUNK: usize = 256;

/// Evaluates `eval(l)` for `l = 1..=steps` and folds the results in
/// ascending `l`.
pub(crate) fn sweep<T, A>(
    steps: usize,
    threads: usize,
    init: A,
    eval: impl Fn(usize) -> Result<T> + Sync,
    mut fold: impl FnMut(A, usize, T) -> A,
) -> Result<A>
where
    T: Send,
{
    let mut acc = init;
    if threads <= 1 {
        for l in 1..=steps {
            acc = fold(acc, l, eval(l)?);
        }
        return Ok(acc);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut start = 1;
    while start <= steps {
        let end = (start + CHUNK - 1).min(steps);
        let chunk: Vec<T> = pool.install(|| {
            (start..=end)
                .into_par_iter()
                .map(&eval)
                .collect::<Result<Vec<T>>>()
        })?;
        for (l, t) in (start..=end).zip(chunk) {
            acc = fold(acc, l, t);
        }
        start = end + 1;
    }
    Ok(acc)
}

pub(crate) fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "step count m must be at least 1".into(),
        ));
    }
    Ok(())
}
