//! The `rsi-attrib` command line.
//!
//! Exit codes: 0 on success, 1 when a command fails at run time, 2 for usage
//! and configuration errors. Every command prints its results as a single
//! `key=value` line (the demo prints one line per row).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::attribution::{
    self, ig_saliency, render, AttributionOptions, Method, DEFAULT_ALPHA, DEFAULT_STEPS,
};
use crate::baseline::{optimize_baseline, uniformity_report, BaselineOptConfig, OutputLoss};
use crate::error::Error;
use crate::io::{self, parse_kv, parse_value};
use crate::model::{
    build_model, shapes3, train, LayerSelector, LayerSpec, Model, ModelConfig, Target, TrainConfig,
};
use crate::tensor::Tensor;

pub const THREADS_VAR: &str = "RSI_ATTRIB_THREADS";

/// Samples per class in the synthetic training set unless configured.
pub const DEFAULT_PER_CLASS: usize = 60;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "rsi-attrib",
    version,
    about = "Gradient attribution for a small CNN"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy CNN on a synthetic dataset and save it.
    Train(TrainArgs),
    /// Attribute a class score to an input and render the result.
    Attribute(AttributeArgs),
    /// Optimize a baseline toward a uniform output.
    Baseline(BaselineArgs),
    /// Print the saturating-unit example: plain gradient vs integrated gradients.
    DemoVanishing(DemoArgs),
    /// Print output uniformity statistics for an input.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Dataset {
    Shapes3,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "shapes3")]
    pub synthetic: Dataset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key=value file: learning_rate, epochs, batch_size, per_class, layers.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Netpbm image or tensor file.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "rsi-grad-cam")]
    pub method: Method,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Defaults to the predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Layer index or name; CAM methods only. Defaults to the last feature-map layer.
    #[arg(long)]
    pub layer: Option<LayerSelector>,
    /// `black` or a tensor/image file.
    #[arg(long, default_value = "black")]
    pub baseline: String,
    #[arg(long, default_value = "logit")]
    pub target: Target,
    /// Output prefix for `.raw.rsat`, `.heatmap.pgm` and `.overlay.ppm`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `black` or a tensor/image file.
    #[arg(long, default_value = "black")]
    pub b0: String,
    #[arg(long, default_value_t = 0.9)]
    pub lambda: f64,
    #[arg(long, default_value = "maxabs")]
    pub loss: OutputLoss,
    #[arg(long, default_value_t = BaselineOptConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = BaselineOptConfig::default().max_iters)]
    pub iters: usize,
    /// Baseline tensor file; the text report goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Report path, `<out>.report.txt` by default.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Also save the demo network as a model file.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    /// Also save the input x = 2 as a tensor file.
    #[arg(long)]
    pub save_input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `black` or a tensor/image file.
    #[arg(long, default_value = "black")]
    pub image: String,
    /// Comma-separated target distribution; uniform by default.
    #[arg(long)]
    pub target: Option<String>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    match execute(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Attribute(a) => cmd_attribute(&a, out),
        Command::Baseline(a) => cmd_baseline(&a, out),
        Command::DemoVanishing(a) => cmd_demo_vanishing(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    }
}

/// Thread count from [`THREADS_VAR`], 1 when unset.
pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                usage(format!(
                    "{THREADS_VAR} must be a positive integer, got `{v}`"
                ))
            }),
    }
}

fn emit(out: &mut dyn Write, line: &str) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::Runtime(e.into()))
}

/// Training settings read from a `--config` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub train: TrainConfig,
    pub per_class: usize,
    pub layers: Option<Vec<LayerSpec>>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            per_class: DEFAULT_PER_CLASS,
            layers: None,
        }
    }
}

pub fn parse_train_settings(text: &str) -> crate::Result<TrainSettings> {
    let mut s = TrainSettings::default();
    for (k, v) in parse_kv(text)? {
        match k.as_str() {
            "learning_rate" => s.train.learning_rate = parse_value(&k, &v)?,
            "epochs" => s.train.epochs = parse_value(&k, &v)?,
            "batch_size" => s.train.batch_size = parse_value(&k, &v)?,
            "per_class" => s.per_class = parse_value(&k, &v)?,
            "layers" => {
                s.layers = Some(
                    v.split(',')
                        .map(|l| l.parse())
                        .collect::<crate::Result<Vec<_>>>()
                        .map_err(|e| Error::Config {
                            key: k.clone(),
                            msg: e.to_string(),
                        })?,
                )
            }
            _ => {
                return Err(Error::Config {
                    key: k,
                    msg: "unknown key".into(),
                })
            }
        }
    }
    let bad = |key: &str, msg: &str| Error::Config {
        key: key.into(),
        msg: msg.into(),
    };
    if !(s.train.learning_rate >= 0.0 && s.train.learning_rate.is_finite()) {
        return Err(bad("learning_rate", "must be finite and non-negative"));
    }
    if s.train.batch_size == 0 {
        return Err(bad("batch_size", "must be positive"));
    }
    if s.per_class == 0 {
        return Err(bad("per_class", "must be positive"));
    }
    Ok(s)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let settings = match &a.config {
        None => TrainSettings::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            parse_train_settings(&text).map_err(usage)?
        }
    };
    let mut config = ModelConfig::shapes3(a.seed);
    if let Some(layers) = &settings.layers {
        config.layers = layers.clone();
    }
    let mut model = build_model(config).map_err(|e| {
        usage(Error::Config {
            key: "layers".into(),
            msg: e.to_string(),
        })
    })?;
    let data = match a.synthetic {
        Dataset::Shapes3 => shapes3(a.seed, settings.per_class),
    };
    let report = train(
        &mut model,
        &data,
        &TrainConfig {
            seed: a.seed,
            ..settings.train
        },
    )?;
    io::save_model(&a.out, &model)?;
    emit(
        out,
        &format!(
            "loss={:.6} accuracy={:.6} epochs={} samples={}",
            report.epoch_loss.last().copied().unwrap_or(f64::NAN),
            report.accuracy,
            report.epoch_loss.len(),
            data.len()
        ),
    )
}

fn load_or_black(spec: &str, model: &Model) -> CliResult<Tensor> {
    let t = if spec == "black" {
        Tensor::zeros(model.input_shape())
    } else {
        io::load_input(spec)?
    };
    model.check_input(&t).map_err(usage)?;
    Ok(t)
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_attribute(a: &AttributeArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.method == Method::IntegratedGradients && a.layer.is_some() {
        return Err(usage("--layer applies to grad-cam and rsi-grad-cam only"));
    }
    if a.steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let threads = threads_from_env()?;
    let model = io::load_model(&a.model)?;
    model.score_node(a.target).map_err(usage)?;
    let input = io::load_input(&a.image)?;
    model.check_input(&input).map_err(usage)?;
    let baseline = load_or_black(&a.baseline, &model)?;
    let class = match a.class {
        Some(c) => {
            model.check_class(c).map_err(usage)?;
            c
        }
        None => model.predict(&input)?.argmax(),
    };
    let opts = AttributionOptions {
        target: a.target,
        threads,
    };
    let score = model.score(&input, class, a.target)?;

    let (raw, saliency, extra) = match a.method {
        Method::IntegratedGradients => {
            let map = attribution::integrated_gradients(
                &model, &input, &baseline, a.steps, class, &opts,
            )?;
            let gap = attribution::completeness_gap_of(&model, &map, &input, &baseline, &opts)?;
            let extra = format!(" steps={} total={} gap={gap:e}", a.steps, map.total());
            (map.values.clone(), ig_saliency(&map.values), extra)
        }
        Method::GradCam | Method::RsiGradCam => {
            let selector = match &a.layer {
                Some(s) => s.clone(),
                None => {
                    let l = model
                        .last_feature_layer()
                        .ok_or_else(|| usage("model has no feature-map layer"))?;
                    LayerSelector::Name(l.name.clone())
                }
            };
            let name = model.feature_layer(&selector).map_err(usage)?.name.clone();
            let cam = if a.method == Method::GradCam {
                attribution::grad_cam(&model, &selector, &input, class, &opts)?
            } else {
                attribution::rsi_grad_cam(
                    &model, &selector, &input, &baseline, a.steps, class, &opts,
                )?
            };
            let extra = format!(" steps={} layer={name}", cam.steps);
            (cam.heatmap.clone(), cam.heatmap, extra)
        }
    };

    io::save_tensor(suffixed(&a.out, ".raw.rsat"), &raw)?;
    // non-image inputs (the scalar demo network) get only the raw map
    if input.rank() == 3 {
        let r = render(&saliency, &input, DEFAULT_ALPHA)?;
        io::save_image(suffixed(&a.out, ".heatmap.pgm"), &r.normalized)?;
        io::save_image(suffixed(&a.out, ".overlay.ppm"), &r.overlay)?;
    }
    emit(
        out,
        &format!("method={} class={class} score={score}{extra}", a.method),
    )
}

fn cmd_baseline(a: &BaselineArgs, out: &mut dyn Write) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.lambda) {
        return Err(usage(format!(
            "--lambda must lie in [0, 1], got {}",
            a.lambda
        )));
    }
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(usage(format!("--lr must be positive, got {}", a.lr)));
    }
    let model = io::load_model(&a.model)?;
    if !model.has_softmax() {
        return Err(usage(
            "baseline optimization needs a model ending in softmax",
        ));
    }
    let b0 = load_or_black(&a.b0, &model)?;
    let report = optimize_baseline(
        &model,
        &b0,
        &BaselineOptConfig {
            lambda: a.lambda,
            loss: a.loss,
            learning_rate: a.lr,
            max_iters: a.iters,
            ..Default::default()
        },
    )?;
    io::save_tensor(&a.out, &report.baseline)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| suffixed(&a.out, ".report.txt"));
    fs::write(&report_path, report.to_string()).map_err(Error::from)?;
    emit(
        out,
        &format!(
            "max_deviation_before={:.6} max_deviation_after={:.6} drift={:.6e} iterations={} stop={}",
            report.initial_max_deviation,
            report.final_max_deviation,
            report.drift,
            report.iterations,
            report.stop
        ),
    )
}

/// Steps printed by the vanishing-gradient demo.
pub const DEMO_STEPS: [usize; 4] = [10, 50, 100, 1000];

fn cmd_demo_vanishing(a: &DemoArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = build_model(ModelConfig::vanishing())?;
    let x = Tensor::scalar(2.0);
    let b = Tensor::scalar(0.0);
    let opts = AttributionOptions::default();
    let (_, grads) = model.gradients(&x, 0, Target::Logit, &[model.input_node()])?;
    let g = grads
        .node(model.input_node())
        .expect("input retained")
        .data()[0];
    // the reverse sweep through scale(-1) yields -0
    let g = if g == 0.0 { 0.0 } else { g };
    emit(out, &format!("x=2 gradient={g}"))?;
    for m in DEMO_STEPS {
        let ig = attribution::integrated_gradients(&model, &x, &b, m, 0, &opts)?.total();
        emit(
            out,
            &format!("steps={m} ig={ig} error={:e}", (1.0 - ig).abs()),
        )?;
    }
    if let Some(p) = &a.save_model {
        io::save_model(p, &model)?;
    }
    if let Some(p) = &a.save_input {
        io::save_tensor(p, &x)?;
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = io::load_model(&a.model)?;
    if !model.has_softmax() {
        return Err(usage("report needs a model ending in softmax"));
    }
    let image = load_or_black(&a.image, &model)?;
    let target = match &a.target {
        None => None,
        Some(s) => Some(
            s.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| usage(format!("cannot parse --target `{s}`")))?,
        ),
    };
    let stats = uniformity_report(&model, &image, target.as_deref()).map_err(|e| match e {
        Error::InvalidArgument(_) => usage(e),
        e => e.into(),
    })?;
    let class = model.predict(&image)?.argmax();
    emit(out, &format!("{stats} class={class}"))
}
