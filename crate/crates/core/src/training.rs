//! Contrastive-divergence training of the prior on graph patches, and a
//! histogram KLD diagnostic.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GsrError, Result};
use crate::graph::{fmt_f64, Graph};
use crate::prior::{grad_params_log_density, langevin_chain, BcnnModel, ParamGradient, PriorParams};
use crate::signal::{derive_seed, rng_from, Patch, PatchSampler, Signal};

/// Consecutive aborted updates after which training gives up.
pub const MAX_CONSECUTIVE_ABORTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub cd_steps: usize,
    pub langevin_step: f64,
    /// Patches per `cd_update`; an iteration's patches are split into
    /// consecutive batches of this size.
    pub batch_size: usize,
    pub max_iter: usize,
    pub conv_tol: f64,
    pub patch_size: usize,
    pub patches_per_iter: usize,
    /// Rescale training data to unit RMS and fold the scale back into the
    /// filters afterwards.
    pub standardize: bool,
    /// Record a KLD estimate every this many iterations (0 disables).
    pub kld_every: usize,
    pub logit_update: LogitUpdate,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            cd_steps: 5,
            langevin_step: 0.02,
            batch_size: 64,
            max_iter: 500,
            conv_tol: 1e-4,
            patch_size: 5,
            patches_per_iter: 64,
            standardize: false,
            kld_every: 0,
            logit_update: LogitUpdate::Contrastive,
            seed: 0,
        }
    }
}

/// Model-side term of the mixture-logit gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitUpdate {
    /// Responsibilities at the Langevin samples, like the filters.
    #[default]
    Contrastive,
    /// `E_model[r - pi] = 0`, exact when each filter output is distributed
    /// as its own mixture. Unlike short chains, this still sees components
    /// the sampler never reaches, so the step is `eta (mean r_data - pi)`.
    Marginal,
}

impl TrainConfig {
    /// Settings used by the experiment runners: standardised data, longer
    /// chains with a larger step, and marginal logit updates.
    pub fn experiment() -> Self {
        TrainConfig {
            cd_steps: 20,
            langevin_step: 0.05,
            max_iter: 1000,
            standardize: true,
            logit_update: LogitUpdate::Marginal,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(invalid(format!("learning rate {} outside (0, 1]", self.learning_rate)));
        }
        if !(self.langevin_step > 0.0) || !self.langevin_step.is_finite() {
            return Err(invalid("Langevin step must be positive"));
        }
        if self.cd_steps == 0 || self.batch_size == 0 || self.patch_size == 0 || self.patches_per_iter == 0 {
            return Err(invalid("cd_steps, batch_size, patch_size and patches_per_iter must be at least 1"));
        }
        if !(self.conv_tol >= 0.0) {
            return Err(invalid("convergence tolerance must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDiagnostics {
    /// `||theta' - theta||_inf`
    pub param_delta: f64,
    pub aborted: bool,
    pub warning: Option<String>,
}

/// Batch-mean parameter gradient at each patch.
fn mean_param_gradient(theta: &PriorParams, patches: &[Patch], signals: &[&[f64]]) -> Result<ParamGradient> {
    let grads = patches
        .par_iter()
        .zip(signals.par_iter())
        .map(|(p, x)| grad_params_log_density(theta, &p.graph, x))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = ParamGradient::zeros_like(theta);
    let w = 1.0 / grads.len() as f64;
    for g in &grads {
        mean.add_scaled(g, w);
    }
    Ok(mean)
}

/// `theta - eta (g_model - g_data)` from explicit data and model samples.
pub fn cd_update_with_samples(
    theta: &PriorParams,
    data: &[Patch],
    model_samples: &[Signal],
    learning_rate: f64,
) -> Result<(PriorParams, UpdateDiagnostics)> {
    cd_step(theta, data, model_samples, learning_rate, LogitUpdate::Contrastive)
}

fn cd_step(
    theta: &PriorParams,
    data: &[Patch],
    model_samples: &[Signal],
    learning_rate: f64,
    logits: LogitUpdate,
) -> Result<(PriorParams, UpdateDiagnostics)> {
    if data.is_empty() {
        return Err(invalid("empty CD batch"));
    }
    if model_samples.len() != data.len() {
        return Err(GsrError::DimensionMismatch { expected: data.len(), got: model_samples.len() });
    }
    if !(learning_rate > 0.0 && learning_rate <= 1.0) {
        return Err(invalid(format!("learning rate {learning_rate} outside (0, 1]")));
    }
    let size = data[0].signal.len();
    if data.iter().any(|p| p.signal.len() != size) {
        return Err(invalid("CD batch mixes patch sizes"));
    }
    let data_x: Vec<&[f64]> = data.iter().map(|p| p.signal.as_slice()).collect();
    let model_x: Vec<&[f64]> = model_samples.iter().map(|s| s.as_slice()).collect();
    let g_data = mean_param_gradient(theta, data, &data_x)?;
    let mut step = mean_param_gradient(theta, data, &model_x)?;
    if logits == LogitUpdate::Marginal {
        step.logits.iter_mut().flatten().for_each(|v| *v = 0.0);
    }
    step.add_scaled(&g_data, -1.0);
    if !step.is_finite() {
        return Ok((theta.clone(), aborted("non-finite CD gradient")));
    }
    let next = theta.apply_step(&step, -learning_rate)?;
    let param_delta = next.max_abs_diff(theta);
    Ok((next, UpdateDiagnostics { param_delta, aborted: false, warning: None }))
}

fn aborted(msg: &str) -> UpdateDiagnostics {
    UpdateDiagnostics { param_delta: 0.0, aborted: true, warning: Some(msg.to_string()) }
}

/// One CD-k step: model samples are `k` Langevin steps from each data patch.
///
/// A diverging chain aborts the update and returns `theta` unchanged.
pub fn cd_update(
    theta: &PriorParams,
    data: &[Patch],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(PriorParams, UpdateDiagnostics)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("empty CD batch"));
    }
    let chains: Vec<Result<Signal>> = data
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = rng_from(derive_seed(seed, &[i as u64]));
            langevin_chain(theta, &p.graph, &p.signal, cfg.cd_steps, cfg.langevin_step, &mut rng)
        })
        .collect();
    let mut samples = Vec::with_capacity(chains.len());
    for c in chains {
        match c {
            Ok(s) => samples.push(s),
            Err(e @ (GsrError::Diverged { .. } | GsrError::NonFinite { .. })) => {
                return Ok((theta.clone(), aborted(&e.to_string())));
            }
            Err(e) => return Err(e),
        }
    }
    match cd_step(theta, data, &samples, cfg.learning_rate, cfg.logit_update) {
        Err(e @ GsrError::NonFinite { .. }) => Ok((theta.clone(), aborted(&e.to_string()))),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub param_delta: f64,
    pub kld_estimate: Option<f64>,
    pub wall_time_ms: Option<f64>,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub params: PriorParams,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// RMS used to standardise the data (1 when disabled).
    pub data_scale: f64,
}

/// Model-specific part of a training run.
pub type SampleSource<'a> = dyn FnMut(&PriorParams, &[Patch], u64) -> Result<Vec<Signal>> + 'a;

/// Trains a fresh prior for `model` on patches of `signals`.
pub fn train_prior(g: &Graph, signals: &[Signal], cfg: &TrainConfig, model: BcnnModel) -> Result<TrainingOutcome> {
    let init = model.init_params(derive_seed(cfg.seed, &[0x1417]))?;
    train_from(g, signals, cfg, init)
}

/// Training loop from an explicit initialisation.
pub fn train_from(g: &Graph, signals: &[Signal], cfg: &TrainConfig, init: PriorParams) -> Result<TrainingOutcome> {
    train_with(g, signals, cfg, init, None)
}

/// Training loop with an optional replacement for the Langevin sampler
/// (used to feed in fixed model samples).
pub fn train_with(
    g: &Graph,
    signals: &[Signal],
    cfg: &TrainConfig,
    init: PriorParams,
    mut model_samples: Option<&mut SampleSource<'_>>,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if signals.is_empty() {
        return Err(invalid("no training signals"));
    }
    let data_scale = if cfg.standardize { rms(signals) } else { 1.0 };
    if !(data_scale > 0.0) || !data_scale.is_finite() {
        return Err(invalid("training signals have zero energy"));
    }
    let scaled: Vec<Signal>;
    let signals = if cfg.standardize {
        scaled = signals.iter().map(|s| s.iter().map(|v| v / data_scale).collect()).collect();
        &scaled
    } else {
        signals
    };
    // Filters are linear in x, so training on x / s is training on x with
    // beta * s; work in the standardised frame throughout.
    let mut theta = init.scale_filters(data_scale)?;
    let patcher = PatchSampler::new(g, cfg.patch_size)?;
    let mut rng = rng_from(derive_seed(cfg.seed, &[0xDA7A]));
    let mut trace = Vec::new();
    let mut converged = false;
    let mut consecutive_aborts = 0;
    let start = Instant::now();
    for t in 1..=cfg.max_iter {
        let patches = patcher.draw(signals, cfg.patches_per_iter, &mut rng)?;
        let before = theta.clone();
        let mut any_abort = false;
        for (b, batch) in patches.chunks(cfg.batch_size).enumerate() {
            let seed = derive_seed(cfg.seed, &[t as u64, b as u64]);
            let (next, diag) = match model_samples.as_mut() {
                Some(source) => match source(&theta, batch, seed) {
                    Ok(samples) => cd_step(&theta, batch, &samples, cfg.learning_rate, cfg.logit_update)?,
                    Err(e) => (theta.clone(), aborted(&e.to_string())),
                },
                None => cd_update(&theta, batch, cfg, seed)?,
            };
            any_abort |= diag.aborted;
            theta = next;
        }
        let delta = theta.scale_filters(1.0 / data_scale)?.max_abs_diff(&before.scale_filters(1.0 / data_scale)?);
        if !delta.is_finite() {
            return Err(GsrError::TrainingFailed(format!("non-finite parameter delta at iteration {t}")));
        }
        consecutive_aborts = if any_abort { consecutive_aborts + 1 } else { 0 };
        let kld_estimate = if cfg.kld_every > 0 && t % cfg.kld_every == 0 {
            let kcfg = KldConfig { patch_size: cfg.patch_size, ..KldConfig::for_training(cfg) };
            Some(estimate_kld(&theta, g, signals, &kcfg, derive_seed(cfg.seed, &[0x41D, t as u64]))?)
        } else {
            None
        };
        trace.push(TraceRow {
            iteration: t,
            param_delta: delta,
            kld_estimate,
            wall_time_ms: Some(start.elapsed().as_secs_f64() * 1e3),
            aborted: any_abort,
        });
        if consecutive_aborts >= MAX_CONSECUTIVE_ABORTS {
            return Err(GsrError::TrainingFailed(format!(
                "{MAX_CONSECUTIVE_ABORTS} consecutive aborted updates ending at iteration {t}"
            )));
        }
        if !any_abort && delta < cfg.conv_tol {
            converged = true;
            break;
        }
    }
    let params = if trace.is_empty() { init } else { theta.scale_filters(1.0 / data_scale)? };
    Ok(TrainingOutcome { params, trace, converged, data_scale })
}

fn rms(signals: &[Signal]) -> f64 {
    let (sum, count) = signals.iter().flatten().fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    (sum / count as f64).sqrt()
}

/// Settings for the histogram KLD diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KldConfig {
    pub samples: usize,
    pub bins: usize,
    pub patch_size: usize,
    pub chain_steps: usize,
    pub step_size: f64,
}

impl Default for KldConfig {
    fn default() -> Self {
        KldConfig::for_training(&TrainConfig::default())
    }
}

impl KldConfig {
    /// Chains ten times as long as the CD chains, same step size.
    pub fn for_training(cfg: &TrainConfig) -> Self {
        KldConfig {
            samples: 1000,
            bins: 20,
            patch_size: cfg.patch_size,
            chain_steps: 10 * cfg.cd_steps,
            step_size: cfg.langevin_step,
        }
    }
}

/// Mean per-coordinate histogram KLD(data || model) between data patches
/// and Langevin samples of the prior started from them.
pub fn estimate_kld(theta: &PriorParams, g: &Graph, data: &[Signal], cfg: &KldConfig, seed: u64) -> Result<f64> {
    if cfg.bins < 2 {
        return Err(invalid("KLD needs at least 2 bins"));
    }
    if cfg.samples < 100 {
        return Err(invalid("KLD needs at least 100 samples"));
    }
    let patcher = PatchSampler::new(g, cfg.patch_size)?;
    let patches = patcher.draw(data, cfg.samples, &mut rng_from(derive_seed(seed, &[1])))?;
    let model = patches
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = rng_from(derive_seed(seed, &[2, i as u64]));
            langevin_chain(theta, &p.graph, &p.signal, cfg.chain_steps, cfg.step_size, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<Signal> = patches.into_iter().map(|p| p.signal).collect();
    kld_from_samples(&data, &model, cfg.bins)
}

/// Mean over coordinates of the discrete KLD between per-coordinate
/// histograms on a shared binning: the data range padded by 10% on each
/// side, model values outside it counted in the edge bins, one pseudo-count
/// per bin.
pub fn kld_from_samples(data: &[Signal], model: &[Signal], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(invalid("KLD needs at least 2 bins"));
    }
    if data.is_empty() || model.is_empty() {
        return Err(invalid("KLD needs samples on both sides"));
    }
    let dim = data[0].len();
    if let Some(bad) = data.iter().chain(model).find(|s| s.len() != dim) {
        return Err(GsrError::DimensionMismatch { expected: dim, got: bad.len() });
    }
    let mut total = 0.0;
    for j in 0..dim {
        let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[j]), hi.max(s[j])));
        let pad = if hi > lo { 0.1 * (hi - lo) } else { 0.5 };
        let (lo, hi) = (lo - pad, hi + pad);
        let width = (hi - lo) / bins as f64;
        let hist = |samples: &[Signal]| {
            let mut h = vec![1.0; bins];
            for s in samples {
                let b = ((s[j] - lo) / width).floor();
                let b = if b.is_nan() { 0 } else { b.clamp(0.0, (bins - 1) as f64) as usize };
                h[b] += 1.0;
            }
            let total: f64 = h.iter().sum();
            h.iter_mut().for_each(|v| *v /= total);
            h
        };
        let p = hist(data);
        let q = hist(model);
        total += p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>();
    }
    Ok((total / dim as f64).max(0.0))
}

/// Writes `iteration,param_delta,kld_estimate,wall_time_ms`. Wall time is
/// left empty unless `timing` is set so that outputs stay reproducible.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow], timing: bool) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iteration,param_delta,kld_estimate,wall_time_ms")?;
    for row in trace {
        let kld = row.kld_estimate.map(fmt_f64).unwrap_or_default();
        let wall = match (timing, row.wall_time_ms) {
            (true, Some(ms)) => format!("{ms:.3}"),
            _ => String::new(),
        };
        writeln!(out, "{},{},{},{}", row.iteration, fmt_f64(row.param_delta), kld, wall)?;
    }
    out.flush()?;
    Ok(())
}
