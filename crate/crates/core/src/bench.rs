//! Experiment runners: hyper-parameter study, recovery benchmark, variance
//! study and plot-data reshaping. Every random draw is seeded from
//! `(cfg.seed, tags...)`, so outputs are reproducible byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, GsrError, Result};
use crate::graph::{build_rbf_graph, fmt_f64, read_coords, Graph};
use crate::prior::{BcnnModel, PriorParams};
use crate::sensor::{ingest_sensor_dataset, IngestConfig};
use crate::signal::{
    add_noise_at_snr, derive_seed, gen_bandlimited_gmrf, gen_ggd_signal, gen_gmm_signal, make_sampling_mask, rng_from,
    GaussianMixture, GeneralizedGamma, Signal,
};
use crate::training::{estimate_kld, train_prior, KldConfig, TrainConfig, TrainingOutcome};
use crate::vb::{gmrf_vb_with_truth, recover_with_truth, GmrfVbConfig, VbConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Gmrf,
    Gmm,
    Ggd,
}

impl Distribution {
    pub const ALL: [Distribution; 3] = [Distribution::Gmrf, Distribution::Gmm, Distribution::Ggd];

    pub fn name(self) -> &'static str {
        match self {
            Distribution::Gmrf => "gmrf",
            Distribution::Gmm => "gmm",
            Distribution::Ggd => "ggd",
        }
    }
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Random geometric graph, or fixed coordinates read from `coords`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSpec {
    pub n: usize,
    pub kernel_width: f64,
    pub threshold: f64,
    pub coords: Option<PathBuf>,
}

impl Default for GraphSpec {
    fn default() -> Self {
        GraphSpec { n: 64, kernel_width: 0.5, threshold: 0.75, coords: None }
    }
}

/// Sensor log used instead of synthetic signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub readings: PathBuf,
    pub coords: PathBuf,
    #[serde(default)]
    pub ingest: IngestConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub distribution: Distribution,
    pub graph: GraphSpec,
    /// When set, the graph and the signals come from this sensor log.
    pub dataset: Option<DatasetSpec>,
    /// Bandwidth of the GMRF signals.
    pub bandwidth: usize,
    pub gmm: GaussianMixture,
    pub ggd: GeneralizedGamma,
    pub table1_model: BcnnModel,
    pub snr_db: Vec<f64>,
    pub sampling_ratios: Vec<f64>,
    pub k_train: usize,
    pub trials: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub vb: VbConfig,
    pub gmrf_vb: GmrfVbConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            distribution: Distribution::Gmrf,
            graph: GraphSpec::default(),
            dataset: None,
            bandwidth: 25,
            gmm: GaussianMixture::default(),
            ggd: GeneralizedGamma::default(),
            table1_model: BcnnModel::Bcnn3,
            snr_db: vec![10.0, 20.0],
            sampling_ratios: vec![0.3, 0.5, 0.7, 0.9],
            k_train: 50,
            trials: 50,
            seed: 0,
            out: PathBuf::from("results"),
            train: TrainConfig::experiment(),
            vb: VbConfig::default(),
            gmrf_vb: GmrfVbConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        if self.k_train == 0 {
            return Err(invalid("k_train must be at least 1"));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(invalid("snr_db needs at least one finite entry"));
        }
        if self.sampling_ratios.is_empty() || self.sampling_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(invalid("sampling ratios must lie in (0, 1]"));
        }
        if self.dataset.is_none() {
            if self.graph.n < 2 {
                return Err(invalid("graph needs at least 2 vertices"));
            }
            if self.bandwidth == 0 || self.bandwidth > self.graph.n {
                return Err(invalid(format!("bandwidth {} outside 1..={}", self.bandwidth, self.graph.n)));
            }
        }
        self.gmm.validate()?;
        self.train.validate()
    }

    fn train_config(&self, tags: &[u64]) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, tags), ..self.train.clone() }
    }

    /// Trains `model`, retrying with a fresh training seed when CD fails
    /// (a rare early gradient blow-up on a narrow component). The first
    /// attempt uses `tags` unchanged.
    fn train(&self, g: &Graph, data: &[Signal], tags: &[u64], model: BcnnModel) -> Result<TrainingOutcome> {
        let mut last = None;
        for attempt in 0..TRAIN_ATTEMPTS {
            let mut t = tags.to_vec();
            if attempt > 0 {
                t.extend([0x2E7, attempt]);
            }
            match train_prior(g, data, &self.train_config(&t), model) {
                Err(e @ GsrError::TrainingFailed(_)) => last = Some(e),
                other => return other,
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Training runs per prior before a failure is reported.
pub const TRAIN_ATTEMPTS: u64 = 3;

/// `(1/K) sum_k |x_hat_k - x_k|^2 / |x_k|^2`.
pub fn nmse(estimates: &[Signal], truths: &[Signal]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(GsrError::DimensionMismatch { expected: truths.len(), got: estimates.len() });
    }
    if truths.is_empty() {
        return Err(invalid("nmse needs at least one signal"));
    }
    let mut total = 0.0;
    for (e, t) in estimates.iter().zip(truths) {
        if e.len() != t.len() {
            return Err(GsrError::DimensionMismatch { expected: t.len(), got: e.len() });
        }
        let energy: f64 = t.iter().map(|v| v * v).sum();
        if energy == 0.0 {
            return Err(invalid("nmse is undefined for an all-zero truth"));
        }
        total += e.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / energy;
    }
    Ok(total / truths.len() as f64)
}

/// Graph and signal source shared by the runners.
struct Setup {
    graph: Arc<Graph>,
    label: String,
    /// Held-out sensor signals; synthetic runs draw fresh test signals.
    pool: Option<Vec<Signal>>,
    sensor_train: Option<Vec<Signal>>,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    if let Some(ds) = &cfg.dataset {
        let data = ingest_sensor_dataset(&ds.readings, &ds.coords, &ds.ingest)?;
        if data.held_out.is_empty() {
            return Err(invalid("sensor dataset has no complete timestamp left for testing"));
        }
        return Ok(Setup {
            graph: Arc::new(data.graph),
            label: "sensor".into(),
            pool: Some(data.held_out),
            sensor_train: Some(data.signals),
        });
    }
    let coords = match &cfg.graph.coords {
        Some(path) => read_coords(path)?,
        None => {
            let mut rng = rng_from(derive_seed(cfg.seed, &[1]));
            (0..cfg.graph.n).map(|_| [rng.random(), rng.random()]).collect()
        }
    };
    let graph = build_rbf_graph(&coords, cfg.graph.kernel_width, cfg.graph.threshold, true)?;
    Ok(Setup { graph: Arc::new(graph), label: cfg.distribution.name().into(), pool: None, sensor_train: None })
}

/// Builds the experiment graph (random or from coordinates, or the sensor
/// graph when a dataset is configured).
pub fn experiment_graph(cfg: &ExperimentConfig) -> Result<Arc<Graph>> {
    Ok(setup(cfg)?.graph)
}

fn gen_signals(cfg: &ExperimentConfig, dist: Distribution, g: &Graph, count: usize, seed: u64) -> Result<Vec<Signal>> {
    match dist {
        Distribution::Gmrf => gen_bandlimited_gmrf(g, cfg.bandwidth, count, seed),
        Distribution::Gmm => gen_gmm_signal(&cfg.gmm, g.len(), count, seed),
        Distribution::Ggd => gen_ggd_signal(&cfg.ggd, g.len(), count, seed),
    }
}

impl Setup {
    fn training_signals(&self, cfg: &ExperimentConfig, tags: &[u64]) -> Result<Vec<Signal>> {
        match &self.sensor_train {
            Some(s) => Ok(s.clone()),
            None => gen_signals(cfg, cfg.distribution, &self.graph, cfg.k_train, derive_seed(cfg.seed, tags)),
        }
    }

    fn test_signal(&self, cfg: &ExperimentConfig, trial: usize) -> Result<Signal> {
        match &self.pool {
            Some(pool) => Ok(pool[trial % pool.len()].clone()),
            None => Ok(gen_signals(cfg, cfg.distribution, &self.graph, 1, derive_seed(cfg.seed, &[3, trial as u64]))?.remove(0)),
        }
    }
}

fn observed_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

/// Training run of the configured model: graph, training signals and outcome.
pub fn train_experiment(cfg: &ExperimentConfig) -> Result<(Arc<Graph>, Vec<Signal>, TrainingOutcome)> {
    let s = setup(cfg)?;
    let data = s.training_signals(cfg, &[2])?;
    let outcome = cfg.train(&s.graph, &data, &[2, 1], cfg.table1_model)?;
    Ok((s.graph, data, outcome))
}

/// Trains the configured model on the configured training signals.
pub fn train_experiment_prior(cfg: &ExperimentConfig) -> Result<(Arc<Graph>, PriorParams)> {
    let (g, _, outcome) = train_experiment(cfg)?;
    Ok((g, outcome.params))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HyperRow {
    pub model: BcnnModel,
    pub distribution: Distribution,
    /// NaN when training failed.
    pub kld: f64,
}

/// Trains each model configuration on GMRF and GMM signals and scores it
/// with the KLD diagnostic on held-out signals of the same family.
pub fn run_hyperparam_study(cfg: &ExperimentConfig) -> Result<Vec<HyperRow>> {
    let s = setup(cfg)?;
    if s.sensor_train.is_some() {
        return Err(invalid("the hyper-parameter study runs on synthetic signals only"));
    }
    let g = &s.graph;
    let mut rows = Vec::new();
    for model in BcnnModel::ALL {
        for (d, dist) in [Distribution::Gmrf, Distribution::Gmm].into_iter().enumerate() {
            let train = gen_signals(cfg, dist, g, cfg.k_train, derive_seed(cfg.seed, &[6, d as u64]))?;
            let held = gen_signals(cfg, dist, g, cfg.k_train, derive_seed(cfg.seed, &[7, d as u64]))?;
            let tags = [8, d as u64, model.filter_count() as u64, model as u64];
            let tcfg = cfg.train_config(&tags);
            let kld = cfg.train(g, &train, &tags, model).and_then(|o| {
                let kcfg = KldConfig { step_size: tcfg.langevin_step * o.data_scale, ..KldConfig::for_training(&tcfg) };
                estimate_kld(&o.params, g, &held, &kcfg, derive_seed(cfg.seed, &[9, d as u64, model as u64]))
            });
            rows.push(HyperRow { model, distribution: dist, kld: kld.unwrap_or(f64::NAN) });
        }
    }
    Ok(rows)
}

pub fn write_hyperparam_csv(path: impl AsRef<Path>, rows: &[HyperRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "distribution", "kld"])?;
    for r in rows {
        w.write_record([r.model.name(), r.distribution.name(), &fmt_f64(r.kld)])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BcnnGsr,
    GmrfVb,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::BcnnGsr => "bcnn_gsr",
            Method::GmrfVb => "gmrf_vb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub distribution: String,
    pub snr: f64,
    pub sampling_ratio: f64,
    pub method: Method,
    pub nmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub distribution: String,
    pub snr: f64,
    pub sampling_ratio: f64,
    pub trial: usize,
    pub method: Method,
    pub nmse: f64,
    /// Hash of the (signal, mask, observation) realization both methods saw.
    pub realization: String,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub summary: Vec<SummaryRow>,
    pub trials: Vec<TrialRow>,
    pub prior: PriorParams,
}

fn realization_hash(x: &[f64], selected: &[usize], y: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in x.iter().chain(y) {
        h.update(v.to_le_bytes());
    }
    for i in selected {
        h.update((*i as u64).to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn single_nmse(x_hat: &[f64], x: &[f64]) -> Result<f64> {
    nmse(&[x_hat.to_vec()], &[x.to_vec()])
}

/// NMSE of both methods per (snr, ratio) cell, averaged over paired trials.
/// The signal of trial `t` is shared by all cells; masks depend on the
/// ratio and noise on the (snr, ratio) pair.
pub fn run_recovery_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkOutput> {
    let s = setup(cfg)?;
    let g = &s.graph;
    let data = s.training_signals(cfg, &[2])?;
    let prior = cfg.train(g, &data, &[2, 1], cfg.table1_model)?.params;
    let n = g.len();
    let mut summary = Vec::new();
    let mut trials = Vec::new();
    for (si, &snr) in cfg.snr_db.iter().enumerate() {
        for (ri, &ratio) in cfg.sampling_ratios.iter().enumerate() {
            let m = observed_count(n, ratio);
            let rows = (0..cfg.trials)
                .into_par_iter()
                .map(|t| -> Result<[TrialRow; 2]> {
                    let x = s.test_signal(cfg, t)?;
                    let mask = make_sampling_mask(n, m, derive_seed(cfg.seed, &[4, ri as u64, t as u64]))?;
                    let obs = add_noise_at_snr(&mask.observe(&x), snr, derive_seed(cfg.seed, &[5, si as u64, ri as u64, t as u64]))?;
                    let hash = realization_hash(&x, mask.selected(), &obs.y);
                    let bcnn = recover_with_truth(&prior, g, &mask, &obs.y, &cfg.vb, None)?;
                    let base = gmrf_vb_with_truth(g, &mask, &obs.y, &cfg.gmrf_vb, None)?;
                    let row = |method, x_hat: &[f64]| -> Result<TrialRow> {
                        Ok(TrialRow {
                            distribution: s.label.clone(),
                            snr,
                            sampling_ratio: ratio,
                            trial: t,
                            method,
                            nmse: single_nmse(x_hat, &x)?,
                            realization: hash.clone(),
                        })
                    };
                    Ok([row(Method::BcnnGsr, &bcnn.x_hat)?, row(Method::GmrfVb, &base.x_hat)?])
                })
                .collect::<Result<Vec<_>>>()?;
            for method in [Method::BcnnGsr, Method::GmrfVb] {
                let mean = rows.iter().flatten().filter(|r| r.method == method).map(|r| r.nmse).sum::<f64>() / cfg.trials as f64;
                summary.push(SummaryRow { distribution: s.label.clone(), snr, sampling_ratio: ratio, method, nmse: mean });
            }
            trials.extend(rows.into_iter().flatten());
        }
    }
    Ok(BenchmarkOutput { summary, trials, prior })
}

pub fn write_benchmark_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["distribution", "snr", "sampling_ratio", "method", "nmse"])?;
    for r in rows {
        w.write_record([&r.distribution, &r.snr.to_string(), &r.sampling_ratio.to_string(), r.method.name(), &fmt_f64(r.nmse)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trials_csv(path: impl AsRef<Path>, rows: &[TrialRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["distribution", "snr", "sampling_ratio", "trial", "method", "nmse", "realization"])?;
    for r in rows {
        w.write_record([
            &r.distribution,
            &r.snr.to_string(),
            &r.sampling_ratio.to_string(),
            &r.trial.to_string(),
            r.method.name(),
            &fmt_f64(r.nmse),
            &r.realization,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One recovery of test signal `trial` at the first configured SNR and
/// sampling ratio, by both methods.
#[derive(Debug, Clone)]
pub struct SingleRecovery {
    pub prior: PriorParams,
    pub truth: Signal,
    pub mask: crate::signal::SamplingMask,
    pub y: Vec<f64>,
    pub bcnn: crate::vb::Recovery,
    pub baseline: crate::vb::GmrfRecovery,
}

/// Trains the prior unless one is given, then recovers one test signal.
pub fn run_single_recovery(cfg: &ExperimentConfig, prior: Option<PriorParams>, trial: usize) -> Result<SingleRecovery> {
    let s = setup(cfg)?;
    let g = &s.graph;
    let prior = match prior {
        Some(p) => p,
        None => {
            let data = s.training_signals(cfg, &[2])?;
            cfg.train(g, &data, &[2, 1], cfg.table1_model)?.params
        }
    };
    let n = g.len();
    let truth = s.test_signal(cfg, trial)?;
    let mask = make_sampling_mask(n, observed_count(n, cfg.sampling_ratios[0]), derive_seed(cfg.seed, &[4, 0, trial as u64]))?;
    let obs = add_noise_at_snr(&mask.observe(&truth), cfg.snr_db[0], derive_seed(cfg.seed, &[5, 0, 0, trial as u64]))?;
    let bcnn = recover_with_truth(&prior, g, &mask, &obs.y, &cfg.vb, Some(&truth))?;
    let baseline = gmrf_vb_with_truth(g, &mask, &obs.y, &cfg.gmrf_vb, Some(&truth))?;
    Ok(SingleRecovery { prior, truth, mask, y: obs.y, bcnn, baseline })
}

/// Writes `node,truth,observed,bcnn_gsr,gmrf_vb`; `observed` is empty at
/// unobserved nodes.
pub fn write_single_recovery_csv(path: impl AsRef<Path>, r: &SingleRecovery) -> Result<()> {
    let observed = r.mask.scatter(&r.y);
    let mut seen = vec![false; r.truth.len()];
    for &i in r.mask.selected() {
        seen[i] = true;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "truth", "observed", "bcnn_gsr", "gmrf_vb"])?;
    for i in 0..r.truth.len() {
        let obs = if seen[i] { fmt_f64(observed[i]) } else { String::new() };
        w.write_record([i.to_string(), fmt_f64(r.truth[i]), obs, fmt_f64(r.bcnn.x_hat[i]), fmt_f64(r.baseline.x_hat[i])])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceRow {
    pub node: usize,
    pub mean_estimate: f64,
    /// Population variance of the estimate across trials.
    pub variance: f64,
    pub truth: f64,
}

/// Repeats training and recovery of one fixed signal `trials` times with
/// fresh training data, mask and noise, using the first configured SNR and
/// sampling ratio.
pub fn run_variance_study(cfg: &ExperimentConfig, trials: usize) -> Result<Vec<VarianceRow>> {
    if trials == 0 {
        return Err(invalid("variance study needs at least one trial"));
    }
    let s = setup(cfg)?;
    let g = &s.graph;
    let n = g.len();
    let truth = s.test_signal(cfg, 0)?;
    let (snr, ratio) = (cfg.snr_db[0], cfg.sampling_ratios[0]);
    let m = observed_count(n, ratio);
    let estimates = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<Signal> {
            let t = t as u64;
            let data = match &s.sensor_train {
                Some(d) => d.clone(),
                None => gen_signals(cfg, cfg.distribution, g, cfg.k_train, derive_seed(cfg.seed, &[11, t]))?,
            };
            let prior = cfg.train(g, &data, &[14, t], cfg.table1_model)?.params;
            let mask = make_sampling_mask(n, m, derive_seed(cfg.seed, &[12, t]))?;
            let obs = add_noise_at_snr(&mask.observe(&truth), snr, derive_seed(cfg.seed, &[13, t]))?;
            Ok(recover_with_truth(&prior, g, &mask, &obs.y, &cfg.vb, None)?.x_hat)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = trials as f64;
    Ok((0..n)
        .map(|i| {
            let mean = estimates.iter().map(|e| e[i]).sum::<f64>() / k;
            let variance = estimates.iter().map(|e| (e[i] - mean).powi(2)).sum::<f64>() / k;
            VarianceRow { node: i, mean_estimate: mean, variance, truth: truth[i] }
        })
        .collect())
}

pub fn write_variance_csv(path: impl AsRef<Path>, rows: &[VarianceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["node", "mean_estimate", "variance", "truth"])?;
    for r in rows {
        w.write_record([r.node.to_string(), fmt_f64(r.mean_estimate), fmt_f64(r.variance), fmt_f64(r.truth)])?;
    }
    w.flush()?;
    Ok(())
}

const PLOT_HEADER: [&str; 3] = ["x", "y", "series"];

fn write_series(path: &Path, points: &[(String, String, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PLOT_HEADER)?;
    for (x, y, s) in points {
        w.write_record([x, y, s])?;
    }
    w.flush()?;
    Ok(())
}

/// Reshapes a results CSV into plot series under `out_dir` and returns the
/// written paths.
///
/// A benchmark summary becomes one `nmse_snr_<snr>.csv` per SNR with x =
/// sampling ratio, y = NMSE and one series per `method/distribution`
/// (`nmse.csv` with only a header when there are no rows). A variance study
/// becomes `variance_mean.csv` (series `mean` and `truth`) and
/// `variance_var.csv` (series `variance`), x = node.
pub fn emit_plot_data(results: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut r = csv::Reader::from_path(results.as_ref())?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let records = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| GsrError::Parse(format!("results CSV lacks a `{name}` column")))
    };
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    if header.iter().any(|h| h == "mean_estimate") {
        let (node, mean, var, truth) = (col("node")?, col("mean_estimate")?, col("variance")?, col("truth")?);
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for rec in &records {
            means.push((rec[node].to_owned(), rec[mean].to_owned(), "mean".to_owned()));
            vars.push((rec[node].to_owned(), rec[var].to_owned(), "variance".to_owned()));
        }
        for rec in &records {
            means.push((rec[node].to_owned(), rec[truth].to_owned(), "truth".to_owned()));
        }
        for (name, points) in [("variance_mean.csv", means), ("variance_var.csv", vars)] {
            let path = out_dir.join(name);
            write_series(&path, &points)?;
            written.push(path);
        }
        return Ok(written);
    }

    let (dist, snr, ratio, method, value) =
        (col("distribution")?, col("snr")?, col("sampling_ratio")?, col("method")?, col("nmse")?);
    let mut by_snr: BTreeMap<String, Vec<(String, String, String)>> = BTreeMap::new();
    for rec in &records {
        if header.iter().any(|h| h == "trial") {
            return Err(invalid("plot data expects the summary CSV, not per-trial rows"));
        }
        let series = format!("{}/{}", &rec[method], &rec[dist]);
        by_snr.entry(rec[snr].to_owned()).or_default().push((rec[ratio].to_owned(), rec[value].to_owned(), series));
    }
    if by_snr.is_empty() {
        let path = out_dir.join("nmse.csv");
        write_series(&path, &[])?;
        written.push(path);
    }
    for (snr, mut points) in by_snr {
        points.sort_by(|a, b| a.2.cmp(&b.2).then(a.0.parse::<f64>().unwrap_or(0.0).total_cmp(&b.0.parse().unwrap_or(0.0))));
        let path = out_dir.join(format!("nmse_snr_{snr}.csv"));
        write_series(&path, &points)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            distribution: Distribution::Gmm,
            graph: GraphSpec { n: 16, ..Default::default() },
            bandwidth: 5,
            table1_model: BcnnModel::Bcnn1,
            snr_db: vec![10.0, 20.0],
            sampling_ratios: vec![0.5],
            k_train: 10,
            trials: 3,
            train: TrainConfig { max_iter: 5, patches_per_iter: 16, batch_size: 16, ..TrainConfig::experiment() },
            ..Default::default()
        }
    }

    #[test]
    fn nmse_examples() {
        let x = vec![vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.0]];
        assert_eq!(nmse(&x, &x).unwrap(), 0.0);
        let zero: Vec<Signal> = x.iter().map(|s| vec![0.0; s.len()]).collect();
        assert_eq!(nmse(&zero, &x).unwrap(), 1.0);
        let double: Vec<Signal> = x.iter().map(|s| s.iter().map(|v| 2.0 * v).collect()).collect();
        assert_eq!(nmse(&double, &x).unwrap(), 1.0);
        assert!(nmse(&x, &zero).is_err());
        assert!(nmse(&x[..1], &x).is_err());
    }

    #[test]
    fn nmse_is_scale_invariant() {
        let x = vec![vec![1.0, -2.0, 3.0]];
        let e = vec![vec![0.5, -1.0, 2.0]];
        let base = nmse(&e, &x).unwrap();
        for c in [-3.0, 0.25, 1e6] {
            let xs: Vec<Signal> = x.iter().map(|s| s.iter().map(|v| c * v).collect()).collect();
            let es: Vec<Signal> = e.iter().map(|s| s.iter().map(|v| c * v).collect()).collect();
            assert!((nmse(&es, &xs).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
        assert!(ExperimentConfig::from_json(r#"{"trials": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"sampling_ratios": [1.5]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"snr_db": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let parsed = ExperimentConfig::from_json(r#"{"distribution": "ggd", "table1_model": "bcnn2"}"#).unwrap();
        assert_eq!(parsed.distribution, Distribution::Ggd);
        assert_eq!(parsed.table1_model, BcnnModel::Bcnn2);
    }

    #[test]
    fn benchmark_pairs_methods_on_identical_realizations() {
        let out = run_recovery_benchmark(&small()).unwrap();
        assert_eq!(out.summary.len(), 4);
        assert_eq!(out.trials.len(), 2 * 2 * 3);
        for pair in out.trials.chunks(2) {
            assert_eq!(pair[0].method, Method::BcnnGsr);
            assert_eq!(pair[1].method, Method::GmrfVb);
            assert_eq!(pair[0].realization, pair[1].realization);
            assert_eq!(pair[0].trial, pair[1].trial);
        }
        let trial_ids: Vec<usize> = out.trials.iter().step_by(2).map(|r| r.trial).collect();
        assert_eq!(trial_ids, vec![0, 1, 2, 0, 1, 2]);
        assert_ne!(out.trials[0].realization, out.trials[6].realization);
        for row in &out.summary {
            let mean = out
                .trials
                .iter()
                .filter(|t| t.method == row.method && t.snr == row.snr)
                .map(|t| t.nmse)
                .sum::<f64>()
                / 3.0;
            assert!((mean - row.nmse).abs() < 1e-15);
        }
    }

    #[test]
    fn benchmark_csv_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        for name in ["a.csv", "b.csv"] {
            let out = run_recovery_benchmark(&cfg).unwrap();
            write_trials_csv(dir.path().join(name), &out.trials).unwrap();
        }
        assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());
    }

    #[test]
    fn hyperparam_study_has_six_rows() {
        let cfg = ExperimentConfig { train: TrainConfig { max_iter: 2, ..small().train }, ..small() };
        let rows = run_hyperparam_study(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        // Very smooth 16-node GMRF data may trip the divergence guard (NaN).
        let gmm = rows.iter().filter(|r| r.distribution == Distribution::Gmm);
        assert!(gmm.clone().count() == 3 && gmm.into_iter().all(|r| r.kld.is_finite() && r.kld >= 0.0), "{rows:?}");
        let cells: Vec<(BcnnModel, Distribution)> = rows.iter().map(|r| (r.model, r.distribution)).collect();
        assert_eq!(cells[0], (BcnnModel::Bcnn1, Distribution::Gmrf));
        assert_eq!(cells[5], (BcnnModel::Bcnn3, Distribution::Gmm));
    }

    #[test]
    fn hyperparam_failure_becomes_nan() {
        let mut cfg = small();
        cfg.train.max_iter = 3;
        cfg.train.standardize = false;
        cfg.train.langevin_step = 1.0;
        cfg.gmm = GaussianMixture { means: vec![-300.0, 300.0], variances: vec![1.0, 1.0], weights: vec![0.5, 0.5], ..Default::default() };
        let rows = run_hyperparam_study(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().filter(|r| r.distribution == Distribution::Gmm).all(|r| r.kld.is_nan()));
    }

    #[test]
    fn single_trial_variance_is_zero() {
        let rows = run_variance_study(&small(), 1).unwrap();
        assert_eq!(rows.len(), 16);
        assert!(rows.iter().all(|r| r.variance == 0.0));
    }

    #[test]
    fn noiseless_full_sampling_mean_is_the_truth() {
        // A noiseless configuration says so through the noise hyper-prior:
        // a huge shape pins the noise variance near zero. With the vague
        // default the learned prior's small scale error settles the noise
        // estimate at a small positive value instead.
        let cfg = ExperimentConfig {
            snr_db: vec![300.0],
            sampling_ratios: vec![1.0],
            train: TrainConfig { max_iter: 100, ..small().train },
            vb: VbConfig { rho0: 1e9, ..Default::default() },
            ..small()
        };
        let rows = run_variance_study(&cfg, 3).unwrap();
        for r in rows {
            assert!((r.mean_estimate - r.truth).abs() < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn plot_data_groups_series() {
        let dir = tempfile::tempdir().unwrap();
        let results = dir.path().join("bench.csv");
        std::fs::write(
            &results,
            "distribution,snr,sampling_ratio,method,nmse\n\
             gmm,10,0.5,bcnn_gsr,0.6\ngmm,10,0.3,bcnn_gsr,0.7\ngmm,10,0.5,gmrf_vb,0.5\n\
             gmrf,10,0.5,gmrf_vb,0.4\ngmm,20,0.5,bcnn_gsr,0.3\n",
        )
        .unwrap();
        let files = emit_plot_data(&results, dir.path().join("plot")).unwrap();
        assert_eq!(files.len(), 2);
        let mut r = csv::Reader::from_path(&files[0]).unwrap();
        let series: std::collections::BTreeSet<String> = r.records().map(|rec| rec.unwrap()[2].to_owned()).collect();
        assert_eq!(series.len(), 3);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        assert!(text.starts_with("x,y,series\n0.3,0.7,bcnn_gsr/gmm\n0.5,0.6,bcnn_gsr/gmm\n"));
    }

    #[test]
    fn plot_data_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "distribution,snr,sampling_ratio,method,nmse\n").unwrap();
        let files = emit_plot_data(&empty, dir.path().join("p1")).unwrap();
        assert_eq!(files.len(), 1);
        assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), "x,y,series\n");

        let one = dir.path().join("one.csv");
        std::fs::write(&one, "distribution,snr,sampling_ratio,method,nmse\nggd,20,0.7,gmrf_vb,0.25\n").unwrap();
        let files = emit_plot_data(&one, dir.path().join("p2")).unwrap();
        assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), "x,y,series\n0.7,0.25,gmrf_vb/ggd\n");

        let var = dir.path().join("var.csv");
        std::fs::write(&var, "node,mean_estimate,variance,truth\n0,1.0,0.1,1.1\n1,2.0,0.2,2.1\n").unwrap();
        let files = emit_plot_data(&var, dir.path().join("p3")).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(std::fs::read_to_string(&files[0]).unwrap().lines().count(), 5);
    }

    #[test]
    fn persistent_training_failure_is_reported() {
        let mut cfg = small();
        cfg.train.langevin_step = 1e3;
        cfg.train.max_iter = 20;
        let err = run_single_recovery(&cfg, None, 0).unwrap_err();
        assert!(matches!(err, GsrError::TrainingFailed(_)), "{err:?}");
    }
}
