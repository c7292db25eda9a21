//! Sensor-network temperature logs as graph signals.
//!
//! Readings are whitespace- or comma-delimited rows. The default layout is
//! the Intel lab one: `date time epoch moteid temperature humidity light
//! voltage`. Coordinates are `moteid x y` rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GsrError, Result};
use crate::graph::{build_rbf_graph, Graph};
use crate::signal::{rng_from, Signal};

/// Which complete timestamps become training signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimestampPolicy {
    /// The first `count` complete timestamps in epoch order. The remaining
    /// complete timestamps are kept as held-out signals.
    FirstComplete { count: usize },
}

impl Default for TimestampPolicy {
    fn default() -> Self {
        TimestampPolicy::FirstComplete { count: 500 }
    }
}

/// Zero-based columns of the fields used from each readings row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadingsLayout {
    pub timestamp: usize,
    pub node: usize,
    pub temperature: usize,
}

impl Default for ReadingsLayout {
    fn default() -> Self {
        ReadingsLayout { timestamp: 2, node: 3, temperature: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub kernel_width: f64,
    pub threshold: f64,
    pub policy: TimestampPolicy,
    pub layout: ReadingsLayout,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            kernel_width: 0.5,
            threshold: 0.75,
            policy: TimestampPolicy::default(),
            layout: ReadingsLayout::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensorDataset {
    /// Original node id of each vertex; vertex `i` is the `i`-th smallest id.
    pub node_ids: Vec<u64>,
    /// Coordinates shifted to the origin and scaled by the larger extent.
    pub coords: Vec<[f64; 2]>,
    pub graph: Graph,
    pub epochs: Vec<u64>,
    /// Selected signals minus `node_means`.
    pub signals: Vec<Signal>,
    pub held_out_epochs: Vec<u64>,
    /// Remaining complete timestamps, centred with the same means.
    pub held_out: Vec<Signal>,
    /// Per-node mean temperature over the selected signals.
    pub node_means: Vec<f64>,
    /// Rows without a parsable timestamp or node id.
    pub skipped_rows: usize,
}

fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c.is_whitespace() || c == ',').filter(|f| !f.is_empty()).collect()
}

fn read_sensor_coords(path: &Path) -> Result<BTreeMap<u64, [f64; 2]>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let f = fields(line);
        if f.is_empty() || f[0].starts_with('#') {
            continue;
        }
        let bad = || GsrError::Parse(format!("{}:{}: expected `id x y`", path.display(), lineno + 1));
        if f.len() < 3 {
            return Err(bad());
        }
        let id: u64 = f[0].parse().map_err(|_| bad())?;
        let x: f64 = f[1].parse().map_err(|_| bad())?;
        let y: f64 = f[2].parse().map_err(|_| bad())?;
        if !x.is_finite() || !y.is_finite() {
            return Err(bad());
        }
        if out.insert(id, [x, y]).is_some() {
            return Err(GsrError::Parse(format!("duplicate node id {id} in {}", path.display())));
        }
    }
    if out.len() < 2 {
        return Err(invalid("sensor coordinates need at least 2 nodes"));
    }
    Ok(out)
}

fn normalize_coords(raw: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let lo = |k: usize| raw.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
    let hi = |k: usize| raw.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
    let (x0, y0) = (lo(0), lo(1));
    let extent = (hi(0) - x0).max(hi(1) - y0);
    let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
    raw.iter().map(|c| [(c[0] - x0) * scale, (c[1] - y0) * scale]).collect()
}

fn coverage_histogram(counts: &BTreeMap<u64, usize>, n: usize) -> String {
    let mut hist = vec![0usize; n + 1];
    for &c in counts.values() {
        hist[c.min(n)] += 1;
    }
    let mut s = String::new();
    for (covered, &k) in hist.iter().enumerate().rev().filter(|(_, k)| **k > 0) {
        if !s.is_empty() {
            s.push_str(", ");
        }
        write!(s, "{covered}/{n} nodes: {k}").unwrap();
    }
    if s.is_empty() {
        s.push_str("no readings");
    }
    s
}

/// Reads a temperature log and node coordinates into a graph and one signal
/// per complete timestamp. A timestamp is complete when every node has a
/// finite temperature and no row for it is missing or non-finite.
pub fn ingest_sensor_dataset(
    readings_path: impl AsRef<Path>,
    coords_path: impl AsRef<Path>,
    cfg: &IngestConfig,
) -> Result<SensorDataset> {
    let coords = read_sensor_coords(coords_path.as_ref())?;
    let node_ids: Vec<u64> = coords.keys().copied().collect();
    let index: BTreeMap<u64, usize> = node_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let n = node_ids.len();
    let raw: Vec<[f64; 2]> = coords.values().copied().collect();
    let coords = normalize_coords(&raw);
    let graph = build_rbf_graph(&coords, cfg.kernel_width, cfg.threshold, true)?;

    let layout = cfg.layout;
    let needed = layout.timestamp.max(layout.node) + 1;
    let text = std::fs::read_to_string(readings_path.as_ref())?;
    let mut values: BTreeMap<u64, Vec<Option<f64>>> = BTreeMap::new();
    let mut spoiled: BTreeSet<u64> = BTreeSet::new();
    let mut skipped_rows = 0;
    for line in text.lines() {
        let f = fields(line);
        if f.is_empty() || f[0].starts_with('#') {
            continue;
        }
        if f.len() < needed {
            skipped_rows += 1;
            continue;
        }
        let (Ok(ts), Ok(id)) = (f[layout.timestamp].parse::<u64>(), f[layout.node].parse::<u64>()) else {
            skipped_rows += 1;
            continue;
        };
        let &node = index.get(&id).ok_or_else(|| GsrError::UnknownNode(id.to_string()))?;
        let temp = f.get(layout.temperature).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
        let row = values.entry(ts).or_insert_with(|| vec![None; n]);
        match temp {
            Some(v) if row[node].is_none() => row[node] = Some(v),
            Some(_) => {}
            None => {
                spoiled.insert(ts);
            }
        }
    }

    let mut complete: Vec<(u64, Signal)> = Vec::new();
    let mut counts = BTreeMap::new();
    for (ts, row) in &values {
        let covered = if spoiled.contains(ts) { 0 } else { row.iter().filter(|v| v.is_some()).count() };
        counts.insert(*ts, row.iter().filter(|v| v.is_some()).count());
        if covered == n {
            complete.push((*ts, row.iter().map(|v| v.unwrap()).collect()));
        }
    }
    if complete.is_empty() {
        return Err(GsrError::NoFullCoverage(coverage_histogram(&counts, n)));
    }

    let TimestampPolicy::FirstComplete { count } = cfg.policy;
    if count == 0 {
        return Err(invalid("timestamp policy must select at least one signal"));
    }
    let rest = complete.split_off(count.min(complete.len()));
    let mut node_means = vec![0.0; n];
    for (_, s) in &complete {
        for (m, v) in node_means.iter_mut().zip(s) {
            *m += v / complete.len() as f64;
        }
    }
    let centre = |s: Signal| -> Signal { s.iter().zip(&node_means).map(|(v, m)| v - m).collect() };
    let (epochs, signals): (Vec<u64>, Vec<Signal>) = complete.into_iter().map(|(t, s)| (t, centre(s))).unzip();
    let (held_out_epochs, held_out): (Vec<u64>, Vec<Signal>) = rest.into_iter().map(|(t, s)| (t, centre(s))).unzip();
    Ok(SensorDataset { node_ids, coords, graph, epochs, signals, held_out_epochs, held_out, node_means, skipped_rows })
}

/// Shape of a synthetic log in the Intel lab format.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub nodes: usize,
    pub epochs: usize,
    /// Probability that a (timestamp, node) reading is absent.
    pub missing_prob: f64,
    /// Probability that a reading is present but has no usable temperature.
    pub corrupt_prob: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec { nodes: 54, epochs: 600, missing_prob: 0.0005, corrupt_prob: 0.0002, seed: 0 }
    }
}

/// Writes `readings.txt` and `coords.txt` into `dir`. Temperatures are a
/// daily cycle plus a few drifting warm spots over a 40 m x 30 m floor and
/// small sensor noise, sampled every 31 s.
pub fn write_synthetic_intel_fixture(dir: impl AsRef<Path>, spec: &FixtureSpec) -> Result<(PathBuf, PathBuf)> {
    if spec.nodes < 2 || spec.epochs == 0 {
        return Err(invalid("fixture needs at least 2 nodes and 1 epoch"));
    }
    let mut rng = rng_from(spec.seed);
    let coords: Vec<[f64; 2]> = (0..spec.nodes).map(|_| [rng.random_range(0.0..40.0), rng.random_range(0.0..30.0)]).collect();
    let spots: Vec<[f64; 2]> = (0..3).map(|_| [rng.random_range(0.0..40.0), rng.random_range(0.0..30.0)]).collect();
    let noise = Normal::new(0.0, 0.05).expect("valid sd");
    let step = Normal::new(0.0, 0.15).expect("valid sd");
    let mut amps = [1.5, -1.0, 2.0];

    let dir = dir.as_ref();
    let coords_path = dir.join("coords.txt");
    let readings_path = dir.join("readings.txt");
    let mut text = String::new();
    for (i, c) in coords.iter().enumerate() {
        writeln!(text, "{} {:.2} {:.2}", i + 1, c[0], c[1]).unwrap();
    }
    std::fs::write(&coords_path, text)?;

    let mut text = String::new();
    for epoch in 0..spec.epochs {
        for a in amps.iter_mut() {
            *a = 0.98 * *a + step.sample(&mut rng);
        }
        let secs = epoch as u64 * 31;
        let (h, m, s) = (secs / 3600 % 24, secs / 60 % 60, secs % 60);
        let day = 1 + secs / 86_400;
        let cycle = 3.0 * (2.0 * std::f64::consts::PI * secs as f64 / 86_400.0).sin();
        for (i, c) in coords.iter().enumerate() {
            if rng.random::<f64>() < spec.missing_prob {
                continue;
            }
            let warm: f64 = spots
                .iter()
                .zip(&amps)
                .map(|(p, a)| a * (-((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)) / (2.0 * 64.0)).exp())
                .sum();
            let temp = 20.0 + cycle + warm + noise.sample(&mut rng);
            let stamp = format!("2004-03-{day:02} {h:02}:{m:02}:{s:02}.000000 {epoch} {}", i + 1);
            if rng.random::<f64>() < spec.corrupt_prob {
                writeln!(text, "{stamp} NaN 40.0 100.0 2.6").unwrap();
            } else {
                writeln!(text, "{stamp} {temp:.4} 40.0 100.0 2.6").unwrap();
            }
        }
    }
    std::fs::write(&readings_path, text)?;
    Ok((readings_path, coords_path))
}

/// Writes the dataset's graph and signals: `coords.txt`, `edges.txt`,
/// `signals.csv`, `held_out.csv` and `node_means.csv`.
pub fn write_sensor_dataset(ds: &SensorDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ds.graph.write_coords(dir.join("coords.txt"))?;
    ds.graph.write_edge_list(dir.join("edges.txt"))?;
    crate::signal::write_signals_csv(dir.join("signals.csv"), &ds.signals)?;
    crate::signal::write_signals_csv(dir.join("held_out.csv"), &ds.held_out)?;
    let mut w = csv::Writer::from_path(dir.join("node_means.csv"))?;
    w.write_record(["vertex", "node_id", "mean"])?;
    for (i, (id, m)) in ds.node_ids.iter().zip(&ds.node_means).enumerate() {
        w.write_record([i.to_string(), id.to_string(), crate::graph::fmt_f64(*m)])?;
    }
    w.flush()?;
    Ok(())
}
