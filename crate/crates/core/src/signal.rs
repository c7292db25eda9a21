//! Synthetic graph signals, sampling masks, noise injection and patch
//! extraction.
//!
//! Every generator is a pure function of its inputs and a `u64` seed
//! (ChaCha8 stream), so results are bit-reproducible.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GsrError, Result};
use crate::graph::{fmt_f64, induced_subgraph, Graph};

pub type Signal = Vec<f64>;

pub(crate) fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a tag path.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    // splitmix64 over the tag sequence
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Vertices observed by the sampling operator `Psi`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    selected: Vec<usize>,
    n: usize,
}

impl SamplingMask {
    pub fn new(selected: Vec<usize>, n: usize) -> Result<Self> {
        if selected.len() > n {
            return Err(invalid(format!("{} samples requested from {n} vertices", selected.len())));
        }
        let mut seen = vec![false; n];
        for &i in &selected {
            if i >= n {
                return Err(invalid(format!("mask index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(invalid(format!("duplicate mask index {i}")));
            }
        }
        Ok(SamplingMask { selected, n })
    }

    pub fn full(n: usize) -> Self {
        SamplingMask { selected: (0..n).collect(), n }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Number of observations `M`.
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `Psi x`
    pub fn observe(&self, x: &[f64]) -> Vec<f64> {
        self.selected.iter().map(|&i| x[i]).collect()
    }

    /// `Psi^T y`
    pub fn scatter(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (&i, &v) in self.selected.iter().zip(y) {
            out[i] = v;
        }
        out
    }

    /// Diagonal of `Psi^T Psi`.
    pub fn indicator(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &i in &self.selected {
            out[i] = 1.0;
        }
        out
    }

    /// Dense `M x N` sampling matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut psi = DMatrix::zeros(self.len(), self.n);
        for (r, &i) in self.selected.iter().enumerate() {
            psi[(r, i)] = 1.0;
        }
        psi
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!("# n={}\n", self.n);
        for i in &self.selected {
            out.push_str(&format!("{i}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut n = None;
        let mut selected = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("# n=") {
                n = Some(rest.trim().parse().map_err(|_| GsrError::Parse("bad mask header".into()))?);
            } else if !line.starts_with('#') {
                selected.push(line.parse().map_err(|_| GsrError::Parse(format!("bad mask index `{line}`")))?);
            }
        }
        let n = n.ok_or_else(|| GsrError::Parse("mask file lacks `# n=` header".into()))?;
        SamplingMask::new(selected, n)
    }
}

/// Noisy measurements `y = Psi x + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyObservation {
    pub y: Vec<f64>,
    pub sigma_e2_true: f64,
    pub snr_db: f64,
}

/// `M` distinct vertices drawn uniformly without replacement, sorted.
pub fn make_sampling_mask(n: usize, m: usize, seed: u64) -> Result<SamplingMask> {
    if m > n {
        return Err(invalid(format!("cannot sample {m} of {n} vertices")));
    }
    let mut rng = rng_from(seed);
    let mut selected = sample_indices(&mut rng, n, m).into_vec();
    selected.sort_unstable();
    SamplingMask::new(selected, n)
}

/// Adds white Gaussian noise with variance `(|clean|^2 / M) 10^(-snr/10)`.
///
/// The underlying standard-normal draws depend only on `seed` and the
/// length, so two calls differing only in `snr_db` share a noise shape.
pub fn add_noise_at_snr(clean: &[f64], snr_db: f64, seed: u64) -> Result<NoisyObservation> {
    if clean.is_empty() {
        return Err(invalid("no observations to corrupt"));
    }
    let power = clean.iter().map(|v| v * v).sum::<f64>();
    if power == 0.0 {
        return Err(invalid("clean signal is all zero; SNR undefined"));
    }
    if !snr_db.is_finite() {
        return Err(invalid("SNR must be finite"));
    }
    let m = clean.len() as f64;
    let sigma_e2 = power / m * 10f64.powf(-snr_db / 10.0);
    let sigma = sigma_e2.sqrt();
    let mut rng = rng_from(seed);
    let mut noise_power = 0.0;
    let y = clean
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let nz = sigma * z;
            noise_power += nz * nz;
            c + nz
        })
        .collect();
    Ok(NoisyObservation { y, sigma_e2_true: sigma_e2, snr_db: 10.0 * (power / noise_power).log10() })
}

/// Bandlimited signals `x = sum_{i<=omega} gamma_i r_i` on the `omega`
/// lowest-frequency Laplacian eigenvectors.
pub fn gen_bandlimited_gmrf(g: &Graph, bandwidth: usize, count: usize, seed: u64) -> Result<Vec<Signal>> {
    let basis = low_frequency_basis(g, bandwidth)?;
    let n = g.len();
    let mut rng = rng_from(seed);
    Ok((0..count)
        .map(|_| {
            let mut x = vec![0.0; n];
            for col in basis.column_iter() {
                let gamma: f64 = StandardNormal.sample(&mut rng);
                for (xi, ri) in x.iter_mut().zip(col.iter()) {
                    *xi += gamma * ri;
                }
            }
            x
        })
        .collect())
}

/// Eigenvectors of `L` for its `bandwidth` smallest eigenvalues, as columns.
pub fn low_frequency_basis(g: &Graph, bandwidth: usize) -> Result<DMatrix<f64>> {
    let n = g.len();
    if bandwidth == 0 || bandwidth > n {
        return Err(invalid(format!("bandwidth {bandwidth} outside 1..={n}")));
    }
    let eig = g.laplacian().clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    Ok(DMatrix::from_fn(n, bandwidth, |r, c| eig.eigenvectors[(r, order[c])]))
}

/// How mixture draws are shared across the coordinates of one signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmSampling {
    /// Every coordinate picks its own component.
    #[default]
    IidCoordinates,
    /// One component per signal; all coordinates drawn from it.
    WholeVector,
}

/// Scalar Gaussian mixture used for the mixture-distributed signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub sampling: GmmSampling,
}

impl Default for GaussianMixture {
    fn default() -> Self {
        GaussianMixture {
            means: vec![-3.0, -1.0, 1.0, 3.0],
            variances: vec![0.5; 4],
            weights: vec![0.25; 4],
            sampling: GmmSampling::IidCoordinates,
        }
    }
}

impl GaussianMixture {
    pub fn validate(&self) -> Result<()> {
        let c = self.means.len();
        if c == 0 || self.variances.len() != c || self.weights.len() != c {
            return Err(invalid("mixture means/variances/weights must have equal nonzero length"));
        }
        if self.variances.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("mixture variances must be finite and nonnegative"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid("mixture weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w * (v + m * m))
            .sum::<f64>()
            - mu * mu
    }
}

pub fn gen_gmm_signal(mix: &GaussianMixture, n: usize, count: usize, seed: u64) -> Result<Vec<Signal>> {
    mix.validate()?;
    let pick = WeightedIndex::new(&mix.weights).map_err(|e| invalid(e.to_string()))?;
    let comps: Vec<Normal<f64>> = mix
        .means
        .iter()
        .zip(&mix.variances)
        .map(|(m, v)| Normal::new(*m, v.sqrt()).expect("validated variance"))
        .collect();
    let mut rng = rng_from(seed);
    Ok((0..count)
        .map(|_| match mix.sampling {
            GmmSampling::IidCoordinates => {
                (0..n).map(|_| comps[pick.sample(&mut rng)].sample(&mut rng)).collect()
            }
            GmmSampling::WholeVector => {
                let k = pick.sample(&mut rng);
                (0..n).map(|_| comps[k].sample(&mut rng)).collect()
            }
        })
        .collect())
}

/// Generalized Gamma with density proportional to `x^(a-1) exp(-(x/s)^p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedGamma {
    pub shape: f64,
    pub power: f64,
    pub scale: f64,
    pub symmetrize: bool,
}

impl Default for GeneralizedGamma {
    fn default() -> Self {
        GeneralizedGamma { shape: 2.0, power: 1.5, scale: 1.0, symmetrize: true }
    }
}

pub fn gen_ggd_signal(params: &GeneralizedGamma, n: usize, count: usize, seed: u64) -> Result<Vec<Signal>> {
    let GeneralizedGamma { shape, power, scale, symmetrize } = *params;
    if !(shape > 0.0 && power > 0.0 && scale > 0.0) || !(shape * power * scale).is_finite() {
        return Err(invalid("generalized Gamma parameters must be positive and finite"));
    }
    // If G ~ Gamma(a/p, 1) then s G^(1/p) has the target density.
    let gamma = Gamma::new(shape / power, 1.0).map_err(|e| invalid(e.to_string()))?;
    let mut rng = rng_from(seed);
    Ok((0..count)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let v = scale * gamma.sample(&mut rng).powf(1.0 / power);
                    if symmetrize && rng.random::<bool>() {
                        -v
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect())
}

/// A graph-local training example: a BFS ball and its induced subgraph.
#[derive(Debug, Clone)]
pub struct Patch {
    pub nodes: Vec<usize>,
    pub graph: Arc<Graph>,
    pub signal: Signal,
}

/// Pre-computed BFS balls of one size, one per eligible start vertex.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    size: usize,
    balls: Vec<Option<(Vec<usize>, Arc<Graph>)>>,
}

impl PatchSampler {
    pub fn new(g: &Graph, size: usize) -> Result<Self> {
        if size < 2 {
            return Err(invalid("patch size must be at least 2"));
        }
        if size > g.len() {
            return Err(invalid(format!("patch size {size} exceeds graph size {}", g.len())));
        }
        let balls = if size == g.len() {
            // Whole graph in natural order, when reachable.
            if g.bfs_ball(0, size).len() == size {
                let nodes: Vec<usize> = (0..size).collect();
                let sub = Arc::new(g.clone());
                vec![Some((nodes, sub)); size]
            } else {
                vec![None; size]
            }
        } else {
            (0..g.len())
                .map(|v| {
                    let ball = g.bfs_ball(v, size);
                    if ball.len() < size {
                        return Ok(None);
                    }
                    let sub = induced_subgraph(g, &ball)?;
                    Ok(Some((ball, Arc::new(sub))))
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(PatchSampler { size, balls })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Draws `count` patches from uniformly chosen signals and start vertices.
    pub fn draw<R: Rng + ?Sized>(&self, signals: &[Signal], count: usize, rng: &mut R) -> Result<Vec<Patch>> {
        if signals.is_empty() {
            return Err(invalid("no signals to extract patches from"));
        }
        let n = self.balls.len();
        if let Some(bad) = signals.iter().find(|s| s.len() != n) {
            return Err(GsrError::DimensionMismatch { expected: n, got: bad.len() });
        }
        let mut patches = Vec::with_capacity(count);
        let mut rejections = 0usize;
        while patches.len() < count {
            let k = rng.random_range(0..signals.len());
            let v = rng.random_range(0..n);
            match &self.balls[v] {
                Some((nodes, sub)) => patches.push(Patch {
                    nodes: nodes.clone(),
                    graph: Arc::clone(sub),
                    signal: nodes.iter().map(|&i| signals[k][i]).collect(),
                }),
                None => {
                    rejections += 1;
                    if rejections >= 100 * count.max(1) {
                        return Err(invalid(format!(
                            "no vertex reaches a {}-node BFS ball after {rejections} rejections",
                            self.size
                        )));
                    }
                }
            }
        }
        Ok(patches)
    }
}

/// BFS-ball patches of `size` vertices from random signals and start vertices.
pub fn extract_patches(g: &Graph, signals: &[Signal], size: usize, count: usize, seed: u64) -> Result<Vec<Patch>> {
    let sampler = PatchSampler::new(g, size)?;
    sampler.draw(signals, count, &mut rng_from(seed))
}

pub fn write_signals_csv(path: impl AsRef<Path>, signals: &[Signal]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(first) = signals.first() {
        w.write_record((0..first.len()).map(|i| format!("x{i}")))?;
    }
    for s in signals {
        w.write_record(s.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_signals_csv(path: impl AsRef<Path>) -> Result<Vec<Signal>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| GsrError::Parse(format!("bad number `{f}`"))))
            .collect::<Result<Signal>>()?;
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_rbf_graph;
    use approx::assert_relative_eq;

    pub(crate) fn test_graph(seed: u64) -> Graph {
        let mut rng = rng_from(seed);
        let coords: Vec<[f64; 2]> = (0..64).map(|_| [rng.random(), rng.random()]).collect();
        build_rbf_graph(&coords, 0.5, 0.75, true).unwrap()
    }

    #[test]
    fn generators_are_reproducible() {
        let g = test_graph(1);
        assert_eq!(gen_bandlimited_gmrf(&g, 25, 3, 9).unwrap(), gen_bandlimited_gmrf(&g, 25, 3, 9).unwrap());
        let mix = GaussianMixture::default();
        assert_eq!(gen_gmm_signal(&mix, 10, 3, 4).unwrap(), gen_gmm_signal(&mix, 10, 3, 4).unwrap());
        let ggd = GeneralizedGamma::default();
        assert_eq!(gen_ggd_signal(&ggd, 10, 3, 4).unwrap(), gen_ggd_signal(&ggd, 10, 3, 4).unwrap());
        assert_ne!(gen_ggd_signal(&ggd, 10, 3, 4).unwrap(), gen_ggd_signal(&ggd, 10, 3, 5).unwrap());
    }

    #[test]
    fn bandwidth_one_is_constant() {
        let g = build_rbf_graph(&[[0.0, 0.0], [0.2, 0.0], [0.4, 0.1], [0.3, 0.3]], 0.5, 0.1, false).unwrap();
        for x in gen_bandlimited_gmrf(&g, 1, 5, 2).unwrap() {
            for v in &x {
                assert_relative_eq!(*v, x[0], max_relative = 1e-10);
            }
        }
        assert!(gen_bandlimited_gmrf(&g, 5, 1, 2).is_err());
        assert!(gen_bandlimited_gmrf(&g, 0, 1, 2).is_err());
    }

    #[test]
    fn bandlimited_signals_stay_in_band() {
        let g = test_graph(2);
        let u = low_frequency_basis(&g, 25).unwrap();
        let proj = &u * u.transpose();
        for x in gen_bandlimited_gmrf(&g, 25, 20, 3).unwrap() {
            let xv = nalgebra::DVector::from_vec(x);
            let resid = &xv - &proj * &xv;
            assert!(resid.norm() <= 1e-10 * xv.norm());
        }
    }

    #[test]
    fn bandlimited_covariance_matches_projector() {
        let g = test_graph(3);
        let u = low_frequency_basis(&g, 25).unwrap();
        let target = &u * u.transpose();
        // Expected relative error is sqrt((omega + 1) / K): 0.051 at K = 1e4, 0.025 here.
        let xs = gen_bandlimited_gmrf(&g, 25, 40_000, 8).unwrap();
        let mut cov = DMatrix::<f64>::zeros(64, 64);
        for x in &xs {
            let v = nalgebra::DVector::from_column_slice(x);
            cov += &v * v.transpose();
        }
        cov /= xs.len() as f64;
        let rel = (&cov - &target).norm() / target.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn full_bandwidth_is_isotropic() {
        let g = test_graph(4);
        let u = low_frequency_basis(&g, 64).unwrap();
        let p = &u * u.transpose();
        assert!((p - DMatrix::<f64>::identity(64, 64)).norm() < 1e-10);
    }

    #[test]
    fn mixture_moments_match_analytic() {
        let mix = GaussianMixture::default();
        let xs: Vec<f64> = gen_gmm_signal(&mix, 100, 1000, 5).unwrap().concat();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // mean 0, variance 0.5 + (9 + 1 + 1 + 9) / 4 = 5.5
        assert_relative_eq!(mix.variance(), 5.5, epsilon = 1e-12);
        assert!(mean.abs() < 0.02 * mix.variance().sqrt());
        assert!((var / 5.5 - 1.0).abs() < 0.02);
    }

    #[test]
    fn degenerate_mixture_equals_single_component() {
        let single = GaussianMixture {
            means: vec![0.0],
            variances: vec![1.0],
            weights: vec![1.0],
            sampling: GmmSampling::IidCoordinates,
        };
        let padded = GaussianMixture {
            means: vec![0.0, 5.0, -5.0, 1.0],
            variances: vec![1.0, 1.0, 1.0, 1.0],
            weights: vec![1.0, 0.0, 0.0, 0.0],
            sampling: GmmSampling::IidCoordinates,
        };
        let a: Vec<f64> = gen_gmm_signal(&single, 100, 1000, 6).unwrap().concat();
        let b: Vec<f64> = gen_gmm_signal(&padded, 100, 1000, 6).unwrap().concat();
        for xs in [&a, &b] {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
            assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.02);
            assert!(ks_pvalue_standard_normal(xs) > 0.01);
        }
    }

    fn ks_pvalue_standard_normal(xs: &[f64]) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal as StNormal};
        let norm = StNormal::new(0.0, 1.0).unwrap();
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let d = v
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = norm.cdf(*x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        (1..100)
            .map(|k| {
                let k = k as f64;
                2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    #[test]
    fn mixture_validation() {
        let mut m = GaussianMixture::default();
        m.variances[0] = -1.0;
        assert!(gen_gmm_signal(&m, 3, 1, 0).is_err());
        let mut m = GaussianMixture::default();
        m.weights[0] = 0.3;
        assert!(gen_gmm_signal(&m, 3, 1, 0).is_err());
    }

    #[test]
    fn ggd_reduces_to_gamma() {
        let p = GeneralizedGamma { shape: 3.0, power: 1.0, scale: 2.0, symmetrize: false };
        let xs: Vec<f64> = gen_ggd_signal(&p, 100, 1000, 1).unwrap().concat();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean / 6.0 - 1.0).abs() < 0.02, "mean {mean}");
        assert!(xs.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn ggd_reduces_to_half_normal() {
        let p = GeneralizedGamma { shape: 1.0, power: 2.0, scale: 1.5, symmetrize: false };
        let xs: Vec<f64> = gen_ggd_signal(&p, 100, 1000, 2).unwrap().concat();
        let n = xs.len() as f64;
        // density ~ exp(-(x/s)^2) is half-normal with sigma = s / sqrt(2)
        let sigma = 1.5 / 2f64.sqrt();
        let mean = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((mean / (sigma * (2.0 / std::f64::consts::PI).sqrt()) - 1.0).abs() < 0.02);
        assert!((m2 / (sigma * sigma) - 1.0).abs() < 0.02);
    }

    #[test]
    fn ggd_rejects_bad_parameters() {
        let p = GeneralizedGamma { shape: 0.0, ..GeneralizedGamma::default() };
        assert!(gen_ggd_signal(&p, 3, 1, 0).is_err());
    }

    #[test]
    fn masks() {
        let full = make_sampling_mask(10, 10, 3).unwrap();
        assert_eq!(full.selected(), (0..10).collect::<Vec<_>>().as_slice());
        let one = make_sampling_mask(10, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.selected()[0] < 10);
        assert!(make_sampling_mask(4, 5, 0).is_err());
        let m = make_sampling_mask(64, 32, 1).unwrap();
        let psi = m.matrix();
        for r in 0..32 {
            assert_eq!(psi.row(r).sum(), 1.0);
        }
    }

    #[test]
    fn different_seeds_give_different_masks() {
        let mut collisions = 0;
        for s in 0..100u64 {
            let a = make_sampling_mask(64, 32, 2 * s).unwrap();
            let b = make_sampling_mask(64, 32, 2 * s + 1).unwrap();
            if a == b {
                collisions += 1;
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn mask_file_round_trip() {
        let m = make_sampling_mask(30, 12, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.txt");
        m.write(&p).unwrap();
        assert_eq!(SamplingMask::read(&p).unwrap(), m);
    }

    #[test]
    fn noise_vanishes_at_high_snr() {
        let clean: Vec<f64> = (0..20).map(|i| (i as f64).sin() + 0.1).collect();
        let obs = add_noise_at_snr(&clean, 300.0, 1).unwrap();
        let cn = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = obs.y.iter().zip(&clean).map(|(y, c)| (y - c).powi(2)).sum::<f64>().sqrt();
        assert!(nn < 1e-12 * cn);
        assert!(obs.sigma_e2_true > 0.0);
    }

    #[test]
    fn noise_power_tracks_snr() {
        let clean: Vec<f64> = (0..32).map(|i| (0.3 * i as f64).cos() * 2.0).collect();
        let cp = clean.iter().map(|v| v * v).sum::<f64>();
        for (snr, want) in [(0.0, 1.0), (10.0, 0.1)] {
            let mut acc = 0.0;
            for t in 0..1000 {
                let obs = add_noise_at_snr(&clean, snr, t).unwrap();
                acc += obs.y.iter().zip(&clean).map(|(y, c)| (y - c).powi(2)).sum::<f64>();
            }
            let ratio = acc / 1000.0 / cp;
            assert!((ratio / want - 1.0).abs() < 0.05, "snr {snr}: ratio {ratio}");
        }
    }

    #[test]
    fn realized_snr_is_unbiased_on_average() {
        let clean: Vec<f64> = (0..64).map(|i| 1.0 + (0.1 * i as f64).sin()).collect();
        let mean: f64 = (0..10_000).map(|t| add_noise_at_snr(&clean, 10.0, t).unwrap().snr_db).sum::<f64>() / 1e4;
        assert!((mean - 10.0).abs() < 0.2, "mean realized snr {mean}");
    }

    #[test]
    fn zero_signal_is_rejected() {
        assert!(add_noise_at_snr(&[0.0, 0.0], 10.0, 0).is_err());
    }

    #[test]
    fn patches_are_valid_bfs_balls() {
        let g = test_graph(5);
        let signals = gen_gmm_signal(&GaussianMixture::default(), 64, 4, 1).unwrap();
        let patches = extract_patches(&g, &signals, 5, 10_000, 2).unwrap();
        for p in &patches {
            assert_eq!(p.nodes.len(), 5);
            assert_eq!(p.graph.len(), 5);
            let mut sorted = p.nodes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 5);
            assert!(p.nodes.iter().all(|&v| v < 64));
        }
    }

    #[test]
    fn whole_graph_patch() {
        let g = build_rbf_graph(&[[0.0, 0.0], [0.2, 0.0], [0.4, 0.1]], 0.5, 0.1, false).unwrap();
        let s = vec![vec![1.0, 2.0, 3.0]];
        let p = extract_patches(&g, &s, 3, 2, 0).unwrap();
        assert_eq!(p[0].signal, s[0]);
        assert!(extract_patches(&g, &s, 1, 2, 0).is_err());
    }

    #[test]
    fn unreachable_patch_size_errors() {
        let mut w = DMatrix::zeros(4, 4);
        w[(0, 1)] = 1.0;
        w[(1, 0)] = 1.0;
        w[(2, 3)] = 1.0;
        w[(3, 2)] = 1.0;
        let g = Graph::from_weights(vec![[0.0, 0.0]; 4], w, false).unwrap();
        let s = vec![vec![0.0; 4]];
        assert!(extract_patches(&g, &s, 3, 5, 0).is_err());
    }

    #[test]
    fn signals_csv_round_trip() {
        let xs = gen_gmm_signal(&GaussianMixture::default(), 7, 3, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_signals_csv(&p, &xs).unwrap();
        assert_eq!(read_signals_csv(&p).unwrap(), xs);
    }
}
