//! Energy-based graph-signal prior
//!
//! ```text
//! log p(x) = sum_m log sum_n pi_mn N(f_m(x); 0, sigma2_mn I) - log Z
//! f_m(x)   = sum_p beta_mp T_p(L~) x
//! ```
//!
//! `pi_m` is a softmax over per-filter logits; `sigma2` is fixed. The
//! partition function is never evaluated. All per-filter sums over mixture
//! components are done in the log domain.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GsrError, Result};
use crate::graph::{axpy, chebyshev_apply, chebyshev_basis, dot, Graph};
use crate::signal::rng_from;

/// Chain norm beyond which a Langevin run is declared divergent.
pub const LANGEVIN_DIVERGENCE_NORM: f64 = 1e6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Learned prior parameters: Chebyshev filters, mixture logits and fixed
/// component variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPriorParams", into = "RawPriorParams")]
pub struct PriorParams {
    beta: Vec<Vec<f64>>,
    pi_logits: Vec<Vec<f64>>,
    sigma2: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawPriorParams {
    #[serde(rename = "M")]
    filters: usize,
    #[serde(rename = "P")]
    order: usize,
    #[serde(rename = "C")]
    components: usize,
    beta: Vec<Vec<f64>>,
    pi_logits: Vec<Vec<f64>>,
    sigma2: Vec<Vec<f64>>,
}

impl TryFrom<RawPriorParams> for PriorParams {
    type Error = GsrError;

    fn try_from(raw: RawPriorParams) -> Result<Self> {
        let p = PriorParams::new(raw.beta, raw.pi_logits, raw.sigma2)?;
        if p.filters() != raw.filters || p.order() != raw.order || p.components() != raw.components {
            return Err(invalid("declared M/P/C disagree with the parameter arrays"));
        }
        Ok(p)
    }
}

impl From<PriorParams> for RawPriorParams {
    fn from(p: PriorParams) -> Self {
        RawPriorParams {
            filters: p.filters(),
            order: p.order(),
            components: p.components(),
            beta: p.beta,
            pi_logits: p.pi_logits,
            sigma2: p.sigma2,
        }
    }
}

impl PriorParams {
    pub fn new(beta: Vec<Vec<f64>>, pi_logits: Vec<Vec<f64>>, sigma2: Vec<Vec<f64>>) -> Result<Self> {
        let m = beta.len();
        if m == 0 {
            return Err(invalid("prior needs at least one filter"));
        }
        if pi_logits.len() != m || sigma2.len() != m {
            return Err(invalid("beta, pi_logits and sigma2 need one row per filter"));
        }
        let taps = beta[0].len();
        let c = pi_logits[0].len();
        if taps == 0 || c == 0 {
            return Err(invalid("empty filter or mixture"));
        }
        for f in 0..m {
            if beta[f].len() != taps || pi_logits[f].len() != c || sigma2[f].len() != c {
                return Err(invalid(format!("ragged parameter rows at filter {f}")));
            }
            if beta[f].iter().chain(&pi_logits[f]).any(|v| !v.is_finite()) {
                return Err(invalid(format!("non-finite parameter at filter {f}")));
            }
            if sigma2[f].iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(invalid(format!("component variances must be positive (filter {f})")));
            }
        }
        Ok(PriorParams { beta, pi_logits, sigma2 })
    }

    /// Small random filters (uniform on [-0.1, 0.1]) and uniform mixtures.
    pub fn init(filters: usize, order: usize, variances: &[f64], seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed);
        let u = Uniform::new_inclusive(-0.1, 0.1).expect("valid range");
        let beta = (0..filters).map(|_| (0..=order).map(|_| u.sample(&mut rng)).collect()).collect();
        let logits = vec![vec![0.0; variances.len()]; filters];
        PriorParams::new(beta, logits, vec![variances.to_vec(); filters])
    }

    pub fn filters(&self) -> usize {
        self.beta.len()
    }

    pub fn order(&self) -> usize {
        self.beta[0].len() - 1
    }

    pub fn components(&self) -> usize {
        self.pi_logits[0].len()
    }

    pub fn beta(&self) -> &[Vec<f64>] {
        &self.beta
    }

    pub fn pi_logits(&self) -> &[Vec<f64>] {
        &self.pi_logits
    }

    pub fn sigma2(&self) -> &[Vec<f64>] {
        &self.sigma2
    }

    /// Mixture weights `pi_m` of one filter.
    pub fn weights(&self, m: usize) -> Vec<f64> {
        let lw = self.log_weights(m);
        lw.into_iter().map(f64::exp).collect()
    }

    pub fn log_weights(&self, m: usize) -> Vec<f64> {
        let lse = log_sum_exp(&self.pi_logits[m]);
        self.pi_logits[m].iter().map(|l| l - lse).collect()
    }

    /// `theta + step * grad`, re-validated.
    pub fn apply_step(&self, grad: &ParamGradient, step: f64) -> Result<Self> {
        let mut next = self.clone();
        for m in 0..self.filters() {
            axpy(step, &grad.beta[m], &mut next.beta[m]);
            axpy(step, &grad.logits[m], &mut next.pi_logits[m]);
        }
        PriorParams::new(next.beta, next.pi_logits, next.sigma2)
    }

    /// Multiplies every filter by `factor`.
    pub fn scale_filters(&self, factor: f64) -> Result<Self> {
        let beta = self.beta.iter().map(|b| b.iter().map(|v| v * factor).collect()).collect();
        PriorParams::new(beta, self.pi_logits.clone(), self.sigma2.clone())
    }

    /// Largest absolute parameter difference over filters and logits.
    pub fn max_abs_diff(&self, other: &PriorParams) -> f64 {
        let pairs = self.beta.iter().zip(&other.beta).chain(self.pi_logits.iter().zip(&other.pi_logits));
        pairs
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        PriorParams::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_signal(&self, g: &Graph, x: &[f64]) -> Result<()> {
        if x.len() != g.len() {
            return Err(GsrError::DimensionMismatch { expected: g.len(), got: x.len() });
        }
        Ok(())
    }
}

/// Which variance set from the hyper-parameter table a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSet {
    /// `delta = exp{-7, -3, 0, 3, 7}`
    Coarse,
    /// `delta = exp{+-7, +-5, +-3, +-1}`
    Fine,
}

impl VarianceSet {
    pub fn deltas(self) -> Vec<f64> {
        let exps: &[f64] = match self {
            VarianceSet::Coarse => &[-7.0, -3.0, 0.0, 3.0, 7.0],
            VarianceSet::Fine => &[-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0],
        };
        exps.iter().map(|e| e.exp()).collect()
    }

    /// Component variances `(0.001 / delta)^2`, largest first.
    pub fn variances(self) -> Vec<f64> {
        self.deltas().into_iter().map(|d| (0.001 / d).powi(2)).collect()
    }
}

/// The three model configurations compared in the hyper-parameter study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcnnModel {
    #[serde(alias = "BCNN1")]
    Bcnn1,
    #[serde(alias = "BCNN2")]
    Bcnn2,
    #[serde(alias = "BCNN3")]
    Bcnn3,
}

impl BcnnModel {
    pub const ALL: [BcnnModel; 3] = [BcnnModel::Bcnn1, BcnnModel::Bcnn2, BcnnModel::Bcnn3];

    pub fn filter_count(self) -> usize {
        match self {
            BcnnModel::Bcnn1 => 6,
            BcnnModel::Bcnn2 | BcnnModel::Bcnn3 => 8,
        }
    }

    pub fn variance_set(self) -> VarianceSet {
        match self {
            BcnnModel::Bcnn1 | BcnnModel::Bcnn2 => VarianceSet::Coarse,
            BcnnModel::Bcnn3 => VarianceSet::Fine,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BcnnModel::Bcnn1 => "BCNN1",
            BcnnModel::Bcnn2 => "BCNN2",
            BcnnModel::Bcnn3 => "BCNN3",
        }
    }

    /// Chebyshev order used by every model.
    pub const ORDER: usize = 3;

    pub fn init_params(self, seed: u64) -> Result<PriorParams> {
        PriorParams::init(self.filter_count(), Self::ORDER, &self.variance_set().variances(), seed)
    }
}

impl std::fmt::Display for BcnnModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-filter mixture posterior weights `r_mn`; each row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub r: Vec<Vec<f64>>,
}

/// Gradient of `log p(x; theta)` in filter coefficients and logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub beta: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

impl ParamGradient {
    pub fn zeros_like(theta: &PriorParams) -> Self {
        ParamGradient {
            beta: vec![vec![0.0; theta.order() + 1]; theta.filters()],
            logits: vec![vec![0.0; theta.components()]; theta.filters()],
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGradient, a: f64) {
        for (x, y) in self.beta.iter_mut().zip(&other.beta) {
            axpy(a, y, x);
        }
        for (x, y) in self.logits.iter_mut().zip(&other.logits) {
            axpy(a, y, x);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.beta.iter().chain(&self.logits).flatten().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().chain(&self.logits).flatten().all(|v| v.is_finite())
    }
}

/// Filter outputs and per-component log terms for one signal.
struct Evaluation {
    basis: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    /// `log pi_mn + log N(f_m; 0, sigma2_mn I)`
    log_terms: Vec<Vec<f64>>,
    per_filter: Vec<f64>,
}

impl Evaluation {
    fn new(theta: &PriorParams, g: &Graph, x: &[f64]) -> Result<Self> {
        theta.check_signal(g, x)?;
        let n = x.len() as f64;
        let basis = chebyshev_basis(g.scaled_operator(), x, theta.order())?;
        let mut outputs = Vec::with_capacity(theta.filters());
        let mut log_terms = Vec::with_capacity(theta.filters());
        let mut per_filter = Vec::with_capacity(theta.filters());
        for m in 0..theta.filters() {
            let mut f = vec![0.0; x.len()];
            for (b, t) in theta.beta[m].iter().zip(&basis) {
                axpy(*b, t, &mut f);
            }
            let sq = dot(&f, &f);
            let lw = theta.log_weights(m);
            let terms: Vec<f64> = lw
                .iter()
                .zip(&theta.sigma2[m])
                .map(|(lp, s2)| lp - 0.5 * n * (LN_2PI + s2.ln()) - sq / (2.0 * s2))
                .collect();
            if let Some(c) = terms.iter().position(|t| !t.is_finite()) {
                return Err(GsrError::NonFinite { filter: m, component: c });
            }
            per_filter.push(log_sum_exp(&terms));
            outputs.push(f);
            log_terms.push(terms);
        }
        Ok(Evaluation { basis, outputs, log_terms, per_filter })
    }

    fn responsibilities(&self) -> Vec<Vec<f64>> {
        self.log_terms
            .iter()
            .zip(&self.per_filter)
            .map(|(terms, lse)| terms.iter().map(|t| (t - lse).exp()).collect())
            .collect()
    }

    /// `sum_n r_mn / sigma2_mn` for each filter.
    fn precisions(&self, theta: &PriorParams) -> Vec<f64> {
        self.responsibilities()
            .iter()
            .zip(&theta.sigma2)
            .map(|(r, s2)| r.iter().zip(s2).map(|(r, s)| r / s).sum())
            .collect()
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `log p(x; theta) + log Z(theta)`.
pub fn log_unnorm_density(theta: &PriorParams, g: &Graph, x: &[f64]) -> Result<f64> {
    Ok(Evaluation::new(theta, g, x)?.per_filter.iter().sum())
}

pub fn responsibilities(theta: &PriorParams, g: &Graph, x: &[f64]) -> Result<Responsibilities> {
    Ok(Responsibilities { r: Evaluation::new(theta, g, x)?.responsibilities() })
}

/// Score `d/dx log p(x; theta)`.
pub fn grad_x_log_density(theta: &PriorParams, g: &Graph, x: &[f64]) -> Result<Vec<f64>> {
    let eval = Evaluation::new(theta, g, x)?;
    let prec = eval.precisions(theta);
    let mut grad = vec![0.0; x.len()];
    for m in 0..theta.filters() {
        // F_m is a polynomial in a symmetric matrix, hence symmetric.
        let back = chebyshev_apply(g.scaled_operator(), &theta.beta[m], &eval.outputs[m])?;
        axpy(-prec[m], &back, &mut grad);
    }
    Ok(grad)
}

/// `d/dtheta log p(x; theta)` (partition function excluded).
pub fn grad_params_log_density(theta: &PriorParams, g: &Graph, x: &[f64]) -> Result<ParamGradient> {
    let eval = Evaluation::new(theta, g, x)?;
    let resp = eval.responsibilities();
    let mut grad = ParamGradient::zeros_like(theta);
    for m in 0..theta.filters() {
        let prec: f64 = resp[m].iter().zip(&theta.sigma2[m]).map(|(r, s)| r / s).sum();
        for (p, t) in eval.basis.iter().enumerate() {
            grad.beta[m][p] = -prec * dot(&eval.outputs[m], t);
        }
        let pi = theta.weights(m);
        for n in 0..theta.components() {
            grad.logits[m][n] = resp[m][n] - pi[n];
        }
    }
    Ok(grad)
}

/// Unadjusted Langevin dynamics started at `x_init`.
pub fn sample_prior_langevin(
    theta: &PriorParams,
    g: &Graph,
    x_init: &[f64],
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    langevin_chain(theta, g, x_init, steps, step_size, &mut rng_from(seed))
}

pub fn langevin_chain<R: Rng + ?Sized>(
    theta: &PriorParams,
    g: &Graph,
    x_init: &[f64],
    steps: usize,
    step_size: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(invalid("Langevin needs at least one step"));
    }
    if !(step_size > 0.0) || !step_size.is_finite() {
        return Err(invalid("Langevin step size must be positive"));
    }
    theta.check_signal(g, x_init)?;
    let drift = 0.5 * step_size * step_size;
    let mut x = x_init.to_vec();
    for step in 0..steps {
        let grad = grad_x_log_density(theta, g, &x)?;
        for (xi, gi) in x.iter_mut().zip(&grad) {
            let z: f64 = StandardNormal.sample(rng);
            *xi += drift * gi + step_size * z;
        }
        let norm = dot(&x, &x).sqrt();
        if !(norm <= LANGEVIN_DIVERGENCE_NORM) {
            return Err(GsrError::Diverged { step: step + 1, norm });
        }
    }
    Ok(x)
}
