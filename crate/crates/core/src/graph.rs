//! Weighted undirected graphs, Laplacians and Chebyshev polynomial filters.
//!
//! A [`Graph`] owns its adjacency `W`, Laplacian `L = D - W` (optionally
//! divided by its trace), the largest Laplacian eigenvalue and the scaled
//! Laplacian `L~ = (2 / lambda_max) L - I`. The scaled Laplacian is kept both
//! dense and in CSR form; the Chebyshev recursion only ever touches the sparse
//! copy, so filtering costs `O(P * nnz)`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, GsrError, Result};

/// Relative tolerance used for `lambda_max` when building graphs.
pub const POWER_ITERATION_TOL: f64 = 1e-6;
/// Iteration cap for the power method.
pub const POWER_ITERATION_MAX_ITER: usize = 10_000;
const POWER_ITERATION_SEED: u64 = 0x6c61_6d62_6461;

/// A square operator that can be applied to a vector.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply_into(&self, x: &[f64], out: &mut [f64]);
}

/// Compressed sparse row storage for a square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "CSR conversion needs a square matrix");
        let n = m.nrows();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { n, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            out[i] = acc;
        }
    }
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

/// Chebyshev coefficients `beta_0..beta_P` of one filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoeffs(Vec<f64>);

impl FilterCoeffs {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        check_coeffs(&beta)?;
        Ok(FilterCoeffs(beta))
    }

    /// Polynomial order `P`.
    pub fn order(&self) -> usize {
        self.0.len() - 1
    }
}

impl std::ops::Deref for FilterCoeffs {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_coeffs(beta: &[f64]) -> Result<()> {
    if beta.is_empty() {
        return Err(invalid("filter needs at least one Chebyshev coefficient"));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(invalid("non-finite Chebyshev coefficient"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Graph {
    coords: Vec<[f64; 2]>,
    weights: DMatrix<f64>,
    laplacian: DMatrix<f64>,
    scaled: DMatrix<f64>,
    scaled_sparse: CsrMatrix,
    neighbors: Vec<Vec<usize>>,
    lambda_max: f64,
    trace_normalized: bool,
}

impl Graph {
    /// Builds a graph from a symmetric, nonnegative, zero-diagonal adjacency.
    pub fn from_weights(
        coords: Vec<[f64; 2]>,
        weights: DMatrix<f64>,
        normalize_trace: bool,
    ) -> Result<Self> {
        let n = weights.nrows();
        if weights.ncols() != n {
            return Err(GsrError::DimensionMismatch { expected: n, got: weights.ncols() });
        }
        if coords.len() != n {
            return Err(GsrError::DimensionMismatch { expected: n, got: coords.len() });
        }
        if n < 2 {
            return Err(invalid("a graph needs at least 2 vertices"));
        }
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            if weights[(i, i)] != 0.0 {
                return Err(invalid(format!("self loop at vertex {i}")));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(invalid(format!("bad weight {w} at ({i}, {j})")));
                }
                if w != weights[(j, i)] {
                    return Err(invalid(format!("asymmetric weight at ({i}, {j})")));
                }
                if w > 0.0 {
                    neighbors[i].push(j);
                }
            }
        }
        if neighbors.iter().all(Vec::is_empty) {
            return Err(GsrError::EmptyGraph);
        }

        let mut laplacian = -weights.clone();
        for i in 0..n {
            laplacian[(i, i)] = weights.row(i).sum();
        }
        if normalize_trace {
            let trace = laplacian.trace();
            laplacian /= trace;
        }
        let lambda_max = largest_eigenvalue(&laplacian, POWER_ITERATION_TOL)?;
        let scaled = &laplacian * (2.0 / lambda_max) - DMatrix::identity(n, n);
        let scaled_sparse = CsrMatrix::from_dense(&scaled);
        Ok(Graph {
            coords,
            weights,
            laplacian,
            scaled,
            scaled_sparse,
            neighbors,
            lambda_max,
            trace_normalized: normalize_trace,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    pub fn scaled_laplacian(&self) -> &DMatrix<f64> {
        &self.scaled
    }

    pub fn scaled_operator(&self) -> &CsrMatrix {
        &self.scaled_sparse
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn is_trace_normalized(&self) -> bool {
        self.trace_normalized
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Breadth-first ordering from `start`, visiting neighbors in index
    /// order, truncated to `limit` vertices.
    pub fn bfs_ball(&self, start: usize, limit: usize) -> Vec<usize> {
        let mut seen = vec![false; self.len()];
        let mut order = Vec::with_capacity(limit);
        let mut queue = VecDeque::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            if order.len() == limit {
                break;
            }
            order.push(v);
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        order
    }

    /// Writes `i j w` lines for every edge with `i < j`.
    pub fn write_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.len() {
            for &j in &self.neighbors[i] {
                if j > i {
                    writeln!(out, "{i} {j} {}", fmt_f64(self.weights[(i, j)])).unwrap();
                }
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Writes `i x y` lines, one per vertex.
    pub fn write_coords(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (i, c) in self.coords.iter().enumerate() {
            writeln!(out, "{i} {} {}", fmt_f64(c[0]), fmt_f64(c[1])).unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Rebuilds a graph from an edge-list file and a coordinates file.
    pub fn load(
        edges_path: impl AsRef<Path>,
        coords_path: impl AsRef<Path>,
        normalize_trace: bool,
    ) -> Result<Self> {
        let coords = read_coords(coords_path)?;
        let n = coords.len();
        let mut w = DMatrix::zeros(n, n);
        let text = std::fs::read_to_string(edges_path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(GsrError::Parse(format!("edge line {}: expected `i j w`", lineno + 1)));
            }
            let i = parse_index(fields[0], n)?;
            let j = parse_index(fields[1], n)?;
            let v: f64 = fields[2]
                .parse()
                .map_err(|_| GsrError::Parse(format!("edge line {}: bad weight", lineno + 1)))?;
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
        Graph::from_weights(coords, w, normalize_trace)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_index(s: &str, n: usize) -> Result<usize> {
    let i: usize = s.parse().map_err(|_| GsrError::Parse(format!("bad vertex index `{s}`")))?;
    if i >= n {
        return Err(GsrError::Parse(format!("vertex index {i} out of range (n = {n})")));
    }
    Ok(i)
}

pub fn read_coords(path: impl AsRef<Path>) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<(usize, [f64; 2])> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(GsrError::Parse(format!("coords line {}: expected `i x y`", lineno + 1)));
        }
        let bad = || GsrError::Parse(format!("coords line {}: bad number", lineno + 1));
        let i: usize = f[0].parse().map_err(|_| bad())?;
        let x: f64 = f[1].parse().map_err(|_| bad())?;
        let y: f64 = f[2].parse().map_err(|_| bad())?;
        rows.push((i, [x, y]));
    }
    rows.sort_by_key(|r| r.0);
    for (expected, (i, _)) in rows.iter().enumerate() {
        if *i != expected {
            return Err(GsrError::Parse(format!("coords file must list vertices 0..n, missing {expected}")));
        }
    }
    Ok(rows.into_iter().map(|r| r.1).collect())
}

/// Gaussian RBF graph: `W_ij = exp(-d_ij^2 / (2 width^2))`, kept when the
/// weight is at least `edge_threshold`.
pub fn build_rbf_graph(
    coords: &[[f64; 2]],
    kernel_width: f64,
    edge_threshold: f64,
    normalize_trace: bool,
) -> Result<Graph> {
    if coords.len() < 2 {
        return Err(invalid("need at least 2 coordinates"));
    }
    if coords.iter().all(|c| c == &coords[0]) {
        return Err(invalid("coordinates are all coincident"));
    }
    if !(kernel_width > 0.0) {
        return Err(invalid("kernel width must be positive"));
    }
    let n = coords.len();
    let denom = 2.0 * kernel_width * kernel_width;
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            let weight = (-(dx * dx + dy * dy) / denom).exp();
            if weight >= edge_threshold {
                w[(i, j)] = weight;
                w[(j, i)] = weight;
            }
        }
    }
    Graph::from_weights(coords.to_vec(), w, normalize_trace)
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration from a fixed pseudo-random start.
pub fn largest_eigenvalue(l: &DMatrix<f64>, tol: f64) -> Result<f64> {
    largest_eigenvalue_capped(l, tol, POWER_ITERATION_MAX_ITER)
}

pub fn largest_eigenvalue_capped(l: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<f64> {
    let n = l.nrows();
    if l.ncols() != n {
        return Err(GsrError::DimensionMismatch { expected: n, got: l.ncols() });
    }
    if n == 0 {
        return Err(invalid("empty matrix"));
    }
    // The all-ones vector spans the Laplacian nullspace, so start elsewhere.
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    v.normalize_mut();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = l * &v;
        let next = v.dot(&w);
        let residual = (&w - &v * next).norm();
        let norm = w.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let settled = (next - lambda).abs() <= 1e-3 * tol * next.abs();
        lambda = next;
        if residual <= tol * lambda.abs() || settled {
            return Ok(lambda);
        }
        v = w / norm;
    }
    Err(GsrError::NoConvergence { estimate: lambda, iterations: max_iter })
}

/// `sum_p beta_p T_p(L~) x` by the three-term recursion.
pub fn chebyshev_apply<O: LinearOperator + ?Sized>(
    op: &O,
    beta: &[f64],
    x: &[f64],
) -> Result<Vec<f64>> {
    check_coeffs(beta)?;
    let n = op.dim();
    if x.len() != n {
        return Err(GsrError::DimensionMismatch { expected: n, got: x.len() });
    }
    let mut out: Vec<f64> = x.iter().map(|v| beta[0] * v).collect();
    if beta.len() == 1 {
        return Ok(out);
    }
    let mut prev = x.to_vec();
    let mut cur = vec![0.0; n];
    op.apply_into(x, &mut cur);
    axpy(beta[1], &cur, &mut out);
    let mut next = vec![0.0; n];
    for &b in &beta[2..] {
        op.apply_into(&cur, &mut next);
        for i in 0..n {
            next[i] = 2.0 * next[i] - prev[i];
        }
        axpy(b, &next, &mut out);
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(out)
}

/// The vectors `T_0(L~) x, ..., T_order(L~) x`.
pub fn chebyshev_basis<O: LinearOperator + ?Sized>(
    op: &O,
    x: &[f64],
    order: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = op.dim();
    if x.len() != n {
        return Err(GsrError::DimensionMismatch { expected: n, got: x.len() });
    }
    let mut basis = Vec::with_capacity(order + 1);
    basis.push(x.to_vec());
    if order >= 1 {
        let mut t1 = vec![0.0; n];
        op.apply_into(x, &mut t1);
        basis.push(t1);
    }
    for p in 2..=order {
        let mut next = vec![0.0; n];
        op.apply_into(&basis[p - 1], &mut next);
        for i in 0..n {
            next[i] = 2.0 * next[i] - basis[p - 2][i];
        }
        basis.push(next);
    }
    Ok(basis)
}

/// Dense `F = sum_p beta_p T_p(L~)`.
pub fn chebyshev_operator(scaled: &DMatrix<f64>, beta: &[f64]) -> Result<DMatrix<f64>> {
    check_coeffs(beta)?;
    let n = scaled.nrows();
    let mut prev = DMatrix::<f64>::identity(n, n);
    let mut out = &prev * beta[0];
    if beta.len() == 1 {
        return Ok(out);
    }
    let mut cur = scaled.clone();
    out += &cur * beta[1];
    for &b in &beta[2..] {
        let next = scaled * &cur * 2.0 - &prev;
        out += &next * b;
        prev = cur;
        cur = next;
    }
    Ok(out)
}

/// Subgraph induced by `nodes`, in the given order.
pub fn induced_subgraph(g: &Graph, nodes: &[usize]) -> Result<Graph> {
    if nodes.len() < 2 {
        return Err(invalid("induced subgraph needs at least 2 nodes"));
    }
    let mut seen = vec![false; g.len()];
    for &v in nodes {
        if v >= g.len() {
            return Err(invalid(format!("node {v} out of range")));
        }
        if std::mem::replace(&mut seen[v], true) {
            return Err(invalid(format!("duplicate node {v}")));
        }
    }
    let k = nodes.len();
    let w = DMatrix::from_fn(k, k, |a, b| g.weights[(nodes[a], nodes[b])]);
    let coords = nodes.iter().map(|&v| g.coords[v]).collect();
    Graph::from_weights(coords, w, g.trace_normalized)
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
