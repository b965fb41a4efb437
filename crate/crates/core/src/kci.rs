//! Kernel-based (conditional) independence tests.
//!
//! Columns are z-scored and embedded with Gaussian kernels whose width is the
//! median pairwise distance of the block. The unconditional statistic is
//! `(1/m) tr(Kx Ky)` on centred kernels. The conditional statistic follows the
//! KCI construction: `x` is embedded jointly with `z/2`, both kernels are
//! residualised by `R = eps (Kz + eps I)^-1`, and the statistic is
//! `(1/m) tr(Rz Kx Rz . Rz Ky Rz)`. Nulls are moment-matched gammas, with a
//! permutation alternative.
//!
//! Dense kernels cost `O(m^2)` memory and the conditional residualisation costs
//! `O(m^3)` time, so larger problems use pivoted incomplete-Cholesky factors and
//! the Woodbury identity instead (see [`Factorization`]).

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use nalgebra::{Cholesky, DMatrix};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, stream};

/// Number of leading samples used for the median-distance bandwidth.
const MEDIAN_SUBSAMPLE: usize = 1000;
const RESIDUALIZER_CACHE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NullMethod {
    #[default]
    Gamma,
    Permutation,
}

/// How kernel matrices are represented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Factorization {
    /// Exact kernels for unconditional tests up to `exact_limit` samples and
    /// low-rank factors for everything cubic in `m`.
    #[default]
    Auto,
    Exact,
    LowRank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KciOptions {
    /// Ridge of the conditional kernel regression.
    pub epsilon: f64,
    pub null: NullMethod,
    pub permutations: usize,
    pub factorization: Factorization,
    pub exact_limit: usize,
    /// Incomplete Cholesky stops once every residual diagonal entry is below this.
    pub rank_tol: f64,
    pub max_rank: usize,
    /// Residualised factors drop eigen-directions below this fraction of the
    /// largest eigenvalue; zero keeps every direction.
    pub spectrum_floor: f64,
    /// Seed for permutation nulls.
    pub seed: u64,
}

impl Default for KciOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            null: NullMethod::Gamma,
            permutations: 200,
            factorization: Factorization::Auto,
            exact_limit: 1000,
            rank_tol: 1e-6,
            max_rank: 400,
            spectrum_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub conditioning_set: Vec<usize>,
    pub method: NullMethod,
    /// `p_value > alpha`.
    pub independent: bool,
    /// Set when a variable had zero kernel variance and the test was skipped.
    pub degenerate: bool,
}

/// Unconditional test of `x` against `y`.
pub fn kci_unconditional(x: &[f64], y: &[f64], alpha: f64) -> Result<CiTestResult> {
    kci_unconditional_with(x, y, alpha, &KciOptions::default())
}

pub fn kci_unconditional_with(
    x: &[f64],
    y: &[f64],
    alpha: f64,
    opts: &KciOptions,
) -> Result<CiTestResult> {
    if x.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "independence test needs at least 10 samples, got {}",
            x.len()
        )));
    }
    let engine = KciEngine::new(vec![x.to_vec(), y.to_vec()], opts.clone())?;
    engine.test(0, 1, &[], alpha)
}

/// Conditional test of `x` against `y` given the columns of `z`.
pub fn kci_conditional(x: &[f64], y: &[f64], z: &[Vec<f64>], alpha: f64) -> Result<CiTestResult> {
    kci_conditional_with(x, y, z, alpha, &KciOptions::default())
}

pub fn kci_conditional_with(
    x: &[f64],
    y: &[f64],
    z: &[Vec<f64>],
    alpha: f64,
    opts: &KciOptions,
) -> Result<CiTestResult> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("conditioning set is empty".into()));
    }
    if x.len() < 30 {
        return Err(Error::InvalidArgument(format!(
            "conditional test needs at least 30 samples, got {}",
            x.len()
        )));
    }
    let mut cols = vec![x.to_vec(), y.to_vec()];
    cols.extend(z.iter().cloned());
    let engine = KciEngine::new(cols, opts.clone())?;
    let s: Vec<usize> = (2..2 + z.len()).collect();
    engine.test(0, 1, &s, alpha)
}

/// Column-wise test runner with per-variable kernel caches.
pub struct KciEngine {
    m: usize,
    /// Standardised columns; `None` marks a constant column.
    columns: Vec<Option<Vec<f64>>>,
    opts: KciOptions,
    dense: RefCell<HashMap<usize, Rc<DMatrix<f64>>>>,
    factors: RefCell<HashMap<usize, Rc<DMatrix<f64>>>>,
    residualizers: RefCell<HashMap<Vec<usize>, Rc<Residualizer>>>,
}

enum Residualizer {
    Dense(DMatrix<f64>),
    /// `R F = F - G (G'G + eps I)^-1 G' F`.
    LowRank { g: DMatrix<f64>, inner: DMatrix<f64> },
}

impl Residualizer {
    fn apply_factor(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Residualizer::Dense(r) => r * f,
            Residualizer::LowRank { g, inner } => f - g * (inner * (g.transpose() * f)),
        }
    }
}

impl KciEngine {
    pub fn new(columns: Vec<Vec<f64>>, opts: KciOptions) -> Result<Self> {
        let m = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != m) {
            return Err(Error::DimensionMismatch(
                "independence test columns differ in length".into(),
            ));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite value in test data".into()));
        }
        if opts.epsilon <= 0.0 {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        Ok(Self {
            m,
            columns: columns.iter().map(|c| standardize(c)).collect(),
            opts,
            dense: RefCell::default(),
            factors: RefCell::default(),
            residualizers: RefCell::default(),
        })
    }

    pub fn samples(&self) -> usize {
        self.m
    }

    pub fn variables(&self) -> usize {
        self.columns.len()
    }

    fn exact_unconditional(&self) -> bool {
        match self.opts.factorization {
            Factorization::Exact => true,
            Factorization::LowRank => false,
            Factorization::Auto => self.m <= self.opts.exact_limit,
        }
    }

    fn exact_conditional(&self) -> bool {
        self.opts.factorization == Factorization::Exact
    }

    /// Test `x` against `y` given the variables in `s` (all indices are columns).
    pub fn test(&self, x: usize, y: usize, s: &[usize], alpha: f64) -> Result<CiTestResult> {
        let nvars = self.columns.len();
        if x >= nvars || y >= nvars || s.iter().any(|&k| k >= nvars) {
            return Err(Error::InvalidArgument("test variable out of range".into()));
        }
        let degenerate = |method| CiTestResult {
            statistic: 0.0,
            p_value: 1.0,
            conditioning_set: s.to_vec(),
            method,
            independent: true,
            degenerate: true,
        };
        let method = self.opts.null;
        if self.columns[x].is_none() || self.columns[y].is_none() {
            return Ok(degenerate(method));
        }
        let z: Vec<usize> = s
            .iter()
            .copied()
            .filter(|&k| self.columns[k].is_some())
            .collect();
        let seed = self.test_seed(x, y, s);
        let outcome = if z.is_empty() {
            self.unconditional(x, y, seed)?
        } else {
            self.conditional(x, y, &z, seed)?
        };
        let Some((statistic, p_value)) = outcome else {
            return Ok(degenerate(method));
        };
        Ok(CiTestResult {
            statistic,
            p_value,
            conditioning_set: s.to_vec(),
            method,
            independent: p_value > alpha,
            degenerate: false,
        })
    }

    fn test_seed(&self, x: usize, y: usize, s: &[usize]) -> u64 {
        let mut h = derive_seed(self.opts.seed, stream::PERMUTATION);
        for &k in [x, y].iter().chain(s) {
            h = derive_seed(h, k as u64 + 1);
        }
        h
    }

    fn block(&self, vars: &[(usize, f64)]) -> Block {
        let cols: Vec<(&[f64], f64)> = vars
            .iter()
            .map(|&(k, scale)| (self.columns[k].as_deref().expect("non-constant"), scale))
            .collect();
        Block::new(&cols, self.m)
    }

    fn dense_kernel(&self, var: usize) -> Rc<DMatrix<f64>> {
        if let Some(k) = self.dense.borrow().get(&var) {
            return Rc::clone(k);
        }
        let k = Rc::new(self.block(&[(var, 1.0)]).centered_dense());
        self.dense.borrow_mut().insert(var, Rc::clone(&k));
        k
    }

    fn factor(&self, var: usize) -> Rc<DMatrix<f64>> {
        if let Some(f) = self.factors.borrow().get(&var) {
            return Rc::clone(f);
        }
        let f = Rc::new(
            self.block(&[(var, 1.0)])
                .centered_factor(self.opts.rank_tol, self.opts.max_rank),
        );
        self.factors.borrow_mut().insert(var, Rc::clone(&f));
        f
    }

    fn unconditional(&self, x: usize, y: usize, seed: u64) -> Result<Option<(f64, f64)>> {
        let m = self.m as f64;
        if self.exact_unconditional() {
            let kx = self.dense_kernel(x);
            let ky = self.dense_kernel(y);
            let stat = kx.dot(&ky) / m;
            let p = match self.opts.null {
                NullMethod::Gamma => {
                    let mean = kx.trace() * ky.trace() / (m * m);
                    let var = 2.0 * kx.norm_squared() * ky.norm_squared() / (m * m * m * m);
                    gamma_p_value(stat, mean, var)
                }
                NullMethod::Permutation => Some(self.permutation_dense(&kx, &ky, stat, seed)),
            };
            Ok(p.map(|p| (stat, p)))
        } else {
            let fx = self.factor(x);
            let fy = self.factor(y);
            self.factor_statistics(&fx, &fy, seed)
        }
    }

    /// Unconditional statistics from centred factors `Kx = Fx Fx'`, `Ky = Fy Fy'`.
    fn factor_statistics(
        &self,
        fx: &DMatrix<f64>,
        fy: &DMatrix<f64>,
        seed: u64,
    ) -> Result<Option<(f64, f64)>> {
        let m = self.m as f64;
        let stat = (fx.transpose() * fy).norm_squared() / m;
        let p = match self.opts.null {
            NullMethod::Gamma => {
                let mean = fx.norm_squared() * fy.norm_squared() / (m * m);
                let var = 2.0
                    * (fx.transpose() * fx).norm_squared()
                    * (fy.transpose() * fy).norm_squared()
                    / (m * m * m * m);
                gamma_p_value(stat, mean, var)
            }
            NullMethod::Permutation => Some(self.permutation_factor(fx, fy, stat, seed)),
        };
        Ok(p.map(|p| (stat, p)))
    }

    fn residualizer(&self, z: &[usize]) -> Result<Rc<Residualizer>> {
        if let Some(r) = self.residualizers.borrow().get(z) {
            return Ok(Rc::clone(r));
        }
        let vars: Vec<(usize, f64)> = z.iter().map(|&k| (k, 1.0)).collect();
        let block = self.block(&vars);
        let eps = self.opts.epsilon;
        let r = if self.exact_conditional() {
            let kz = block.centered_dense();
            let inv = regularized_inverse(&kz, eps)?;
            Residualizer::Dense(inv * eps)
        } else {
            let g = block.centered_factor(self.opts.rank_tol, self.opts.max_rank);
            let gtg = g.transpose() * &g;
            let inner = regularized_inverse(&gtg, eps)?;
            Residualizer::LowRank { g, inner }
        };
        let r = Rc::new(r);
        let mut cache = self.residualizers.borrow_mut();
        if cache.len() >= RESIDUALIZER_CACHE {
            cache.clear();
        }
        cache.insert(z.to_vec(), Rc::clone(&r));
        Ok(r)
    }

    fn conditional(&self, x: usize, y: usize, z: &[usize], seed: u64) -> Result<Option<(f64, f64)>> {
        let rz = self.residualizer(z)?;
        let mut xvars = vec![(x, 1.0)];
        xvars.extend(z.iter().map(|&k| (k, 0.5)));
        let xblock = self.block(&xvars);
        let m = self.m as f64;
        match rz.as_ref() {
            Residualizer::Dense(r) => {
                let kx = xblock.centered_dense();
                let ky = self.dense_kernel(y);
                let kxz = r * kx * r;
                let kyz = r * ky.as_ref() * r;
                let stat = kxz.dot(&kyz) / m;
                let p = match self.opts.null {
                    NullMethod::Gamma => {
                        let mean = kxz
                            .diagonal()
                            .iter()
                            .zip(kyz.diagonal().iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / m;
                        let var = 2.0
                            * kxz
                                .iter()
                                .zip(kyz.iter())
                                .map(|(a, b)| (a * b) * (a * b))
                                .sum::<f64>()
                            / (m * m);
                        gamma_p_value(stat, mean, var)
                    }
                    NullMethod::Permutation => Some(self.permutation_dense(&kxz, &kyz, stat, seed)),
                };
                Ok(p.map(|p| (stat, p)))
            }
            low_rank => {
                let floor = self.opts.spectrum_floor;
                let ax = compress(
                    low_rank.apply_factor(
                        &xblock.centered_factor(self.opts.rank_tol, self.opts.max_rank),
                    ),
                    floor,
                );
                let ay = compress(low_rank.apply_factor(&self.factor(y)), floor);
                let stat = (ax.transpose() * &ay).norm_squared() / m;
                let p = match self.opts.null {
                    NullMethod::Gamma => {
                        let mean = ax
                            .row_iter()
                            .zip(ay.row_iter())
                            .map(|(a, b)| a.norm_squared() * b.norm_squared())
                            .sum::<f64>()
                            / m;
                        let var = 2.0 * hadamard_square_sum(&ax, &ay) / (m * m);
                        gamma_p_value(stat, mean, var)
                    }
                    NullMethod::Permutation => Some(self.permutation_factor(&ax, &ay, stat, seed)),
                };
                Ok(p.map(|p| (stat, p)))
            }
        }
    }

    fn permutation_dense(&self, kx: &DMatrix<f64>, ky: &DMatrix<f64>, stat: f64, seed: u64) -> f64 {
        let m = self.m;
        let mut rng = rng_from(seed);
        let mut perm: Vec<usize> = (0..m).collect();
        let mut exceed = 0usize;
        for _ in 0..self.opts.permutations {
            perm.shuffle(&mut rng);
            let mut s = 0.0;
            for j in 0..m {
                let pj = perm[j];
                for i in 0..m {
                    s += kx[(perm[i], pj)] * ky[(i, j)];
                }
            }
            if s / m as f64 >= stat {
                exceed += 1;
            }
        }
        (1 + exceed) as f64 / (1 + self.opts.permutations) as f64
    }

    fn permutation_factor(&self, fx: &DMatrix<f64>, fy: &DMatrix<f64>, stat: f64, seed: u64) -> f64 {
        let m = self.m;
        let mut rng = rng_from(seed);
        let mut perm: Vec<usize> = (0..m).collect();
        let mut exceed = 0usize;
        for _ in 0..self.opts.permutations {
            perm.shuffle(&mut rng);
            let shuffled = fx.select_rows(perm.iter());
            if (shuffled.transpose() * fy).norm_squared() / m as f64 >= stat {
                exceed += 1;
            }
        }
        (1 + exceed) as f64 / (1 + self.opts.permutations) as f64
    }
}

/// Rows per block when accumulating over kernel entries.
const ROW_BLOCK: usize = 256;

/// An `m x k` factor spanning the leading eigen-directions of `A A'`.
fn compress(a: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    if a.ncols() == 0 || floor <= 0.0 {
        return a;
    }
    let eig = (a.transpose() * &a).symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > floor * top)
        .collect();
    if keep.len() == a.ncols() {
        return a;
    }
    let basis = eig.eigenvectors.select_columns(keep.iter());
    a * basis
}

/// `sum_ij (A A')_ij^2 (B B')_ij^2` without forming either `m x m` product.
fn hadamard_square_sum(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a.nrows();
    let at = a.transpose();
    let bt = b.transpose();
    let mut total = 0.0;
    let mut start = 0;
    while start < m {
        let rows = ROW_BLOCK.min(m - start);
        let ka = a.rows(start, rows) * &at;
        let kb = b.rows(start, rows) * &bt;
        total += ka
            .iter()
            .zip(kb.iter())
            .map(|(x, y)| (x * y) * (x * y))
            .sum::<f64>();
        start += rows;
    }
    total
}

/// `(A + eps I)^-1`, retrying once with a ten times larger ridge.
fn regularized_inverse(a: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    for ridge in [eps, 10.0 * eps] {
        let shifted = a + DMatrix::identity(n, n) * ridge;
        if let Some(chol) = Cholesky::new(shifted) {
            let inv = chol.inverse();
            if inv.iter().all(|v| v.is_finite()) {
                return Ok(inv * (ridge / eps));
            }
        }
    }
    Err(Error::Numerical(format!(
        "regularised kernel system of size {n} is singular even with ridge {}",
        10.0 * eps
    )))
}

/// Upper tail of the moment-matched gamma; `None` if the null is degenerate.
fn gamma_p_value(stat: f64, mean: f64, var: f64) -> Option<f64> {
    if !(mean > 1e-300 && var > 1e-300) || !stat.is_finite() {
        return None;
    }
    let shape = mean * mean / var;
    let scale = var / mean;
    let gamma = Gamma::new(shape, 1.0 / scale).ok()?;
    Some(gamma.sf(stat).clamp(0.0, 1.0))
}

fn standardize(col: &[f64]) -> Option<Vec<f64>> {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 * (1.0 + mean.abs())) {
        return None;
    }
    Some(col.iter().map(|v| (v - mean) / sd).collect())
}

/// A set of scaled columns embedded with one Gaussian kernel.
struct Block {
    m: usize,
    dim: usize,
    /// Row-major `m x dim`.
    points: Vec<f64>,
    inv_two_width_sq: f64,
}

impl Block {
    fn new(cols: &[(&[f64], f64)], m: usize) -> Self {
        let dim = cols.len();
        let mut points = vec![0.0; m * dim];
        for (d, (col, scale)) in cols.iter().enumerate() {
            for (t, v) in col.iter().enumerate() {
                points[t * dim + d] = v * scale;
            }
        }
        let mut block = Self {
            m,
            dim,
            points,
            inv_two_width_sq: 0.0,
        };
        let width = block.median_distance();
        block.inv_two_width_sq = 1.0 / (2.0 * width * width);
        block
    }

    fn sq_dist(&self, i: usize, j: usize) -> f64 {
        let a = &self.points[i * self.dim..(i + 1) * self.dim];
        let b = &self.points[j * self.dim..(j + 1) * self.dim];
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    fn median_distance(&self) -> f64 {
        let k = self.m.min(MEDIAN_SUBSAMPLE);
        let mut d: Vec<f64> = Vec::with_capacity(k * (k - 1) / 2);
        for i in 0..k {
            for j in 0..i {
                d.push(self.sq_dist(i, j));
            }
        }
        if d.is_empty() {
            return 1.0;
        }
        let mid = d.len() / 2;
        let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
        let median = median.sqrt();
        if median > 0.0 {
            median
        } else {
            1.0
        }
    }

    fn kernel(&self, i: usize, j: usize) -> f64 {
        (-self.sq_dist(i, j) * self.inv_two_width_sq).exp()
    }

    /// `H K H` with `H = I - 11'/m`.
    fn centered_dense(&self) -> DMatrix<f64> {
        let m = self.m;
        let mut k = DMatrix::zeros(m, m);
        for j in 0..m {
            k[(j, j)] = 1.0;
            for i in 0..j {
                let v = self.kernel(i, j);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        let means: Vec<f64> = (0..m).map(|j| k.column(j).sum() / m as f64).collect();
        let grand = means.iter().sum::<f64>() / m as f64;
        for j in 0..m {
            for i in 0..m {
                k[(i, j)] += grand - means[i] - means[j];
            }
        }
        k
    }

    /// Pivoted incomplete Cholesky `K ~ G G'`, returned with centred columns.
    fn centered_factor(&self, tol: f64, max_rank: usize) -> DMatrix<f64> {
        let m = self.m;
        let max_rank = max_rank.min(m).max(1);
        let mut residual = vec![1.0_f64; m];
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < max_rank {
            let (pivot, best) = residual
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("nonempty");
            if best <= tol {
                break;
            }
            let root = best.sqrt();
            let mut col: Vec<f64> = (0..m).map(|i| self.kernel(i, pivot)).collect();
            for prev in &cols {
                let pv = prev[pivot];
                col.iter_mut().zip(prev).for_each(|(c, p)| *c -= p * pv);
            }
            for (i, c) in col.iter_mut().enumerate() {
                *c /= root;
                residual[i] = (residual[i] - *c * *c).max(0.0);
            }
            residual[pivot] = 0.0;
            cols.push(col);
        }
        let r = cols.len();
        let mut g = DMatrix::from_fn(m, r, |i, k| cols[k][i]);
        for mut c in g.column_iter_mut() {
            let mean = c.sum() / m as f64;
            c.add_scalar_mut(-mean);
        }
        g
    }
}
