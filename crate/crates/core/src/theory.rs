//! Empirical check of the convergence advantage of masked linear models.
//!
//! A realizable least-squares problem `min_w L(w) = 1/(2m) ||X w - Y||^2` is
//! built with `Y = X w*` and `w*` supported on a mask `D`. Gradient descent is
//! run on the dense problem, and the causal trajectory is either the masked
//! copy `D . w(k)` of the dense iterates or masked-gradient descent. The
//! report tracks the loss ratio between the two, the per-step distance ratio,
//! and every inequality of the analysis at each step.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CausalAdjacencyMatrix;
use crate::rng::{derive_seed, rng_from};

/// Relative slack for inequalities that hold exactly in real arithmetic.
pub const ROUNDING_SLACK: f64 = 1e-10;
/// Losses and squared distances below this fraction of their starting value
/// are at the floating-point floor and compare as equal.
pub const LOSS_FLOOR: f64 = 1e-24;
/// A trajectory is flagged as divergent once its loss exceeds this multiple of the start.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DEFAULT_SAMPLES: usize = 100;
pub const DEFAULT_STEPS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProblem {
    pub n: usize,
    pub c: usize,
    /// `m x (n + c)` design matrix.
    pub x: DMatrix<f64>,
    /// `m x n` targets, exactly `x * w_star`.
    pub y: DMatrix<f64>,
    /// `(n + c) x n`, zero off the mask.
    pub w_star: DMatrix<f64>,
    pub mask: CausalAdjacencyMatrix,
    /// Smallest and largest eigenvalue of the loss Hessian `X'X / m`.
    pub strong_convexity: f64,
    pub smoothness: f64,
    pub w0: DMatrix<f64>,
}

impl LinearProblem {
    pub fn samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn density(&self) -> f64 {
        self.mask.density()
    }

    pub fn mask_matrix(&self) -> DMatrix<f64> {
        let inputs = self.n + self.c;
        DMatrix::from_fn(inputs, self.n, |j, i| if self.mask.get(j, i) { 1.0 } else { 0.0 })
    }

    pub fn loss(&self, w: &DMatrix<f64>) -> f64 {
        let r = &self.x * w - &self.y;
        0.5 * r.norm_squared() / self.samples() as f64
    }

    pub fn gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let r = &self.x * w - &self.y;
        self.x.transpose() * r / self.samples() as f64
    }

    /// Default step size `1 / M`.
    pub fn default_step(&self) -> f64 {
        1.0 / self.smoothness
    }
}

/// Gaussian design, a mask with exactly `round(density * (n + c) * n)` edges
/// (at least one), Gaussian optimum on the mask, and `w0 = 0`.
pub fn make_linear_problem(
    n: usize,
    c: usize,
    samples: usize,
    density: f64,
    seed: u64,
) -> Result<LinearProblem> {
    let inputs = n + c;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if samples <= inputs {
        return Err(Error::InvalidArgument(format!(
            "need more samples than inputs ({samples} <= {inputs})"
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    for attempt in 0..2u64 {
        let mut rng = rng_from(derive_seed(seed, attempt));
        let x = DMatrix::from_fn(samples, inputs, |_, _| rng.sample::<f64, _>(StandardNormal));
        let hessian = x.transpose() * &x / samples as f64;
        let eig = hessian.symmetric_eigen();
        let lo = eig.eigenvalues.min();
        let hi = eig.eigenvalues.max();
        if !(lo > 1e-10 * hi) {
            continue;
        }
        let cells = inputs * n;
        let edges = ((density * cells as f64).round() as usize).clamp(1, cells);
        let mut mask = CausalAdjacencyMatrix::empty(n, c);
        for k in sample_indices(&mut rng, cells, edges) {
            mask.set(k / n, k % n, true);
        }
        let w_star = DMatrix::from_fn(inputs, n, |j, i| {
            let v: f64 = rng.sample(StandardNormal);
            if mask.get(j, i) {
                v
            } else {
                0.0
            }
        });
        let y = &x * &w_star;
        return Ok(LinearProblem {
            n,
            c,
            x,
            y,
            w_star,
            mask,
            strong_convexity: lo,
            smoothness: hi,
            w0: DMatrix::zeros(inputs, n),
        });
    }
    Err(Error::Numerical(
        "design matrix stayed rank deficient after a resample".into(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CausalMode {
    /// `w_c(k) = D . w(k)` from the dense run.
    #[default]
    MaskedTrajectory,
    /// Gradient descent with the gradient masked by `D` every step.
    Projected,
}

impl std::str::FromStr for CausalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_trajectory" | "masked-trajectory" => Ok(Self::MaskedTrajectory),
            "projected" => Ok(Self::Projected),
            other => Err(Error::InvalidArgument(format!("unknown causal mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Iterates `w(0) ..= w(steps)`.
    pub weights: Vec<DMatrix<f64>>,
    pub losses: Vec<f64>,
    pub diverged: bool,
}

fn check_step(problem: &LinearProblem, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 2.0 / problem.smoothness) {
        return Err(Error::InvalidArgument(format!(
            "step size must lie in (0, 2/M) = (0, {}), got {alpha}",
            2.0 / problem.smoothness
        )));
    }
    Ok(())
}

fn descend(
    problem: &LinearProblem,
    start: DMatrix<f64>,
    steps: usize,
    alpha: f64,
    mask: Option<&DMatrix<f64>>,
) -> Trajectory {
    let mut w = start;
    let first = problem.loss(&w);
    let mut weights = Vec::with_capacity(steps + 1);
    let mut losses = Vec::with_capacity(steps + 1);
    let mut diverged = false;
    weights.push(w.clone());
    losses.push(first);
    for _ in 0..steps {
        let mut g = problem.gradient(&w);
        if let Some(d) = mask {
            g.component_mul_assign(d);
        }
        w -= g * alpha;
        let loss = problem.loss(&w);
        diverged |= !loss.is_finite() || loss > DIVERGENCE_FACTOR * first.max(f64::MIN_POSITIVE);
        weights.push(w.clone());
        losses.push(loss);
    }
    Trajectory {
        weights,
        losses,
        diverged,
    }
}

pub fn gd_dense(problem: &LinearProblem, steps: usize, alpha: f64) -> Result<Trajectory> {
    check_step(problem, alpha)?;
    Ok(descend(problem, problem.w0.clone(), steps, alpha, None))
}

pub fn gd_causal(
    problem: &LinearProblem,
    steps: usize,
    alpha: f64,
    mode: CausalMode,
) -> Result<Trajectory> {
    check_step(problem, alpha)?;
    let d = problem.mask_matrix();
    match mode {
        CausalMode::MaskedTrajectory => {
            let dense = descend(problem, problem.w0.clone(), steps, alpha, None);
            let weights: Vec<DMatrix<f64>> =
                dense.weights.iter().map(|w| w.component_mul(&d)).collect();
            let losses = weights.iter().map(|w| problem.loss(w)).collect();
            Ok(Trajectory {
                weights,
                losses,
                diverged: dense.diverged,
            })
        }
        CausalMode::Projected => Ok(descend(
            problem,
            problem.w0.component_mul(&d),
            steps,
            alpha,
            Some(&d),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub k: usize,
    pub dense_loss: f64,
    pub causal_loss: f64,
    /// Causal over dense excess loss; 1 once the dense run has reached the optimum.
    pub xi: f64,
    /// `||w_c(k) - w*||^2 / ||w(k) - w*||^2`.
    pub delta_k: f64,
    pub dense_dist_sq: f64,
    pub causal_dist_sq: f64,
    /// `||(1 - D) . w(k)||^2`.
    pub off_mask_sq: f64,
    /// Relative gap of `dense_dist_sq = causal_dist_sq + off_mask_sq`.
    pub pythagoras_rel_error: f64,
    /// `||w(k) - w*||^2 <= (1 - m/M)^k ||w0 - w*||^2`.
    pub contraction_holds: bool,
    /// `L(w_c(k)) <= density^k L(w(k))`.
    pub loss_bound_density_holds: bool,
    /// `L(w_c(k)) <= delta^k L(w(k))` with `delta = max_k delta_k`.
    pub loss_bound_measured_holds: bool,
    /// `L(w_c(k)) <= (M/2) [delta (1 - m/M)]^k ||w0 - w*||^2`, measured `delta`.
    pub envelope_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub n: usize,
    pub c: usize,
    pub samples: usize,
    pub mode: CausalMode,
    pub alpha: f64,
    pub density: f64,
    pub strong_convexity: f64,
    pub smoothness: f64,
    pub measured_delta: f64,
    pub steps: Vec<StepCheck>,
    pub contraction_all: bool,
    pub max_pythagoras_rel_error: f64,
    pub loss_bound_density_all: bool,
    pub loss_bound_measured_all: bool,
    pub envelope_all: bool,
    pub xi_max: f64,
    pub xi_le_one_all: bool,
    pub diverged: bool,
}

fn le(lhs: f64, rhs: f64, floor: f64) -> bool {
    lhs <= rhs + ROUNDING_SLACK * rhs.abs().max(lhs.abs()) + floor
}

pub fn verify_bounds(
    problem: &LinearProblem,
    dense: &Trajectory,
    causal: &Trajectory,
    mode: CausalMode,
    alpha: f64,
) -> Result<ConvergenceReport> {
    if dense.weights.len() != causal.weights.len() {
        return Err(Error::DimensionMismatch(
            "dense and causal trajectories differ in length".into(),
        ));
    }
    let d = problem.mask_matrix();
    let off = d.map(|v| 1.0 - v);
    let start_dist = (&problem.w0 - &problem.w_star).norm_squared();
    let start_loss = problem.loss(&problem.w0);
    let floor = LOSS_FLOOR * start_loss.max(f64::MIN_POSITIVE);
    let dist_floor = LOSS_FLOOR * start_dist.max(f64::MIN_POSITIVE);
    let rate = 1.0 - problem.strong_convexity / problem.smoothness;
    let density = problem.density();

    let mut partial: Vec<StepCheck> = Vec::with_capacity(dense.weights.len());
    for (k, (w, wc)) in dense.weights.iter().zip(&causal.weights).enumerate() {
        let dense_loss = dense.losses[k];
        let causal_loss = causal.losses[k];
        let dense_dist_sq = (w - &problem.w_star).norm_squared();
        let causal_dist_sq = (wc - &problem.w_star).norm_squared();
        let off_mask_sq = w.component_mul(&off).norm_squared();
        let pythagoras_rel_error = if dense_dist_sq > 0.0 {
            (dense_dist_sq - causal_dist_sq - off_mask_sq).abs() / dense_dist_sq
        } else {
            (causal_dist_sq + off_mask_sq).abs()
        };
        let xi = if dense_loss <= floor {
            1.0
        } else {
            causal_loss / dense_loss
        };
        let delta_k = if dense_dist_sq > 0.0 {
            causal_dist_sq / dense_dist_sq
        } else {
            1.0
        };
        let ki = k as i32;
        partial.push(StepCheck {
            k,
            dense_loss,
            causal_loss,
            xi,
            delta_k,
            dense_dist_sq,
            causal_dist_sq,
            off_mask_sq,
            pythagoras_rel_error,
            contraction_holds: le(dense_dist_sq, rate.powi(ki) * start_dist, dist_floor),
            loss_bound_density_holds: le(causal_loss, density.powi(ki) * dense_loss, floor),
            loss_bound_measured_holds: false,
            envelope_holds: false,
        });
    }
    let measured_delta = partial.iter().map(|s| s.delta_k).fold(0.0, f64::max);
    for s in &mut partial {
        let ki = s.k as i32;
        s.loss_bound_measured_holds =
            le(s.causal_loss, measured_delta.powi(ki) * s.dense_loss, floor);
        s.envelope_holds = le(
            s.causal_loss,
            0.5 * problem.smoothness * (measured_delta * rate).powi(ki) * start_dist,
            floor,
        );
    }
    Ok(ConvergenceReport {
        n: problem.n,
        c: problem.c,
        samples: problem.samples(),
        mode,
        alpha,
        density,
        strong_convexity: problem.strong_convexity,
        smoothness: problem.smoothness,
        measured_delta,
        contraction_all: partial.iter().all(|s| s.contraction_holds),
        max_pythagoras_rel_error: partial
            .iter()
            .map(|s| s.pythagoras_rel_error)
            .fold(0.0, f64::max),
        loss_bound_density_all: partial.iter().all(|s| s.loss_bound_density_holds),
        loss_bound_measured_all: partial.iter().all(|s| s.loss_bound_measured_holds),
        envelope_all: partial.iter().all(|s| s.envelope_holds),
        xi_max: partial.iter().map(|s| s.xi).fold(f64::NEG_INFINITY, f64::max),
        xi_le_one_all: partial.iter().all(|s| le(s.xi, 1.0, 0.0)),
        diverged: dense.diverged || causal.diverged,
        steps: partial,
    })
}

/// Builds one instance and checks it with step size `1/M` unless `alpha` is given.
pub fn verify_instance(
    n: usize,
    c: usize,
    samples: usize,
    density: f64,
    steps: usize,
    mode: CausalMode,
    alpha: Option<f64>,
    seed: u64,
) -> Result<ConvergenceReport> {
    let problem = make_linear_problem(n, c, samples, density, seed)?;
    let alpha = alpha.unwrap_or_else(|| problem.default_step());
    let dense = gd_dense(&problem, steps, alpha)?;
    let causal = gd_causal(&problem, steps, alpha, mode)?;
    verify_bounds(&problem, &dense, &causal, mode, alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub instances: usize,
    pub contraction_all: usize,
    pub pythagoras_max_rel_error: f64,
    pub loss_bound_measured_all: usize,
    pub envelope_all: usize,
    pub xi_le_one_all: usize,
    /// Instances where the density-based bound held at every step.
    pub loss_bound_density_all: usize,
    pub density_bound_fraction: f64,
}

pub fn summarize(reports: &[ConvergenceReport]) -> EnsembleSummary {
    let count = |f: fn(&ConvergenceReport) -> bool| reports.iter().filter(|r| f(r)).count();
    let density_ok = count(|r| r.loss_bound_density_all);
    EnsembleSummary {
        instances: reports.len(),
        contraction_all: count(|r| r.contraction_all),
        pythagoras_max_rel_error: reports
            .iter()
            .map(|r| r.max_pythagoras_rel_error)
            .fold(0.0, f64::max),
        loss_bound_measured_all: count(|r| r.loss_bound_measured_all),
        envelope_all: count(|r| r.envelope_all),
        xi_le_one_all: count(|r| r.xi_le_one_all),
        loss_bound_density_all: density_ok,
        density_bound_fraction: if reports.is_empty() {
            0.0
        } else {
            density_ok as f64 / reports.len() as f64
        },
    }
}

/// `count` random instances with `n + c <= 20` and densities cycling through 0.2, 0.5, 0.8.
pub fn ensemble(
    count: usize,
    samples: usize,
    steps: usize,
    mode: CausalMode,
    seed: u64,
) -> Result<Vec<ConvergenceReport>> {
    const DENSITIES: [f64; 3] = [0.2, 0.5, 0.8];
    let mut shape_rng = rng_from(derive_seed(seed, 0x7e0));
    (0..count)
        .map(|i| {
            let n = shape_rng.random_range(2..=15);
            let c = shape_rng.random_range(1..=(20 - n).min(5));
            verify_instance(
                n,
                c,
                samples,
                DENSITIES[i % DENSITIES.len()],
                steps,
                mode,
                None,
                derive_seed(seed, i as u64 + 1),
            )
        })
        .collect()
}

/// Per-step losses and ratios as CSV.
pub fn write_steps_csv(reports: &[ConvergenceReport], path: &Path) -> Result<()> {
    let io_err = |e: csv::Error| Error::io(format!("writing {}", path.display()), std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record([
        "instance",
        "k",
        "dense_loss",
        "causal_loss",
        "xi",
        "delta_k",
        "pythagoras_rel_error",
        "contraction_holds",
        "loss_bound_density_holds",
        "loss_bound_measured_holds",
        "envelope_holds",
    ])
    .map_err(io_err)?;
    for (i, r) in reports.iter().enumerate() {
        for s in &r.steps {
            w.write_record([
                i.to_string(),
                s.k.to_string(),
                s.dense_loss.to_string(),
                s.causal_loss.to_string(),
                s.xi.to_string(),
                s.delta_k.to_string(),
                s.pythagoras_rel_error.to_string(),
                s.contraction_holds.to_string(),
                s.loss_bound_density_holds.to_string(),
                s.loss_bound_measured_holds.to_string(),
                s.envelope_holds.to_string(),
            ])
            .map_err(io_err)?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_density_gives_full_mask() {
        let p = make_linear_problem(3, 2, 40, 1.0, 1).unwrap();
        assert_eq!(p.mask.edge_count(), 15);
        assert!(p.w_star.iter().all(|v| *v != 0.0));
        assert!(p.loss(&p.w_star) < 1e-28);
    }

    #[test]
    fn curvature_brackets_rayleigh_quotients() {
        let p = make_linear_problem(4, 2, 50, 0.5, 2).unwrap();
        let h = p.x.transpose() * &p.x / 50.0;
        let mut rng = rng_from(9);
        for _ in 0..100 {
            let v = DMatrix::from_fn(6, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let q = (v.transpose() * &h * &v)[(0, 0)] / v.norm_squared();
            assert!(q >= p.strong_convexity * (1.0 - 1e-12));
            assert!(q <= p.smoothness * (1.0 + 1e-12));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(make_linear_problem(5, 2, 7, 0.5, 0).is_err());
        assert!(make_linear_problem(5, 2, 20, 0.0, 0).is_err());
        let p = make_linear_problem(2, 1, 20, 0.5, 0).unwrap();
        assert!(gd_dense(&p, 5, 2.5 / p.smoothness).is_err());
        assert!(gd_dense(&p, 5, 0.0).is_err());
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let mut p = make_linear_problem(3, 1, 30, 0.5, 4).unwrap();
        p.w0 = p.w_star.clone();
        let t = gd_dense(&p, 1, p.default_step()).unwrap();
        assert!((&t.weights[1] - &p.w_star).abs().max() < 1e-12);
    }
}
