//! Expectation-maximization with switching for superquadric recovery.
//!
//! Observations follow a Gaussian-uniform mixture: with probability `w₀` a
//! point is an outlier drawn uniformly from the interaction volume `V`,
//! otherwise it is an isotropic Gaussian perturbation of a surface point.
//! The E-step finds closest surface points and inlier posteriors; the M-step
//! decreases
//!
//! ```text
//! l(β, σ²) = Σ γᵢ (‖xᵢ − μᵢ‖² / 2σ² − log c) + N log A_β
//! ```
//!
//! with `c = (2πσ²)^(-3/2)`. When a run stalls, perturbed candidate shapes
//! are screened and the best one replaces the current estimate if it lowers
//! the objective.

use nalgebra::{SMatrix, SVector, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PointCloud, Superquadric};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, PlanarPose};

const MIN_POINTS: usize = 50;
const EPS_BOUNDS: (f64, f64) = (0.01, 2.0);
const AXIS_BOUNDS: (f64, f64) = (1e-3, 1.0);
const NOISE_VAR_BOUNDS: (f64, f64) = (1e-9, 1e-2);
const SCREEN_POINTS: usize = 500;
const SCREEN_ITERS: usize = 25;

type Params = SVector<f64, 8>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmsConfig {
    /// Prior probability `w₀` that a point is an outlier.
    pub outlier_weight: f64,
    /// Volume `V` (m³) of the region outliers are drawn from.
    pub interaction_volume: f64,
    pub convergence_tol: f64,
    pub max_iters: usize,
    /// Number of switching candidates screened each time a run stalls.
    pub candidate_count: usize,
    /// Rounds of switching before the fit settles on its best run.
    pub max_switches: usize,
    /// Height of the supporting plane; the shape rests on it.
    pub table_height: f64,
}

impl Default for EmsConfig {
    fn default() -> Self {
        Self {
            outlier_weight: 0.1,
            interaction_volume: 0.05,
            convergence_tol: 1e-3,
            max_iters: 100,
            candidate_count: 6,
            max_switches: 3,
            table_height: 0.0,
        }
    }
}

impl EmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_weight) {
            return Err(Error::InvalidParameter(format!(
                "outlier weight {} outside [0, 1)",
                self.outlier_weight
            )));
        }
        if !(self.interaction_volume > 0.0) {
            return Err(Error::InvalidParameter("interaction volume must be positive".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidParameter("convergence tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub shape: Superquadric,
    pub pose: PlanarPose,
    pub noise_var: f64,
    pub inlier_probs: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Final value of the EM objective.
    pub nll: f64,
    /// Objective after every accepted iteration, one trace per full run.
    pub traces: Vec<Vec<f64>>,
}

impl FitResult {
    /// World-frame centre of the fitted solid.
    pub fn center(&self, table_height: f64) -> Vector3<f64> {
        Vector3::new(self.pose.x, self.pose.y, table_height + self.shape.az)
    }
}

/// Output of the expectation step, aligned with the input cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct EStep {
    /// Closest surface points in the world frame.
    pub closest: Vec<Vector3<f64>>,
    /// Posterior probability that each point is an inlier.
    pub inlier_probs: Vec<f64>,
    pub sq_dists: Vec<f64>,
}

fn unpack(p: &Params) -> (Superquadric, PlanarPose) {
    (
        Superquadric {
            eps1: p[0],
            eps2: p[1],
            ax: p[2],
            ay: p[3],
            az: p[4],
        },
        PlanarPose {
            x: p[5],
            y: p[6],
            theta: p[7],
        },
    )
}

fn clamp_params(p: &mut Params) {
    for i in 0..2 {
        p[i] = p[i].clamp(EPS_BOUNDS.0, EPS_BOUNDS.1);
    }
    for i in 2..5 {
        p[i] = p[i].clamp(AXIS_BOUNDS.0, AXIS_BOUNDS.1);
    }
    p[7] = wrap_angle(p[7]);
}

fn to_body(pose: &PlanarPose, shape: &Superquadric, table: f64, x: &Vector3<f64>) -> Vector3<f64> {
    let mut b = pose.to_local(x);
    b.z -= table + shape.az;
    b
}

fn to_world(pose: &PlanarPose, shape: &Superquadric, table: f64, b: &Vector3<f64>) -> Vector3<f64> {
    let mut w = pose.to_world(b);
    w.z += table + shape.az;
    w
}

/// `log(w₀ p₀ / (1 − w₀))`, or `None` without an outlier component.
fn log_outlier_density(cfg: &EmsConfig) -> Option<f64> {
    (cfg.outlier_weight > 0.0)
        .then(|| (cfg.outlier_weight / ((1.0 - cfg.outlier_weight) * cfg.interaction_volume)).ln())
}

fn inlier_posterior(sq_dist: f64, noise_var: f64, log_outlier: Option<f64>) -> f64 {
    let Some(lo) = log_outlier else {
        return 1.0;
    };
    let log_gauss = -1.5 * (2.0 * std::f64::consts::PI * noise_var).ln() - sq_dist / (2.0 * noise_var);
    // γ = N / (N + c) = 1 / (1 + exp(log c − log N))
    1.0 / (1.0 + (lo - log_gauss).exp())
}

/// Closest points and inlier posteriors for the current estimate.
pub fn e_step(
    shape: &Superquadric,
    pose: &PlanarPose,
    noise_var: f64,
    cfg: &EmsConfig,
    cloud: &PointCloud,
) -> Result<EStep> {
    shape.validate()?;
    if !(noise_var > 0.0) {
        return Err(Error::InvalidParameter("noise variance must be positive".into()));
    }
    let (closest_body, sq_dists) = closest_points(shape, pose, cfg.table_height, cloud.points(), None);
    let lo = log_outlier_density(cfg);
    let inlier_probs = sq_dists.iter().map(|&d| inlier_posterior(d, noise_var, lo)).collect();
    let closest = closest_body
        .iter()
        .map(|b| to_world(pose, shape, cfg.table_height, b))
        .collect();
    Ok(EStep {
        closest,
        inlier_probs,
        sq_dists,
    })
}

fn closest_points(
    shape: &Superquadric,
    pose: &PlanarPose,
    table: f64,
    points: &[Vector3<f64>],
    hints: Option<&[Vector3<f64>]>,
) -> (Vec<Vector3<f64>>, Vec<f64>) {
    points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let b = to_body(pose, shape, table, x);
            let c = shape.closest_point_hinted(&b, hints.map(|h| &h[i]));
            let d = (b - c).norm_squared();
            (c, d)
        })
        .unzip()
}

fn objective(sq_dists: &[f64], gamma: &[f64], noise_var: f64, log_area: f64) -> f64 {
    let log_c = -1.5 * (2.0 * std::f64::consts::PI * noise_var).ln();
    let fit: f64 = sq_dists
        .iter()
        .zip(gamma)
        .map(|(d, g)| g * (d / (2.0 * noise_var) - log_c))
        .sum();
    fit + sq_dists.len() as f64 * log_area
}

fn radial_residuals(p: &Params, table: f64, points: &[Vector3<f64>], out: &mut [f64]) {
    let (shape, pose) = unpack(p);
    for (r, x) in out.iter_mut().zip(points) {
        let b = to_body(&pose, &shape, table, x);
        *r = signed_radial(&shape, &b);
    }
}

fn signed_radial(shape: &Superquadric, b: &Vector3<f64>) -> f64 {
    match shape.radial_projection(b) {
        Some(s) => {
            let d = (b - s).norm();
            if b.norm_squared() >= s.norm_squared() {
                d
            } else {
                -d
            }
        }
        None => -shape.ax.min(shape.ay).min(shape.az),
    }
}

/// Surrogate minimized in the M-step: ray distances stand in for the
/// closest-point distances, which makes the residuals smooth in the
/// parameters.
fn surrogate(p: &Params, table: f64, points: &[Vector3<f64>], weights: &[f64], n_total: f64) -> f64 {
    let mut r = vec![0.0; points.len()];
    radial_residuals(p, table, points, &mut r);
    let (shape, _) = unpack(p);
    let fit: f64 = r.iter().zip(weights).map(|(r, w)| 0.5 * w * r * r).sum();
    fit + n_total * shape.surface_area_fast().ln()
}

fn param_scale(p: &Params) -> Params {
    let size = (p[2] + p[3] + p[4]) / 3.0;
    Params::from_column_slice(&[1.0, 1.0, p[2], p[3], p[4], size, size, 1.0])
}

/// A few Levenberg-Marquardt iterations on the surrogate (generalized EM:
/// the objective only needs to decrease).
fn m_step(p0: &Params, table: f64, points: &[Vector3<f64>], gamma: &[f64], noise_var: f64, iters: usize) -> Params {
    let n = points.len();
    let weights: Vec<f64> = gamma.iter().map(|g| g / noise_var).collect();
    let n_total = n as f64;
    let mut p = *p0;
    let mut cost = surrogate(&p, table, points, &weights, n_total);
    let mut lambda = 1e-3;
    let mut r0 = vec![0.0; n];
    let mut r1 = vec![0.0; n];

    for _ in 0..iters {
        radial_residuals(&p, table, points, &mut r0);
        let scale = param_scale(&p);
        let mut jac = vec![[0.0f64; 8]; n];
        for j in 0..8 {
            let h = 1e-6 * scale[j];
            let mut q = p;
            q[j] += h;
            radial_residuals(&q, table, points, &mut r1);
            for i in 0..n {
                jac[i][j] = (r1[i] - r0[i]) / h;
            }
        }
        let (shape, _) = unpack(&p);
        let log_a = shape.surface_area_fast().ln();
        let mut grad_area = SVector::<f64, 8>::zeros();
        for j in 0..5 {
            let h = 1e-6 * scale[j];
            let mut q = p;
            q[j] += h;
            let (s, _) = unpack(&q);
            grad_area[j] = n_total * (s.surface_area_fast().ln() - log_a) / h;
        }

        let mut hess = SMatrix::<f64, 8, 8>::zeros();
        let mut grad = grad_area;
        for i in 0..n {
            let row = SVector::<f64, 8>::from_column_slice(&jac[i]);
            hess += row * row.transpose() * weights[i];
            grad += row * (weights[i] * r0[i]);
        }

        let mut improved = false;
        for _ in 0..10 {
            let mut damped = hess;
            for k in 0..8 {
                damped[(k, k)] += lambda * (hess[(k, k)] + 1e-12 / (scale[k] * scale[k]));
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-grad));
            let mut q = p + step;
            clamp_params(&mut q);
            let c = surrogate(&q, table, points, &weights, n_total);
            if c < cost {
                p = q;
                let gain = cost - c;
                cost = c;
                lambda = (lambda / 3.0).max(1e-9);
                improved = gain > 1e-12 * cost.abs();
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    p
}

/// State of one EM run, resumable after a switching round.
#[derive(Clone)]
struct Run {
    params: Params,
    noise_var: f64,
    gamma: Vec<f64>,
    sq_dists: Vec<f64>,
    closest_body: Vec<Vector3<f64>>,
    nll: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

enum Stop {
    Converged,
    Stalled,
    Exhausted,
}

impl Run {
    fn start(params: Params, noise_var: f64, cfg: &EmsConfig, points: &[Vector3<f64>]) -> Self {
        let (shape, pose) = unpack(&params);
        let (closest_body, sq_dists) = closest_points(&shape, &pose, cfg.table_height, points, None);
        let noise_var = if noise_var > 0.0 {
            noise_var
        } else {
            let mut sorted = sq_dists.clone();
            sorted.sort_by(f64::total_cmp);
            (sorted[sorted.len() / 2] / 3.0).clamp(NOISE_VAR_BOUNDS.0, NOISE_VAR_BOUNDS.1)
        };
        let lo = log_outlier_density(cfg);
        let gamma: Vec<f64> = sq_dists.iter().map(|&d| inlier_posterior(d, noise_var, lo)).collect();
        let nll = objective(&sq_dists, &gamma, noise_var, shape.surface_area_fast().ln());
        Self {
            params,
            noise_var,
            gamma,
            sq_dists,
            closest_body,
            nll,
            trace: vec![nll],
            iterations: 0,
            converged: false,
        }
    }

    /// One E/M cycle. Returns the relative parameter change, or `None` when
    /// the cycle failed to lower the objective and was discarded.
    fn iterate(&mut self, cfg: &EmsConfig, points: &[Vector3<f64>]) -> Option<f64> {
        let table = cfg.table_height;
        let next = m_step(&self.params, table, points, &self.gamma, self.noise_var, 3);
        let (shape, pose) = unpack(&next);
        // The previous closest points expressed in the new body frame seed
        // the search.
        let (old_shape, old_pose) = unpack(&self.params);
        let hints: Vec<Vector3<f64>> = self
            .closest_body
            .iter()
            .map(|b| to_body(&pose, &shape, table, &to_world(&old_pose, &old_shape, table, b)))
            .collect();
        let (closest_body, sq_dists) = closest_points(&shape, &pose, table, points, Some(&hints));
        let wsum: f64 = self.gamma.iter().sum();
        let noise_var = if wsum > 0.0 {
            let acc: f64 = sq_dists.iter().zip(&self.gamma).map(|(d, g)| g * d).sum();
            (acc / (3.0 * wsum)).clamp(NOISE_VAR_BOUNDS.0, NOISE_VAR_BOUNDS.1)
        } else {
            self.noise_var
        };
        let lo = log_outlier_density(cfg);
        let gamma: Vec<f64> = sq_dists.iter().map(|&d| inlier_posterior(d, noise_var, lo)).collect();
        let nll = objective(&sq_dists, &gamma, noise_var, shape.surface_area_fast().ln());
        self.iterations += 1;
        if !(nll <= self.nll) {
            return None;
        }
        let change = relative_change(&self.params, self.noise_var, &next, noise_var);
        self.params = next;
        self.noise_var = noise_var;
        self.gamma = gamma;
        self.sq_dists = sq_dists;
        self.closest_body = closest_body;
        self.nll = nll;
        self.trace.push(nll);
        Some(change)
    }

    fn advance(&mut self, cfg: &EmsConfig, points: &[Vector3<f64>], budget: usize, detect_stall: bool) -> Stop {
        let end = self.iterations + budget;
        while self.iterations < end.min(cfg.max_iters) {
            match self.iterate(cfg, points) {
                None => return Stop::Stalled,
                Some(change) if change < cfg.convergence_tol => {
                    self.converged = true;
                    return Stop::Converged;
                }
                Some(_) => {}
            }
            if detect_stall && self.trace.len() > 3 {
                let k = self.trace.len() - 1;
                let old = self.trace[k - 3];
                if (old - self.trace[k]) / old.abs().max(1e-12) < cfg.convergence_tol {
                    return Stop::Stalled;
                }
            }
        }
        Stop::Exhausted
    }
}

fn relative_change(a: &Params, var_a: f64, b: &Params, var_b: f64) -> f64 {
    let size = (a[2] + a[3] + a[4]) / 3.0;
    let mut m = 0.0f64;
    m = m.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
    for i in 2..5 {
        m = m.max((a[i] - b[i]).abs() / a[i]);
    }
    m = m.max((a[5] - b[5]).abs() / size).max((a[6] - b[6]).abs() / size);
    m = m.max(wrap_angle(a[7] - b[7]).abs());
    m.max((var_a.sqrt() - var_b.sqrt()).abs() / var_a.sqrt())
}

/// Similar shapes the run may have been trapped away from: exponent
/// inflections, axis permutations with matching exponent swaps, and a
/// diagonal yaw flip for square cross-sections.
fn candidates(p: &Params, count: usize) -> Vec<Params> {
    let mut out = Vec::new();
    let with = |f: &dyn Fn(&mut Params)| {
        let mut q = *p;
        f(&mut q);
        clamp_params(&mut q);
        q
    };
    out.push(with(&|q| q[0] = 2.0 - q[0]));
    out.push(with(&|q| q[1] = 2.0 - q[1]));
    out.push(with(&|q| {
        q[0] = 2.0 - q[0];
        q[1] = 2.0 - q[1];
    }));
    out.push(with(&|q| {
        q.swap_rows(2, 4);
        q.swap_rows(0, 1);
    }));
    out.push(with(&|q| {
        q.swap_rows(3, 4);
        q.swap_rows(0, 1);
    }));
    out.push(with(&|q| q[7] += std::f64::consts::FRAC_PI_4));
    out.truncate(count);
    out
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Robust initial guess: median centre, principal axes of the central
/// points, percentile extents, ellipsoidal exponents.
fn initial_guess(points: &[Vector3<f64>], table: f64) -> Params {
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let cx = median(points.iter().map(|p| p.x).collect());
    let cy = median(points.iter().map(|p| p.y).collect());
    let radii: Vec<f64> = points.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).collect();
    let r_med = median(radii.clone());
    let core: Vec<&Vector3<f64>> = points
        .iter()
        .zip(&radii)
        .filter(|(_, &r)| r <= 2.0 * r_med)
        .map(|(p, _)| p)
        .collect();
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in &core {
        let (dx, dy) = (p.x - cx, p.y - cy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let yaw = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (s, c) = yaw.sin_cos();
    let mut us: Vec<f64> = core.iter().map(|p| c * (p.x - cx) + s * (p.y - cy)).collect();
    let mut vs: Vec<f64> = core.iter().map(|p| -s * (p.x - cx) + c * (p.y - cy)).collect();
    let mut zs: Vec<f64> = core.iter().map(|p| p.z - table).collect();
    us.sort_by(f64::total_cmp);
    vs.sort_by(f64::total_cmp);
    zs.sort_by(f64::total_cmp);
    let (u0, u1) = (quantile(&us, 0.02), quantile(&us, 0.98));
    let (v0, v1) = (quantile(&vs, 0.02), quantile(&vs, 0.98));
    let ax = 0.5 * (u1 - u0);
    let ay = 0.5 * (v1 - v0);
    let az = 0.5 * quantile(&zs, 0.98);
    let (um, vm) = (0.5 * (u0 + u1), 0.5 * (v0 + v1));
    let x0 = cx + c * um - s * vm;
    let y0 = cy + s * um + c * vm;
    let mut p = Params::from_column_slice(&[1.0, 1.0, ax, ay, az, x0, y0, yaw]);
    clamp_params(&mut p);
    p
}

/// Fits a superquadric resting on the table plane to a point cloud.
pub fn ems_fit(cloud: &PointCloud, cfg: &EmsConfig, rng_seed: u64) -> Result<FitResult> {
    cfg.validate()?;
    let points = cloud.points();
    if points.len() < MIN_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_POINTS,
            got: points.len(),
        });
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let screen: Vec<Vector3<f64>> = order.iter().take(SCREEN_POINTS).map(|&i| points[i]).collect();

    let mut best = Run::start(initial_guess(points, cfg.table_height), 0.0, cfg, points);
    let mut traces = Vec::new();
    let mut stop = best.advance(cfg, points, cfg.max_iters, true);

    for _ in 0..cfg.max_switches {
        // Compare candidates against the incumbent on a common subsample.
        let incumbent = {
            let mut r = Run::start(best.params, best.noise_var, cfg, &screen);
            r.advance(cfg, &screen, SCREEN_ITERS, false);
            r
        };
        let screened: Vec<Run> = candidates(&best.params, cfg.candidate_count)
            .into_par_iter()
            .map(|p| {
                let mut r = Run::start(p, best.noise_var, cfg, &screen);
                r.advance(cfg, &screen, SCREEN_ITERS, false);
                r
            })
            .collect();
        let winner = screened
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| a.nll.total_cmp(&b.nll).then(ia.cmp(ib)))
            .map(|(_, r)| r);
        let Some(winner) = winner else {
            break;
        };
        let margin = cfg.convergence_tol * incumbent.nll.abs();
        if winner.nll >= incumbent.nll - margin {
            break;
        }
        let mut challenger = Run::start(winner.params, winner.noise_var, cfg, points);
        let challenger_stop = challenger.advance(cfg, points, cfg.max_iters, true);
        if challenger.nll < best.nll {
            traces.push(std::mem::take(&mut best.trace));
            best = challenger;
            stop = challenger_stop;
        } else {
            traces.push(challenger.trace);
            break;
        }
    }

    if matches!(stop, Stop::Stalled) {
        best.advance(cfg, points, cfg.max_iters, false);
    }
    traces.push(best.trace.clone());

    let (shape, pose) = unpack(&best.params);
    Ok(FitResult {
        shape,
        pose,
        noise_var: best.noise_var,
        inlier_probs: best.gamma,
        converged: best.converged,
        iterations: best.iterations,
        nll: best.nll,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn place(shape: &Superquadric, pose: &PlanarPose, pts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        pts.iter().map(|b| to_world(pose, shape, 0.0, b)).collect()
    }

    #[test]
    fn no_outlier_component_means_all_inliers() {
        let shape = Superquadric::sphere(0.05);
        let pose = PlanarPose::new(0.0, 0.0, 0.0);
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.2), Vector3::new(0.01, 0.0, 0.05)]).unwrap();
        let cfg = EmsConfig {
            outlier_weight: 0.0,
            ..EmsConfig::default()
        };
        let e = e_step(&shape, &pose, 1e-6, &cfg, &cloud).unwrap();
        assert!(e.inlier_probs.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn inlier_posterior_closed_form() {
        let shape = Superquadric::sphere(0.05);
        let pose = PlanarPose::identity();
        let surface = Vector3::new(0.05, 0.0, 0.05);
        let cloud = PointCloud::new(vec![surface, Vector3::new(0.05 + 0.1, 0.0, 0.05)]).unwrap();
        let cfg = EmsConfig {
            outlier_weight: 0.1,
            interaction_volume: 1.0,
            ..EmsConfig::default()
        };
        let sigma: f64 = 0.01;
        let e = e_step(&shape, &pose, sigma * sigma, &cfg, &cloud).unwrap();
        let n0 = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-1.5);
        let expected = n0 / (n0 + 0.1 / (0.9 * 1.0));
        assert!((e.inlier_probs[0] - expected).abs() < 1e-12);
        assert!(e.inlier_probs[1] < e.inlier_probs[0]);
    }

    #[test]
    fn rejects_small_clouds() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0); 49];
        let err = ems_fit(&PointCloud::new(pts).unwrap(), &EmsConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { needed: 50, got: 49 }));
    }

    #[test]
    fn noiseless_round_trip() {
        let truth = Superquadric::new(0.6, 1.2, 0.06, 0.04, 0.05).unwrap();
        let pose = PlanarPose::new(0.02, -0.03, 0.5);
        let body = truth.sample_surface(2000, 11).unwrap();
        let cloud = PointCloud::new(place(&truth, &pose, body.points())).unwrap();
        let fit = ems_fit(&cloud, &EmsConfig::default(), 1).unwrap();
        let (shape, swapped) = fit.shape.canonical();
        let (t, _) = truth.canonical();
        for (a, b) in shape.to_array().iter().zip(t.to_array()) {
            assert!((a - b).abs() / b <= 0.05, "fit {shape:?} truth {t:?}");
        }
        let theta = if swapped { fit.pose.theta + std::f64::consts::FRAC_PI_2 } else { fit.pose.theta };
        let dtheta = wrap_angle(2.0 * (theta - pose.theta)).abs() / 2.0;
        assert!(dtheta <= 2f64.to_radians(), "yaw {} vs {}", fit.pose.theta, pose.theta);
        assert!((fit.pose.x - pose.x).hypot(fit.pose.y - pose.y) <= 5e-3);
    }

    #[test]
    fn objective_never_increases_within_a_run() {
        let truth = Superquadric::new(0.3, 0.8, 0.08, 0.05, 0.03).unwrap();
        let pose = PlanarPose::new(0.0, 0.0, -0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = place(&truth, &pose, truth.sample_surface(1500, 2).unwrap().points());
        for p in &mut pts {
            for c in p.iter_mut() {
                *c += 1e-3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for _ in 0..150 {
            pts.push(Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.0..0.3),
            ));
        }
        let fit = ems_fit(&PointCloud::new(pts).unwrap(), &EmsConfig::default(), 3).unwrap();
        for trace in &fit.traces {
            for w in trace.windows(2) {
                assert!(w[1] <= w[0], "trace increased: {trace:?}");
            }
        }
        assert_eq!(fit.inlier_probs.len(), 1650);
        assert!(fit.noise_var > 0.0);
    }
}
