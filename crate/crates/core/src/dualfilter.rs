//! Dual pose/mass filter.
//!
//! The joint Gaussian belief over `(x, y, θ, m)` is propagated with
//! constrained Monte Carlo sigma points. Mass is updated by likelihood
//! weighting with Liu-West kernel shrinkage; pose by an unscented Kalman
//! update on the pose belief conditioned on the mass estimate.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, SMatrix, SVector, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, PlanarPose};
use crate::pushsim::{analytical_process, analytical_tactile, ContactForce, ContactGeometry, FrictionParams, PushAction};
use crate::sensing::{assemble_observation, observation_noise_diag, render, CameraModel, NoiseModel, ObservationVector};
use crate::superquadric::PointCloud;

/// Diagonal jitter added before factorizing covariances.
pub const COVARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointBelief {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseGaussian {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassGaussian {
    pub mean: f64,
    pub var: f64,
}

impl PoseGaussian {
    pub fn pose(&self) -> PlanarPose {
        PlanarPose::new(self.mean.x, self.mean.y, self.mean.z)
    }

    /// Mean at `pose` with independent standard deviations.
    pub fn isotropic(pose: &PlanarPose, sigma_xy: f64, sigma_theta: f64) -> Self {
        Self {
            mean: Vector3::new(pose.x, pose.y, pose.theta),
            cov: Matrix3::from_diagonal(&Vector3::new(sigma_xy * sigma_xy, sigma_xy * sigma_xy, sigma_theta * sigma_theta)),
        }
    }
}

impl JointBelief {
    pub fn from_parts(pose: &PoseGaussian, mass: &MassGaussian) -> Self {
        recombine(pose, mass, &Vector3::zeros())
    }

    pub fn pose(&self) -> PoseGaussian {
        PoseGaussian {
            mean: self.mean.fixed_rows::<3>(0).into_owned(),
            cov: self.cov.fixed_view::<3, 3>(0, 0).into_owned(),
        }
    }

    pub fn mass(&self) -> MassGaussian {
        MassGaussian {
            mean: self.mean[3],
            var: self.cov[(3, 3)],
        }
    }

    pub fn cross_cov(&self) -> Vector3<f64> {
        self.cov.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("joint belief"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet {
    pub points: Vec<Vector4<f64>>,
    pub weights: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SigmaPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Weighted mean and covariance of the points.
    pub fn moments(&self) -> JointBelief {
        let total: f64 = self.weights.iter().sum();
        let mut mean = Vector4::zeros();
        for (p, w) in self.points.iter().zip(&self.weights) {
            mean += p * (w / total);
        }
        let mut cov = Matrix4::zeros();
        for (p, w) in self.points.iter().zip(&self.weights) {
            let d = p - mean;
            cov += d * d.transpose() * (w / total);
        }
        JointBelief { mean, cov }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise {
    /// Per-step variances of x (m²), y (m²) and θ (rad²).
    pub q: [f64; 3],
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self {
            q: [1e-6, 1e-6, 0.5f64.to_radians().powi(2)],
        }
    }
}

impl ProcessNoise {
    pub fn validate(&self) -> Result<()> {
        if self.q.iter().all(|&v| v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("process noise variances must be positive".into()))
        }
    }
}

/// Which spread the kernel variance `h²·V` is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariance {
    /// `V = Σ w (χ − μ)²`, the weighted spread of the particles.
    #[default]
    Particles,
    /// `V = Σ w (m − μ)²`, the spread of the shrunk kernel locations; this
    /// contracts the belief by `a²h²` every update.
    ShrunkLocations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShrinkageParams {
    pub a: f64,
    pub variance: KernelVariance,
}

impl Default for ShrinkageParams {
    fn default() -> Self {
        Self {
            a: 0.01,
            variance: KernelVariance::Particles,
        }
    }
}

impl ShrinkageParams {
    pub fn new(a: f64, variance: KernelVariance) -> Result<Self> {
        let s = Self { a, variance };
        s.validate()?;
        Ok(s)
    }

    pub fn h(&self) -> f64 {
        (1.0 - self.a * self.a).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.a > 0.0 && self.a < 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("shrinkage a={} outside (0, 1)", self.a)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UkfParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl UkfParams {
    /// Unscented weights (mean, covariance) and the spread factor for an
    /// `n`-dimensional state.
    fn weights(&self, n: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let nf = n as f64;
        let lambda = self.alpha * self.alpha * (nf + self.kappa) - nf;
        let spread = (nf + lambda).sqrt();
        let mut wm = vec![1.0 / (2.0 * (nf + lambda)); 2 * n + 1];
        let mut wc = wm.clone();
        wm[0] = lambda / (nf + lambda);
        wc[0] = wm[0] + (1.0 - self.alpha * self.alpha + self.beta);
        (wm, wc, spread)
    }
}

fn factor<const D: usize>(cov: &SMatrix<f64, D, D>, what: &'static str) -> Result<SMatrix<f64, D, D>> {
    let sym = DMatrix::from_fn(D, D, |i, j| 0.5 * (cov[(i, j)] + cov[(j, i)]));
    let floored = &sym + DMatrix::identity(D, D) * COVARIANCE_FLOOR;
    let l = match floored.cholesky() {
        Some(ch) => ch.l(),
        None => {
            // Clip negative eigenvalues from round-off and retry.
            let eig = sym.symmetric_eigen();
            let clipped = eig.eigenvalues.map(|v| v.max(0.0) + COVARIANCE_FLOOR);
            let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
            rebuilt.cholesky().ok_or(Error::NotPositiveDefinite(what))?.l()
        }
    };
    Ok(SMatrix::from_fn(|i, j| l[(i, j)]))
}

/// Draws `count` points `μ + L ε` with `L` the Cholesky factor of `Σ`.
/// Points with non-positive mass are flagged, not dropped.
pub fn sample_sigma_points(belief: &JointBelief, count: usize, rng_seed: u64) -> Result<SigmaPointSet> {
    sample_sigma_points_with(belief, count, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

pub fn sample_sigma_points_with<R: Rng + ?Sized>(belief: &JointBelief, count: usize, rng: &mut R) -> Result<SigmaPointSet> {
    belief.validate()?;
    if count == 0 {
        return Err(Error::InvalidParameter("need at least one sigma point".into()));
    }
    let l = if belief.cov.iter().all(|&v| v == 0.0) {
        Matrix4::zeros()
    } else {
        factor(&belief.cov, "joint covariance")?
    };
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let eps = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        points.push(belief.mean + l * eps);
    }
    let valid = points.iter().map(|p| p[3] > 0.0).collect();
    Ok(SigmaPointSet {
        points,
        weights: vec![1.0 / count as f64; count],
        valid,
    })
}

/// Everything about the pushed object the models need.
#[derive(Debug, Clone)]
pub struct FilterModel {
    pub geometry: ContactGeometry,
    pub friction: FrictionParams,
    pub camera: CameraModel,
    /// Segmented cloud at the start of the interaction.
    pub initial_cloud: PointCloud,
    /// Estimated object pose when the initial cloud was captured.
    pub initial_pose: PlanarPose,
    pub period: f64,
}

impl FilterModel {
    fn step_pose(&self, pose: &PlanarPose, mass: f64, action: &PushAction) -> Result<PlanarPose> {
        match self.geometry.contact(pose, action) {
            Some(c) => analytical_process(pose, mass, action, &c.inward_normal, &self.friction, &self.geometry, self.period),
            None => Ok(*pose),
        }
    }

    /// Expected force at `pose` for a pusher in the state `action`.
    pub fn expected_force(&self, pose: &PlanarPose, mass: f64, action: &PushAction) -> Result<ContactForce> {
        match self.geometry.contact(pose, action) {
            Some(c) => analytical_tactile(pose, mass, action, &c.inward_normal, &self.friction, &self.geometry),
            None => Ok(ContactForce::default()),
        }
    }

    /// Predicted observation for a pose/mass after a step of `action`.
    pub fn expected_observation(&self, pose: &PlanarPose, mass: f64, action_after: &PushAction) -> Result<ObservationVector> {
        let image = render(&pose.relative_to(&self.initial_pose), &self.initial_cloud, &self.camera)?;
        let force = self.expected_force(pose, mass, action_after)?;
        assemble_observation(&image, &force)
    }
}

fn as_pose(v: &Vector4<f64>) -> PlanarPose {
    PlanarPose {
        x: v[0],
        y: v[1],
        theta: v[2],
    }
}

/// Propagates sigma points through the process model, injects process noise
/// and returns the predicted belief.
pub fn predict<R: Rng + ?Sized>(
    sigma: &SigmaPointSet,
    action: &PushAction,
    model: &FilterModel,
    noise: &ProcessNoise,
    rng: &mut R,
) -> Result<(JointBelief, SigmaPointSet)> {
    noise.validate()?;
    let moved: Vec<Vector4<f64>> = sigma
        .points
        .par_iter()
        .zip(&sigma.valid)
        .map(|(p, &valid)| -> Result<Vector4<f64>> {
            if !valid {
                return Ok(*p);
            }
            let next = model.step_pose(&as_pose(p), p[3], action)?;
            Ok(Vector4::new(next.x, next.y, next.theta, p[3]))
        })
        .collect::<Result<_>>()?;
    let sd = Vector3::new(noise.q[0].sqrt(), noise.q[1].sqrt(), noise.q[2].sqrt());
    let points: Vec<Vector4<f64>> = moved
        .into_iter()
        .map(|mut p| {
            for k in 0..3 {
                p[k] += sd[k] * rng.sample::<f64, _>(StandardNormal);
            }
            p
        })
        .collect();
    let set = SigmaPointSet {
        valid: points.iter().map(|p| p[3] > 0.0).collect(),
        weights: sigma.weights.clone(),
        points,
    };
    Ok((set.moments(), set))
}

/// Result of the likelihood-weighted mass update.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterUpdate {
    pub mass: MassGaussian,
    pub weights: Vec<f64>,
    /// Every valid point had vanishing likelihood; weights were reset.
    pub degenerate: bool,
}

/// Log of the diagonal-Gaussian observation likelihood, up to a constant.
pub fn log_likelihood(predicted: &DVector<f64>, observed: &DVector<f64>, r_diag: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..predicted.len() {
        let d = predicted[i] - observed[i];
        acc += d * d / r_diag[i];
    }
    -0.5 * acc
}

pub fn update_parameter(
    sigma: &SigmaPointSet,
    predicted: &[ObservationVector],
    observed: &ObservationVector,
    r_diag: &DVector<f64>,
    shrink: &ShrinkageParams,
) -> Result<ParameterUpdate> {
    shrink.validate()?;
    if predicted.len() != sigma.len() {
        return Err(Error::InvalidParameter("one predicted observation per sigma point required".into()));
    }
    if r_diag.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::InvalidParameter("observation variances must be positive".into()));
    }
    let log_w: Vec<f64> = sigma
        .weights
        .iter()
        .zip(predicted)
        .zip(&sigma.valid)
        .map(|((&w, z), &valid)| {
            if valid && w > 0.0 {
                w.ln() + log_likelihood(&z.0, &observed.0, r_diag)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (weights, degenerate) = if max.is_finite() {
        let raw: Vec<f64> = log_w.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = raw.iter().sum();
        (raw.iter().map(|w| w / total).collect::<Vec<_>>(), false)
    } else {
        log::warn!("all sigma points have zero likelihood; keeping uniform weights");
        (vec![1.0 / sigma.len() as f64; sigma.len()], true)
    };
    let masses: Vec<f64> = sigma.points.iter().map(|p| p[3]).collect();
    let mean: f64 = weights.iter().zip(&masses).map(|(w, m)| w * m).sum();
    let a = shrink.a;
    let h2 = 1.0 - a * a;
    let var: f64 = h2
        * weights
            .iter()
            .zip(&masses)
            .map(|(w, m)| {
                let d = match shrink.variance {
                    KernelVariance::Particles => m - mean,
                    KernelVariance::ShrunkLocations => a * m + (1.0 - a) * mean - mean,
                };
                w * d * d
            })
            .sum::<f64>();
    Ok(ParameterUpdate {
        mass: MassGaussian {
            mean,
            var: var.max(COVARIANCE_FLOOR),
        },
        weights,
        degenerate,
    })
}

/// Pose belief conditioned on a mass value.
pub fn conditional_pose_belief(belief: &JointBelief, mass_value: f64) -> PoseGaussian {
    let s_pp = belief.cov.fixed_view::<3, 3>(0, 0).into_owned();
    let s_pm = belief.cross_cov();
    let s_mm = belief.cov[(3, 3)].max(COVARIANCE_FLOOR);
    let gain = s_pm / s_mm;
    PoseGaussian {
        mean: belief.mean.fixed_rows::<3>(0) + gain * (mass_value - belief.mean[3]),
        cov: s_pp - gain * s_pm.transpose(),
    }
}

/// Unscented measurement update of a pose Gaussian with an arbitrary
/// observation function and diagonal noise.
///
/// The innovation covariance `S = D W Dᵀ + R` is never formed; its inverse
/// is applied through the push-through identity so only `(2n+1)`-sized
/// systems are solved.
pub fn ukf_update<F>(
    prior: &PoseGaussian,
    observe: F,
    observed: &DVector<f64>,
    r_diag: &DVector<f64>,
    params: &UkfParams,
) -> Result<PoseGaussian>
where
    F: Fn(&PlanarPose) -> Result<DVector<f64>> + Sync,
{
    const N: usize = 3;
    const K: usize = 2 * N + 1;
    let (wm, wc, spread) = params.weights(N);
    let l = factor(&prior.cov, "pose covariance")?;
    let mut xs = [prior.mean; K];
    for j in 0..N {
        let col = l.column(j) * spread;
        xs[1 + j] += col;
        xs[1 + N + j] += -col;
    }
    let zs: Vec<DVector<f64>> = xs
        .par_iter()
        .map(|x| observe(&PlanarPose::new(x[0], x[1], x[2])))
        .collect::<Result<_>>()?;
    let m = observed.len();
    if zs.iter().any(|z| z.len() != m) || r_diag.len() != m {
        return Err(Error::InvalidParameter("observation length mismatch".into()));
    }

    // State deviations relative to the centre point, angles wrapped.
    let dev = |x: &Vector3<f64>| Vector3::new(x[0] - prior.mean[0], x[1] - prior.mean[1], wrap_angle(x[2] - prior.mean[2]));
    let mut x_mean_dev = Vector3::zeros();
    for (x, w) in xs.iter().zip(&wm) {
        x_mean_dev += dev(x) * *w;
    }
    let mut z_mean = DVector::zeros(m);
    for (z, w) in zs.iter().zip(&wm) {
        z_mean.axpy(*w, z, 1.0);
    }
    let mut xd = SMatrix::<f64, N, K>::zeros();
    let mut d = DMatrix::<f64>::zeros(m, K);
    for k in 0..K {
        xd.set_column(k, &(dev(&xs[k]) - x_mean_dev));
        d.set_column(k, &(&zs[k] - &z_mean));
    }
    let w = SMatrix::<f64, K, K>::from_diagonal(&SVector::<f64, K>::from_column_slice(&wc));
    let r_inv = r_diag.map(|r| 1.0 / r);
    let rinv_d = DMatrix::from_fn(m, K, |i, k| d[(i, k)] * r_inv[i]);
    let g_dyn = d.transpose() * &rinv_d;
    let g = SMatrix::<f64, K, K>::from_fn(|i, j| g_dyn[(i, j)]);
    let innovation = observed - &z_mean;
    let dt_rinv_nu_dyn = rinv_d.transpose() * &innovation;
    let dt_rinv_nu = SVector::<f64, K>::from_fn(|i, _| dt_rinv_nu_dyn[i]);

    // S is positive definite iff I + G^{1/2} W G^{1/2} is.
    let ge = nalgebra::SymmetricEigen::new(g);
    let g_half = ge.eigenvectors
        * SMatrix::<f64, K, K>::from_diagonal(&ge.eigenvalues.map(|v| v.max(0.0).sqrt()))
        * ge.eigenvectors.transpose();
    let test = SMatrix::<f64, K, K>::identity() + g_half * w * g_half;
    let min_eig = nalgebra::SymmetricEigen::new(test).eigenvalues.min();
    if !(min_eig > 1e-12) {
        return Err(Error::SingularInnovation);
    }
    // Dᵀ S⁻¹ = (I + G W)⁻¹ Dᵀ R⁻¹, with S = R + D W Dᵀ.
    let core = (SMatrix::<f64, K, K>::identity() + g * w).lu();
    let ds_nu = core.solve(&dt_rinv_nu).ok_or(Error::SingularInnovation)?;
    let ds_d = core.solve(&g).ok_or(Error::SingularInnovation)?;
    let shift = xd * w * ds_nu;
    let reduction = xd * w * ds_d * w * xd.transpose();
    let mut mean = prior.mean + x_mean_dev + shift;
    mean[2] = wrap_angle(mean[2]);
    let cov = prior.cov - reduction;
    Ok(PoseGaussian {
        mean,
        cov: (cov + cov.transpose()) * 0.5,
    })
}

/// Unscented pose update using rendered images and expected forces with
/// mass fixed at `mass_mean`.
pub fn ukf_pose_update(
    cond_pose: &PoseGaussian,
    mass_mean: f64,
    observed: &ObservationVector,
    action_after: &PushAction,
    model: &FilterModel,
    r_diag: &DVector<f64>,
    params: &UkfParams,
) -> Result<PoseGaussian> {
    ukf_update(
        cond_pose,
        |pose| Ok(model.expected_observation(pose, mass_mean, action_after)?.0),
        &observed.0,
        r_diag,
        params,
    )
}

/// Assembles the joint belief from the pose and mass posteriors and a
/// fixed cross-covariance, projecting onto the PSD cone if needed.
pub fn recombine(pose: &PoseGaussian, mass: &MassGaussian, cross_cov: &Vector3<f64>) -> JointBelief {
    let mean = Vector4::new(pose.mean[0], pose.mean[1], pose.mean[2], mass.mean);
    let mut cov = Matrix4::zeros();
    cov.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.cov);
    cov.fixed_view_mut::<3, 1>(0, 3).copy_from(cross_cov);
    cov.fixed_view_mut::<1, 3>(3, 0).copy_from(&cross_cov.transpose());
    cov[(3, 3)] = mass.var;
    JointBelief {
        mean,
        cov: nearest_psd(&cov),
    }
}

/// Returns `m` unchanged when it is PSD, otherwise the eigenvalue-clipped
/// projection.
pub fn nearest_psd(m: &Matrix4<f64>) -> Matrix4<f64> {
    let eig = nalgebra::SymmetricEigen::new(*m);
    if eig.eigenvalues.min() >= 0.0 {
        return *m;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let out = eig.eigenvectors * Matrix4::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub sigma_points: usize,
    pub process_noise: ProcessNoise,
    pub observation_noise: NoiseModel,
    pub shrinkage: ShrinkageParams,
    pub ukf: UkfParams,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            sigma_points: 100,
            process_noise: ProcessNoise::default(),
            observation_noise: NoiseModel {
                sigma_vis: 1.0,
                sigma_tac: 0.3,
            },
            shrinkage: ShrinkageParams::default(),
            ukf: UkfParams::default(),
            seed: 0,
        }
    }
}

/// Action applied over a step and the observation recorded at its end.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStep {
    pub action: PushAction,
    pub observation: ObservationVector,
}

/// Filters the whole interaction; one belief per step.
pub fn run_filter(
    initial_pose: &PoseGaussian,
    mass_prior: &MassGaussian,
    steps: &[FilterStep],
    model: &FilterModel,
    cfg: &FilterConfig,
) -> Result<Vec<JointBelief>> {
    if steps.is_empty() {
        return Err(Error::InvalidParameter("empty trajectory".into()));
    }
    cfg.shrinkage.validate()?;
    cfg.observation_noise.validate()?;
    let r_diag = observation_noise_diag(&cfg.observation_noise);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut belief = JointBelief::from_parts(initial_pose, mass_prior);
    let cross = belief.cross_cov();
    let mut out = Vec::with_capacity(steps.len());
    for step in steps {
        let sigma = sample_sigma_points_with(&belief, cfg.sigma_points, &mut rng)?;
        let (predicted, _) = predict(&sigma, &step.action, model, &cfg.process_noise, &mut rng)?;
        let resampled = sample_sigma_points_with(&predicted, cfg.sigma_points, &mut rng)?;
        let after = step.action.advanced(model.period);
        let observations: Vec<ObservationVector> = resampled
            .points
            .par_iter()
            .zip(&resampled.valid)
            .map(|(p, &valid)| {
                if valid {
                    model.expected_observation(&as_pose(p), p[3], &after)
                } else {
                    Ok(ObservationVector(DVector::zeros(step.observation.0.len())))
                }
            })
            .collect::<Result<_>>()?;
        let param = update_parameter(&resampled, &observations, &step.observation, &r_diag, &cfg.shrinkage)?;
        let mut mass = param.mass;
        if !(mass.mean > 0.0) {
            // Only possible after a degenerate update with invalid points.
            mass.mean = predicted.mean[3].max(COVARIANCE_FLOOR);
        }
        // Pose belief conditioned on the updated mass, with the fixed
        // cross-covariance bound to the predicted pose block.
        let predicted_fixed = recombine(&predicted.pose(), &predicted.mass(), &cross);
        let cond = conditional_pose_belief(&predicted_fixed, mass.mean);
        let pose = match ukf_pose_update(&cond, mass.mean, &step.observation, &after, model, &r_diag, &cfg.ukf) {
            Ok(p) => p,
            Err(Error::SingularInnovation) => {
                log::warn!("innovation covariance not invertible; skipping pose update");
                cond
            }
            Err(e) => return Err(e),
        };
        belief = recombine(&pose, &mass, &cross);
        out.push(belief);
    }
    Ok(out)
}

/// Flat record for belief export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefRecord {
    pub t: f64,
    pub mean: [f64; 4],
    /// Row-major covariance.
    pub cov: [f64; 16],
}

impl BeliefRecord {
    pub fn new(t: f64, b: &JointBelief) -> Self {
        let mut cov = [0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                cov[4 * i + j] = b.cov[(i, j)];
            }
        }
        Self {
            t,
            mean: [b.mean[0], b.mean[1], b.mean[2], b.mean[3]],
            cov,
        }
    }
}

pub fn write_beliefs_csv<W: Write>(writer: W, records: &[BeliefRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string(), "mu_x".into(), "mu_y".into(), "mu_theta".into(), "mu_m".into()];
    for i in 0..4 {
        for j in 0..4 {
            header.push(format!("s{i}{j}"));
        }
    }
    w.write_record(&header)?;
    for r in records {
        let row = std::iter::once(r.t).chain(r.mean).chain(r.cov).map(|v| v.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_beliefs_json<W: Write>(writer: W, records: &[BeliefRecord]) -> Result<()> {
    serde_json::to_writer_pretty(writer, records)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn belief(mean: [f64; 4], sd: [f64; 4]) -> JointBelief {
        JointBelief {
            mean: Vector4::from(mean),
            cov: Matrix4::from_diagonal(&Vector4::from(sd).map(|s| s * s)),
        }
    }

    #[test]
    fn zero_covariance_collapses_points() {
        let b = JointBelief {
            mean: Vector4::new(0.1, 0.2, 0.3, 0.4),
            cov: Matrix4::zeros(),
        };
        let s = sample_sigma_points(&b, 100, 1).unwrap();
        assert!(s.points.iter().all(|p| *p == b.mean));
    }

    #[test]
    fn invalid_points_are_retained() {
        let s = sample_sigma_points(&belief([0.0, 0.0, 0.0, 0.05], [0.0, 0.0, 0.0, 0.1]), 100, 4).unwrap();
        assert_eq!(s.len(), 100);
        assert!(s.valid.iter().any(|v| !v));
        assert!(s.points.iter().zip(&s.valid).all(|(p, &v)| v == (p[3] > 0.0)));
    }

    #[test]
    fn identical_predictions_leave_weights_uniform() {
        let s = sample_sigma_points(&belief([0.0, 0.0, 0.0, 0.5], [0.0, 0.0, 0.0, 0.1]), 50, 2).unwrap();
        let obs = ObservationVector(DVector::from_element(4, 0.3));
        let pred = vec![obs.clone(); 50];
        let r = DVector::from_element(4, 0.01);
        let u = update_parameter(&s, &pred, &ObservationVector(DVector::zeros(4)), &r, &ShrinkageParams::default()).unwrap();
        assert!(u.weights.iter().all(|&w| (w - 1.0 / 50.0).abs() < 1e-15));
        let mc: f64 = s.points.iter().map(|p| p[3]).sum::<f64>() / 50.0;
        assert_relative_eq!(u.mass.mean, mc, epsilon = 1e-12);
    }

    #[test]
    fn matching_point_dominates() {
        let s = SigmaPointSet {
            points: (0..10).map(|i| Vector4::new(0.0, 0.0, 0.0, 0.1 + 0.1 * i as f64)).collect(),
            weights: vec![0.1; 10],
            valid: vec![true; 10],
        };
        let z = ObservationVector(DVector::from_element(4, 1.0));
        // Point 3 matches; the rest sit 10σ away in every component.
        let pred: Vec<_> = (0..10)
            .map(|i| ObservationVector(DVector::from_element(4, if i == 3 { 1.0 } else { 2.0 })))
            .collect();
        let r = DVector::from_element(4, 0.01);
        let u = update_parameter(&s, &pred, &z, &r, &ShrinkageParams::default()).unwrap();
        assert!((u.mass.mean - 0.4).abs() <= 0.004);
    }

    #[test]
    fn log_likelihood_matches_direct_evaluation() {
        let p = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.05]);
        let z = DVector::from_vec(vec![0.0, 0.1, 0.25, -0.05]);
        let r = DVector::from_vec(vec![0.01, 0.04, 0.0025, 0.09]);
        let d = &p - &z;
        let rinv: Matrix4<f64> = Matrix4::from_diagonal(&Vector4::new(100.0, 25.0, 400.0, 1.0 / 0.09));
        let dv = Vector4::from_column_slice(d.as_slice());
        let quad: f64 = (dv.transpose() * rinv * dv)[0];
        let direct = (-0.5 * quad).exp();
        assert_relative_eq!(log_likelihood(&p, &z, &r).exp(), direct, epsilon = 1e-9);
    }

    #[test]
    fn all_invalid_points_fall_back_to_uniform() {
        let s = SigmaPointSet {
            points: vec![Vector4::new(0.0, 0.0, 0.0, -0.1); 4],
            weights: vec![0.25; 4],
            valid: vec![false; 4],
        };
        let z = ObservationVector(DVector::zeros(2));
        let pred = vec![z.clone(); 4];
        let u = update_parameter(&s, &pred, &z, &DVector::from_element(2, 1.0), &ShrinkageParams::default()).unwrap();
        assert!(u.degenerate);
        assert!(u.weights.iter().all(|&w| w == 0.25));
    }

    #[test]
    fn conditioning_examples() {
        let b = belief([1.0, 2.0, 0.3, 0.5], [0.1, 0.2, 0.05, 0.2]);
        let c = conditional_pose_belief(&b, 0.9);
        assert_eq!(c.mean, b.mean.fixed_rows::<3>(0).into_owned());
        assert_eq!(c.cov, b.cov.fixed_view::<3, 3>(0, 0).into_owned());

        let mut coupled = belief([1.0, 0.0, 0.0, 2.0], [2f64.sqrt(), 1.0, 1.0, 1.0]);
        coupled.cov[(0, 3)] = 0.5;
        coupled.cov[(3, 0)] = 0.5;
        let c = conditional_pose_belief(&coupled, 3.0);
        assert_relative_eq!(c.mean[0], 1.5, epsilon = 1e-12);
        assert_relative_eq!(c.cov[(0, 0)], 1.75, epsilon = 1e-12);
        let same = conditional_pose_belief(&coupled, 2.0);
        assert_relative_eq!(same.mean[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn recombine_preserves_marginals() {
        let pose = PoseGaussian::isotropic(&PlanarPose::new(0.1, 0.2, 0.3), 0.005, 0.03);
        let mass = MassGaussian { mean: 0.4, var: 0.01 };
        let j = recombine(&pose, &mass, &Vector3::zeros());
        assert_eq!(j.pose(), pose);
        assert_eq!(j.mass(), mass);
        assert_eq!(j.cross_cov(), Vector3::zeros());
        assert_eq!(nearest_psd(&j.cov), j.cov);
    }

    #[test]
    fn huge_noise_means_no_update() {
        let prior = PoseGaussian::isotropic(&PlanarPose::new(0.0, 0.0, 0.0), 0.01, 0.05);
        let obs = |p: &PlanarPose| Ok(DVector::from_vec(vec![p.x, p.y, p.theta]));
        let z = DVector::from_vec(vec![0.5, 0.5, 0.5]);
        let post = ukf_update(&prior, obs, &z, &DVector::from_element(3, 1e30), &UkfParams::default()).unwrap();
        assert!((post.mean - prior.mean).amax() <= 1e-9);
        assert!((post.cov - prior.cov).amax() <= 1e-9);
    }
}
