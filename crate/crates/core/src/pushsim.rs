//! Quasi-static planar pushing with an ellipsoidal limit surface.
//!
//! A point pusher moves at constant velocity against an object resting on a
//! table. The support friction wrenches form the ellipsoid
//! `(fx/f_max)² + (fy/f_max)² + (m/m_max)² = 1` and the object twist is
//! normal to it at the applied wrench. Contact with the pusher either
//! sticks or slides along an edge of the friction cone.

use std::io::{Read, Write};

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cross2, heading, PlanarPose};
use crate::superquadric::{Superellipse, Superquadric};

/// Maximum pusher speed (m/s).
pub const MAX_SPEED: f64 = 0.025;
/// Pusher positions farther than this from the boundary are out of contact.
pub const CONTACT_RANGE: f64 = 0.02;
/// Fraction of the mean silhouette radius used as the support radius.
pub const SUPPORT_RADIUS_FACTOR: f64 = 0.6;
/// Default filter period (s).
pub const FILTER_PERIOD: f64 = 0.1;

const GROUND_TRUTH_DT: f64 = 1e-3;
const MAX_RK_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushAction {
    /// Pusher position in world coordinates at the start of the action.
    pub contact_point: Vector2<f64>,
    /// Push heading (rad about world z).
    pub push_direction: f64,
    /// Pusher speed (m/s).
    pub speed: f64,
}

impl PushAction {
    pub fn new(contact_point: Vector2<f64>, push_direction: f64, speed: f64) -> Result<Self> {
        if !(speed > 0.0 && speed <= MAX_SPEED) {
            return Err(Error::InvalidParameter(format!(
                "push speed {speed} outside (0, {MAX_SPEED}]"
            )));
        }
        if !contact_point.iter().all(|c| c.is_finite()) || !push_direction.is_finite() {
            return Err(Error::NonFinite("push action"));
        }
        Ok(Self {
            contact_point,
            push_direction,
            speed,
        })
    }

    pub fn velocity(&self) -> Vector2<f64> {
        heading(self.push_direction) * self.speed
    }

    /// The same push, `dt` seconds later.
    pub fn advanced(&self, dt: f64) -> Self {
        Self {
            contact_point: self.contact_point + self.velocity() * dt,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrictionParams {
    pub mu_surface: f64,
    pub mu_robot: f64,
    pub gravity: f64,
}

impl Default for FrictionParams {
    fn default() -> Self {
        Self {
            mu_surface: 0.3,
            mu_robot: 0.5,
            gravity: 9.81,
        }
    }
}

impl FrictionParams {
    pub fn validate(&self) -> Result<()> {
        if self.mu_surface > 0.0 && self.mu_robot > 0.0 && self.gravity > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter("friction coefficients and gravity must be positive".into()))
        }
    }
}

/// Force applied by the pusher on the object, world frame (N).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactForce {
    pub fx: f64,
    pub fy: f64,
}

impl ContactForce {
    pub fn magnitude(&self) -> f64 {
        self.fx.hypot(self.fy)
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.fx, self.fy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitSurfaceModel {
    pub f_max: f64,
    pub tau_max: f64,
}

impl LimitSurfaceModel {
    pub fn new(mass: f64, friction: &FrictionParams, support_radius: f64) -> Result<Self> {
        check_mass(mass)?;
        let f_max = friction.mu_surface * mass * friction.gravity;
        Ok(Self {
            f_max,
            tau_max: f_max * support_radius,
        })
    }

    /// Ratio `m_max / f_max`; a length independent of mass.
    pub fn moment_arm(&self) -> f64 {
        self.tau_max / self.f_max
    }

    /// Value of the limit-surface quadratic at a wrench; 1 on the surface.
    pub fn level(&self, force: &Vector2<f64>, moment: f64) -> f64 {
        (force.norm_squared()) / (self.f_max * self.f_max) + moment * moment / (self.tau_max * self.tau_max)
    }
}

/// Planar contact geometry derived from a shape: its mid-height
/// silhouette and the support radius of the limit surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactGeometry {
    pub silhouette: Superellipse,
    pub support_radius: f64,
}

/// Contact between pusher and object in the object frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyContact {
    pub point: Vector2<f64>,
    /// Unit normal pointing into the object.
    pub inward_normal: Vector2<f64>,
    /// Distance from the pusher to the boundary.
    pub gap: f64,
}

impl ContactGeometry {
    pub fn from_shape(shape: &Superquadric) -> Self {
        let silhouette = shape.silhouette();
        Self {
            silhouette,
            support_radius: SUPPORT_RADIUS_FACTOR * silhouette.mean_radius(),
        }
    }

    /// Nearest boundary point and inward normal for a pusher position given
    /// in the object frame.
    pub fn body_contact(&self, pusher: &Vector2<f64>) -> Option<BodyContact> {
        let point = self.silhouette.closest_point(pusher);
        let outward = self.silhouette.normal(&point)?;
        Some(BodyContact {
            point,
            inward_normal: -outward,
            gap: (pusher - point).norm(),
        })
    }

    /// Contact for a world-frame action at the object pose, or `None` if
    /// the pusher is out of range.
    pub fn contact(&self, pose: &PlanarPose, action: &PushAction) -> Option<BodyContact> {
        let local = pose.to_local_2d(&action.contact_point);
        self.body_contact(&local).filter(|c| c.gap <= CONTACT_RANGE)
    }

    pub fn limit_surface(&self, mass: f64, friction: &FrictionParams) -> Result<LimitSurfaceModel> {
        LimitSurfaceModel::new(mass, friction, self.support_radius)
    }
}

/// Object-frame motion produced by a pusher velocity at a contact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactTwist {
    pub linear: Vector2<f64>,
    pub angular: f64,
    /// Unit direction of the pusher force.
    pub force_dir: Vector2<f64>,
    pub sliding: bool,
}

/// Resolves the contact mode and the resulting body twist.
///
/// `r` is the contact point relative to the centre of friction, `normal`
/// the inward unit normal, `pusher_vel` the pusher velocity and `c` the
/// limit-surface moment arm, all in the object frame. Returns `None` when
/// the pusher separates from the object.
pub fn contact_twist(
    r: &Vector2<f64>,
    normal: &Vector2<f64>,
    pusher_vel: &Vector2<f64>,
    mu_robot: f64,
    c: f64,
) -> Option<ContactTwist> {
    let vn = normal.dot(pusher_vel);
    if !(vn > 0.0) {
        return None;
    }
    let c2 = c * c;
    // Contact-point velocity is M·k·f for a force f with twist ∝ (f, r×f/c²).
    let m = Matrix2::new(
        1.0 + r.y * r.y / c2,
        -r.x * r.y / c2,
        -r.x * r.y / c2,
        1.0 + r.x * r.x / c2,
    );
    let m_inv = m.try_inverse()?;
    let stick = m_inv * pusher_vel;
    let half_angle = mu_robot.atan();
    let stick_dir = stick.normalize();
    let inside = stick_dir.dot(normal) >= half_angle.cos() - 1e-12;
    let (kf, force_dir, sliding) = if inside {
        (stick, stick_dir, false)
    } else {
        let side = cross2(normal, &stick_dir).signum();
        let edge = nalgebra::Rotation2::new(side * half_angle) * normal;
        let denom = normal.dot(&(m * edge));
        if !(denom > 0.0) {
            return None;
        }
        (edge * (vn / denom), edge, true)
    };
    Some(ContactTwist {
        linear: kf,
        angular: cross2(r, &kf) / c2,
        force_dir,
        sliding,
    })
}

fn check_mass(mass: f64) -> Result<()> {
    if mass > 0.0 && mass.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("mass must be positive, got {mass}")))
    }
}

fn check_normal(n: &Vector2<f64>) -> Result<Vector2<f64>> {
    let len = n.norm();
    if len > 1e-12 && len.is_finite() {
        Ok(n / len)
    } else {
        Err(Error::DegenerateNormal)
    }
}

/// World-frame pose rate for a pusher at `pusher` moving with `vel`.
fn pose_rate(
    pose: &PlanarPose,
    pusher: &Vector2<f64>,
    vel: &Vector2<f64>,
    normal: &Vector2<f64>,
    mu_robot: f64,
    c: f64,
) -> [f64; 3] {
    let r = pose.to_local_2d(pusher);
    let v_body = pose.rotation().inverse() * vel;
    match contact_twist(&r, normal, &v_body, mu_robot, c) {
        Some(tw) => {
            let v = pose.rotation() * tw.linear;
            [v.x, v.y, tw.angular]
        }
        None => [0.0; 3],
    }
}

/// Pose after pushing for `dt` seconds.
///
/// `contact_normal` is the inward surface normal in the object frame; it is
/// held fixed over the step. The pusher position relative to the object is
/// tracked continuously.
pub fn analytical_process(
    pose: &PlanarPose,
    mass: f64,
    action: &PushAction,
    contact_normal: &Vector2<f64>,
    friction: &FrictionParams,
    geometry: &ContactGeometry,
    dt: f64,
) -> Result<PlanarPose> {
    check_mass(mass)?;
    let normal = check_normal(contact_normal)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("time step must be positive".into()));
    }
    if action.speed == 0.0 || geometry.contact(pose, action).is_none() {
        return Ok(*pose);
    }
    let c = geometry.support_radius;
    let mu_r = friction.mu_robot;
    let vel = action.velocity();
    let steps = (dt / MAX_RK_STEP).ceil().max(1.0) as usize;
    let h = dt / steps as f64;
    let mut state = [pose.x, pose.y, pose.theta];
    let rate = |t: f64, s: &[f64; 3]| {
        let p = PlanarPose {
            x: s[0],
            y: s[1],
            theta: s[2],
        };
        pose_rate(&p, &(action.contact_point + vel * t), &vel, &normal, mu_r, c)
    };
    let add = |s: &[f64; 3], k: &[f64; 3], w: f64| [s[0] + w * k[0], s[1] + w * k[1], s[2] + w * k[2]];
    for i in 0..steps {
        let t = i as f64 * h;
        let k1 = rate(t, &state);
        let k2 = rate(t + 0.5 * h, &add(&state, &k1, 0.5 * h));
        let k3 = rate(t + 0.5 * h, &add(&state, &k2, 0.5 * h));
        let k4 = rate(t + h, &add(&state, &k3, h));
        for j in 0..3 {
            state[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    Ok(PlanarPose::new(state[0], state[1], state[2]))
}

fn contact_force(
    r: &Vector2<f64>,
    normal: &Vector2<f64>,
    v_body: &Vector2<f64>,
    mu_robot: f64,
    ls: &LimitSurfaceModel,
) -> Option<Vector2<f64>> {
    let c = ls.moment_arm();
    let tw = contact_twist(r, normal, v_body, mu_robot, c)?;
    let lever = cross2(r, &tw.force_dir);
    let magnitude = ls.f_max / (1.0 + lever * lever / (c * c)).sqrt();
    Some(tw.force_dir * magnitude)
}

/// Expected pusher force at the given pose, on the limit surface and
/// consistent with the resulting twist.
pub fn analytical_tactile(
    pose: &PlanarPose,
    mass: f64,
    action: &PushAction,
    contact_normal: &Vector2<f64>,
    friction: &FrictionParams,
    geometry: &ContactGeometry,
) -> Result<ContactForce> {
    check_mass(mass)?;
    let normal = check_normal(contact_normal)?;
    if action.speed == 0.0 || geometry.contact(pose, action).is_none() {
        return Ok(ContactForce::default());
    }
    let ls = geometry.limit_surface(mass, friction)?;
    let r = pose.to_local_2d(&action.contact_point);
    let v_body = pose.rotation().inverse() * action.velocity();
    Ok(match contact_force(&r, &normal, &v_body, friction.mu_robot, &ls) {
        Some(f) => {
            let w = pose.rotation() * f;
            ContactForce { fx: w.x, fy: w.y }
        }
        None => ContactForce::default(),
    })
}

/// Perturbations applied by the ground-truth simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Standard deviation of the per-step contact location jitter (m).
    pub contact_jitter: f64,
    /// Log-scale standard deviation of the friction coefficients, drawn
    /// once per rollout.
    pub friction_perturbation: f64,
    /// Standard deviation of additive force sensor noise (N).
    pub force_noise: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            contact_jitter: 5e-4,
            friction_perturbation: 0.05,
            force_noise: 0.05,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            contact_jitter: 0.0,
            friction_perturbation: 0.0,
            force_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueState {
    pub pose: PlanarPose,
    pub mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub fx: f64,
    pub fy: f64,
}

impl TrajectorySample {
    pub fn pose(&self) -> PlanarPose {
        PlanarPose {
            x: self.x,
            y: self.y,
            theta: self.theta,
        }
    }

    pub fn force(&self) -> ContactForce {
        ContactForce {
            fx: self.fx,
            fy: self.fy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for s in &self.samples {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let samples = r.deserialize().collect::<std::result::Result<Vec<TrajectorySample>, _>>()?;
        Ok(Self { samples })
    }
}

/// Simulated world: the pushing physics integrated at 1 ms with contact
/// jitter, perturbed friction and force noise, sampled at the filter
/// period.
pub fn ground_truth_rollout(
    true_state: &TrueState,
    shape: &Superquadric,
    action: &PushAction,
    friction: &FrictionParams,
    duration: f64,
    noise: &NoiseSpec,
    rng_seed: u64,
) -> Result<Trajectory> {
    ground_truth_rollout_with_period(true_state, shape, action, friction, duration, FILTER_PERIOD, noise, rng_seed)
}

#[allow(clippy::too_many_arguments)]
pub fn ground_truth_rollout_with_period(
    true_state: &TrueState,
    shape: &Superquadric,
    action: &PushAction,
    friction: &FrictionParams,
    duration: f64,
    period: f64,
    noise: &NoiseSpec,
    rng_seed: u64,
) -> Result<Trajectory> {
    shape.validate()?;
    friction.validate()?;
    check_mass(true_state.mass)?;
    if !(duration > 0.0) || !(period > 0.0) {
        return Err(Error::InvalidParameter("duration and period must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal_draw = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let mu_scale = (noise.friction_perturbation * normal_draw(&mut rng)).exp();
    let mu_r_scale = (noise.friction_perturbation * normal_draw(&mut rng)).exp();
    let world = FrictionParams {
        mu_surface: friction.mu_surface * mu_scale,
        mu_robot: friction.mu_robot * mu_r_scale,
        gravity: friction.gravity,
    };
    let geometry = ContactGeometry::from_shape(shape);
    let ls = geometry.limit_surface(true_state.mass, &world)?;
    let c = ls.moment_arm();
    let vel = action.velocity();
    let per_sample = (period / GROUND_TRUTH_DT).round().max(1.0) as usize;
    let n_samples = (duration / period).round() as usize;
    let dt = period / per_sample as f64;

    let mut pose = true_state.pose;
    let mut samples = Vec::with_capacity(n_samples);
    // Pusher force and twist at the current state; `None` when free.
    let evaluate = |pose: &PlanarPose, t: f64, rng: &mut ChaCha8Rng| {
        let pusher = pose.to_local_2d(&(action.contact_point + vel * t));
        let jitter = Vector2::new(normal_draw(rng), normal_draw(rng)) * noise.contact_jitter;
        let contact = geometry.body_contact(&pusher)?;
        let inside = geometry.silhouette.implicit(&pusher) <= 1.0;
        if !inside && contact.gap > 1e-4 {
            return None;
        }
        let penetration = if inside { contact.gap } else { 0.0 };
        let v_body = pose.rotation().inverse() * vel + contact.inward_normal * (penetration / 0.05);
        let r = contact.point + jitter;
        let tw = contact_twist(&r, &contact.inward_normal, &v_body, world.mu_robot, c)?;
        let f = contact_force(&r, &contact.inward_normal, &v_body, world.mu_robot, &ls)?;
        Some((tw, pose.rotation() * f))
    };
    for k in 1..=n_samples {
        for j in 0..per_sample {
            let t = ((k - 1) * per_sample + j) as f64 * dt;
            if let Some((tw, _)) = evaluate(&pose, t, &mut rng) {
                let v = pose.rotation() * tw.linear;
                pose = PlanarPose::new(pose.x + v.x * dt, pose.y + v.y * dt, pose.theta + tw.angular * dt);
            }
        }
        let t = (k * per_sample) as f64 * dt;
        let f = evaluate(&pose, t, &mut rng).map(|(_, f)| f).unwrap_or_else(Vector2::zeros);
        let fnoise = Vector2::new(normal_draw(&mut rng), normal_draw(&mut rng)) * noise.force_noise;
        samples.push(TrajectorySample {
            t,
            x: pose.x,
            y: pose.y,
            theta: pose.theta,
            fx: f.x + fnoise.x,
            fy: f.y + fnoise.y,
        });
    }
    Ok(Trajectory { samples })
}

/// Largest angle between a sampled push heading and the inward normal.
pub const MAX_PUSH_DEVIATION: f64 = std::f64::consts::FRAC_PI_6;
const MIN_SAMPLED_SPEED: f64 = 0.01;

/// Samples a push: a contact point uniform in arc length on the mid-height
/// silhouette, a heading near the inward normal and a speed within the
/// safety limit.
pub fn sample_push_action(shape: &Superquadric, pose: &PlanarPose, rng_seed: u64) -> Result<PushAction> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let silhouette = shape.silhouette();
    let (ts, cumulative) = arc_length_table(&silhouette);
    let total = *cumulative.last().expect("non-empty table");
    let target = rng.random::<f64>() * total;
    let i = cumulative.partition_point(|&s| s < target).clamp(1, cumulative.len() - 1);
    let (s0, s1) = (cumulative[i - 1], cumulative[i]);
    let w = if s1 > s0 { (target - s0) / (s1 - s0) } else { 0.0 };
    let point = silhouette.point(ts[i - 1] + w * (ts[i] - ts[i - 1]));
    let outward = silhouette.normal(&point).ok_or(Error::DegenerateNormal)?;
    let inward_world = pose.rotation() * (-outward);
    let deviation = rng.random_range(-MAX_PUSH_DEVIATION..=MAX_PUSH_DEVIATION);
    let speed = rng.random_range(MIN_SAMPLED_SPEED..=MAX_SPEED);
    PushAction::new(
        pose.to_world_2d(&point),
        inward_world.y.atan2(inward_world.x) + deviation,
        speed,
    )
}

fn arc_length_table(s: &Superellipse) -> (Vec<f64>, Vec<f64>) {
    const N: usize = 4096;
    let ts: Vec<f64> = (0..=N).map(|k| k as f64 / N as f64 * std::f64::consts::TAU).collect();
    let mut cumulative = Vec::with_capacity(N + 1);
    let mut acc = 0.0;
    let mut prev = s.point(0.0);
    for &t in &ts {
        let p = s.point(t);
        acc += (p - prev).norm();
        cumulative.push(acc);
        prev = p;
    }
    (ts, cumulative)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square() -> (Superquadric, ContactGeometry) {
        let sq = Superquadric::new(0.1, 0.1, 0.05, 0.05, 0.05).unwrap();
        (sq, ContactGeometry::from_shape(&sq))
    }

    #[test]
    fn zero_speed_leaves_pose_unchanged() {
        let (_, g) = square();
        let pose = PlanarPose::new(0.1, 0.2, 0.3);
        let action = PushAction {
            contact_point: pose.to_world_2d(&Vector2::new(-0.05, 0.0)),
            push_direction: 0.3,
            speed: 0.0,
        };
        let n = Vector2::new(1.0, 0.0);
        let next = analytical_process(&pose, 0.5, &action, &n, &FrictionParams::default(), &g, 0.1).unwrap();
        assert_eq!(next, pose);
    }

    #[test]
    fn central_push_translates_with_full_friction_force() {
        let (_, g) = square();
        let pose = PlanarPose::identity();
        let action = PushAction::new(Vector2::new(-0.05, 0.0), 0.0, 0.02).unwrap();
        let n = Vector2::new(1.0, 0.0);
        let fr = FrictionParams::default();
        let next = analytical_process(&pose, 0.5, &action, &n, &fr, &g, 0.1).unwrap();
        assert!(next.theta.abs() <= 1e-9);
        assert_relative_eq!(next.x, 0.002, epsilon = 1e-12);
        let f = analytical_tactile(&pose, 0.5, &action, &n, &fr, &g).unwrap();
        assert_relative_eq!(f.magnitude(), 1.4715, epsilon = 1e-9);
    }

    #[test]
    fn far_pusher_is_contact_free() {
        let (_, g) = square();
        let pose = PlanarPose::identity();
        let action = PushAction::new(Vector2::new(-0.1, 0.0), 0.0, 0.02).unwrap();
        let n = Vector2::new(1.0, 0.0);
        let fr = FrictionParams::default();
        assert_eq!(analytical_process(&pose, 0.5, &action, &n, &fr, &g, 0.1).unwrap(), pose);
        assert_eq!(analytical_tactile(&pose, 0.5, &action, &n, &fr, &g).unwrap(), ContactForce::default());
    }

    #[test]
    fn errors_on_bad_mass_and_normal() {
        let (_, g) = square();
        let pose = PlanarPose::identity();
        let action = PushAction::new(Vector2::new(-0.05, 0.0), 0.0, 0.02).unwrap();
        let fr = FrictionParams::default();
        let n = Vector2::new(1.0, 0.0);
        assert!(matches!(
            analytical_process(&pose, 0.0, &action, &n, &fr, &g, 0.1),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            analytical_tactile(&pose, 0.5, &action, &Vector2::zeros(), &fr, &g),
            Err(Error::DegenerateNormal)
        ));
    }

    #[test]
    fn sliding_force_sits_on_cone_edge() {
        let r = Vector2::new(-0.05, 0.0);
        let n = Vector2::new(1.0, 0.0);
        let v = Vector2::new(1.0, 1.5).normalize() * 0.02;
        let tw = contact_twist(&r, &n, &v, 0.3, 0.03).unwrap();
        assert!(tw.sliding);
        let ratio = cross2(&n, &tw.force_dir).abs() / n.dot(&tw.force_dir);
        assert_relative_eq!(ratio, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn separating_pusher_gives_no_twist() {
        let r = Vector2::new(-0.05, 0.0);
        let n = Vector2::new(1.0, 0.0);
        assert!(contact_twist(&r, &n, &Vector2::new(-0.01, 0.0), 0.5, 0.03).is_none());
    }

    #[test]
    fn rollout_length_and_determinism() {
        let (sq, _) = square();
        let state = TrueState {
            pose: PlanarPose::identity(),
            mass: 0.4,
        };
        let action = PushAction::new(Vector2::new(-0.05, 0.01), 0.1, 0.02).unwrap();
        let fr = FrictionParams::default();
        let noise = NoiseSpec::default();
        let a = ground_truth_rollout(&state, &sq, &action, &fr, 5.0, &noise, 9).unwrap();
        let b = ground_truth_rollout(&state, &sq, &action, &fr, 5.0, &noise, 9).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        assert_relative_eq!(a.samples[49].t, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let t = Trajectory {
            samples: vec![TrajectorySample {
                t: 0.1,
                x: 1.0,
                y: -2.0,
                theta: 0.5,
                fx: 0.25,
                fy: -0.125,
            }],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("t,x,y,theta,fx,fy\n"));
        assert_eq!(Trajectory::read_csv(buf.as_slice()).unwrap(), t);
    }
}
