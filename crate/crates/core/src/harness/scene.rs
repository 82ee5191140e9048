use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{CatalogObject, CloudConfig, RunConfig};
use crate::cmgp::ShapeVector;
use crate::dualfilter::{FilterModel, FilterStep};
use crate::error::{Error, Result};
use crate::geometry::PlanarPose;
use crate::pushsim::{ground_truth_rollout_with_period, sample_push_action, ContactGeometry, PushAction, Trajectory, TrueState};
use crate::sensing::{assemble_observation, render, CameraModel};
use crate::superquadric::{ems_fit, FitResult, PointCloud, Superquadric};

/// Independent RNG streams per catalog object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Capture = 1,
    Fit = 2,
    Action = 3,
    Rollout = 4,
    Filter = 5,
    Observation = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one stream of one object, independent of presentation order.
pub fn object_seed(master: u64, object: usize, stream: Stream) -> u64 {
    splitmix(master ^ splitmix(((object as u64) << 8) | stream as u64))
}

fn place(pose: &PlanarPose, shape: &Superquadric, p: &Vector3<f64>) -> Vector3<f64> {
    let mut w = pose.to_world(p);
    w.z += shape.az;
    w
}

/// Dense surface samples of the object in its world pose.
pub fn surface_cloud(shape: &Superquadric, pose: &PlanarPose, count: usize, seed: u64) -> Result<PointCloud> {
    let body = shape.sample_surface(count, seed)?;
    PointCloud::new(body.points().iter().map(|p| place(pose, shape, p)).collect())
}

/// Point cloud as seen from `views` cameras spaced evenly around and above
/// the object, with Gaussian noise and uniform outliers in the workspace
/// around it. Visibility is back-face culling, exact for convex shapes.
pub fn synthesize_views(shape: &Superquadric, pose: &PlanarPose, cfg: &CloudConfig, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outliers = (cfg.points as f64 * cfg.outlier_fraction).round() as usize;
    let inliers = cfg.points - outliers;
    let centre = Vector3::new(pose.x, pose.y, shape.az);
    let cams: Vec<Vector3<f64>> = (0..cfg.views)
        .map(|v| {
            let az = 0.3 + std::f64::consts::TAU * v as f64 / cfg.views as f64;
            centre + Vector3::new(0.45 * az.cos(), 0.45 * az.sin(), 0.45)
        })
        .collect();
    let rot = pose.rotation();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut points = Vec::with_capacity(cfg.points);
    for _round in 0..50 {
        let missing = inliers - points.len();
        if missing == 0 {
            break;
        }
        for p in shape.sample_surface_with(2 * missing + 16, &mut rng) {
            let Ok(n) = shape.outward_normal(&p) else { continue };
            let xy = rot * nalgebra::Vector2::new(n.x, n.y);
            let nw = Vector3::new(xy.x, xy.y, n.z);
            let w = place(pose, shape, &p);
            if points.len() < inliers && cams.iter().any(|c| nw.dot(&(c - w)) > 0.0) {
                points.push(w + Vector3::from_fn(|_, _| noise.sample(&mut rng)));
            }
        }
    }
    if points.len() < inliers {
        return Err(Error::InsufficientData {
            needed: inliers,
            got: points.len(),
        });
    }
    let half = shape.ax.max(shape.ay).max(shape.az) + 0.1;
    for _ in 0..outliers {
        points.push(Vector3::new(
            centre.x + rng.random_range(-half..half),
            centre.y + rng.random_range(-half..half),
            rng.random_range(0.0..2.0 * shape.az + 0.1),
        ));
    }
    PointCloud::new(points)
}

/// Everything about one catalog object that does not depend on what the
/// learner knows: perception, the push, and the recorded observations.
#[derive(Debug, Clone)]
pub struct PreparedObject {
    pub index: usize,
    pub object: CatalogObject,
    pub fit: FitResult,
    /// Fitted shape with `a_x ≥ a_y`, the GP input.
    pub gp_input: ShapeVector,
    pub fitted_pose: PlanarPose,
    pub action: PushAction,
    pub trajectory: Trajectory,
    pub steps: Vec<FilterStep>,
    pub model: FilterModel,
}

pub fn prepare_object(cfg: &RunConfig, index: usize, object: &CatalogObject) -> Result<PreparedObject> {
    let seed = |s| object_seed(cfg.seed, index, s);
    let shape = &object.true_shape;
    let cloud = synthesize_views(shape, &object.true_pose, &cfg.cloud, seed(Stream::Capture))?;
    let fit = ems_fit(&cloud, &cfg.ems, seed(Stream::Fit))?;
    let (canon, swapped) = fit.shape.canonical();
    let fitted_pose = if swapped {
        PlanarPose::new(fit.pose.x, fit.pose.y, fit.pose.theta + std::f64::consts::FRAC_PI_2)
    } else {
        fit.pose
    };
    let mut segmented: Vec<Vector3<f64>> = cloud
        .points()
        .iter()
        .zip(&fit.inlier_probs)
        .filter(|(_, &g)| g >= 0.5)
        .map(|(p, _)| *p)
        .collect();
    if segmented.len() < 50 {
        segmented = cloud.points().to_vec();
    }
    let initial_cloud = PointCloud::new(segmented)?;

    let action = sample_push_action(shape, &object.true_pose, seed(Stream::Action))?;
    let truth = TrueState {
        pose: object.true_pose,
        mass: object.true_mass,
    };
    let trajectory = ground_truth_rollout_with_period(
        &truth,
        shape,
        &action,
        &cfg.friction,
        cfg.duration,
        cfg.period,
        &cfg.rollout_noise,
        seed(Stream::Rollout),
    )?;
    let camera = CameraModel::default();
    let observed = surface_cloud(shape, &object.true_pose, cfg.cloud.observation_points, seed(Stream::Observation))?;
    let steps = trajectory
        .samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let image = render(&s.pose().relative_to(&object.true_pose), &observed, &camera)?;
            Ok(FilterStep {
                action: action.advanced(k as f64 * cfg.period),
                observation: assemble_observation(&image, &s.force())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = FilterModel {
        geometry: ContactGeometry::from_shape(&canon),
        friction: cfg.friction,
        camera,
        initial_cloud,
        initial_pose: fitted_pose,
        period: cfg.period,
    };
    Ok(PreparedObject {
        index,
        object: object.clone(),
        gp_input: canon.to_array(),
        fit,
        fitted_pose,
        action,
        trajectory,
        steps,
        model,
    })
}
