//! Reference implementations shared by the integration tests. Each one
//! follows a different route than the library code it checks.
#![allow(dead_code)]

use crossmodal::dualfilter::{FilterModel, FilterStep};
use crossmodal::geometry::PlanarPose;
use crossmodal::pushsim::*;
use crossmodal::sensing::{assemble_observation, render, CameraModel};
use crossmodal::superquadric::{PointCloud, Superquadric};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix4, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random well-posed covariance `B Bᵀ + δI` with heterogeneous scales.
pub fn random_psd4(rng: &mut ChaCha8Rng) -> Matrix4<f64> {
    let scales = Matrix4::from_diagonal(&nalgebra::Vector4::from_fn(|_, _| 10f64.powf(rng.random_range(-2.0..0.5))));
    let b = Matrix4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let m = scales * (b * b.transpose() + Matrix4::identity() * 0.05) * scales;
    (m + m.transpose()) * 0.5
}

/// Moments of the conditional density `p(ψ | φ = m)` taken by summing the
/// unnormalised joint density over a 3D grid. The box is re-centred and
/// re-sized on the previous pass's moments until it hugs the density.
pub fn grid_condition(mean: &nalgebra::Vector4<f64>, cov: &Matrix4<f64>, m: f64) -> (Vector3<f64>, Matrix3<f64>) {
    const N: usize = 48;
    let prec = cov.try_inverse().expect("test covariance is invertible");
    let mut centre = Vector3::new(mean[0], mean[1], mean[2]);
    let mut half = Vector3::new(cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt()) * 7.0;
    let mut result = (centre, Matrix3::identity());
    for _ in 0..4 {
        let axis = |k: usize, i: usize| centre[k] - half[k] + 2.0 * half[k] * (i as f64 + 0.5) / N as f64;
        let mut total = 0.0;
        let mut s1 = Vector3::zeros();
        let mut s2 = Matrix3::zeros();
        for i in 0..N {
            for j in 0..N {
                for k in 0..N {
                    let p = Vector3::new(axis(0, i), axis(1, j), axis(2, k));
                    let d = nalgebra::Vector4::new(p.x - mean[0], p.y - mean[1], p.z - mean[2], m - mean[3]);
                    let w = (-0.5 * d.dot(&(prec * d))).exp();
                    total += w;
                    s1 += p * w;
                    s2 += p * p.transpose() * w;
                }
            }
        }
        let mu = s1 / total;
        let sig = s2 / total - mu * mu.transpose();
        result = (mu, sig);
        centre = mu;
        half = Vector3::new(sig[(0, 0)].sqrt(), sig[(1, 1)].sqrt(), sig[(2, 2)].sqrt()) * 7.0;
    }
    result
}

/// Dense GP posterior written from the textbook formulas with an explicit
/// inverse of the Gram matrix.
pub fn dense_gp(
    x: &[[f64; 5]],
    y: &[f64],
    q: &[f64; 5],
    scale: f64,
    lengths: &[f64; 5],
    noise: f64,
    prior_mean: f64,
) -> (f64, f64) {
    let k = |a: &[f64; 5], b: &[f64; 5]| {
        let s: f64 = (0..5).map(|d| ((a[d] - b[d]) / lengths[d]).powi(2)).sum();
        scale * (-0.5 * s).exp()
    };
    let n = x.len();
    let gram = DMatrix::from_fn(n, n, |i, j| k(&x[i], &x[j]) + if i == j { noise } else { 0.0 });
    let inv = gram.try_inverse().expect("gram invertible");
    let ks = DVector::from_fn(n, |i, _| k(&x[i], q));
    let resid = DVector::from_fn(n, |i, _| y[i] - prior_mean);
    let mean = prior_mean + (ks.transpose() * &inv * resid)[0];
    let var = k(q, q) - (ks.transpose() * &inv * &ks)[0];
    (mean, var)
}

/// Sticking-contact twist from the normality rule written out directly:
/// body twist (v, ω) = (g, r×g / c²) and the contact point moves with the
/// pusher.
pub fn reference_rate(pose: &PlanarPose, pusher: Vector2<f64>, vel: Vector2<f64>, c: f64) -> [f64; 3] {
    let (s, co) = pose.theta.sin_cos();
    let rot = Matrix2::new(co, -s, s, co);
    let r = rot.transpose() * (pusher - Vector2::new(pose.x, pose.y));
    let vb = rot.transpose() * vel;
    // v + ω ẑ×r = vb with ω = (rx gy − ry gx)/c²
    let a = Matrix2::new(
        1.0 + r.y * r.y / (c * c),
        -r.x * r.y / (c * c),
        -r.x * r.y / (c * c),
        1.0 + r.x * r.x / (c * c),
    );
    let g = a.lu().solve(&vb).unwrap();
    let w = (r.x * g.y - r.y * g.x) / (c * c);
    let v = rot * g;
    [v.x, v.y, w]
}

/// Forward Euler at step `h` of the sticking-contact rate.
pub fn reference_integrate(pose: PlanarPose, action: &PushAction, c: f64, dt: f64, h: f64) -> PlanarPose {
    let mut p = pose;
    let n = (dt / h).round() as usize;
    for i in 0..n {
        let t = i as f64 * h;
        let pusher = action.contact_point + action.velocity() * t;
        let rate = reference_rate(&p, pusher, action.velocity(), c);
        p = PlanarPose {
            x: p.x + rate[0] * h,
            y: p.y + rate[1] * h,
            theta: p.theta + rate[2] * h,
        };
    }
    p
}

/// A simulated push of a random box-like object with its observations.
pub struct Scenario {
    pub mass: f64,
    pub pose0: PlanarPose,
    pub model: FilterModel,
    pub steps: Vec<FilterStep>,
    pub truth: Trajectory,
}

pub fn scenario(seed: u64, mass: f64, noise: &NoiseSpec, duration: f64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = Superquadric::new(
        rng.random_range(0.2..1.0),
        rng.random_range(0.2..1.0),
        rng.random_range(0.03..0.08),
        rng.random_range(0.03..0.08),
        rng.random_range(0.03..0.08),
    )
    .unwrap();
    let pose0 = PlanarPose::new(0.0, 0.0, rng.random_range(-3.0..3.0));
    let place = |pts: Vec<Vector3<f64>>| {
        PointCloud::new(
            pts.into_iter()
                .map(|b| {
                    let mut w = pose0.to_world(&b);
                    w.z += sq.az;
                    w
                })
                .collect(),
        )
        .unwrap()
    };
    let dense = place(sq.sample_surface(20000, seed).unwrap().into_points());
    let init = place(sq.sample_surface(2000, seed + 1000).unwrap().into_points());
    let action = sample_push_action(&sq, &pose0, seed).unwrap();
    let friction = FrictionParams::default();
    let truth = ground_truth_rollout(&TrueState { pose: pose0, mass }, &sq, &action, &friction, duration, noise, seed).unwrap();
    let camera = CameraModel::default();
    let steps = truth
        .samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let img = render(&s.pose().relative_to(&pose0), &dense, &camera).unwrap();
            FilterStep {
                action: action.advanced(k as f64 * FILTER_PERIOD),
                observation: assemble_observation(&img, &s.force()).unwrap(),
            }
        })
        .collect();
    Scenario {
        mass,
        pose0,
        model: FilterModel {
            geometry: ContactGeometry::from_shape(&sq),
            friction,
            camera,
            initial_cloud: init,
            initial_pose: pose0,
            period: FILTER_PERIOD,
        },
        steps,
        truth,
    }
}

/// Surface samples of `shape` resting on the table at `pose`, with
/// per-coordinate Gaussian noise, followed by `outliers` uniform points in
/// a `half`-wide box up to `height`.
pub fn corrupted_cloud(
    shape: &Superquadric,
    pose: &PlanarPose,
    inliers: usize,
    noise: f64,
    outliers: usize,
    (half, height): (f64, f64),
    rng: &mut ChaCha8Rng,
) -> PointCloud {
    let body = shape.sample_surface(inliers, rng.random()).unwrap();
    let mut pts: Vec<Vector3<f64>> = body
        .points()
        .iter()
        .map(|b| {
            let mut w = pose.to_world(b);
            w.z += shape.az;
            w + Vector3::from_fn(|_, _| noise * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    for _ in 0..outliers {
        pts.push(Vector3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(0.0..height)));
    }
    PointCloud::new(pts).unwrap()
}

/// Largest relative semi-axis error and largest absolute exponent error
/// between canonical forms.
pub fn shape_errors(fit: &Superquadric, truth: &Superquadric) -> (f64, f64) {
    let (f, _) = fit.canonical();
    let (t, _) = truth.canonical();
    let axes = [(f.ax, t.ax), (f.ay, t.ay), (f.az, t.az)].iter().map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
    let eps = (f.eps1 - t.eps1).abs().max((f.eps2 - t.eps2).abs());
    (axes, eps)
}
