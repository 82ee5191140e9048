mod common;

use crossmodal::dualfilter::*;
use crossmodal::geometry::PlanarPose;
use crossmodal::pushsim::{NoiseSpec, PushAction};
use crossmodal::sensing::ObservationVector;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn sigma_moments_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cov = common::random_psd4(&mut rng);
    let belief = JointBelief {
        mean: Vector4::new(0.1, -0.2, 0.3, 0.5),
        cov,
    };
    let c = 10_000;
    let set = sample_sigma_points(&belief, c, 5).unwrap();
    let m = set.moments();
    for i in 0..4 {
        let se = (cov[(i, i)] / c as f64).sqrt();
        assert!((m.mean[i] - belief.mean[i]).abs() <= 3.0 * se, "mean {i}");
        for j in 0..4 {
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / c as f64).sqrt();
            assert!((m.cov[(i, j)] - cov[(i, j)]).abs() <= 3.0 * se, "cov ({i},{j})");
        }
    }
}

#[test]
fn conditioning_matches_grid_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let cov = common::random_psd4(&mut rng);
        let mean = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let m = mean[3] + cov[(3, 3)].sqrt() * rng.random_range(-2.0..2.0);
        let cond = conditional_pose_belief(&JointBelief { mean, cov }, m);
        let (mu, sig) = common::grid_condition(&mean, &cov, m);
        let scale = sig.norm();
        assert!((cond.cov - sig).norm() <= 0.01 * scale, "case {case} covariance");
        let spread = sig.trace().sqrt();
        assert!((cond.mean - mu).norm() <= 0.01 * spread.max(mu.norm()), "case {case} mean");
    }
}

fn linear_observer(h: DMatrix<f64>) -> impl Fn(&PlanarPose) -> crossmodal::Result<DVector<f64>> + Sync {
    move |p: &PlanarPose| Ok(&h * DVector::from_column_slice(&p.as_array()))
}

fn kalman_reference(prior: &PoseGaussian, h: &DMatrix<f64>, z: &DVector<f64>, r: &DVector<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let p = DMatrix::from_fn(3, 3, |i, j| prior.cov[(i, j)]);
    let x = DVector::from_column_slice(prior.mean.as_slice());
    let s = h * &p * h.transpose() + DMatrix::from_diagonal(r);
    let k = &p * h.transpose() * s.try_inverse().unwrap();
    let xn = &x + &k * (z - h * &x);
    let pn = (DMatrix::identity(3, 3) - &k * h) * &p;
    (Vector3::from_fn(|i, _| xn[i]), Matrix3::from_fn(|i, j| pn[(i, j)]))
}

#[test]
fn ukf_matches_kalman_filter_on_linear_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
    let prior = PoseGaussian {
        mean: Vector3::new(0.01, -0.02, 0.05),
        cov: Matrix3::from_diagonal(&Vector3::new(1e-4, 2e-4, 3e-3)),
    };
    let truth = Vector3::new(0.015, -0.01, 0.02);
    let z = &h * DVector::from_column_slice(truth.as_slice());
    let r = DVector::from_element(6, 1e-10);
    let post = ukf_update(&prior, linear_observer(h.clone()), &z, &r, &UkfParams::default()).unwrap();
    let (mean, cov) = kalman_reference(&prior, &h, &z, &r);
    assert!((post.mean - mean).norm() <= 1e-9, "{} {}", (post.mean - mean).norm(), (post.cov - cov).norm());
    assert!((post.cov - cov).norm() <= 1e-9);
    assert!((post.mean.xy() - truth.xy()).norm() <= 1e-3);

    let diff = prior.cov - post.cov;
    assert!(nalgebra::SymmetricEigen::new(diff).eigenvalues.min() >= -1e-12);
}

#[test]
fn ukf_with_huge_noise_keeps_prior() {
    let h = DMatrix::from_fn(4, 3, |i, j| (i + j) as f64 * 0.3 + 0.1);
    let prior = PoseGaussian {
        mean: Vector3::new(0.5, 0.1, -0.3),
        cov: Matrix3::from_diagonal(&Vector3::new(1e-4, 1e-4, 1e-3)),
    };
    let z = DVector::from_element(4, 10.0);
    let post = ukf_update(&prior, linear_observer(h), &z, &DVector::from_element(4, 1e18), &UkfParams::default()).unwrap();
    assert!((post.mean - prior.mean).norm() <= 1e-9);
    assert!((post.cov - prior.cov).norm() <= 1e-9);
}

fn toy_model() -> FilterModel {
    common::scenario(1, 0.4, &NoiseSpec::none(), 0.1).model
}

#[test]
fn predict_without_contact_is_identity() {
    let model = toy_model();
    let belief = JointBelief::from_parts(&PoseGaussian::isotropic(&model.initial_pose, 0.005, 0.03), &MassGaussian { mean: 0.4, var: 0.01 });
    let set = sample_sigma_points(&belief, 200, 2).unwrap();
    // Pusher far outside the contact range.
    let away = PushAction::new(nalgebra::Vector2::new(3.0, 3.0), 0.0, 0.01).unwrap();
    let tiny = ProcessNoise { q: [1e-30; 3] };
    let (pred, moved) = predict(&set, &away, &model, &tiny, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let before = set.moments();
    assert!((pred.mean - before.mean).norm() <= 1e-12);
    assert!((pred.cov - before.cov).norm() <= 1e-12);
    assert_eq!(moved.len(), set.len());
}

#[test]
fn predict_leaves_mass_untouched_and_is_seeded() {
    let sc = common::scenario(2, 0.4, &NoiseSpec::none(), 0.1);
    let belief = JointBelief::from_parts(&PoseGaussian::isotropic(&sc.pose0, 0.002, 0.01), &MassGaussian { mean: 0.4, var: 0.01 });
    let set = sample_sigma_points(&belief, 100, 9).unwrap();
    let action = &sc.steps[0].action;
    let q = ProcessNoise::default();
    let (a, sa) = predict(&set, action, &sc.model, &q, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (b, _) = predict(&set, action, &sc.model, &q, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
    let prior_mass = set.moments().mean[3];
    assert!((a.mean[3] - prior_mass).abs() <= 1e-15);
    for (p, q) in set.points.iter().zip(&sa.points) {
        assert_eq!(p[3], q[3]);
    }
    assert!((a.mean.xy() - belief.mean.xy()).norm() > 1e-4, "the push should move the belief");
}

#[test]
fn filter_is_seeded_and_keeps_mass_positive() {
    let sc = common::scenario(4, 0.3, &NoiseSpec::default(), 1.0);
    let cfg = FilterConfig { seed: 17, ..FilterConfig::default() };
    let pose = PoseGaussian::isotropic(&sc.pose0, 0.005, 2f64.to_radians());
    let prior = MassGaussian { mean: 0.5, var: 0.0625 };
    let a = run_filter(&pose, &prior, &sc.steps, &sc.model, &cfg).unwrap();
    let b = run_filter(&pose, &prior, &sc.steps, &sc.model, &cfg).unwrap();
    assert_eq!(a.len(), sc.steps.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.mean.as_slice(), y.mean.as_slice());
        assert_eq!(x.cov.as_slice(), y.cov.as_slice());
        assert!(x.mean[3] > 0.0);
    }
}

#[test]
fn prior_at_truth_stays_within_one_sigma() {
    let sc = common::scenario(6, 0.45, &NoiseSpec::none(), 5.0);
    assert_eq!(sc.steps.len(), 50);
    let pose = PoseGaussian::isotropic(&sc.pose0, 0.005, 2f64.to_radians());
    let prior = MassGaussian { mean: 0.45, var: 0.05f64.powi(2) };
    let beliefs = run_filter(&pose, &prior, &sc.steps, &sc.model, &FilterConfig::default()).unwrap();
    assert_eq!(beliefs.len(), 50);
    for (k, b) in beliefs.iter().enumerate() {
        assert!((b.mean[3] - 0.45).abs() <= 0.05, "step {k}: {}", b.mean[3]);
    }
}

#[test]
fn belief_exports_have_headers() {
    let b = JointBelief::from_parts(&PoseGaussian::isotropic(&PlanarPose::identity(), 0.01, 0.1), &MassGaussian { mean: 0.5, var: 0.1 });
    let records = vec![BeliefRecord::new(0.1, &b), BeliefRecord::new(0.2, &b)];
    let mut csv = Vec::new();
    write_beliefs_csv(&mut csv, &records).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("t,mu_x,mu_y,mu_theta,mu_m,s00"));
    assert_eq!(text.lines().count(), 3);
    let mut json = Vec::new();
    write_beliefs_json(&mut json, &records).unwrap();
    let back: Vec<BeliefRecord> = serde_json::from_slice(&json).unwrap();
    assert_eq!(back, records);
}

fn masses_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.5, 5..40)
}

fn set_from(masses: &[f64]) -> SigmaPointSet {
    let n = masses.len();
    SigmaPointSet {
        points: masses.iter().map(|&m| Vector4::new(0.0, 0.0, 0.0, m)).collect(),
        weights: vec![1.0 / n as f64; n],
        valid: vec![true; n],
    }
}

fn mc_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_stay_on_simplex(masses in masses_strategy(), noise in 1e-4f64..1.0, seed in 0u64..1000) {
        let set = set_from(&masses);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let predicted: Vec<ObservationVector> = masses
            .iter()
            .map(|_| ObservationVector(DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0))))
            .collect();
        let observed = ObservationVector(DVector::zeros(6));
        let up = update_parameter(&set, &predicted, &observed, &DVector::from_element(6, noise), &ShrinkageParams::default()).unwrap();
        prop_assert!(up.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((up.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(up.mass.mean > 0.0);
    }

    #[test]
    fn liu_west_contracts_spread(masses in masses_strategy(), a in 0.01f64..0.99) {
        let set = set_from(&masses);
        let same = vec![ObservationVector(DVector::zeros(2)); masses.len()];
        let observed = ObservationVector(DVector::zeros(2));
        let r = DVector::from_element(2, 1.0);
        let mc = mc_variance(&masses);
        let h2 = 1.0 - a * a;

        let shrunk = ShrinkageParams::new(a, KernelVariance::ShrunkLocations).unwrap();
        let up = update_parameter(&set, &same, &observed, &r, &shrunk).unwrap();
        let mean = masses.iter().sum::<f64>() / masses.len() as f64;
        let locations: Vec<f64> = masses.iter().map(|m| a * m + (1.0 - a) * mean).collect();
        let expected = (h2 * mc_variance(&locations)).max(COVARIANCE_FLOOR);
        prop_assert!((up.mass.var - expected).abs() <= 1e-12 * expected.max(1.0));
        prop_assert!(up.mass.var < mc || mc <= COVARIANCE_FLOOR);

        let particles = ShrinkageParams::new(a, KernelVariance::Particles).unwrap();
        let up = update_parameter(&set, &same, &observed, &r, &particles).unwrap();
        prop_assert!((up.mass.var - (h2 * mc).max(COVARIANCE_FLOOR)).abs() <= 1e-12);
    }

    #[test]
    fn recombine_round_trips_psd_blocks(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cov = common::random_psd4(&mut rng);
        let joint = JointBelief { mean: Vector4::new(0.1, 0.2, 0.3, 0.4), cov };
        let back = recombine(&joint.pose(), &joint.mass(), &joint.cross_cov());
        prop_assert_eq!(back, joint);
        let m: Matrix4<f64> = back.cov;
        prop_assert_eq!(nearest_psd(&m), m);
    }
}
