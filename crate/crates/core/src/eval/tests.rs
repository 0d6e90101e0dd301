use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;
use crate::neighbors::{brute_force_nearest, Point3};

fn box_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| [rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.5)])
            .collect(),
    )
    .unwrap()
}

/// Rodrigues rotation about a unit axis.
fn axis_angle(axis: Point3, angle: f64) -> Rotation {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let k = 1.0 - c;
    [
        [c + x * x * k, x * y * k - z * s, x * z * k + y * s],
        [y * x * k + z * s, c + y * y * k, y * z * k - x * s],
        [z * x * k - y * s, z * y * k + x * s, c + z * z * k],
    ]
}

fn assert_proper_rotation(r: &Rotation) {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-9, "R R^T [{i}][{j}] = {dot}");
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    assert!((det - 1.0).abs() < 1e-9, "det {det}");
}

#[test]
fn nearest_neighbors_examples() {
    let c = box_cloud(50, 1);
    let (idx, dist) = nearest_neighbors(&c, &c).unwrap();
    assert_eq!(idx, (0..50).collect::<Vec<_>>());
    assert!(dist.iter().all(|&d| d == 0.0));

    let single = PointCloud::new(vec![[5.0, 5.0, 5.0]]).unwrap();
    let (idx, dist) = nearest_neighbors(&c, &single).unwrap();
    assert!(idx.iter().all(|&i| i == 0));
    assert!((dist[0] - crate::neighbors::squared_distance(&c.points()[0], &[5.0, 5.0, 5.0]).sqrt()).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn nearest_neighbors_equal_brute_force(seed in any::<u64>(), n in 1usize..=512, m in 1usize..40) {
        let target = box_cloud(n, seed);
        let query = box_cloud(m, seed ^ 0xABCD);
        let (idx, dist) = nearest_neighbors(&query, &target).unwrap();
        for (k, q) in query.points().iter().enumerate() {
            let (bi, bd) = brute_force_nearest(target.points(), q);
            prop_assert_eq!(idx[k], bi);
            prop_assert_eq!(dist[k], bd.sqrt());
        }
    }

    #[test]
    fn icp_rotation_is_always_proper(seed in any::<u64>(), angle in -0.5f64..0.5, noise in 0.0f64..0.05) {
        let src = box_cloud(120, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = axis_angle([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0], angle);
        let tgt = PointCloud::new(
            src.transformed(&r, &[0.1, 0.0, -0.05])
                .points()
                .iter()
                .map(|p| [p[0] + noise * rng.gen_range(-1.0..1.0), p[1], p[2]])
                .collect(),
        ).unwrap();
        match icp_register(&src, &tgt, 0.5, 50) {
            Ok(res) => {
                assert_proper_rotation(&res.rotation);
                prop_assert!((0.0..=1.0).contains(&res.fitness));
            }
            Err(Error::Degenerate { partial, .. }) => assert_proper_rotation(&partial.rotation),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn icp_identity_on_equal_clouds() {
    let c = box_cloud(200, 2);
    let r = icp_register(&c, &c, 0.05, 50).unwrap();
    assert_eq!(r.fitness, 1.0);
    assert!(r.inlier_rmse < 1e-12);
    for i in 0..3 {
        for j in 0..3 {
            assert!((r.rotation[i][j] - IDENTITY[i][j]).abs() < 1e-12);
        }
        assert!(r.translation[i].abs() < 1e-12);
    }
}

#[test]
fn icp_recovers_known_transform() {
    let src = box_cloud(500, 3);
    let rot = axis_angle([0.0, 0.0, 1.0], 10f64.to_radians());
    let t = [0.1, 0.05, 0.0];
    let tgt = src.transformed(&rot, &t);
    let r = icp_register(&src, &tgt, 0.5, 50).unwrap();
    assert_eq!(r.fitness, 1.0);
    assert!(r.inlier_rmse < 1e-6, "{}", r.inlier_rmse);
    for i in 0..3 {
        for j in 0..3 {
            assert!((r.rotation[i][j] - rot[i][j]).abs() < 1e-6);
        }
        assert!((r.translation[i] - t[i]).abs() < 1e-6);
    }
    assert_proper_rotation(&r.rotation);
    assert!(r.mse_history.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.mse_history);
}

#[test]
fn icp_disjoint_clouds_are_degenerate() {
    let src = box_cloud(100, 4);
    let far = src.translated([10.0, 0.0, 0.0]);
    match icp_register(&src, &far, 0.05, 50) {
        Err(Error::Degenerate { partial, .. }) => {
            assert_eq!(partial.fitness, 0.0);
            assert_eq!(partial.rotation, IDENTITY);
        }
        other => panic!("expected degenerate, got {other:?}"),
    }
}

#[test]
fn icp_rejects_bad_threshold() {
    let c = box_cloud(10, 5);
    assert!(matches!(icp_register(&c, &c, 0.0, 50), Err(Error::Config(_))));
}

#[test]
fn kabsch_corrects_reflection() {
    // Planar points mirrored through z = 0 cannot be matched by a proper
    // rotation with det -1.
    let src: Vec<Point3> = vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.5]];
    let dst: Vec<Point3> = src.iter().map(|p| [p[0], p[1], -p[2]]).collect();
    let (r, _) = kabsch(&src, &dst);
    assert_proper_rotation(&r);
}

fn samples_from(clouds: Vec<PointCloud>) -> Vec<Sample> {
    let config = ModelConfig::tiny();
    let (ai, si) = ModelInput::pair_indices(config.antennas, config.subcarriers);
    clouds
        .into_iter()
        .enumerate()
        .map(|(i, target)| Sample {
            id: format!("s{i}"),
            input: ModelInput {
                features: Tensor::zeros(&[config.pairs(), 2, config.time_slices]),
                antenna_index: ai.clone(),
                subcarrier_index: si.clone(),
            },
            target,
        })
        .collect()
}

#[test]
fn oracle_evaluation_is_perfect() {
    let data = samples_from((0..5).map(|i| box_cloud(80, i)).collect());
    let report = evaluate(&GroundTruthOracle, &data, &IcpConfig::new(0.05)).unwrap();
    assert_eq!(report.mean_fitness, 1.0);
    assert_eq!(report.mean_inlier_rmse, 0.0);
    assert_eq!(report.n_samples, 5);
    assert_eq!(report.n_degenerate, 0);
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("id,fitness"));
}

#[test]
fn empty_dataset_is_an_error() {
    assert!(evaluate(&GroundTruthOracle, &[], &IcpConfig::new(0.05)).is_err());
}

struct Shifted(f64);

impl Predictor for Shifted {
    fn predict(&self, s: &Sample) -> Result<PointCloud> {
        Ok(s.target.translated([self.0, 0.0, 0.0]))
    }
}

#[test]
fn aggregates_are_means_and_order_free() {
    let mut data = samples_from((0..9).map(|i| box_cloud(60 + 7 * i as usize, i)).collect());
    let cfg = IcpConfig {
        max_iter: 2,
        ..IcpConfig::new(0.08)
    };
    let a = evaluate(&Shifted(0.07), &data, &cfg).unwrap();
    let mean = a.samples.iter().map(|m| m.fitness).sum::<f64>() / 9.0;
    assert!((a.mean_fitness - mean).abs() < 1e-15);
    data.reverse();
    let b = evaluate(&Shifted(0.07), &data, &cfg).unwrap();
    assert_eq!(a.mean_fitness.to_bits(), b.mean_fitness.to_bits());
    assert_eq!(a.mean_inlier_rmse.to_bits(), b.mean_inlier_rmse.to_bits());
}

#[test]
fn degenerate_samples_are_recorded() {
    let data = samples_from(vec![box_cloud(40, 1), box_cloud(40, 2)]);
    let report = evaluate(&Shifted(50.0), &data, &IcpConfig::new(0.05)).unwrap();
    assert_eq!(report.n_degenerate, 2);
    assert_eq!(report.mean_fitness, 0.0);
    assert!(report.samples.iter().all(|m| m.degenerate));
}

#[test]
fn report_json_round_trip() {
    let data = samples_from(vec![box_cloud(40, 1)]);
    let report = evaluate(&GroundTruthOracle, &data, &IcpConfig::new(0.05)).unwrap();
    let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn latency_stats_are_ordered() {
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    for precision in [Precision::F64, Precision::F32] {
        let s = bench_latency(&model, 2, 10, precision).unwrap();
        assert_eq!(s.precision, precision);
        assert_eq!(s.runs_ms.len(), 10);
        assert!(s.min_ms <= s.mean_ms && s.mean_ms <= s.max_ms);
        assert!(s.p50_ms <= s.p95_ms);
    }
    assert!(bench_latency(&model, 0, 0, Precision::F64).is_err());
}

#[test]
fn f32_model_evaluates_like_f64() {
    let model = Model::new(ModelConfig::tiny(), 2).unwrap();
    let c = model.config().clone();
    let (ai, si) = ModelInput::pair_indices(c.antennas, c.subcarriers);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<Sample> = (0..4)
        .map(|i| Sample {
            id: format!("s{i}"),
            input: ModelInput {
                features: Tensor::from_fn(&[c.pairs(), 2, c.time_slices], |_| rng.gen_range(-1.0..1.0)),
                antenna_index: ai.clone(),
                subcarrier_index: si.clone(),
            },
            target: box_cloud(32, i as u64),
        })
        .collect();
    let cfg = IcpConfig::new(0.5);
    let a = evaluate(&model, &data, &cfg).unwrap();
    let b = evaluate(&Model32::new(&model), &data, &cfg).unwrap();
    assert_eq!(a.n_samples, b.n_samples);
    assert!((a.mean_inlier_rmse - b.mean_inlier_rmse).abs() < 1e-4);
}

#[test]
fn mse_history_never_rises_after_an_exact_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..30 {
        let source = box_cloud(300, 100 + trial);
        let axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let r = axis_angle(axis, rng.gen_range(0.0..15f64.to_radians()));
        let t = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
        let target = source.transformed(&r, &t);
        let res = icp_register(&target, &source, 0.5, 100).unwrap();
        assert_eq!(res.fitness, 1.0, "trial {trial}");
        assert!(res.inlier_rmse < 1e-6, "trial {trial}: {}", res.inlier_rmse);
        assert!(
            res.mse_history.windows(2).all(|w| w[1] <= w[0]),
            "trial {trial}: {:?}",
            res.mse_history
        );
        assert_eq!(res.mse_history.len(), res.iterations + 1);
    }
}

#[test]
fn step_that_gains_inliers_is_kept() {
    // Only part of the shifted cloud starts within the threshold. The first
    // fit pulls in more inliers at a higher inlier MSE; that step stays.
    let target = box_cloud(200, 3);
    let source = target.translated([0.12, 0.0, 0.0]);
    let (_, d) = nearest_neighbors(&source, &target).unwrap();
    let initial = d.iter().filter(|&&x| x <= 0.1).count() as f64 / 200.0;
    let res = icp_register(&source, &target, 0.1, 50).unwrap();
    assert_eq!(res.iterations, 1);
    assert!(res.mse_history[1] > res.mse_history[0], "{:?}", res.mse_history);
    assert!(res.fitness > initial, "{} vs {initial}", res.fitness);
    assert_ne!(res.translation, [0.0; 3]);
}
