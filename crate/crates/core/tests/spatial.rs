use lvlmc::kriging::ordinary_kriging_weights;
use lvlmc::neighborhood::{Point, SpatialIndex};
use lvlmc::variogram::{experimental_variogram, fit_exponential, StructureKind, Structure, VariogramModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..extent / 10.0)])
        .collect()
}

fn brute_knn(points: &[Point], q: &Point, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..points.len()).collect();
    ids.sort_by(|&a, &b| dist(&points[a], q).total_cmp(&dist(&points[b], q)).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points = random_points(&mut rng, 1000, 100.0);
    let index = SpatialIndex::build(&points).unwrap();
    for _ in 0..100 {
        let q = [rng.random_range(-10.0..110.0), rng.random_range(-10.0..110.0), rng.random_range(0.0..10.0)];
        let ours: Vec<usize> = index.knn(&q, 25).items.iter().map(|n| n.id).collect();
        assert_eq!(ours, brute_knn(&points, &q, 25));
    }
}

/// Gauss-Jordan elimination with partial pivoting.
fn gauss_jordan(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let d = a[col][col];
        for j in 0..n {
            a[col][j] /= d;
        }
        b[col] /= d;
        for i in 0..n {
            if i != col {
                let f = a[i][col];
                for j in 0..n {
                    a[i][j] -= f * a[col][j];
                }
                b[i] -= f * b[col];
            }
        }
    }
    b
}

#[test]
fn kriging_matches_independent_solver() {
    let model = VariogramModel::new(
        0.1,
        vec![
            Structure {
                kind: StructureKind::Exponential,
                range: 40.0,
                sill: 0.6,
            },
            Structure {
                kind: StructureKind::Spherical,
                range: 90.0,
                sill: 0.3,
            },
        ],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let pts = random_points(&mut rng, 8, 60.0);
        let target = [30.0, 30.0, 3.0];
        let k = pts.len();
        let mut a = vec![vec![0.0; k + 1]; k + 1];
        let mut b = vec![0.0; k + 1];
        for i in 0..k {
            for j in 0..k {
                a[i][j] = model.cov(dist(&pts[i], &pts[j]));
            }
            a[i][k] = 1.0;
            a[k][i] = 1.0;
            b[i] = model.cov(dist(&pts[i], &target));
        }
        b[k] = 1.0;
        let x = gauss_jordan(a, b.clone());
        let ours = ordinary_kriging_weights(&model, &pts, &target).unwrap();
        for i in 0..k {
            assert!((ours.weights[i] - x[i]).abs() < 1e-10);
        }
        assert!((ours.lagrange - x[k]).abs() < 1e-10);
        let variance = model.cov(0.0) - (0..k).map(|i| x[i] * b[i]).sum::<f64>() - x[k];
        assert!((ours.variance - variance).abs() < 1e-10);
    }
}

#[test]
fn lag_bins_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts = random_points(&mut rng, 300, 100.0);
    let a: Vec<f64> = (0..300).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..300).map(|_| rng.sample(StandardNormal)).collect();
    let (w, n) = (7.0, 12);
    let mut sum = vec![0.0; n];
    let mut dsum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            let h = dist(&pts[i], &pts[j]);
            let k = (h / w).floor() as usize;
            if k < n {
                sum[k] += (a[i] - a[j]) * (b[i] - b[j]);
                dsum[k] += h;
                count[k] += 1;
            }
        }
    }
    let cross = lvlmc::variogram::LagPairs::new(&pts, w, n).unwrap().estimate(&a, &b, (0, 1)).unwrap();
    let mut lags = cross.lags.iter();
    for k in 0..n {
        if count[k] == 0 {
            assert!(cross.empty_lags.contains(&k));
            continue;
        }
        let lag = lags.next().unwrap();
        assert_eq!(lag.pairs, count[k]);
        assert!((lag.gamma - sum[k] / (2.0 * count[k] as f64)).abs() < 1e-12);
        assert!((lag.center - dsum[k] / count[k] as f64).abs() < 1e-9);
    }
}

#[test]
fn pure_nugget_variogram_is_flat() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = random_points(&mut rng, 2000, 200.0);
    let v: Vec<f64> = (0..2000).map(|_| rng.sample(StandardNormal)).collect();
    let ev = experimental_variogram(&pts, &v, &v, 10.0, 10).unwrap();
    for lag in ev.lags.iter().skip(1) {
        assert!((lag.gamma - 1.0).abs() < 0.1, "{lag:?}");
    }
}

#[test]
fn exponential_fit_recovers_parameters() {
    let truth = VariogramModel::exponential(0.0, 50.0, 1.0).unwrap();
    // A transect with exact model values: every lag bin holds pairs at one
    // separation.
    let pts: Vec<Point> = (0..40).map(|i| [i as f64 * 5.0, 0.0, 0.0]).collect();
    let mut ev = experimental_variogram(&pts, &vec![0.0; 40], &vec![0.0; 40], 5.0, 21).unwrap();
    for lag in ev.lags.iter_mut() {
        lag.gamma = truth.gamma(lag.center);
    }
    let fit = fit_exponential(&ev).unwrap();
    let s = &fit.structures[0];
    assert!((s.range - 50.0).abs() < 1.0, "{fit:?}");
    assert!((fit.total_sill() - 1.0).abs() < 0.02, "{fit:?}");
    assert!(fit.nugget < 0.02);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn radius_search_matches_brute_force(seed in any::<u64>(), radius in 1.0..40.0f64, max in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, 200, 100.0);
        let index = SpatialIndex::build(&pts).unwrap();
        let q = pts[0];
        let ours: Vec<usize> = index.within(&q, radius, max).iter().map(|n| n.id).collect();
        let mut expected = brute_knn(&pts, &q, pts.len());
        expected.retain(|&i| dist(&pts[i], &q) <= radius);
        expected.truncate(max);
        prop_assert_eq!(ours, expected);
    }

    #[test]
    fn kriging_weights_sum_to_one_and_interpolate(seed in any::<u64>(), k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = VariogramModel::exponential(0.0, 30.0, 1.0).unwrap();
        let pts = random_points(&mut rng, k, 50.0);
        let target = [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), 1.0];
        let w = ordinary_kriging_weights(&model, &pts, &target).unwrap();
        prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(w.variance >= 0.0);
        let at = ordinary_kriging_weights(&model, &pts, &pts[k - 1]).unwrap();
        prop_assert!((at.weights[k - 1] - 1.0).abs() < 1e-12);
        prop_assert!(at.variance.abs() < 1e-12);
    }

    #[test]
    fn kriging_is_permutation_equivariant(seed in any::<u64>(), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = VariogramModel::exponential(0.05, 25.0, 0.95).unwrap();
        let pts = random_points(&mut rng, 6, 40.0);
        let target = [20.0, 20.0, 2.0];
        let w = ordinary_kriging_weights(&model, &pts, &target).unwrap();
        let permuted: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
        let wp = ordinary_kriging_weights(&model, &permuted, &target).unwrap();
        for (slot, &i) in perm.iter().enumerate() {
            prop_assert!((wp.weights[slot] - w.weights[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn gamma_and_covariance_are_complementary(h in 0.001..500.0f64, nugget in 0.0..0.5f64, range in 1.0..200.0f64) {
        let model = VariogramModel::exponential(nugget, range, 1.0 - nugget).unwrap();
        prop_assert!((model.gamma(h) + model.cov(h) - 1.0).abs() < 1e-12);
        prop_assert!(model.gamma(h) >= 0.0 && model.gamma(h) <= 1.0 + 1e-12);
    }
}
