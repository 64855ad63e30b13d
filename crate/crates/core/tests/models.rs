use autonomy_cluster::anneal::{anneal, centroid_update, AnnealConfig};
use autonomy_cluster::autonomy::{Autonomy, TabularAutonomy};
use autonomy_cluster::model::{avg_distance_matrix, squared_distance, AssignmentPolicy, ClusterSet, Dataset, Mat, PolicyMode};
use autonomy_cluster::phase::{assemble_hessian, critical_beta, detect_transitions, sensitivity_bound, DetectConfig};
use autonomy_cluster::scenarios::{four_blobs, make_blobs, read_geocsv, Preset};
use autonomy_cluster::tabular::{learn_tabular, sgd_center_step, RlConfig, Sample, SimulatedEnv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nearest(p: &[f64], targets: &[Vec<f64>]) -> f64 {
    targets.iter().map(|t| squared_distance(p, t).sqrt()).fold(f64::INFINITY, f64::min)
}

#[test]
fn identity_annealing_finds_blob_means() {
    let blobs = make_blobs(&four_blobs(50), 0).unwrap();
    let means: Vec<Vec<f64>> = (0..4)
        .map(|b| {
            let idx: Vec<usize> = (0..blobs.labels.len()).filter(|i| blobs.labels[*i] == b).collect();
            (0..2)
                .map(|c| idx.iter().map(|i| blobs.data.point(*i)[c]).sum::<f64>() / idx.len() as f64)
                .collect()
        })
        .collect();
    let res = anneal(&blobs.data, &Autonomy::Identity, &AnnealConfig::default()).unwrap();
    let tol = 0.05 * blobs.data.diameter();
    for j in 0..4 {
        let c = res.final_state.clusters.center(j);
        assert!(nearest(c, &means) < tol, "center {c:?}");
    }
    let hit: Vec<usize> = res.hardened.assignments();
    let mut seen = hit.clone();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 4);
}

#[test]
fn first_split_follows_critical_beta() {
    let data = Preset::Blobs4.generate(0).unwrap();
    let autonomy = Autonomy::honor(0.9).unwrap();
    let cfg = AnnealConfig::default();
    let mean = ClusterSet::replicated(&data.weighted_mean(), 4);
    let bc = critical_beta(&assemble_hessian(&data, &mean, &autonomy, cfg.beta_min).unwrap()).unwrap();
    let res = anneal(&data, &autonomy, &cfg).unwrap();
    let events = detect_transitions(&res.trace, &DetectConfig::for_diameter(data.diameter()));
    let first = events.first().expect("at least one transition").beta;
    let t2 = cfg.tau * cfg.tau;
    assert!(first >= bc / t2 && first <= bc * t2, "first event {first}, critical {bc}");
}

#[test]
fn hessian_changes_sign_across_critical_beta() {
    let data = Preset::Blobs4.generate(0).unwrap();
    let autonomy = Autonomy::honor(0.9).unwrap();
    let mean = ClusterSet::replicated(&data.weighted_mean(), 4);
    let bc = critical_beta(&assemble_hessian(&data, &mean, &autonomy, 1.0).unwrap()).unwrap();
    let below = assemble_hessian(&data, &mean, &autonomy, 0.9 * bc).unwrap();
    let above = assemble_hessian(&data, &mean, &autonomy, 1.1 * bc).unwrap();
    assert!(below.min_hessian_eig() > 0.0);
    assert!(above.min_hessian_eig() < 0.0);
}

#[test]
fn sensitivity_bound_formula() {
    let data = Dataset::new(&[vec![0.0, 0.0]], None).unwrap();
    let y = ClusterSet::new(&[vec![0.0, 0.0]]).unwrap();
    let at = |beta: f64| {
        let b = assemble_hessian(&data, &y, &Autonomy::Identity, beta).unwrap();
        sensitivity_bound(&b, 100, 4, 10.0).unwrap().unwrap()
    };
    let expected = 2000.0 / std::f64::consts::E;
    assert!((at(1.0) - expected).abs() < 1e-9);
    assert!((at(2.0) - expected / 2.0).abs() < 1e-9);
}

#[test]
fn nested_grid_splits_are_isolated() {
    let data = Preset::Grid16.generate(0).unwrap();
    assert_eq!(data.len(), 3200);
    let cfg = AnnealConfig { k: 16, ..Default::default() };
    let res = anneal(&data, &Autonomy::honor(15.0 / 16.0).unwrap(), &cfg).unwrap();
    let events = detect_transitions(&res.trace, &DetectConfig::for_diameter(data.diameter()));
    assert_eq!(events.len(), 3);
    for (a, b) in events.iter().zip(events.iter().skip(1)) {
        for n in a.end_index + 1..b.index {
            let peak = if n - a.end_index <= b.index - n { a.delta_y_norm } else { b.delta_y_norm };
            let e = &res.trace[n];
            assert!(e.delta_y_norm < 0.05 * peak, "step at beta {} moved {}", e.beta, e.delta_y_norm);
        }
    }
}

#[test]
fn blob_means_are_near_nominal_centers() {
    let spec = autonomy_cluster::scenarios::BlobSpec { spread: 0.05, ..four_blobs(50) };
    let blobs = make_blobs(&spec, 1).unwrap();
    assert_eq!(blobs.data.len(), 200);
    let tol = 3.0 * 0.05 / (50f64).sqrt();
    for (b, c) in spec.centers.iter().enumerate() {
        for a in 0..2 {
            let m = (0..200).filter(|i| blobs.labels[*i] == b).map(|i| blobs.data.point(i)[a]).sum::<f64>() / 50.0;
            assert!((m - c[a]).abs() < tol);
        }
    }
    let flat = make_blobs(&autonomy_cluster::scenarios::BlobSpec { spread: 0.0, ..four_blobs(5) }, 1).unwrap();
    for i in 0..20 {
        assert_eq!(flat.data.point(i), &four_blobs(5).centers[flat.labels[i]][..]);
    }
}

#[test]
fn geocsv_rescales_and_inverts() {
    let text = "lat,lon\n40.1,-73.9\n40.7,-74.3\n41.0,-73.5\n";
    let geo = read_geocsv(text.as_bytes()).unwrap();
    assert_eq!(geo.data.len(), 3);
    let rows = [[40.1, -73.9], [40.7, -74.3], [41.0, -73.5]];
    for (i, r) in rows.iter().enumerate() {
        let p = geo.data.point(i);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let back = geo.transform.denormalize(p);
        assert!((back[0] - r[0]).abs() < 1e-12 && (back[1] - r[1]).abs() < 1e-12);
    }
    assert!(read_geocsv("lat,lon\n".as_bytes()).is_err());
}

#[test]
fn parametric_kernel_matches_direct_formula() {
    let data = Dataset::new(&[vec![0.3, 0.1]], None).unwrap();
    let y = ClusterSet::new(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let (kappa, gamma, zeta, t) = (0.5, 0.0, 1.0, 1.0);
    let a = Autonomy::parametric(kappa, gamma, zeta, t).unwrap();
    for j in 0..3 {
        let mut row = vec![0.0; 3];
        a.kernel_row(0, j, &data, &y, &mut row).unwrap();
        let logits: Vec<f64> = (0..3)
            .map(|k| {
                -(zeta * squared_distance(y.center(j), y.center(k)) + gamma * squared_distance(data.point(0), y.center(k))) / t
            })
            .collect();
        let z: f64 = (0..3).filter(|k| *k != j).map(|k| logits[k].exp()).sum();
        for k in 0..3 {
            let expected = if k == j { 1.0 - kappa } else { kappa * logits[k].exp() / z };
            assert!((row[k] - expected).abs() < 1e-14, "j={j} k={k}");
        }
    }
}

#[test]
fn hot_parametric_kernel_spreads_uniformly() {
    let data = Dataset::new(&[vec![0.3, 0.1], vec![0.9, 0.4]], None).unwrap();
    let y = ClusterSet::new(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![5.0, 5.0]]).unwrap();
    let a = Autonomy::parametric(0.3, 0.5, 1.0, 1e12).unwrap();
    let t = a.full_tensor(&data, &y).unwrap();
    for i in 0..2 {
        for j in 0..4 {
            for k in 0..4 {
                let expected = if k == j { 0.7 } else { 0.1 };
                assert!((t.get(k, j, i) - expected).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn quarter_override_tensor_columns() {
    let data = Preset::Blobs4.generate(0).unwrap();
    let y = ClusterSet::new(&four_blobs(1).centers).unwrap();
    let t = Autonomy::parametric(0.25, 0.5, 1.0, 0.1).unwrap().full_tensor(&data, &y).unwrap();
    for i in 0..data.len() {
        for j in 0..4 {
            assert!((t.get(j, j, i) - 0.75).abs() < 1e-12);
            let off: f64 = (0..4).filter(|k| *k != j).map(|k| t.get(k, j, i)).sum();
            assert!((off - 0.25).abs() < 1e-12);
        }
    }
}

#[test]
fn sgd_reaches_hard_cluster_centroids() {
    let blobs = make_blobs(&four_blobs(50), 2).unwrap();
    let data = &blobs.data;
    let mut probs = Mat::zeros(data.len(), 4);
    for (i, l) in blobs.labels.iter().enumerate() {
        probs.set(i, *l, 1.0);
    }
    let policy = AssignmentPolicy::from_mat(probs, PolicyMode::Hard);
    let start = ClusterSet::replicated(&data.weighted_mean(), 4);
    let target = centroid_update(data, &policy, &start, &Autonomy::Identity).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut y = start;
    for step in 0..4000 {
        let batch: Vec<Sample> = (0..32)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                Sample { i, j: blobs.labels[i], k: blobs.labels[i] }
            })
            .collect();
        let alpha = 2.0 / (1.0 + step as f64 / 50.0);
        y = sgd_center_step(&y, &batch, data, alpha.min(1.0)).unwrap();
    }
    let tol = 0.02 * data.diameter();
    for j in 0..4 {
        let err = squared_distance(y.center(j), target.center(j)).sqrt();
        assert!(err < tol, "cluster {j} off by {err}");
    }
}

#[test]
fn tabular_learner_estimates_average_costs() {
    let data = make_blobs(&four_blobs(10), 3).unwrap().data;
    let (n, k) = (40, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut probs = Vec::with_capacity(n * k * k);
    for _ in 0..n {
        for j in 0..k {
            let stay = rng.random_range(0.6..0.95);
            let rest: Vec<f64> = (0..k - 1).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = rest.iter().sum();
            let mut it = rest.iter();
            for kk in 0..k {
                probs.push(if kk == j { stay } else { (1.0 - stay) * it.next().unwrap() / s });
            }
        }
    }
    let autonomy = Autonomy::Tabular(TabularAutonomy::new(n, k, probs).unwrap());
    let env = SimulatedEnv { data: &data, autonomy: &autonomy };
    let res = learn_tabular(&data, &env, &AnnealConfig::default(), &RlConfig::default(), None).unwrap();
    let exact = avg_distance_matrix(&data, &res.final_state.clusters, &autonomy).unwrap();
    let worst = res
        .q
        .q
        .as_slice()
        .iter()
        .zip(exact.as_slice())
        .map(|(a, b)| (a - b).abs() / b)
        .fold(0.0, f64::max);
    assert!(worst < 0.10, "max relative error {worst:.4}");
}

#[test]
fn tabular_learner_is_deterministic() {
    let data = Preset::Blobs4.generate(0).unwrap();
    let autonomy = Autonomy::honor(0.8).unwrap();
    let env = SimulatedEnv { data: &data, autonomy: &autonomy };
    let a = learn_tabular(&data, &env, &AnnealConfig::default(), &RlConfig::default(), None).unwrap();
    let b = learn_tabular(&data, &env, &AnnealConfig::default(), &RlConfig::default(), None).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.q.q, b.q.q);
}
