use autonomy_cluster::bench::{run_benchmark, AutonomyParams, BenchConfig, Method, Scenario};
use autonomy_cluster::scenarios::Preset;

fn scenario(kappa: f64, gamma: f64, zeta: f64, temperature: f64) -> Scenario {
    Scenario::preset(Preset::Blobs4, AutonomyParams { kappa, gamma, zeta, temperature }, 0).unwrap()
}

fn gap(sc: &Scenario, method: Method) -> f64 {
    let run = run_benchmark(sc, &[method], &BenchConfig::default()).unwrap();
    assert!(run.failures.is_empty(), "{:?}", run.failures);
    run.gap(method).unwrap()
}

#[test]
fn no_autonomy_means_no_gap() {
    let sc = scenario(0.0, 0.5, 1.0, 100.0);
    assert!(gap(&sc, Method::Ignored).abs() < 1e-9);
}

#[test]
fn strong_sharp_autonomy_doubles_the_cost_of_ignoring_it() {
    let g = gap(&scenario(0.5, 0.5, 1.0, 0.01), Method::Ignored);
    assert!((g - 100.2).abs() <= 15.0, "ignored gap {g:.2}%");
}

#[test]
fn mild_position_free_autonomy_gaps() {
    let sc = scenario(0.1, 0.0, 1.0, 0.01);
    let run = run_benchmark(&sc, &[Method::Ignored, Method::Aden], &BenchConfig::default()).unwrap();
    assert!(run.failures.is_empty(), "{:?}", run.failures);
    let ignored = run.gap(Method::Ignored).unwrap();
    let aden = run.gap(Method::Aden).unwrap();
    assert!((ignored - 10.73).abs() <= 5.0, "ignored gap {ignored:.2}%");
    assert!(aden <= 8.0, "ADEN gap {aden:.2}%");
}

#[test]
fn ignored_gap_grows_with_override_probability() {
    let gaps: Vec<f64> = [0.1, 0.2, 0.3, 0.4]
        .iter()
        .map(|&k| gap(&scenario(k, 0.5, 1.0, 100.0), Method::Ignored))
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] > w[0]), "{gaps:?}");
}

#[test]
fn reports_are_reproducible() {
    let sc = scenario(0.2, 0.5, 1.0, 100.0);
    let methods = [Method::GroundTruth, Method::Ignored];
    let a = run_benchmark(&sc, &methods, &BenchConfig::default()).unwrap();
    let b = run_benchmark(&sc, &methods, &BenchConfig::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn aden_without_autonomy_matches_annealing() {
    let g = gap(&scenario(0.0, 0.5, 1.0, 100.0), Method::Aden);
    assert!(g.abs() <= 5.0, "ADEN gap {g:.2}%");
}
