//! Anneals the nested 16-blob grid with entities that follow their
//! prescription 15 times out of 16, and prints the detected transitions.
//!
//! ```text
//! cargo run --release --example phase_transitions
//! ```

use autonomy_cluster::anneal::{anneal, AnnealConfig};
use autonomy_cluster::autonomy::Autonomy;
use autonomy_cluster::phase::{detect_transitions, distinct_centers, DetectConfig};
use autonomy_cluster::scenarios::Preset;

fn main() -> autonomy_cluster::Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let data = Preset::Grid16.generate(seed)?;
    let autonomy = Autonomy::honor(15.0 / 16.0)?;
    let cfg = AnnealConfig {
        k: 16,
        seed,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let res = anneal(&data, &autonomy, &cfg)?;
    let r = data.diameter();
    let det = DetectConfig::for_diameter(r);
    for e in &res.trace {
        println!(
            "beta={:10.4} F={:+.6} D={:.6} dY={:.3e} it={:5} path={} distinct={}",
            e.beta,
            e.free_energy,
            e.distortion,
            e.delta_y_norm,
            e.iterations,
            e.path.as_str(),
            distinct_centers(&e.clusters, det.merge_tol)
        );
    }
    let events = detect_transitions(&res.trace, &det);
    println!("{} transitions in {:.1?}", events.len(), t0.elapsed());
    for ev in &events {
        println!(
            "  beta={:.4} distinct {} -> {} (steps {}..={}, peak dY {:.3e})",
            ev.beta, ev.distinct_before, ev.distinct_after, ev.index, ev.end_index, ev.delta_y_norm
        );
    }
    Ok(())
}
