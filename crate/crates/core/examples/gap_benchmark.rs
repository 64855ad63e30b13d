//! How much is lost by clustering as if entities always complied, across a
//! range of override probabilities, and how much the network recovers.
//!
//! ```text
//! cargo run --release --example gap_benchmark           # baseline only
//! cargo run --release --example gap_benchmark -- aden   # also train the network
//! ```

use autonomy_cluster::bench::{run_benchmark, write_table_csv, AutonomyParams, BenchConfig, Method, Scenario};
use autonomy_cluster::scenarios::Preset;

fn main() -> autonomy_cluster::Result<()> {
    let mut methods = vec![Method::GroundTruth, Method::Ignored];
    if std::env::args().any(|a| a == "aden") {
        methods.push(Method::Aden);
    }
    let mut runs = Vec::new();
    for kappa in [0.1, 0.2, 0.3, 0.4] {
        let params = AutonomyParams { kappa, gamma: 0.5, zeta: 1.0, temperature: 100.0 };
        let run = run_benchmark(&Scenario::preset(Preset::Blobs4, params, 0)?, &methods, &BenchConfig::default())?;
        for f in &run.failures {
            eprintln!("kappa {kappa}: {} failed: {}", f.method.as_str(), f.message);
        }
        runs.push(run);
    }
    write_table_csv(std::io::stdout().lock(), &runs)
}
