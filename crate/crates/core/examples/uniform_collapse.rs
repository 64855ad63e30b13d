//! When every entity ignores its prescription and picks a cluster uniformly
//! at random, no placement beats the global mean: all centers collapse there.
//!
//! ```text
//! cargo run --release --example uniform_collapse
//! ```

use autonomy_cluster::anneal::{anneal, AnnealConfig};
use autonomy_cluster::autonomy::Autonomy;
use autonomy_cluster::scenarios::Preset;

fn main() -> autonomy_cluster::Result<()> {
    let data = Preset::Blobs4.generate(0)?;
    let cfg = AnnealConfig { k: 4, ..Default::default() };

    for (name, autonomy) in [("identity", Autonomy::Identity), ("uniform", Autonomy::uniform(4))] {
        let res = anneal(&data, &autonomy, &cfg)?;
        println!("{name} autonomy, hard distortion {:.5}", res.hard_distortion);
        for c in res.final_state.clusters.to_rows() {
            println!("  center ({:.4}, {:.4})", c[0], c[1]);
        }
    }
    let mean = data.weighted_mean();
    println!("weighted mean ({:.4}, {:.4})", mean[0], mean[1]);
    Ok(())
}
