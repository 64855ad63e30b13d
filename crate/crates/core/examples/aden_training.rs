//! Trains the distance-estimation network while annealing, with overrides
//! that depend on where the clusters are, and compares against the solution
//! computed with full knowledge of the override model.
//!
//! ```text
//! cargo run --release --example aden_training
//! ```

use autonomy_cluster::aden::{deep_anneal, AdenConfig, TrainConfig};
use autonomy_cluster::anneal::{anneal, AnnealConfig};
use autonomy_cluster::autonomy::Autonomy;
use autonomy_cluster::model::objective_d;
use autonomy_cluster::scenarios::Preset;
use autonomy_cluster::tabular::SimulatedEnv;

fn main() -> autonomy_cluster::Result<()> {
    let data = Preset::Blobs4.generate(0)?;
    let autonomy = Autonomy::parametric(0.2, 0.5, 1.0, 100.0)?;
    let exact = anneal(&data, &autonomy, &AnnealConfig { k: 4, ..Default::default() })?;

    let env = SimulatedEnv { data: &data, autonomy: &autonomy };
    let cfg = TrainConfig::desk();
    let res = deep_anneal(&data, &env, 4, &cfg, &AdenConfig::desk(), Some(&autonomy))?;
    for row in res.log.iter().filter(|r| r.epoch + 1 == cfg.epochs_aden).step_by(8) {
        println!(
            "beta {:8.2}  loss {:.3e}  mean |d_theta - d_avg| {:.3e}",
            row.beta,
            row.loss,
            row.mean_abs_distance_error.unwrap_or(f64::NAN)
        );
    }
    let d = objective_d(&data, &res.hardened, &res.final_state.clusters, &autonomy)?;
    println!(
        "known model D = {:.6}, learned D = {:.6}, gap {:.2}%, theta_z = {:.3}",
        exact.hard_distortion,
        d,
        100.0 * (d / exact.hard_distortion - 1.0),
        res.net.theta_z()
    );
    Ok(())
}
