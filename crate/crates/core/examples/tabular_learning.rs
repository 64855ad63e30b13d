//! Model-free clustering: the learner only observes where entities end up,
//! estimating expected costs with stochastic approximation while annealing.
//!
//! ```text
//! cargo run --release --example tabular_learning
//! ```

use autonomy_cluster::anneal::{anneal, AnnealConfig};
use autonomy_cluster::autonomy::Autonomy;
use autonomy_cluster::model::objective_d;
use autonomy_cluster::scenarios::Preset;
use autonomy_cluster::tabular::{learn_tabular, RlConfig, SimulatedEnv};

fn main() -> autonomy_cluster::Result<()> {
    let data = Preset::Blobs4.generate(0)?;
    let cfg = AnnealConfig { k: 4, ..Default::default() };

    for (name, autonomy) in [("identity", Autonomy::Identity), ("honor 0.8", Autonomy::honor(0.8)?)] {
        let exact = anneal(&data, &autonomy, &cfg)?;
        let env = SimulatedEnv { data: &data, autonomy: &autonomy };
        let learned = learn_tabular(&data, &env, &cfg, &RlConfig::default(), Some(&autonomy))?;
        let d = objective_d(&data, &learned.hardened, &learned.final_state.clusters, &autonomy)?;
        let q_err = learned.q_errors.as_deref().and_then(|v| v.last().copied()).unwrap_or(f64::NAN);
        println!(
            "{name}: annealing D = {:.6}, learned D = {:.6} ({:+.2}%), final q error {:.2e}",
            exact.hard_distortion,
            d,
            100.0 * (d / exact.hard_distortion - 1.0),
            q_err
        );
    }
    Ok(())
}
