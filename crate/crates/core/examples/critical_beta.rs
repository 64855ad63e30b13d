//! Critical temperatures from the free-energy Hessian.
//!
//! For two points at -1 and +1 with coincident centers the first split
//! happens at beta = 1/2; scaling the data by c moves it to 1/(2 c^2).
//!
//! ```text
//! cargo run --release --example critical_beta
//! ```

use autonomy_cluster::autonomy::Autonomy;
use autonomy_cluster::model::{ClusterSet, Dataset};
use autonomy_cluster::phase::{assemble_hessian, critical_beta};

fn main() -> autonomy_cluster::Result<()> {
    for c in [1.0, 2.0, 0.5] {
        let data = Dataset::new(&[vec![-c], vec![c]], None)?;
        let y = ClusterSet::replicated(&data.weighted_mean(), 2);
        let bundle = assemble_hessian(&data, &y, &Autonomy::Identity, 0.1)?;
        println!("scale {c}: beta_cr = {:.6} (expected {:.6})", critical_beta(&bundle)?, 0.5 / (c * c));
    }

    // Overrides that keep entities in place less often delay the split.
    let data = Dataset::new(&[vec![-1.0], vec![1.0]], None)?;
    let y = ClusterSet::replicated(&[0.0], 2);
    for honor in [1.0, 0.9, 0.75, 0.6] {
        let bundle = assemble_hessian(&data, &y, &Autonomy::honor(honor)?, 0.1)?;
        println!("honor {honor:.2}: beta_cr = {:.6}", critical_beta(&bundle)?);
    }
    for beta in [0.45, 0.55] {
        let b = assemble_hessian(&data, &y, &Autonomy::Identity, beta)?;
        println!("beta {beta}: smallest Hessian eigenvalue {:+.4}", b.min_hessian_eig());
    }
    Ok(())
}
