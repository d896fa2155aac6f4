//! Fixtures shared by the benchmarks in `benches/`.

use dnf_core::diffnet::{train_surrogate, Dataset, SurrogateModel, TrainConfig};
use dnf_core::mc::lhs_sample;
use dnf_core::problems::{four_branch_g, BoxDomain};

/// The four-branch design box.
pub fn four_branch_box() -> BoxDomain {
    BoxDomain::cube(2, -10.0, 10.0)
}

/// Surrogate of the four-branch function trained briefly on `n` LHS points.
pub fn four_branch_surrogate(n: usize, epochs: usize) -> SurrogateModel {
    let pts = lhs_sample(n, &four_branch_box(), 11);
    let data = Dataset::from_pairs(2, pts.iter().map(|p| (p.clone(), four_branch_g(p)))).expect("distinct LHS points");
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    train_surrogate(&data, &cfg).expect("training converges")
}
