//! Concrete problems: quadratic oracles and a toy adversarial-training setup.

pub mod attack;
pub mod classifier;
pub mod data;
pub mod done;
pub mod quadratic;

pub use attack::{evaluate_robustness, pgd_attack, ra_tail, RobustnessReport};
pub use classifier::{LogitLoss, ModelKind, ToyClassifier};
pub use data::{make_blob_split, make_gaussian_blobs, BlobSpec, SyntheticDataset};
pub use done::{build_done_problem, AttackLoss, DoneInstance, DoneProblem};
pub use quadratic::{make_quadratic_cbo, OuterKind, QuadraticCbo, QuadraticDims};
