//! Reflected and doubly reflected BSDEs driven by martingales on finite
//! filtration trees.
//!
//! The solvers work on a [`FiltrationTree`] carrying a vector martingale
//! [`MartingaleM`]. Fixed drivers are handled by backward recursion
//! (Snell envelope and Dynkin game), Lipschitz drivers by Picard iteration,
//! and [`oracle`] provides brute-force references for small trees.

mod backward;
pub mod drbsde;
pub mod error;
pub mod estimates;
pub mod generator;
pub mod lattice;
pub mod martingale;
pub mod models;
pub mod oracle;
pub mod rbsde;
pub mod scenario;

pub use backward::dynamics_defect;
pub use error::{Error, Result};
pub use generator::{DrbsdeData, GeneratorConfig, GeneratorSpec, RbsdeData};
pub use lattice::{AdaptedProcess, FiltrationTree, NodeId, PredictableProcess, TimeGrid, VectorProcess};
pub use martingale::{attach_martingale, MartingaleM};
