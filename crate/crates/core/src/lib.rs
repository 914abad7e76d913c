//! Energy-filter ensembles for spin chains with tensor networks.

pub mod cache;
pub mod ed;
pub mod estimators;
pub mod evolution;
pub mod filter;
pub mod linalg;
pub mod model;
pub mod sampler;
pub mod tn;
pub mod varmin;

pub use num_complex::Complex64 as C64;
