//! Robust non-unitary joint diagonalization of complex matrix sets.
//!
//! Given target matrices `R_1 … R_K`, finds a mixing matrix `A` (`M × N`, `M ≥ N`)
//! and diagonals `D_k` with `R_k ≈ A D_k Aᴴ`. The soft solver weights every
//! matrix by a softmax of its residual, so matrices that do not share the
//! common structure (outliers) lose their influence on the fit. A
//! fixed-weight least-squares baseline runs the same alternating scheme.
//!
//! ```
//! use sddjd::{matrixset::{synthesize, SynthSpec}, metrics::mixing_grl, solver};
//!
//! let targets = synthesize(&SynthSpec::new(4, 4, 8, 0.0, 0.0, 1)).unwrap();
//! let result = solver::run(&targets, &solver::SolverConfig::default()).unwrap();
//! assert!(mixing_grl(&result.a_hat, &targets.truth().unwrap().a).unwrap() < 1e-6);
//! ```

pub mod baseline;
pub mod codec;
pub mod error;
pub mod experiment;
pub mod matrixset;
pub mod metrics;
pub mod solver;

pub use baseline::{run_ls, BaselineConfig};
pub use error::{Error, Result};
pub use matrixset::{CMatrix, DiagonalSet, Origin, SynthSpec, TargetSet};
pub use solver::{run, RunResult, SolverConfig, Weighting};
