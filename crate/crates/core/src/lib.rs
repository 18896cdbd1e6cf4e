//! Numerical laboratory for admissible pairs `(D, V)`: an unbounded
//! differentiation-like operator with one-dimensional kernel together with a
//! quasi-nilpotent Volterra-type right inverse.
//!
//! The numerics are generic over the real scalar (`f32` or `f64`); the `*64`
//! aliases below are the configurations the tests and the CLI use.

pub mod canonical;
pub mod debranges;
pub mod error;
pub mod grid;
pub mod lab;
pub mod model;
pub mod pairs;
pub mod scalar;

pub use error::{Error, Result};
pub use grid::{make_grid, orthonormalize, CMat, CVec, DenseOperator, Grid, Subspace, WeightedSpace};
pub use scalar::{Real, C};

pub type Grid64 = Grid<f64>;
pub type Grid32 = Grid<f32>;
pub type WeightedSpace64 = WeightedSpace<f64>;
pub type WeightedSpace32 = WeightedSpace<f32>;
pub type DenseOperator64 = DenseOperator<f64>;
pub type DenseOperator32 = DenseOperator<f32>;
pub type Subspace64 = Subspace<f64>;
pub type Subspace32 = Subspace<f32>;
pub type Hamiltonian64 = canonical::Hamiltonian<f64>;
pub type Hamiltonian32 = canonical::Hamiltonian<f32>;
pub type HbEvaluator64 = canonical::HbEvaluator<f64>;
pub type HbEvaluator32 = canonical::HbEvaluator<f32>;
pub type AdmissiblePair64 = pairs::AdmissiblePair<f64>;
pub type AdmissiblePair32 = pairs::AdmissiblePair<f32>;
pub type Potential64 = pairs::Potential<f64>;
pub type Potential32 = pairs::Potential<f32>;
