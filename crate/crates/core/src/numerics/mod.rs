//! Dense arrays, reverse-mode differentiation and the finite-difference
//! harness every differentiable operation is checked against.

pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use params::{Bound, Parameter, ParameterSet};
pub use rng::{derive_seed, seeded_rng, SeededRng};
pub use tape::{Gradients, ScatterMean, Tape, Var};
pub use tensor::{FeatureMap, Tensor};
