//! Naive Bayes nearest-neighbour (NBNN) and scalable Naive Bayes non-linear
//! learning (sNBNL) over bags of local patch descriptors.
//!
//! * [`data`]: descriptors, bags, datasets, standardization, exact 1-NN.
//! * [`ml3`]: the ML3 score `‖[Wᵀx]₊‖_q`, its gradient and the softmax loss.
//! * [`stoml3`]: the streaming majorization-minimization trainer.
//! * [`i2c`]: NBNN and NBNL image-to-class predictors.
//! * [`patchgrid`]: multi-scale patch planning and descriptor extraction.
//! * [`io`], [`eval`]: file formats, metrics, splits and the domain-adaptation runner.
//! * [`synth`]: seeded synthetic data for benchmarks and tests.

pub mod data;
pub mod error;
pub mod eval;
pub mod i2c;
pub mod io;
pub mod kdtree;
pub mod ml3;
pub mod patchgrid;
pub mod stoml3;
pub mod synth;

pub use error::{Error, Result};
