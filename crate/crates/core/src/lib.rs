//! Asymmetric neural networks: every node of a layer applies its own scaled
//! copy of a base activation, `x_i = s_i * f0(u_i)`, with `1 >= s_1 >= ... >= s_n > 0`.
//! Nodes with small indices learn fastest, so trained layers come out sorted by
//! feature importance and can be pruned from the last node backwards.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`eigen`], [`rng`]: dense f64 arithmetic, Jacobi eigensolver,
//!   seeded xorshift generator.
//! * [`network`]: layers, sensitivity profiles, forward/backward passes,
//!   structural node removal and the binary model format.
//! * [`training`]: losses, SGD/Adam, the epoch loop and evaluation.
//! * [`pruning`]: importance-ordered pruning, baseline importance measures and
//!   removal curves.
//! * [`analysis`]: shallow-model eigen-alignment, sparse coding, sorting
//!   correlations, reconstruction curves and repeatability.
//! * [`datasets`]: Gaussian sampler, MNIST IDX and CIFAR-10 readers, splits.

pub mod analysis;
pub mod datasets;
pub mod eigen;
pub mod error;
pub mod network;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use network::{Activation, Layer, Network, NetworkSpec, SensitivityProfile};
pub use rng::Rng;
pub use tensor::Tensor;
