//! A compact, self-contained CPU deep-learning core and harness: a
//! FastGAN-style generator with configurable convolution variants
//! (standard or depthwise-separable in the UpBlocks, standard always in the
//! skip-layer excitation gates), a projected multi-scale discriminator over a
//! frozen seeded feature pyramid, a deterministic adversarial training loop,
//! and the measurement machinery (parameter/FLOP/memory accounting,
//! wall-clock benchmarks, FID/KID/precision/recall) needed to compare the
//! variants against each other.
//!
//! Everything is seeded and bitwise reproducible: same config + seed means
//! identical weights, losses, checkpoints, and metrics on every run.

pub mod adam;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod cost;
pub mod dataset;
pub mod element;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod ppm;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod tape;
pub mod tensor;

pub use element::{Dtype, Element};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
