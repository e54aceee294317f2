//! Topology-preserving purification of image batches against adversarial
//! perturbations, built on a self-contained reverse-mode autodiff engine.
//!
//! The library is organized around three frozen-then-composed models: a
//! topology-preserving autoencoder whose latent space is aligned with the
//! input space through a 0-dimensional persistent-homology loss, a
//! variational reformer that projects the purified image back onto the
//! manifold a fixed classifier expects, and an auxiliary projection that
//! injects the topological latent code into the reformer bottleneck.
//! An attack suite (FGSM, PGD, Carlini-Wagner, BPDA, EOT) and an ablation
//! harness evaluate each composition stage white-box.

pub mod autodiff;
pub mod topology;

pub mod dataio;
pub mod metrics;
pub mod models;

pub mod attacks;
pub mod pipeline;

pub mod cli;

mod rng;

pub use rng::stream_rng;
