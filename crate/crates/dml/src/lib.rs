//! Mutual learning for classifier cohorts.
//!
//! A cohort of small MLP classifiers is trained jointly: every member
//! minimizes its own supervised cross-entropy plus a KL mimicry term that
//! pulls its class posterior toward the posteriors of its peers. The crate
//! also ships the matched baselines (independent training, ensemble-teacher
//! mimicry, fixed-teacher distillation) and the diagnostics used to compare
//! them: parameter-noise flatness probing, posterior entropy, and top-k
//! probability-mass profiles.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tensor::Tape`])
//! built for exactly the operations an MLP plus these losses need, so the
//! whole training stack is deterministic and finite-difference checkable.
//!
//! # Layout
//!
//! - [`tensor`] — dense tensors, the autodiff tape, finite-difference oracle
//! - [`model`] — MLP parameters: init, forward, perturbation, checkpoints
//! - [`losses`] — softmax posteriors, cross-entropy, KL, the mimicry objectives
//! - [`optim`] — SGD with Nesterov momentum, Adam, step LR schedule
//! - [`trainer`] — cohort training loop and the four training modes
//! - [`analysis`] — flatness probe, posterior entropy, rank profiles, ensembles
//! - [`data`] — synthetic datasets, IDX image files, config and report files
//! - [`transport`] — lockstep posterior exchange for one-worker-per-member runs
//! - [`cli`] — the `dml` command-line entry point
//!
//! # Quick start
//!
//! ```
//! use dml::data::{gen_synthetic, SyntheticKind};
//! use dml::trainer::{train, CohortConfig, MemberSpec, Mode};
//!
//! let dataset = gen_synthetic(SyntheticKind::Spiral, 150, 150, 3, 0.2, 7).unwrap();
//! let config = CohortConfig {
//!     mode: Mode::Dml,
//!     members: vec![MemberSpec::new(vec![16], 1), MemberSpec::new(vec![16], 2)],
//!     epochs: 3,
//!     ..CohortConfig::default()
//! };
//! let run = train(&config, &dataset).unwrap();
//! assert_eq!(run.report.rows.len(), 2 * 4); // two members, epochs 0..=3
//! ```
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example` lists
//! them. The `dml` binary exposes the same flows as subcommands driven by a
//! JSON config (see [`cli`]).

pub mod analysis;
pub mod cli;
mod crc32;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
mod rng;
pub mod tensor;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};

/// Runtime scalar. `f64` by default; the `f32` feature narrows it.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Runtime scalar. `f64` by default; the `f32` feature narrows it.
#[cfg(feature = "f32")]
pub type Real = f32;
