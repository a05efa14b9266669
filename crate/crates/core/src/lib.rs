//! Core library for multi-order-graph (MoG) analysis of sequence encoders.
//!
//! A multi-order graph is a multigraph over sentence tokens in which an edge
//! records not just its endpoint nodes but the two subgraphs it connects and
//! the order (node count) of the subgraph the join creates. This crate makes
//! that algebra executable and builds the numeric counterpart on top of it:
//!
//! - [`graph`] / [`expr`] — symbolic multigraphs, n-order edges, subgraph
//!   extension, and an ASCII expression language for extension trees.
//! - [`sim`] — order-propagation simulators for layer-level (self-attention),
//!   sentence-level (recurrent) and split-attention encoder regimes.
//! - [`tensor`] / [`autodiff`] — a dense f64 tensor core with reverse-mode
//!   differentiation and a finite-difference gradient checker.
//! - [`nn`] / [`encoder`] / [`seq2seq`] — a Graph-Transformer encoder (split
//!   representations, three attention groups, three fusion strategies) next
//!   to a baseline Transformer encoder/decoder and recurrent cells.
//! - [`checks`] — executable decomposition identities (gate linearity,
//!   bilinear score expansion, four-part score split, distribution law).
//! - [`train`] — toy seq2seq tasks, Adam with warmup schedule, training
//!   loop, greedy/beam decoding, BLEU and gate-weight tracing.
//!
//! The crate is `no_std`-compatible (requires `alloc`); enable the `libm`
//! feature for float math when building without `std`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("mog-core requires either the `std` or the `libm` feature");

pub(crate) mod fmath;
pub mod rng;
pub mod tensor;
pub mod autodiff;
pub(crate) mod json;
pub mod graph;
pub mod expr;
pub mod sim;
pub mod nn;
pub mod encoder;
pub mod seq2seq;
pub mod checkpoint;
pub mod checks;
pub mod train;

pub use autodiff::{grad_check, GradCheckReport, Tape, VarId};
pub use tensor::{Precision, ShapeError, Tensor};
