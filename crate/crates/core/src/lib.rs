//! Desk-scale neural decoding toolkit.
//!
//! The crate covers the full loop of a sentence-decoding study on synthetic
//! data: corpus and voxel-matrix handling ([`corpus`]), cross-validated ridge
//! decoders ([`decoder`]), pairwise-matching evaluation and significance
//! testing ([`eval`]), representational similarity analysis with hierarchical
//! clustering ([`repsim`]), a small autoregressive transformer that can be
//! prefix-tuned or fine-tuned ([`prefixlm`]), and an end-to-end pipeline with
//! rendered reports ([`pipeline`]).
//!
//! Everything is deterministic: a seed fixes every random draw, reductions run
//! in a fixed order, and artifacts contain no timestamps, so a pipeline run is
//! byte-identical when repeated with the same configuration.
//!
//! The `parallel` feature (on by default) executes independent jobs on a rayon
//! pool. Results are collected in job-index order, so parallel and sequential
//! execution produce bitwise identical output; see [`exec`].

pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod exec;
pub mod matrix;
pub mod pipeline;
pub mod prefixlm;
pub mod repsim;
pub mod rng;

pub use matrix::Matrix;
