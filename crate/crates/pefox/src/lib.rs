//! Desk-scale workbench for structural PE perturbation experiments.
//!
//! The pipeline: parse PE binaries into import-name feature vectors, drive a
//! small Conv-GAN that emits three-bit perturbation paths, rewrite the
//! binaries at file level (code-section encryption, host embedding, benign
//! hollowing), and score the results against a pluggable black-box detector.
//! A seeded simulated ensemble ships in-tree so no real scanner is ever
//! contacted; none of the produced files is ever executed.

pub mod cli;
pub mod demo;
pub mod detector;
pub mod nn_core;
pub mod pe_editor;
pub mod pe_model;
pub mod pe_parser;
pub mod trainer;
