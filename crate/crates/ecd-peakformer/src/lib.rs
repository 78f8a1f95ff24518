//! Prediction of electronic circular dichroism (ECD) spectra for chiral
//! molecules from molecular structure.
//!
//! Rather than regressing the full intensity curve, the model predicts the
//! properties of the spectrum's peaks — how many there are, where they sit
//! and their Cotton-effect sign — with a geometry-aware graph encoder feeding
//! a transformer over learnable peak-query tokens. Dense spectra are then
//! rendered from the predicted peaks. The crate also ships the surrounding
//! tooling: structure-file parsers, a harmonic coordinate embedder, dataset
//! synthesis, peak extraction, peak-level evaluation metrics, and a training
//! harness with deterministic checkpoints.

pub mod autodiff;

pub use autodiff::Mat;
