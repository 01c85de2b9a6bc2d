//! Geometry-conditioned image synthesis.
//!
//! This crate learns a mapping from per-pixel scene geometry (G-buffers:
//! surface normals, depth, material labels, an object mask, and a background
//! plate) to realistic composited RGB images. It contains:
//!
//! - [`gbuffer`] — the G-buffer data model, validation, and the
//!   multi-resolution input pyramid.
//! - [`scene`] — a procedural scene oracle: hidden scene sampling, analytic
//!   rasterization, and reference shading, so training data and ground truth
//!   are generated in-repo and every pixel is checkable.
//! - [`generator`] — the coarse-to-fine cascade producing K candidate images.
//! - [`discriminator`] — a fully-convolutional patch critic plus its gradient
//!   regularizer.
//! - [`perception`] — pluggable frozen feature extractors and the masked
//!   perceptual loss.
//! - [`objective`] — background / adversarial losses and the min-over-K
//!   diversity combination.
//! - [`trainer`] — alternating optimization with deterministic seeding,
//!   checkpoints, and resume.
//! - [`eval`] — masked image metrics, ablation and gallery harnesses.
//! - [`tensor`] — the reverse-mode autodiff engine the above are built on.
//!
//! The `gis-forge` binary exposes the whole pipeline as CLI subcommands; see
//! the book under `book/` for a guided tour.

pub mod error;
pub mod eval;
pub mod dataset;
pub mod discriminator;
pub mod gbuffer;
pub mod generator;
pub mod checkpoint;
pub mod objective;
pub mod params;
pub mod perception;
pub mod scene;
pub mod trainer;
pub mod tensor;

pub use error::GisError;
