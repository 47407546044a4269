//! Change captioning on procedurally generated two-image scene pairs.
//!
//! The crate is a self-contained pipeline with no runtime dependencies on
//! external ML frameworks or renderers:
//!
//! * a dense-tensor reverse-mode autodiff engine ([`tensor`], [`tape`],
//!   [`kernels`], [`lstm`], [`adam`], [`fdcheck`]),
//! * a procedural generator for before/after scene pairs with templated
//!   change captions and pixel-space bounding boxes ([`scene`], [`raster`],
//!   [`caption`], [`dataset`], [`ppm`]),
//! * a dual-attention captioning network and four ablation baselines
//!   ([`encoder`], [`duda`], [`baselines`], [`model`]),
//! * deterministic training and greedy decoding ([`trainer`], [`vocab`],
//!   [`checkpoint`]),
//! * caption and localization evaluation ([`evalkit`]).
//!
//! Everything is `f64`, single-threaded, and seeded: a fixed seed produces
//! bit-identical datasets, checkpoints, predictions, and reports across runs
//! on the same build.

pub mod adam;
pub mod baselines;
pub mod caption;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod duda;
pub mod encoder;
pub mod evalkit;
pub mod vocab;
pub mod fdcheck;
pub mod kernels;
pub mod lstm;
pub mod model;
pub mod ppm;
pub mod raster;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod trainer;
