//! A desk-scale, fully transformer-based object detector.
//!
//! The crate builds a hierarchical windowed-attention backbone that carries
//! learnable detection tokens alongside image patches, an encoder-free
//! decoder neck with multi-scale deformable attention, set-matching losses
//! with Hungarian assignment, token-matching distillation, and an analytic
//! plus empirical attention cost meter. Everything runs on a small
//! reverse-mode autodiff tape in `f64`, so every component is checked
//! against finite differences and brute-force oracles.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod losses;
pub mod model;
pub mod neck;
pub mod nn;
pub mod tensor;
