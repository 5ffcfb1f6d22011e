//! Point-distribution set abstraction for point clouds.
//!
//! The crate provides sampling and grouping ([`geom`]), a small reverse-mode
//! tensor kernel ([`tensor`], [`nn`]), the cross-stage octant descriptor
//! ([`lcsd`]), descriptor-driven neighbor denoising ([`cdip`]), key-point
//! global attention ([`cics`]), the assembled encoder ([`network`]), and
//! synthetic data, metrics and PLY IO ([`data`]).

pub mod cdip;
pub mod cics;
pub mod data;
pub mod error;
pub mod geom;
pub mod lcsd;
pub mod network;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
