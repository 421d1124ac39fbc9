//! Voting-based 3D object detection in point clouds with generatively
//! back-traced representative points, seed revisiting and proposal refinement.
//!
//! The crate is self-contained: a small reverse-mode differentiation engine
//! ([`autodiff`]), point-set neighborhood operators ([`pointops`]), oriented-box
//! geometry ([`boxgeom`]), the detector itself ([`model`]), synthetic scene
//! generation and file formats ([`data`]), and AP/mAP evaluation ([`evalkit`]).
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise.

pub mod autodiff;
pub mod boxgeom;
pub mod data;
mod error;
pub mod evalkit;
pub mod model;
pub mod par;
pub mod pointops;

pub use error::{Error, Result};

/// Positions in meters.
pub type Point3 = [f64; 3];
