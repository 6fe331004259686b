//! Weakly supervised localisation of fixed-size particles.
//!
//! A presence/absence classifier is turned into a detector by optimising the
//! position of a Gaussian mask so that the masked image maximises the
//! classifier logit, with the mask width annealed from image scale down to
//! particle scale. Detected particles are cut out and the search repeats
//! until the classifier no longer sees anything.

pub mod baselines;
pub mod cam;
pub mod classifier;
pub mod detector;
pub mod diffnet;
pub mod error;
pub mod evalkit;
pub mod gaussmask;
pub mod image;
pub mod io;
pub mod posopt;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
pub use image::{BBox, Image, Point};
