//! Two-image photometric stereo.
//!
//! Given two images of an object under unknown directional lights, the
//! networks in [`neural`] estimate surface normals, albedo and the light
//! bins, trained without ground truth by reconstructing and cross-relighting
//! the inputs. A classical least-squares solver in [`photometry`] provides
//! weak labels for an early warm-up stage.

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod lightspace;
pub mod losses;
pub mod model;
pub mod neural;
pub mod photometry;
pub mod trainer;

pub use error::{Error, Result};
