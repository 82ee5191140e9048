//! Visuo-tactile cross-modal perception in simulation: superquadric shape
//! fitting, a shape-to-mass Gaussian process prior, and a dual pose/mass
//! filter driven by simulated planar pushes.

pub mod error;
pub mod geometry;
pub mod pushsim;
pub mod sensing;
pub mod dualfilter;
pub mod cmgp;
pub mod harness;
pub mod superquadric;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/shapes.md")]
    mod shapes {}
    #[doc = include_str!("../../../book/src/pushing.md")]
    mod pushing {}
    #[doc = include_str!("../../../book/src/sensing.md")]
    mod sensing {}
    #[doc = include_str!("../../../book/src/filter.md")]
    mod filter {}
    #[doc = include_str!("../../../book/src/prior.md")]
    mod prior {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
