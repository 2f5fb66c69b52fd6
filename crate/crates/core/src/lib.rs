//! Outdoor inverse rendering.
//!
//! An image is modelled as `i = α ⊙ s · B(n) l`: per-pixel albedo `α`, a
//! scalar shadow map `s`, unit normals `n` and 27 order-2 spherical-harmonic
//! lighting coefficients `l`, observed through a fixed 2.2 gamma. Albedo,
//! normals, shadow and lighting are recovered from one image, or from
//! overlapping pairs with depth and poses, by minimising an energy made of
//! an appearance term, direct normal supervision, cross-view albedo and
//! cross-rendering consistency, and a PCA prior on natural illumination.
//!
//! ```
//! use invrender::{sh, AlbedoMap, Mask, NormalMap, ShLighting, ShadowMap};
//!
//! let (w, h) = (8, 8);
//! let img = sh::render(
//!     &AlbedoMap::constant(w, h, [0.5; 3])?,
//!     &ShadowMap::ones(w, h),
//!     &NormalMap::frontal(w, h),
//!     &ShLighting::ambient([1.0; 3]),
//!     &Mask::full(w, h),
//! )?;
//! assert_eq!(img.pixels().get(3, 3), &[0.5; 3]);
//! # Ok::<(), invrender::Error>(())
//! ```

pub mod color;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod maps;
pub mod pipeline;
pub mod prior;
pub mod sh;
pub mod solver;

#[cfg(test)]
mod testutil;

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/image-model.md")]
    mod image_model {}
    #[doc = include_str!("../../../book/src/lighting.md")]
    mod lighting {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/energy.md")]
    mod energy {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

pub use error::{Error, Result};
pub use geometry::{GroundPlane, Warp};
pub use maps::{
    AlbedoMap, Camera, DepthMap, Encoding, Grid, ImageRgb, LossWeights, Mask, NormalMap,
    NormalParams, ShLighting, ShadowMap, GAMMA, SHADOW_FLOOR,
};
pub use prior::{EnvMap, PriorCoeffs, PriorModel};
