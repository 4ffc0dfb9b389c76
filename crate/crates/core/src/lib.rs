//! Layout-conditioned, multi-path latent generation: scene model, geometry
//! rasterization, camera fitting, latent blending, and the denoiser contract.

pub mod denoise;
pub mod export;
pub mod fit;
pub mod latent;
pub mod layout;
pub mod nelder_mead;
pub mod raster;
pub mod scene;
pub mod toy;
pub mod orchestrator;
pub mod synth;
