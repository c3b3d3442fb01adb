//! Multiscale aggregated hierarchical attention, built from scratch.
//!
//! A sequence is decomposed into a pyramid of progressively shorter
//! representations; each scale runs its own scaled dot-product attention with
//! scale-specific Q/K projections and a single shared value pathway; the
//! upsampled per-scale outputs are fused by solving for mixing weights on the
//! probability simplex (convex least squares or best-response dynamics with an
//! equilibrium certificate). A complexity harness counts the operations saved
//! by attending at reduced lengths, and a toy trainer exercises the whole
//! stack end to end.
//!
//! All math runs in `f64`, and every differentiable operation carries an
//! explicit analytic backward rule verified against central differences.

pub mod aggregate;
pub mod attention;
pub mod checks;
pub mod error;
pub mod flops;
pub mod grad;
pub mod heatmap;
pub mod hybrid;
pub mod pyramid;
pub mod tensor;
pub mod toymodel;

pub use error::{MahaError, Result};
pub use tensor::{ConvKernel, SeqMatrix};
