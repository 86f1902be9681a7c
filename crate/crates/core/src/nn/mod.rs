//! Layers with explicit forward caches and backward passes.
//!
//! Every layer works on token matrices: one row per token (or grid cell in
//! row-major order), one column per channel.

pub mod activation;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod param;
pub mod resize;
pub mod transformer;

pub use attention::MultiHeadAttention;
pub use conv::{depth_to_space, space_to_depth, ConvTranspose2x2};
pub use linear::Linear;
pub use norm::{BatchNorm, LayerNorm};
pub use param::{join, trunc_normal, HasParams, Param};
pub use resize::BilinearResize;
pub use transformer::{drop_path_scale, Mlp, TransformerLayer};
