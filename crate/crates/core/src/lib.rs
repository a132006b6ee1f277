//! Multi-modal masked autoencoding for H&E tiles.
//!
//! Stain separation produces hematoxylin and eosin images for every RGB
//! tile; a small vision transformer is pretrained to reconstruct masked RGB
//! patches from a mix of visible RGB, H and E patches, then evaluated by
//! fine-tuning and by k-nearest-neighbour matching of its global token.

pub mod checkpoint;
pub mod data;
pub mod exec;
pub mod mask;
pub mod model;
pub mod rng;
pub mod stain;
pub mod tensor;
pub mod train;

pub use exec::Exec;
pub use tensor::{Graph, Tensor, TensorError, Var};
