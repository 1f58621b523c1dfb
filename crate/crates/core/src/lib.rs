//! Inversion of contrastive dual encoders: optimize pixels until an image
//! encoder agrees with a text prompt, then audit what comes out.

pub mod analysis;
pub mod augmentations;
pub mod canvas;
pub mod encoders;
pub mod error;
pub mod imageio;
pub mod inversion;
pub mod objective;
pub mod runs;

pub use canvas::PixelCanvas;
pub use encoders::DualEncoder;
pub use error::{Error, Result};
pub use objective::EmbeddingVector;
