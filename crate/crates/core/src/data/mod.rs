//! Procedural captioned-shapes dataset: scene sampling, rendering, a
//! word-level tokenizer, and persistence.

mod dataset;
mod image_io;
pub mod probe;
mod render;
mod scene;
mod tokenizer;

pub use dataset::{generate_dataset, generate_unique, load_dataset, save_dataset, DatasetRecord};
pub use image_io::{image_to_rgb8, save_grid_png, save_png, save_ppm};
pub use render::{box_downsample, render_hr, render_lr};
pub use scene::{Background, Color, Object, Position, Scene, Shape, Size};
pub use tokenizer::{CaptionTokens, Tokenizer, CONTEXT_LENGTH, END, PAD, START};

/// Side length of base images.
pub const IMAGE_SIZE: usize = 16;
/// Side length of high-resolution images.
pub const HR_SIZE: usize = 32;
