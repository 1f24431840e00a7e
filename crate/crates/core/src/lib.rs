//! Stereo matching with normal-guided gated fusion, sparse deformable
//! attention, a combined cost volume and iterative ConvGRU refinement,
//! together with a synthetic stereo corpus generator and
//! specular/transparent augmentation.
//!
//! Module map:
//! - [`synthdata`]: procedural scenes, analytic ground truth, sample I/O
//! - [`augment`]: specular highlights and view-consistent imaginary texture
//! - [`encoders`]: image and normal feature pyramids (strides 4..32)
//! - [`gcgf`]: gated masks and image/normal fusion
//! - [`sparse_attn`]: key-point sampling, spatial and epipolar attention
//! - [`volume`]: combined cost volume, volume filtering, initial disparity
//! - [`refine`]: cost lookup, ConvGRU, convex upsampling, scale/shift prior
//! - [`loss`]: training loss and evaluation metrics
//! - [`model`]: variant wiring, training step, checkpoints

pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod colormap;
pub mod config;
pub mod encoders;
pub mod error;
pub mod gcgf;
pub mod gradcheck;
pub mod loss;
pub mod maps;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod refine;
pub mod sparse_attn;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use maps::{BoolMap, FloatMap};
pub use params::ParamStore;
pub use tensor::Tensor;
