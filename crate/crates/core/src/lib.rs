//! Brain MRI parcellation toolkit.
//!
//! The crate covers the numerical core of a 2.5D brain parcellation
//! pipeline:
//!
//! - [`nifti`]: NIfTI-1 reading/writing and RAS reorientation
//! - [`standardize`]: resampling to an isotropic cube and intensity
//!   normalization
//! - [`fft`]: centered 3D FFT used by the k-space artifact transforms
//! - [`augment`]: seedable MRI artifact simulation (rotation, noise,
//!   bias field, Gibbs ringing, ghosting, elastic deformation)
//! - [`hierarchy`]: label trees, hierarchical softmax probabilities and
//!   the hierarchical cross-entropy loss with analytic gradients
//! - [`fusion`]: tri-planar score fusion, KLD consistency terms,
//!   distance-based weak supervision and the total training loss
//! - [`inference`]: volume segmentation by score fusion or majority vote
//! - [`metrics`]: DSC/VS, rank tests, Bland-Altman and ICV statistics
//! - [`train`]: a desk-scale convolutional scorer, Adam optimizer,
//!   phantom generator and training loop exercising the loss end to end

// Indexed loops over multiple parallel buffers are the dominant style in
// the numerical kernels here.
#![allow(clippy::needless_range_loop)]

pub mod augment;
pub mod fft;
pub mod fusion;
pub mod hierarchy;
pub mod inference;
pub mod metrics;
pub mod nifti;
pub mod standardize;
pub mod train;
pub mod volume;

pub use volume::{LabelVolume, NiftiHeader, Volume};
