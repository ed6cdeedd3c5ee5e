//! Grayscale-image malware datasets from application archives, GAN-based
//! augmentation with FID∞ quality gating, and a 2-D CNN detector.
//!
//! Modules follow the pipeline order:
//!
//! - [`corpus`]: archive → byte stream → W×W grayscale image, manifests, splits
//! - [`tensor`]: reverse-mode autodiff (with double backprop) and Adam
//! - [`gan`]: WGAN-GP and DCGAN training, generation, FID-gated generation
//! - [`fid`]: embeddings, Gaussian fits, Fréchet distance, FID∞
//! - [`classifier`]: CNN training regimes and confusion-matrix metrics
//! - [`harness`]: the experiment matrix and result tables

pub mod classifier;
pub mod corpus;
pub mod fid;
pub mod gan;
pub mod harness;
pub mod rng;
pub mod tensor;
