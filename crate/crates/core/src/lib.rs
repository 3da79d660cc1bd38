//! Model-driven federated MR reconstruction.
//!
//! * [`autodiff`]: tensors, reverse-mode gradients, AdamW.
//! * [`mri`]: Fourier measurement model, masks, noise, CG, phantoms.
//! * [`recon`]: RSLAM denoiser and the unrolled reconstruction network.
//! * [`fed`]: client/server phases, adaptive aggregation, baselines.
//! * [`metrics`]: PSNR, SSIM and the generalization report.

pub mod autodiff;
pub mod mri;
pub mod gradcheck;
pub mod oracles;
pub mod recon;
pub mod metrics;
pub mod fed;
