//! Training losses, evaluation metrics and the paired significance test.

pub mod losses;
pub mod quality;
pub mod wilcoxon;

pub use losses::{ms_ssim as ms_ssim_tensor, pixel_loss, structural_loss, total_loss, wgan_losses, LossTerms, LossWeights, WganLosses};
pub use quality::{hf_energy, mean_abs_error, ms_ssim, ms_ssim_masked, psnr, ssim, MetricReport, HF_CUTOFF, PSNR_CAP_DB};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult};
