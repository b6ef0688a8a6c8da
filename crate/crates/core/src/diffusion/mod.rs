//! Toy latent diffusion with the identity-conditioning wiring: cross
//! attention over updated text embeddings, low-rank attention residuals,
//! DDIM sampling with classifier-free guidance and delayed subject
//! conditioning, the masked denoising loss, and checkpoint serialization.

pub mod attention;
pub mod checkpoint;
pub mod codec;
pub mod denoiser;
pub mod generate;
pub mod loss;
pub mod sampler;
pub mod schedule;

pub use attention::{cross_attention, lora_effective_weight, AttentionWeights, LoraResidual, LoraSet};
pub use checkpoint::Checkpoint;
pub use codec::{decode_latent, encode_image, Latent};
pub use denoiser::{predict_noise, DenoiserGraph};
pub use generate::{generate, GenerateOptions, Provenance};
pub use loss::masked_diffusion_loss;
pub use sampler::{cfg_combine, ddim_sample, delayed_condition_select, SamplerConfig};
pub use schedule::{NoiseSchedule, ScheduleConfig};
