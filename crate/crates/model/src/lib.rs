//! Multi-kernel region encoder, contrastive flow VAE and permutation-aware
//! latent diffusion for origin-destination flow generation.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod multikernel;
pub mod nn;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod vae;

pub use config::{Augment, KernelConfig, LossWeights, PiNetConfig, Stage2Arch, Stage2Config, Stage3Config, VaeConfig};
pub use diffusion::{generate_od, perm_tokens, OdGenerator, PermTable, PiNet, Stage3Model};
pub use error::{Error, Result};
pub use multikernel::{kernel_matrix, mk_tensor, structural_kernel, KernelMaps, MkTensor};
pub use params::{Archive, ParamStore};
pub use schedule::{ddim_loop, forward_diffuse, schedule_linear, NoiseSchedule, SamplerMode};
pub use vae::{loss_contrastive, loss_kl, loss_rec, reparameterize, LatentMap, Prepared, Stage2Model};
pub use checkpoint::{Checkpoint, EpochLog, Stage};
pub use train::{load_stage2, load_stage3, Stage2Trainer, Stage3Record, Stage3Trainer};
