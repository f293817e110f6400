//! Few-step flow-matching distillation where the distillation discriminator
//! doubles as a per-timestep GRPO reward model.
//!
//! Module map:
//! - [`netcore`]: MLP forward/backward, parameter sets, Adam.
//! - [`flowmatch`]: rectified-flow conventions, teacher training, ODE sampling.
//! - [`sdesim`]: marginal-preserving SDE rollouts with Gaussian transition log-densities.
//! - [`dmdcore`]: distribution-matching generator gradient and fake-model loss.
//! - [`advreward`]: feature-tap discriminator, adversarial losses, per-step rewards.
//! - [`grpocore`]: group advantages and the clipped, KL-regularized surrogate.
//! - [`trainer`]: update scheduling, composite generator objective, checkpoints.
//! - [`evalbench`]: MMD, Wasserstein, mode coverage, proxy rewards, ablations.

pub mod error;
pub mod advreward;
pub mod dmdcore;
pub mod evalbench;
pub mod flowmatch;
pub mod grpocore;
pub mod netcore;
pub mod rngs;
pub mod sdesim;
pub mod trainer;

pub use error::{Error, Result};
