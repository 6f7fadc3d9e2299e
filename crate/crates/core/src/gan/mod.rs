//! Adversarial training objectives and the metric discriminator.

mod disc;
mod losses;

pub use disc::{Discriminator, DISC_CHANNELS};
pub use losses::{discriminator_loss, generator_losses, quality_proxy, GeneratorLoss, LossReport, LossWeights};
