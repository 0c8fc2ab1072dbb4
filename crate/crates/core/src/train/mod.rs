//! Adversarial training of a generator/discriminator pair, and the Adam
//! optimizer it shares with inversion.

mod adam;
mod gan;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gan::{discriminator_accuracy, train_gan, TrainConfig, TrainRecord};
pub use loss::{discriminator_loss, generator_loss, LOG_CLAMP};
