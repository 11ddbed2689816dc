//! Network components: weight-modulated convolutions, the continual
//! cSPADE generator and the per-pixel discriminator.

pub mod discriminator;
pub mod generator;
pub mod modconv;

pub use discriminator::{DiscriminatorConfig, DiscriminatorModel};
pub use generator::{GeneratorConfig, GeneratorModel};
pub use modconv::{weight_stats, ModulatedConv, Modulation, STD_FLOOR};
