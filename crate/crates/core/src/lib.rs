//! Continual semantic image synthesis with zero forgetting.
//!
//! A conditional GAN generator whose label space and visual style are
//! extended across a stream of domains. Each new domain learns only a small
//! delta (extended-label convolutions, weight-modulation triples and
//! instance-norm affines) while the base parameters stay frozen, so earlier
//! domains are reproduced bit for bit.

pub mod autodiff;
pub mod error;
pub mod labelspace;
pub mod losses;
pub mod metrics;
pub mod netblocks;
pub mod params;
pub mod pnm;
pub mod tensor;
pub mod toyscenes;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use labelspace::{LabelRegistry, OneHotSplit, SemanticMap};
pub use netblocks::{DiscriminatorConfig, DiscriminatorModel, GeneratorConfig, GeneratorModel};
pub use params::{DomainTag, ParamSet, Parameter};
pub use tensor::Tensor;
pub use toyscenes::{DomainSpec, Scene};
pub use trainer::{Checkpoint, TaskConfig};
