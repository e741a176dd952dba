//! Encoder, decoder and discriminators, the four-child training diagram and
//! its losses, the stacked double-swap variant, and object-vector arithmetic.

mod diagram;
mod networks;
mod object;
mod params;

pub use diagram::{
    crossbreed_forward, discriminator_loss, four_child_forward, generator_loss, stacked_forward,
    stacked_generator_loss, Codec, CodeVars, Critic, Crossbreeds, DiscriminatorLoss, Domain,
    FourChildren, GeneratorLoss, GeneratorTerms, StackedChildren,
};
pub use networks::{Inference, Session, StatUpdate};
pub use object::{LatentCode, ObjectVector};
pub use params::{Net, NetParams, ParamStore};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input shape {got:?} does not fit the model: {expected}")]
    InputShape { expected: String, got: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("object vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Channels of the first hidden layer; deeper layers use 2x and 4x.
    pub base_width: usize,
    /// Background code channels (the A/B part).
    pub code_background: usize,
    /// Object code channels (the u/epsilon part).
    pub code_object: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_width: 32,
            code_background: 24,
            code_object: 8,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn code_channels(&self) -> usize {
        self.code_background + self.code_object
    }

    /// Spatial size of the codes: three stride-2 layers.
    pub fn code_size(&self) -> usize {
        self.image_size / 8
    }

    pub fn object_len(&self) -> usize {
        self.code_object * self.code_size() * self.code_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(ModelError::Config(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.base_width == 0 || self.code_background == 0 || self.code_object == 0 {
            return Err(ModelError::Config("widths and code channels must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ModelError::Config(format!(
                "leaky slope {} must lie in (0,1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Weights of the generator loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub gan: f64,
    pub null: f64,
    pub par: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 10.0,
            gan: 1.0,
            null: 1.0,
            par: 1.0,
        }
    }
}
